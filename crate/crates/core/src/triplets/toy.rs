//! Seeded community-structured knowledge graph for convergence checks.
//!
//! Nodes fall into equal-size communities and carry one of a few node
//! types. Every relation links a fixed source type to a fixed target type,
//! and a triplet's tail is drawn from the head's own community, much as the
//! vehicles and occupants of a crash only link to that crash.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{TripletDataset, TripletRecord};
use crate::kg::{NodeRecord, Tier};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub nodes: usize,
    pub relations: usize,
    pub triplets: usize,
    pub cluster_size: usize,
    pub types: usize,
    /// Expose the community as a categorical literal.
    pub cluster_literal: bool,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            nodes: 500,
            relations: 6,
            triplets: 3000,
            cluster_size: 20,
            types: 4,
            cluster_literal: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClusterKg {
    pub nodes: Vec<NodeRecord>,
    pub data: TripletDataset,
    pub cluster: Vec<usize>,
    pub node_type: Vec<usize>,
    /// `(source type, target type)` per relation.
    pub signature: Vec<(usize, usize)>,
}

pub fn cluster_kg(seed: u64, spec: ClusterSpec) -> ClusterKg {
    assert!(spec.cluster_size >= 1 && spec.nodes >= spec.cluster_size && spec.relations >= 1);
    assert!(spec.types >= 1 && spec.relations <= spec.types * spec.types);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_clusters = spec.nodes.div_ceil(spec.cluster_size);
    let mut cluster: Vec<usize> = (0..spec.nodes).map(|i| i % n_clusters).collect();
    cluster.shuffle(&mut rng);
    let mut members = vec![Vec::new(); n_clusters];
    for (i, &c) in cluster.iter().enumerate() {
        members[c].push(i);
    }
    // types rotate inside each community so every community holds every type
    let mut node_type = vec![0; spec.nodes];
    for m in &members {
        for (k, &i) in m.iter().enumerate() {
            node_type[i] = k % spec.types;
        }
    }
    let mut pairs: Vec<(usize, usize)> = (0..spec.types)
        .flat_map(|s| (0..spec.types).map(move |t| (s, t)))
        .collect();
    pairs.shuffle(&mut rng);
    let signature: Vec<(usize, usize)> = pairs[..spec.relations].to_vec();

    // pools[c][t]: members of community c with type t
    let mut pools = vec![vec![Vec::new(); spec.types]; n_clusters];
    for i in 0..spec.nodes {
        pools[cluster[i]][node_type[i]].push(i);
    }
    let candidates: Vec<(usize, usize)> = (0..spec.nodes)
        .flat_map(|h| {
            let ty = node_type[h];
            signature
                .iter()
                .enumerate()
                .filter(move |(_, s)| s.0 == ty)
                .map(move |(r, _)| (h, r))
        })
        .collect();
    let capacity: usize = candidates
        .iter()
        .map(|&(h, r)| pools[cluster[h]][signature[r].1].iter().filter(|&&t| t != h).count())
        .sum();
    let target = spec.triplets.min(capacity);
    let mut seen = BTreeSet::new();
    let mut triplets = Vec::with_capacity(target);
    while triplets.len() < target {
        let (h, r) = candidates[rng.random_range(0..candidates.len())];
        let pool = &pools[cluster[h]][signature[r].1];
        let t = pool[rng.random_range(0..pool.len())];
        if t != h && seen.insert((h, r, t)) {
            triplets.push(TripletRecord {
                head: h,
                relation: r,
                tail: t,
                qualifiers: vec![],
                reciprocal: false,
            });
        }
    }

    let nodes = (0..spec.nodes)
        .map(|i| {
            let mut n = NodeRecord::new(format!("N:{i}"), "NODE", Tier::Entity, "node", "toy");
            n.categorical.insert("type".into(), format!("t{}", node_type[i]));
            if spec.cluster_literal {
                n.categorical.insert("cluster".into(), format!("c{}", cluster[i]));
            }
            n
        })
        .collect::<Vec<_>>();
    let data = TripletDataset {
        nodes: nodes.iter().map(|n| n.id.clone()).collect(),
        relations: (0..spec.relations).map(|r| format!("R{r}")).collect(),
        qual_keys: vec![],
        qual_values: vec![],
        triplets,
    };
    ClusterKg {
        nodes,
        data,
        cluster,
        node_type,
        signature,
    }
}
