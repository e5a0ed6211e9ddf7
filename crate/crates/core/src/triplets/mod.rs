//! Triplet view of the graph: export, reciprocal augmentation, 8:1:1
//! splitting, 1-to-N query grouping and filtered ranking.

mod filter;
pub mod toy;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use filter::{
    evaluate_ranking, filtered_rank, query_groups, ranking_queries, FilterIndex, LinkMetrics, LinkReport, QueryGroup,
    QueryKey, RankingQuery,
};

use crate::kg::PropertyGraph;

#[derive(Debug, Error)]
pub enum TripletError {
    #[error("reciprocal relations were already added")]
    AlreadyReciprocal,
    #[error("reciprocal relations are missing")]
    MissingReciprocals,
    #[error("index out of range: {0}")]
    Index(String),
    #[error("split manifest does not match dataset: {0}")]
    Manifest(String),
}

pub type Result<T, E = TripletError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TripletRecord {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
    /// (qualifier key index, qualifier value index), sorted.
    pub qualifiers: Vec<(usize, usize)>,
    pub reciprocal: bool,
}

/// Triplets plus the vocabularies their indices point into.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TripletDataset {
    pub nodes: Vec<String>,
    /// Base relation names; reciprocal of relation `r` has index `r + relations.len()`.
    pub relations: Vec<String>,
    pub qual_keys: Vec<String>,
    pub qual_values: Vec<String>,
    pub triplets: Vec<TripletRecord>,
}

fn index_of(v: &[String]) -> BTreeMap<&str, usize> {
    v.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
}

/// One record per edge in graph order. Nodes keep graph order; relation and
/// qualifier vocabularies are sorted.
pub fn export_triplets(g: &PropertyGraph) -> TripletDataset {
    let nodes: Vec<String> = g.nodes().map(|n| n.id.clone()).collect();
    let mut rels = BTreeSet::new();
    let mut keys = BTreeSet::new();
    let mut vals = BTreeSet::new();
    for e in g.edges() {
        rels.insert(e.relation.clone());
        for (k, v) in &e.qualifiers {
            keys.insert(k.clone());
            vals.insert(v.clone());
        }
    }
    let mut d = TripletDataset {
        nodes,
        relations: rels.into_iter().collect(),
        qual_keys: keys.into_iter().collect(),
        qual_values: vals.into_iter().collect(),
        triplets: Vec::with_capacity(g.edge_count()),
    };
    let (ni, ri, ki, vi) = (
        index_of(&d.nodes),
        index_of(&d.relations),
        index_of(&d.qual_keys),
        index_of(&d.qual_values),
    );
    for e in g.edges() {
        // dangling edges cannot be indexed; a validated graph has none
        let (Some(&head), Some(&tail)) = (ni.get(e.head.as_str()), ni.get(e.tail.as_str())) else {
            continue;
        };
        let mut qualifiers: Vec<(usize, usize)> = e
            .qualifiers
            .iter()
            .map(|(k, v)| (ki[k.as_str()], vi[v.as_str()]))
            .collect();
        qualifiers.sort_unstable();
        d.triplets.push(TripletRecord {
            head,
            relation: ri[e.relation.as_str()],
            tail,
            qualifiers,
            reciprocal: false,
        });
    }
    d
}

impl TripletDataset {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_base_relations(&self) -> usize {
        self.relations.len()
    }

    /// Relation vocabulary size including reciprocals.
    pub fn num_relations(&self) -> usize {
        2 * self.relations.len()
    }

    pub fn num_base(&self) -> usize {
        self.triplets.iter().filter(|t| !t.reciprocal).count()
    }

    pub fn has_reciprocals(&self) -> bool {
        self.triplets.iter().any(|t| t.reciprocal)
    }

    pub fn relation_name(&self, r: usize) -> String {
        let n = self.relations.len();
        if r < n {
            self.relations[r].clone()
        } else {
            format!("{}_inv", self.relations[r - n])
        }
    }

    pub fn reciprocal_relation(&self, r: usize) -> usize {
        let n = self.relations.len();
        if r < n {
            r + n
        } else {
            r - n
        }
    }

    /// The mirrored record `(t, r⁻¹, h)`; applying it twice is the identity.
    pub fn mirror(&self, t: &TripletRecord) -> TripletRecord {
        TripletRecord {
            head: t.tail,
            relation: self.reciprocal_relation(t.relation),
            tail: t.head,
            qualifiers: t.qualifiers.clone(),
            reciprocal: !t.reciprocal,
        }
    }

    /// Appends the mirror of every base record, so record `i + n` is the
    /// reciprocal of record `i`.
    pub fn add_reciprocals(&mut self) -> Result<()> {
        if self.has_reciprocals() {
            return Err(TripletError::AlreadyReciprocal);
        }
        let mirrored: Vec<TripletRecord> = self.triplets.iter().map(|t| self.mirror(t)).collect();
        self.triplets.extend(mirrored);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.triplets.iter().enumerate() {
            let rel_ok = if t.reciprocal {
                (self.relations.len()..self.num_relations()).contains(&t.relation)
            } else {
                t.relation < self.relations.len()
            };
            if t.head >= self.nodes.len() || t.tail >= self.nodes.len() || !rel_ok {
                return Err(TripletError::Index(format!("record {i}")));
            }
            if t.qualifiers
                .iter()
                .any(|&(k, v)| k >= self.qual_keys.len() || v >= self.qual_values.len())
            {
                return Err(TripletError::Index(format!("qualifier of record {i}")));
            }
        }
        Ok(())
    }

    /// Tab-separated `head relation tail qualifiers`, qualifiers as
    /// `key=value` joined by `;`. Only base records are written.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("head\trelation\ttail\tqualifiers\n");
        for t in self.triplets.iter().filter(|t| !t.reciprocal) {
            let q: Vec<String> = t
                .qualifiers
                .iter()
                .map(|&(k, v)| format!("{}={}", self.qual_keys[k], self.qual_values[v]))
                .collect();
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}",
                self.nodes[t.head],
                self.relations[t.relation],
                self.nodes[t.tail],
                q.join(";")
            );
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Split assignment of every base record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub seed: u64,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Sizes `⌊0.8n⌋ / ⌊0.1n⌋ / rest`.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 8 / 10;
    let valid = n / 10;
    (train, valid, n - train - valid)
}

/// Seeded 8:1:1 split of the base records. Every relation with at least
/// three base records keeps one of them in train.
pub fn split_811(d: &TripletDataset, seed: u64) -> Splits {
    let base: Vec<usize> = (0..d.triplets.len()).filter(|&i| !d.triplets[i].reciprocal).collect();
    let mut order = base.clone();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut per_rel: BTreeMap<usize, usize> = BTreeMap::new();
    for &i in &base {
        *per_rel.entry(d.triplets[i].relation).or_insert(0) += 1;
    }
    let mut reserved = BTreeSet::new();
    let mut seen = BTreeSet::new();
    for &i in &order {
        let r = d.triplets[i].relation;
        if per_rel[&r] >= 3 && seen.insert(r) {
            reserved.insert(i);
        }
    }
    let ranked: Vec<usize> = order
        .iter()
        .copied()
        .filter(|i| reserved.contains(i))
        .chain(order.iter().copied().filter(|i| !reserved.contains(i)))
        .collect();
    let (nt, nv, _) = split_sizes(base.len());
    let mut s = Splits {
        seed,
        train: ranked[..nt].to_vec(),
        valid: ranked[nt..nt + nv].to_vec(),
        test: ranked[nt + nv..].to_vec(),
    };
    s.train.sort_unstable();
    s.valid.sort_unstable();
    s.test.sort_unstable();
    s
}

impl Splits {
    pub fn base(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Base records of `split` plus their reciprocals when present.
    pub fn records(&self, d: &TripletDataset, split: Split) -> Vec<usize> {
        let base = self.base(split);
        let n = d.num_base();
        let mut out = base.to_vec();
        if d.triplets.len() == 2 * n && d.has_reciprocals() {
            out.extend(base.iter().map(|i| i + n));
        }
        out
    }

    pub fn check(&self, d: &TripletDataset) -> Result<()> {
        let n = d.num_base();
        let mut all: Vec<usize> = self
            .train
            .iter()
            .chain(&self.valid)
            .chain(&self.test)
            .copied()
            .collect();
        all.sort_unstable();
        if all != (0..n).collect::<Vec<_>>() {
            return Err(TripletError::Manifest(format!(
                "splits cover {} records, dataset has {n} base records",
                all.len()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("splits serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| TripletError::Manifest(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, rels: usize) -> TripletDataset {
        TripletDataset {
            nodes: (0..n).map(|i| format!("n{i}")).collect(),
            relations: (0..rels).map(|i| format!("r{i}")).collect(),
            qual_keys: vec!["k".into()],
            qual_values: vec!["a".into(), "b".into()],
            triplets: (0..n)
                .map(|i| TripletRecord {
                    head: i,
                    relation: i % rels,
                    tail: (i * 7 + 3) % n,
                    qualifiers: if i % 2 == 0 { vec![(0, i % 4 / 2)] } else { vec![] },
                    reciprocal: false,
                })
                .collect(),
        }
    }

    #[test]
    fn reciprocals_double_and_invert() {
        let mut d = toy(10, 3);
        let before = d.clone();
        d.add_reciprocals().unwrap();
        assert_eq!(d.triplets.len(), 20);
        for i in 0..10 {
            let r = &d.triplets[i + 10];
            assert!(r.reciprocal);
            assert_eq!(r.relation, before.triplets[i].relation + 3);
            assert_eq!(r.qualifiers, before.triplets[i].qualifiers);
            assert_eq!(d.mirror(r), before.triplets[i]);
        }
        assert!(matches!(d.add_reciprocals(), Err(TripletError::AlreadyReciprocal)));
        d.validate().unwrap();
    }

    #[test]
    fn split_sizes_follow_floor_arithmetic() {
        assert_eq!(split_sizes(10), (8, 1, 1));
        assert_eq!(split_sizes(153_488), (122_790, 15_348, 15_350));
        assert_eq!(split_sizes(0), (0, 0, 0));
    }

    #[test]
    fn splits_partition_and_depend_on_seed() {
        let d = toy(97, 5);
        let a = split_811(&d, 1);
        let b = split_811(&d, 2);
        a.check(&d).unwrap();
        b.check(&d).unwrap();
        assert_eq!((a.train.len(), a.valid.len(), a.test.len()), split_sizes(97));
        assert_eq!((b.train.len(), b.valid.len(), b.test.len()), split_sizes(97));
        assert_ne!(a, b);
        assert_eq!(a, split_811(&d, 1));
        for r in 0..5 {
            assert!(a.train.iter().any(|&i| d.triplets[i].relation == r));
        }
    }

    #[test]
    fn reciprocals_inherit_split() {
        let mut d = toy(30, 2);
        let s = split_811(&d, 9);
        d.add_reciprocals().unwrap();
        let recs = s.records(&d, Split::Test);
        assert_eq!(recs.len(), 2 * s.test.len());
        for &i in &s.test {
            assert_eq!(d.mirror(&d.triplets[i]), d.triplets[i + 30]);
            assert!(recs.contains(&(i + 30)));
        }
    }

    #[test]
    fn manifest_round_trip() {
        let d = toy(20, 2);
        let s = split_811(&d, 4);
        assert_eq!(Splits::from_json(&s.to_json()).unwrap(), s);
        let mut bad = s.clone();
        bad.test.pop();
        assert!(bad.check(&d).is_err());
    }

    #[test]
    fn empty_graph_exports_nothing() {
        let d = export_triplets(&PropertyGraph::new());
        assert!(d.triplets.is_empty() && d.nodes.is_empty());
        assert_eq!(d.to_tsv(), "head\trelation\ttail\tqualifiers\n");
    }
}
