//! Parameters and forward pass: literal node init, qualifier vectors,
//! FiLM-modulated relational message passing and the transformer scorer.

use serde::{Deserialize, Serialize};

use super::literals::LiteralTable;
use super::{KgeConfig, KgeError, Result};
use crate::kg::NodeRecord;
use crate::tensor::init::{self, InitRng};
use crate::tensor::nn::{Activation, LayerNorm, Linear, Mlp, TransformerEncoder};
use crate::tensor::{Bound, ParamGroup, Tape, Tensor, Var};
use crate::triplets::{QueryKey, TripletDataset, TripletError};

/// Edges messages travel along: train records plus their reciprocals.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MessageGraph {
    pub nodes: usize,
    pub heads: Vec<usize>,
    pub tails: Vec<usize>,
    pub rels: Vec<usize>,
    pub quals: Vec<Vec<(usize, usize)>>,
    /// `1 / max(indegree, 1)` per node.
    pub inv_deg: Vec<f64>,
}

impl MessageGraph {
    pub fn from_records(d: &TripletDataset, records: &[usize]) -> Result<Self> {
        if !records.is_empty() && !records.iter().any(|&i| d.triplets[i].reciprocal) {
            return Err(KgeError::Triplets(TripletError::MissingReciprocals));
        }
        let mut g = Self {
            nodes: d.num_nodes(),
            ..Self::default()
        };
        let mut deg = vec![0usize; g.nodes];
        for &i in records {
            let t = &d.triplets[i];
            g.heads.push(t.head);
            g.tails.push(t.tail);
            g.rels.push(t.relation);
            g.quals.push(t.qualifiers.clone());
            deg[t.tail] += 1;
        }
        g.inv_deg = deg.iter().map(|&k| 1.0 / k.max(1) as f64).collect();
        Ok(g)
    }

    pub fn edge_count(&self) -> usize {
        self.heads.len()
    }
}

#[derive(Clone, Debug)]
pub struct MpLayer {
    pub w_rel: String,
    pub b_rel: String,
    pub gamma: Linear,
    pub beta: Linear,
    pub ln: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct KgeModel {
    pub config: KgeConfig,
    pub params: ParamGroup,
    pub literals: LiteralTable,
    pub n_nodes: usize,
    /// Including reciprocals.
    pub n_relations: usize,
    pub n_qual_keys: usize,
    pub n_qual_values: usize,
    pub num_mlp: Option<Mlp>,
    pub lit: Linear,
    pub layers: Vec<MpLayer>,
    pub seq: Linear,
    pub encoder: TransformerEncoder,
}

fn zero_linear(group: &mut ParamGroup, rng: &mut InitRng, name: &str, d: usize) -> Result<Linear> {
    let l = Linear::new(group, rng, name, d, d)?;
    group.set_value(&l.w, Tensor::zeros(&[d, d]))?;
    Ok(l)
}

impl KgeModel {
    /// Fresh parameters for `data`, whose node order must match `nodes`.
    pub fn new(config: KgeConfig, data: &TripletDataset, nodes: &[NodeRecord]) -> Result<Self> {
        config.validate()?;
        if nodes.len() != data.num_nodes() || nodes.iter().zip(&data.nodes).any(|(n, id)| &n.id != id) {
            return Err(KgeError::Config(
                "node records do not match the triplet node vocabulary".into(),
            ));
        }
        let literals = LiteralTable::from_nodes(nodes)?;
        let d = config.dim;
        let mut rng = init::rng(config.seed);
        let mut g = ParamGroup::new();
        let n_nodes = data.num_nodes();
        g.insert("node.emb", init::embedding(&mut rng, n_nodes, d))?;
        for (p, vocab) in literals.cat_props.iter().zip(&literals.cat_vocab) {
            g.insert(format!("cat.{p}"), init::embedding(&mut rng, vocab.len(), d))?;
        }
        let num_mlp = if literals.num_features() > 0 {
            Some(Mlp::new(
                &mut g,
                &mut rng,
                "num",
                (literals.num_features(), d, d),
                Activation::Relu,
            )?)
        } else {
            None
        };
        let lit = Linear::new(&mut g, &mut rng, "lit", d, d)?;
        let (n_qk, n_qv) = (data.qual_keys.len(), data.qual_values.len());
        g.insert("qual.key", init::embedding(&mut rng, n_qk.max(1), d))?;
        g.insert("qual.value", init::embedding(&mut rng, n_qv.max(1), d))?;
        let n_relations = data.num_relations();
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let w_rel = format!("mp.{l}.rel.w");
            let b_rel = format!("mp.{l}.rel.b");
            let mut w = Vec::with_capacity(n_relations * d * d);
            for _ in 0..n_relations {
                w.extend(init::weight(&mut rng, d, d).into_data());
            }
            g.insert(&w_rel, Tensor::new(vec![n_relations * d, d], w)?)?;
            g.insert(&b_rel, Tensor::zeros(&[n_relations, d]))?;
            layers.push(MpLayer {
                w_rel,
                b_rel,
                gamma: zero_linear(&mut g, &mut rng, &format!("mp.{l}.gamma"), d)?,
                beta: zero_linear(&mut g, &mut rng, &format!("mp.{l}.beta"), d)?,
                ln: LayerNorm::new(&mut g, &format!("mp.{l}.ln"), d)?,
            });
        }
        g.insert("rel.emb", init::embedding(&mut rng, n_relations, d))?;
        let seq = Linear::new(&mut g, &mut rng, "seq", d, d)?;
        let encoder = TransformerEncoder::new(&mut g, &mut rng, "enc", d, config.heads, config.encoder_layers)?;
        Ok(Self {
            config,
            params: g,
            literals,
            n_nodes,
            n_relations,
            n_qual_keys: n_qk,
            n_qual_values: n_qv,
            num_mlp,
            lit,
            layers,
            seq,
            encoder,
        })
    }

    /// `h⁽⁰⁾ + W_lit·h_lit + b_lit` for every node, where `h_lit` sums the
    /// categorical rows and, for nodes with numerics, the numeric encoding.
    pub fn literal_states(&self, tape: &Tape, p: &Bound) -> Result<Var> {
        let (n, d) = (self.n_nodes, self.config.dim);
        let mut lit: Option<Var> = None;
        let mut add = |v: Var| -> Result<()> {
            lit = Some(match lit {
                Some(acc) => tape.add(acc, v)?,
                None => v,
            });
            Ok(())
        };
        for (k, entries) in self.literals.cat_entries.iter().enumerate() {
            if entries.is_empty() {
                continue;
            }
            let (owners, vals): (Vec<usize>, Vec<usize>) = entries.iter().copied().unzip();
            let table = p.get(&format!("cat.{}", self.literals.cat_props[k]))?;
            let rows = tape.gather_rows(table, &vals)?;
            add(tape.index_add_rows(rows, &owners, n)?)?;
        }
        if let Some(mlp) = &self.num_mlp {
            if !self.literals.num_nodes.is_empty() {
                let x = tape.constant(Tensor::from_rows(&self.literals.num_rows)?);
                let h = mlp.forward(tape, p, x)?;
                add(tape.index_add_rows(h, &self.literals.num_nodes, n)?)?;
            }
        }
        let lit = match lit {
            Some(v) => v,
            None => tape.constant(Tensor::zeros(&[n, d])),
        };
        let mixed = self.lit.forward(tape, p, lit)?;
        Ok(tape.add(p.get("node.emb")?, mixed)?)
    }

    /// `Σ_j E_qr[k_j] + E_qv[v_j]` per qualifier list; zero rows for empty lists.
    pub fn qualifier_vectors(&self, tape: &Tape, p: &Bound, quals: &[Vec<(usize, usize)>]) -> Result<Var> {
        let d = self.config.dim;
        let (mut owners, mut keys, mut vals) = (Vec::new(), Vec::new(), Vec::new());
        for (i, q) in quals.iter().enumerate() {
            for &(k, v) in q {
                if k >= self.n_qual_keys || v >= self.n_qual_values {
                    return Err(KgeError::Index(format!("qualifier ({k}, {v})")));
                }
                owners.push(i);
                keys.push(k);
                vals.push(v);
            }
        }
        if owners.is_empty() {
            return Ok(tape.constant(Tensor::zeros(&[quals.len(), d])));
        }
        let kr = tape.gather_rows(p.get("qual.key")?, &keys)?;
        let vr = tape.gather_rows(p.get("qual.value")?, &vals)?;
        let pairs = tape.add(kr, vr)?;
        Ok(tape.index_add_rows(pairs, &owners, quals.len())?)
    }

    /// One round per layer: `m = (1+γ)⊙(W_rel·h_head + b_rel) + β`, summed
    /// per tail, then `h ← LN(h + Σm)`.
    pub fn propagate(&self, tape: &Tape, p: &Bound, graph: &MessageGraph, h: Var) -> Result<Var> {
        let (n, d) = (self.n_nodes, self.config.dim);
        let hq = if graph.edge_count() > 0 {
            Some(self.qualifier_vectors(tape, p, &graph.quals)?)
        } else {
            None
        };
        let inv_deg = if self.config.degree_norm {
            Some(tape.constant(Tensor::vector(graph.inv_deg.clone())))
        } else {
            None
        };
        let mut h = h;
        for layer in &self.layers {
            let agg = match hq {
                Some(hq) => {
                    let hh = tape.gather_rows(h, &graph.heads)?;
                    let mt = tape.rel_linear(hh, p.get(&layer.w_rel)?, p.get(&layer.b_rel)?, &graph.rels)?;
                    let gamma = layer.gamma.forward(tape, p, hq)?;
                    let beta = layer.beta.forward(tape, p, hq)?;
                    let m = tape.add(tape.mul(mt, tape.add_scalar(gamma, 1.0))?, beta)?;
                    let agg = tape.index_add_rows(m, &graph.tails, n)?;
                    match inv_deg {
                        Some(s) => tape.mul_col(agg, s)?,
                        None => agg,
                    }
                }
                None => tape.constant(Tensor::zeros(&[n, d])),
            };
            h = layer.ln.forward(tape, p, tape.add(h, agg)?)?;
        }
        Ok(h)
    }

    pub fn node_states(&self, tape: &Tape, p: &Bound, graph: &MessageGraph) -> Result<Var> {
        let h = self.literal_states(tape, p)?;
        self.propagate(tape, p, graph, h)
    }

    /// Query vector `z`: encoder output at the relation position of the
    /// sequence `[h_head, r]`, with `r = E_rel[rel] + W_seq·h_qual + b_seq`.
    pub fn query_vectors(&self, tape: &Tape, p: &Bound, h: Var, keys: &[QueryKey]) -> Result<Var> {
        let d = self.config.dim;
        let b = keys.len();
        let heads: Vec<usize> = keys.iter().map(|k| k.head).collect();
        let rels: Vec<usize> = keys.iter().map(|k| k.relation).collect();
        if let Some(&r) = rels.iter().find(|&&r| r >= self.n_relations) {
            return Err(KgeError::Index(format!("relation {r}")));
        }
        let quals: Vec<Vec<(usize, usize)>> = keys.iter().map(|k| k.qualifiers.clone()).collect();
        let hh = tape.gather_rows(h, &heads)?;
        let er = tape.gather_rows(p.get("rel.emb")?, &rels)?;
        let hq = self.qualifier_vectors(tape, p, &quals)?;
        let r = tape.add(er, self.seq.forward(tape, p, hq)?)?;
        let x = tape.reshape(tape.concat_cols(&[hh, r])?, &[2 * b, d])?;
        let y = self.encoder.forward(tape, p, x, b)?;
        Ok(tape.slice_cols(tape.reshape(y, &[b, 2 * d])?, d, 2 * d)?)
    }

    /// `B × N` scores `zᵀ·h_ν` against every node state.
    pub fn score(&self, tape: &Tape, p: &Bound, h: Var, keys: &[QueryKey]) -> Result<Var> {
        let z = self.query_vectors(tape, p, h, keys)?;
        Ok(tape.matmul_nt(z, h)?)
    }

    /// Mean BCE against smoothed multi-hot targets (`1−θ` / `θ`).
    pub fn group_loss(&self, tape: &Tape, p: &Bound, h: Var, keys: &[QueryKey], positives: &[&[usize]]) -> Result<Var> {
        let n = self.n_nodes;
        let theta = self.config.smoothing;
        let mut targets = vec![theta; keys.len() * n];
        for (i, pos) in positives.iter().enumerate() {
            for &t in pos.iter() {
                targets[i * n + t] = 1.0 - theta;
            }
        }
        let s = self.score(tape, p, h, keys)?;
        Ok(tape.bce_with_logits(s, &targets)?)
    }

    pub fn manifest(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "kge",
            "config": self.config,
            "nodes": self.n_nodes,
            "relations": self.n_relations,
            "qual_keys": self.n_qual_keys,
            "qual_values": self.n_qual_values,
            "categorical": self.literals.cat_props.iter().zip(&self.literals.cat_vocab)
                .map(|(p, v)| (p.clone(), v.len())).collect::<std::collections::BTreeMap<_, _>>(),
            "numeric": self.literals.num_props,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        Ok(crate::tensor::checkpoint::save(path, &self.manifest(), &self.params)?)
    }

    /// Rebuilds the model skeleton for `data`/`nodes` from the archived
    /// config, then restores every parameter.
    pub fn load(path: &std::path::Path, data: &TripletDataset, nodes: &[NodeRecord]) -> Result<Self> {
        let (manifest, group) = crate::tensor::checkpoint::load(path)?;
        let config: KgeConfig = serde_json::from_value(manifest["config"].clone())
            .map_err(|e| KgeError::Config(format!("checkpoint manifest: {e}")))?;
        let mut m = Self::new(config, data, nodes)?;
        crate::tensor::checkpoint::restore_into(&mut m.params, &group)?;
        Ok(m)
    }
}
