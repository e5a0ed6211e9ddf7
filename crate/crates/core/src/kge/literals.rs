//! Node literals in index form: categorical value ids per property and
//! standardized numeric feature rows.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{KgeError, Result};
use crate::kg::NodeRecord;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LiteralTable {
    pub cat_props: Vec<String>,
    /// Sorted value vocabulary per categorical property.
    pub cat_vocab: Vec<Vec<String>>,
    /// Per property: (node, value id) for every node that carries it.
    pub cat_entries: Vec<Vec<(usize, usize)>>,
    pub num_props: Vec<String>,
    pub num_mean: Vec<f64>,
    pub num_std: Vec<f64>,
    /// Nodes with numeric features and their standardized rows.
    pub num_nodes: Vec<usize>,
    pub num_rows: Vec<Vec<f64>>,
}

impl LiteralTable {
    /// Builds vocabularies from `nodes` (whose order defines node indices)
    /// and standardizes numerics to zero mean and unit variance.
    pub fn from_nodes(nodes: &[NodeRecord]) -> Result<Self> {
        let cat_props: Vec<String> = nodes
            .iter()
            .flat_map(|n| n.categorical.keys().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let cat_vocab: Vec<Vec<String>> = cat_props
            .iter()
            .map(|p| {
                nodes
                    .iter()
                    .filter_map(|n| n.categorical.get(p).cloned())
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect()
            })
            .collect();
        let mut t = Self {
            cat_props,
            cat_vocab,
            ..Self::default()
        };
        t.cat_entries = t
            .cat_props
            .iter()
            .zip(&t.cat_vocab)
            .map(|(p, vocab)| {
                nodes
                    .iter()
                    .enumerate()
                    .filter_map(|(i, n)| {
                        n.categorical
                            .get(p)
                            .map(|v| (i, vocab.binary_search(v).expect("own vocabulary")))
                    })
                    .collect()
            })
            .collect();

        t.num_props = nodes
            .iter()
            .flat_map(|n| n.numeric.keys().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut raw = Vec::new();
        for (i, n) in nodes.iter().enumerate() {
            if n.numeric.is_empty() {
                continue;
            }
            let row = t
                .num_props
                .iter()
                .map(|p| {
                    n.numeric
                        .get(p)
                        .copied()
                        .ok_or_else(|| KgeError::Vocabulary(format!("node {} lacks numeric property {p}", n.id)))
                })
                .collect::<Result<Vec<f64>>>()?;
            t.num_nodes.push(i);
            raw.push(row);
        }
        let f = t.num_props.len();
        let m = raw.len().max(1) as f64;
        t.num_mean = (0..f).map(|j| raw.iter().map(|r| r[j]).sum::<f64>() / m).collect();
        t.num_std = (0..f)
            .map(|j| {
                let var = raw.iter().map(|r| (r[j] - t.num_mean[j]).powi(2)).sum::<f64>() / m;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        t.num_rows = raw
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .map(|(j, x)| (x - t.num_mean[j]) / t.num_std[j])
                    .collect()
            })
            .collect();
        Ok(t)
    }

    pub fn num_features(&self) -> usize {
        self.num_props.len()
    }

    /// Value id of `value` for property `prop`.
    pub fn value_id(&self, prop: &str, value: &str) -> Result<usize> {
        let k = self
            .cat_props
            .iter()
            .position(|p| p == prop)
            .ok_or_else(|| KgeError::Vocabulary(format!("unknown categorical property {prop}")))?;
        self.cat_vocab[k]
            .binary_search_by(|v| v.as_str().cmp(value))
            .map_err(|_| KgeError::Vocabulary(format!("{prop}={value} is not in the vocabulary")))
    }
}
