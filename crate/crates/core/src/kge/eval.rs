use std::collections::HashMap;
use std::io::BufRead;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{KgeModel, MessageGraph};
use super::{KgeError, Result};
use crate::tensor::{Tape, Tensor};
use crate::triplets::{
    evaluate_ranking, ranking_queries, FilterIndex, LinkReport, QueryKey, RankingQuery, Split, Splits, TripletDataset,
};

/// Final node states `h^L` computed over the train message graph.
pub fn final_states(model: &KgeModel, data: &TripletDataset, splits: &Splits) -> Result<Tensor> {
    let graph = MessageGraph::from_records(data, &splits.records(data, Split::Train))?;
    let tape = Tape::new();
    let p = model.params.bind_frozen(&tape);
    let h = model.node_states(&tape, &p, &graph)?;
    Ok(tape.value(h))
}

fn score_rows(model: &KgeModel, h: &Tensor, queries: &[RankingQuery]) -> Result<Vec<Vec<f64>>> {
    let tape = Tape::new();
    let p = model.params.bind_frozen(&tape);
    let hv = tape.constant(h.clone());
    let keys: Vec<QueryKey> = queries.iter().map(|q| q.key.clone()).collect();
    let s = tape.value(model.score(&tape, &p, hv, &keys)?);
    Ok((0..s.rows()).map(|i| s.row(i).to_vec()).collect())
}

/// Filtered object, subject and triplet prediction metrics on `split`.
pub fn evaluate(
    model: &KgeModel,
    data: &TripletDataset,
    splits: &Splits,
    filter: &FilterIndex,
    split: Split,
) -> Result<LinkReport> {
    let h = final_states(model, data, splits)?;
    let queries = ranking_queries(data, splits, split);
    let eb = model.config.eval_batch;
    let outer = eb * rayon::current_num_threads().max(1);
    evaluate_ranking(&queries, filter, outer, |chunk| {
        let parts = chunk
            .par_chunks(eb)
            .map(|c| score_rows(model, &h, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.into_iter().flatten().collect())
    })
}

/// Node id → final embedding, as exported for the scene heads.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Embeddings {
    pub dim: usize,
    pub ids: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct Line {
    id: String,
    embedding: Vec<f64>,
}

impl Embeddings {
    pub fn new(ids: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if ids.len() != rows.len() || rows.iter().any(|r| r.len() != dim) {
            return Err(KgeError::Embeddings("ragged embedding rows".into()));
        }
        let index = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        Ok(Self { dim, ids, rows, index })
    }

    pub fn from_states(data: &TripletDataset, h: &Tensor) -> Result<Self> {
        Self::new(data.nodes.clone(), (0..h.rows()).map(|i| h.row(i).to_vec()).collect())
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index.get(id).map(|&i| self.rows[i].as_slice())
    }

    /// Rows whose id starts with `prefix`, in file order.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(&str, &[f64])> {
        self.ids
            .iter()
            .zip(&self.rows)
            .filter(|(id, _)| id.starts_with(prefix))
            .map(|(id, r)| (id.as_str(), r.as_slice()))
            .collect()
    }

    pub fn to_ndjson(&self) -> String {
        let mut s = String::new();
        for (id, r) in self.ids.iter().zip(&self.rows) {
            let line = Line {
                id: id.clone(),
                embedding: r.clone(),
            };
            s.push_str(&serde_json::to_string(&line).expect("embedding serializes"));
            s.push('\n');
        }
        s
    }

    pub fn from_ndjson<R: BufRead>(reader: R) -> Result<Self> {
        let (mut ids, mut rows) = (Vec::new(), Vec::new());
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let l: Line =
                serde_json::from_str(&line).map_err(|e| KgeError::Embeddings(format!("line {}: {e}", i + 1)))?;
            ids.push(l.id);
            rows.push(l.embedding);
        }
        Self::new(ids, rows)
    }
}
