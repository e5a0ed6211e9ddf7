//! Ranking, retrieval and binary classification metrics.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid metric input: {0}")]
    Validation(String),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

pub const DEFAULT_KS: [usize; 3] = [3, 5, 10];

/// Items in descending score order with graded relevance (0 = not relevant).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    scores: Vec<f64>,
    relevance: Vec<u32>,
}

impl RankedList {
    /// Sorts `(score, relevance)` items by descending score. Ties keep their
    /// input order.
    pub fn from_items(items: &[(f64, u32)]) -> Result<Self> {
        if items.iter().any(|(s, _)| s.is_nan()) {
            return Err(MetricsError::Validation("NaN score".into()));
        }
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.sort_by(|&a, &b| items[b].0.total_cmp(&items[a].0));
        Ok(Self {
            scores: order.iter().map(|&i| items[i].0).collect(),
            relevance: order.iter().map(|&i| items[i].1).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn relevance(&self) -> &[u32] {
        &self.relevance
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn reciprocal_rank(&self, k: usize) -> f64 {
        self.relevance
            .iter()
            .take(k)
            .position(|&r| r > 0)
            .map_or(0.0, |i| 1.0 / (i + 1) as f64)
    }

    /// Precision at each hit within the top `k`, summed and divided by
    /// `min(k, #relevant)`; 0 for a list without relevant items.
    pub fn average_precision(&self, k: usize) -> f64 {
        let total = self.relevance.iter().filter(|&&r| r > 0).count();
        if total == 0 || k == 0 {
            return 0.0;
        }
        let (mut hits, mut sum) = (0usize, 0.0);
        for (i, &r) in self.relevance.iter().take(k).enumerate() {
            if r > 0 {
                hits += 1;
                sum += hits as f64 / (i + 1) as f64;
            }
        }
        sum / k.min(total) as f64
    }

    /// DCG@k over the ideal DCG@k; 0 when no item is relevant.
    pub fn ndcg(&self, k: usize) -> f64 {
        let mut ideal = self.relevance.clone();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let idcg = dcg(&ideal, k);
        if idcg == 0.0 {
            0.0
        } else {
            dcg(&self.relevance, k) / idcg
        }
    }
}

fn dcg(rel: &[u32], k: usize) -> f64 {
    rel.iter()
        .take(k)
        .enumerate()
        .map(|(i, &r)| (2f64.powi(r as i32) - 1.0) / ((i + 2) as f64).log2())
        .sum()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankingAtK {
    pub map: f64,
    pub mrr: f64,
    pub ndcg: f64,
}

/// Metrics per cutoff `K`, averaged over lists.
pub type RankingReport = BTreeMap<usize, RankingAtK>;

pub fn ranking_report(lists: &[RankedList], ks: &[usize]) -> Result<RankingReport> {
    if lists.is_empty() {
        return Err(MetricsError::Empty("ranked list collection"));
    }
    let n = lists.len() as f64;
    Ok(ks
        .iter()
        .map(|&k| {
            let mean = |f: &dyn Fn(&RankedList) -> f64| lists.iter().map(f).sum::<f64>() / n;
            (
                k,
                RankingAtK {
                    map: mean(&|l| l.average_precision(k)),
                    mrr: mean(&|l| l.reciprocal_rank(k)),
                    ndcg: mean(&|l| l.ndcg(k)),
                },
            )
        })
        .collect())
}

/// `(entity, predicate)` pair of one scene.
pub type Triplet = (String, String);

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneTriplets {
    pub gold: Vec<Triplet>,
    /// `(entity, predicate, confidence)`.
    pub predicted: Vec<(String, String, f64)>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecallAtK {
    pub recall: f64,
    pub mean_recall: f64,
}

pub type RecallReport = BTreeMap<usize, RecallAtK>;

/// Top-`k` predictions by confidence; ties keep input order.
fn top_k(pred: &[(String, String, f64)], k: usize) -> HashSet<(&str, &str)> {
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| pred[b].2.total_cmp(&pred[a].2));
    order
        .into_iter()
        .take(k)
        .map(|i| (pred[i].0.as_str(), pred[i].1.as_str()))
        .collect()
}

/// R@K averages the per-scene fraction of gold triplets found among the
/// top-K predictions. mR@K averages, per predicate class, the same fraction
/// over the scenes holding that class, then averages over classes. Scenes
/// without gold triplets are skipped.
pub fn retrieval_recall(scenes: &[SceneTriplets], ks: &[usize]) -> Result<RecallReport> {
    if scenes.is_empty() {
        return Err(MetricsError::Empty("scene collection"));
    }
    for (i, s) in scenes.iter().enumerate() {
        let mut seen = HashSet::new();
        for g in &s.gold {
            if !seen.insert(g) {
                return Err(MetricsError::Validation(format!(
                    "scene {i}: duplicate gold triplet {g:?}"
                )));
            }
        }
        if s.predicted.iter().any(|p| p.2.is_nan()) {
            return Err(MetricsError::Validation(format!("scene {i}: NaN confidence")));
        }
    }
    if scenes.iter().all(|s| s.gold.is_empty()) {
        return Err(MetricsError::Empty("gold triplets"));
    }
    let mut out = RecallReport::new();
    for &k in ks {
        let (mut scene_sum, mut scene_n) = (0.0, 0usize);
        let mut class: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for s in scenes.iter().filter(|s| !s.gold.is_empty()) {
            let top = top_k(&s.predicted, k);
            let hit = |g: &Triplet| top.contains(&(g.0.as_str(), g.1.as_str()));
            scene_sum += s.gold.iter().filter(|g| hit(g)).count() as f64 / s.gold.len() as f64;
            scene_n += 1;
            let mut per: HashMap<&str, (usize, usize)> = HashMap::new();
            for g in &s.gold {
                let e = per.entry(g.1.as_str()).or_default();
                e.1 += 1;
                if hit(g) {
                    e.0 += 1;
                }
            }
            for (c, (m, t)) in per {
                let e = class.entry(c).or_default();
                e.0 += m as f64 / t as f64;
                e.1 += 1;
            }
        }
        let mean_recall = class.values().map(|(s, n)| s / *n as f64).sum::<f64>() / class.len() as f64;
        out.insert(
            k,
            RecallAtK {
                recall: scene_sum / scene_n as f64,
                mean_recall,
            },
        );
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    pub bmae: f64,
}

pub const DECISION_THRESHOLD: f64 = 0.5;

/// Area under the ROC curve from the Mann–Whitney statistic with midranks.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&o| labels[o]).count() as f64 * mid;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

/// Scores are probabilities; an item is predicted positive at `≥ 0.5`.
pub fn classification_report(scores: &[f64], labels: &[bool]) -> Result<ClassificationReport> {
    if scores.is_empty() {
        return Err(MetricsError::Empty("classification items"));
    }
    if scores.len() != labels.len() {
        return Err(MetricsError::Validation(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(MetricsError::Validation(
            "scores must be probabilities in [0, 1]".into(),
        ));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= DECISION_THRESHOLD, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let bmae = scores
        .iter()
        .zip(labels)
        .map(|(&s, &l)| (s - if l { 1.0 } else { 0.0 }).abs())
        .sum::<f64>()
        / scores.len() as f64;
    Ok(ClassificationReport {
        precision,
        recall,
        f1,
        auc: auc(scores, labels),
        bmae,
    })
}

/// One row of the long-format CSV export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    /// Empty for metrics without a cutoff.
    pub k: Option<usize>,
    pub value: f64,
}

pub fn ranking_rows(prefix: &str, r: &RankingReport) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for (&k, m) in r {
        for (name, v) in [("map", m.map), ("mrr", m.mrr), ("ndcg", m.ndcg)] {
            rows.push(MetricRow {
                metric: format!("{prefix}{name}"),
                k: Some(k),
                value: v,
            });
        }
    }
    rows
}

pub fn recall_rows(prefix: &str, r: &RecallReport) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for (&k, m) in r {
        for (name, v) in [("recall", m.recall), ("mean_recall", m.mean_recall)] {
            rows.push(MetricRow {
                metric: format!("{prefix}{name}"),
                k: Some(k),
                value: v,
            });
        }
    }
    rows
}

pub fn classification_rows(prefix: &str, r: &ClassificationReport) -> Vec<MetricRow> {
    let mut rows: Vec<MetricRow> = [
        ("precision", r.precision),
        ("recall", r.recall),
        ("f1", r.f1),
        ("bmae", r.bmae),
    ]
    .into_iter()
    .map(|(n, v)| MetricRow {
        metric: format!("{prefix}{n}"),
        k: None,
        value: v,
    })
    .collect();
    if let Some(a) = r.auc {
        rows.push(MetricRow {
            metric: format!("{prefix}auc"),
            k: None,
            value: a,
        });
    }
    rows
}

pub fn to_csv(rows: &[MetricRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| MetricsError::Validation(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| MetricsError::Validation(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| MetricsError::Validation(e.to_string()))
}

pub fn from_csv(text: &str) -> Result<Vec<MetricRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| MetricsError::Validation(e.to_string()))
}
