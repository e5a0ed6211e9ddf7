use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{Split, Splits, TripletDataset, TripletRecord};

/// A 1-to-N query: head, relation and the qualifiers the statement carries.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QueryKey {
    pub head: usize,
    pub relation: usize,
    pub qualifiers: Vec<(usize, usize)>,
}

impl QueryKey {
    pub fn of(t: &TripletRecord) -> Self {
        Self {
            head: t.head,
            relation: t.relation,
            qualifiers: t.qualifiers.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryGroup {
    pub key: QueryKey,
    /// Sorted, unique.
    pub positives: Vec<usize>,
    pub split: Split,
}

/// Groups the records of one split (reciprocals included) by query key.
pub fn query_groups(d: &TripletDataset, splits: &Splits, split: Split) -> Vec<QueryGroup> {
    let mut m: BTreeMap<QueryKey, Vec<usize>> = BTreeMap::new();
    for i in splits.records(d, split) {
        let t = &d.triplets[i];
        m.entry(QueryKey::of(t)).or_default().push(t.tail);
    }
    m.into_iter()
        .map(|(key, mut positives)| {
            positives.sort_unstable();
            positives.dedup();
            QueryGroup { key, positives, split }
        })
        .collect()
}

/// Every known tail per query key over all splits.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FilterIndex {
    map: HashMap<QueryKey, Vec<usize>>,
}

impl FilterIndex {
    pub fn build(d: &TripletDataset) -> Self {
        let mut map: HashMap<QueryKey, Vec<usize>> = HashMap::new();
        for t in &d.triplets {
            map.entry(QueryKey::of(t)).or_default().push(t.tail);
        }
        for v in map.values_mut() {
            v.sort_unstable();
            v.dedup();
        }
        Self { map }
    }

    /// Sorted known tails; empty for an unseen key.
    pub fn known(&self, key: &QueryKey) -> &[usize] {
        self.map.get(key).map_or(&[], Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Rank of `gold` among all candidates except those in `filter` (the gold
/// itself is never filtered). Ties count half, rounded up:
/// `1 + greater + ⌈equal / 2⌉`.
pub fn filtered_rank(scores: &[f64], gold: usize, filter: &[usize]) -> usize {
    let g = scores[gold];
    let (mut greater, mut equal) = (0usize, 0usize);
    for &s in scores {
        if s > g {
            greater += 1;
        } else if s == g {
            equal += 1;
        }
    }
    equal -= 1; // the gold itself
    for &f in filter {
        if f == gold {
            continue;
        }
        let s = scores[f];
        if s > g {
            greater -= 1;
        } else if s == g {
            equal -= 1;
        }
    }
    1 + greater + equal.div_ceil(2)
}

/// All gold tails of one evaluation query key.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingQuery {
    pub key: QueryKey,
    /// One entry per evaluated record (duplicates kept).
    pub golds: Vec<usize>,
    pub reciprocal: bool,
}

/// Evaluation queries of one split in key order.
pub fn ranking_queries(d: &TripletDataset, splits: &Splits, split: Split) -> Vec<RankingQuery> {
    let mut m: BTreeMap<QueryKey, (Vec<usize>, bool)> = BTreeMap::new();
    for i in splits.records(d, split) {
        let t = &d.triplets[i];
        let e = m.entry(QueryKey::of(t)).or_insert_with(|| (Vec::new(), t.reciprocal));
        e.0.push(t.tail);
    }
    m.into_iter()
        .map(|(key, (mut golds, reciprocal))| {
            golds.sort_unstable();
            RankingQuery { key, golds, reciprocal }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkMetrics {
    pub count: usize,
    pub mrr: f64,
    pub h1: f64,
    pub h3: f64,
    pub h10: f64,
}

impl LinkMetrics {
    pub fn from_ranks(ranks: &[usize]) -> Self {
        if ranks.is_empty() {
            return Self::default();
        }
        let n = ranks.len() as f64;
        let hits = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Self {
            count: ranks.len(),
            mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
            h1: hits(1),
            h3: hits(3),
            h10: hits(10),
        }
    }
}

/// Object prediction (base relations), subject prediction (reciprocal
/// relations) and their micro-averaged union.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkReport {
    pub object: LinkMetrics,
    pub subject: LinkMetrics,
    pub triplet: LinkMetrics,
}

/// Ranks every gold of every query. `score_batch` returns one score row
/// over all nodes per query of the slice it receives.
pub fn evaluate_ranking<F, E>(
    queries: &[RankingQuery],
    filter: &FilterIndex,
    batch: usize,
    mut score_batch: F,
) -> Result<LinkReport, E>
where
    F: FnMut(&[RankingQuery]) -> Result<Vec<Vec<f64>>, E>,
{
    let (mut obj, mut subj) = (Vec::new(), Vec::new());
    for chunk in queries.chunks(batch.max(1)) {
        let scores = score_batch(chunk)?;
        assert_eq!(scores.len(), chunk.len(), "one score row per query");
        for (q, s) in chunk.iter().zip(&scores) {
            let known = filter.known(&q.key);
            let out = if q.reciprocal { &mut subj } else { &mut obj };
            for &g in &q.golds {
                out.push(filtered_rank(s, g, known));
            }
        }
    }
    let all: Vec<usize> = obj.iter().chain(&subj).copied().collect();
    Ok(LinkReport {
        object: LinkMetrics::from_ranks(&obj),
        subject: LinkMetrics::from_ranks(&subj),
        triplet: LinkMetrics::from_ranks(&all),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(h: usize, r: usize, t: usize) -> TripletRecord {
        TripletRecord {
            head: h,
            relation: r,
            tail: t,
            qualifiers: vec![],
            reciprocal: false,
        }
    }

    #[test]
    fn rank_tie_policy() {
        assert_eq!(filtered_rank(&[0.5, 0.9, 0.1], 1, &[]), 1);
        assert_eq!(filtered_rank(&[0.5, 0.5, 0.1], 1, &[]), 2);
        assert_eq!(filtered_rank(&[0.5, 0.5, 0.5, 0.5], 1, &[]), 3);
        assert_eq!(filtered_rank(&[0.5, 0.5, 0.5], 1, &[]), 2);
        assert_eq!(filtered_rank(&[0.9, 0.5, 0.9], 1, &[0, 1]), 2);
        assert_eq!(filtered_rank(&[0.9, 0.5, 0.9], 1, &[0, 2]), 1);
    }

    #[test]
    fn single_triplet_filter_and_absent_key() {
        let d = TripletDataset {
            nodes: vec!["a".into(), "b".into()],
            relations: vec!["r".into()],
            triplets: vec![rec(0, 0, 1)],
            ..Default::default()
        };
        let f = FilterIndex::build(&d);
        assert_eq!(f.known(&QueryKey::of(&d.triplets[0])), &[1]);
        assert!(f.known(&QueryKey::of(&rec(1, 0, 0))).is_empty());
    }

    #[test]
    fn five_node_filtered_rank_matches_removal() {
        let mut d = TripletDataset {
            nodes: (0..5).map(|i| i.to_string()).collect(),
            relations: vec!["r".into()],
            triplets: vec![rec(0, 0, 1), rec(0, 0, 2), rec(0, 0, 4), rec(3, 0, 1)],
            ..Default::default()
        };
        d.add_reciprocals().unwrap();
        let f = FilterIndex::build(&d);
        let scores = [0.3, 0.8, 0.9, 0.95, 0.7];
        let key = QueryKey::of(&d.triplets[0]);
        for gold in [1, 2, 4] {
            // brute force: drop the other positives, then count
            let kept: Vec<f64> = (0..5)
                .filter(|&i| i == gold || !f.known(&key).contains(&i))
                .map(|i| scores[i])
                .collect();
            let better = kept.iter().filter(|&&s| s > scores[gold]).count();
            assert_eq!(filtered_rank(&scores, gold, f.known(&key)), better + 1);
        }
    }

    #[test]
    fn empty_filter_equals_raw_rank() {
        let scores = [0.1, 0.4, 0.4, 0.2, 0.9];
        for g in 0..5 {
            let raw = 1 + scores.iter().filter(|&&s| s > scores[g]).count();
            let ties = scores.iter().filter(|&&s| s == scores[g]).count() - 1;
            assert_eq!(filtered_rank(&scores, g, &[]), raw + ties.div_ceil(2));
        }
    }

    #[test]
    fn perfect_scorer_gets_unit_metrics() {
        let mut d = TripletDataset {
            nodes: (0..4).map(|i| i.to_string()).collect(),
            relations: vec!["r".into()],
            triplets: (0..10).map(|i| rec(i % 4, 0, (i * 3 + 1) % 4)).collect(),
            ..Default::default()
        };
        let splits = super::super::split_811(&d, 0);
        d.add_reciprocals().unwrap();
        let f = FilterIndex::build(&d);
        let qs = ranking_queries(&d, &splits, Split::Train);
        let rep = evaluate_ranking(&qs, &f, 3, |chunk| {
            Ok::<_, ()>(
                chunk
                    .iter()
                    .map(|q| {
                        (0..4)
                            .map(|i| if f.known(&q.key).contains(&i) { 1.0 } else { 0.0 })
                            .collect()
                    })
                    .collect(),
            )
        })
        .unwrap();
        assert_eq!(rep.triplet.mrr, 1.0);
        assert_eq!(rep.object.h1, 1.0);
        assert_eq!(rep.subject.h10, 1.0);
        assert_eq!(rep.triplet.count, 16);
    }

    #[test]
    fn groups_flatten_back_to_split() {
        let mut d = TripletDataset {
            nodes: (0..6).map(|i| i.to_string()).collect(),
            relations: vec!["r".into(), "s".into()],
            triplets: (0..20).map(|i| rec(i % 6, i % 2, (i * 5 + 2) % 6)).collect(),
            ..Default::default()
        };
        let splits = super::super::split_811(&d, 3);
        d.add_reciprocals().unwrap();
        for split in Split::ALL {
            let mut flat: Vec<(usize, usize, usize)> = query_groups(&d, &splits, split)
                .iter()
                .flat_map(|g| g.positives.iter().map(|&t| (g.key.head, g.key.relation, t)))
                .collect();
            let mut want: Vec<(usize, usize, usize)> = splits
                .records(&d, split)
                .iter()
                .map(|&i| (d.triplets[i].head, d.triplets[i].relation, d.triplets[i].tail))
                .collect();
            flat.sort_unstable();
            want.sort_unstable();
            want.dedup();
            assert_eq!(flat, want);
        }
    }
}
