use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{KgeModel, MessageGraph};
use super::{KgeError, Result};
use crate::tensor::{AdamW, Bound, Tape, Var};
use crate::triplets::{query_groups, QueryGroup, QueryKey, Split, Splits, TripletDataset, TripletError};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
}

fn direction_loss(model: &KgeModel, tape: &Tape, p: &Bound, h: Var, groups: &[&QueryGroup]) -> Result<Option<Var>> {
    if groups.is_empty() {
        return Ok(None);
    }
    let keys: Vec<QueryKey> = groups.iter().map(|g| g.key.clone()).collect();
    let pos: Vec<&[usize]> = groups.iter().map(|g| g.positives.as_slice()).collect();
    Ok(Some(model.group_loss(tape, p, h, &keys, &pos)?))
}

/// `½(L_tail + L_head)` over one batch of base-relation groups and one of
/// reciprocal groups; a single term when the other batch is empty.
pub fn train_step_loss(
    model: &KgeModel,
    tape: &Tape,
    p: &Bound,
    graph: &MessageGraph,
    tail_groups: &[&QueryGroup],
    head_groups: &[&QueryGroup],
) -> Result<Var> {
    let h = model.node_states(tape, p, graph)?;
    let lt = direction_loss(model, tape, p, h, tail_groups)?;
    let lh = direction_loss(model, tape, p, h, head_groups)?;
    Ok(match (lt, lh) {
        (Some(a), Some(b)) => tape.mul_scalar(tape.add(a, b)?, 0.5),
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => tape.constant(crate::tensor::Tensor::scalar(0.0)),
    })
}

/// Trains on the train split for `config.epochs` epochs. `on_epoch` sees
/// each epoch's mean loss.
pub fn train<F>(model: &mut KgeModel, data: &TripletDataset, splits: &Splits, mut on_epoch: F) -> Result<TrainReport>
where
    F: FnMut(usize, f64),
{
    if !data.has_reciprocals() {
        return Err(KgeError::Triplets(TripletError::MissingReciprocals));
    }
    let graph = MessageGraph::from_records(data, &splits.records(data, Split::Train))?;
    let groups = query_groups(data, splits, Split::Train);
    let n_base = data.num_base_relations();
    let mut tail: Vec<&QueryGroup> = groups.iter().filter(|g| g.key.relation < n_base).collect();
    let mut head: Vec<&QueryGroup> = groups.iter().filter(|g| g.key.relation >= n_base).collect();
    let cfg = model.config.clone();
    let opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9));
    let mut report = TrainReport::default();
    let steps = tail.len().max(head.len()).div_ceil(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        tail.shuffle(&mut rng);
        head.shuffle(&mut rng);
        let (ct, ch) = (tail.len().div_ceil(steps.max(1)), head.len().div_ceil(steps.max(1)));
        let mut total = 0.0;
        for step in 0..steps {
            let bt = &tail[(step * ct).min(tail.len())..((step + 1) * ct).min(tail.len())];
            let bh = &head[(step * ch).min(head.len())..((step + 1) * ch).min(head.len())];
            let tape = Tape::new();
            let p = model.params.bind(&tape);
            let loss = train_step_loss(model, &tape, &p, &graph, bt, bh)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(KgeError::Divergence {
                    epoch,
                    step,
                    loss: value,
                });
            }
            let grads = tape.backward(loss);
            model.params.clear_grad();
            model.params.accumulate(&p, &grads);
            opt.step(&mut model.params)?;
            total += value;
            report.steps += 1;
        }
        let mean = total / steps.max(1) as f64;
        log::info!("kge epoch {epoch}: loss {mean:.6}");
        on_epoch(epoch, mean);
        report.epoch_loss.push(mean);
    }
    Ok(report)
}
