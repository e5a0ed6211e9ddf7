//! Warm-up schedule, focal-loss training, prediction and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::select_relevant;
use super::{
    KnowledgePrior, Result, SceneConfig, SceneDims, SceneError, SceneInputs, SceneModel, SceneSample, MECHANISMS,
};
use crate::metrics::{
    classification_report, ranking_report, retrieval_recall, ClassificationReport, RankedList, RankingReport,
    RecallReport, SceneTriplets,
};
use crate::tensor::{AdamW, Bound, Tape, Tensor, Var};

/// Priority grade of each severity class; irrelevant entities grade 0.
pub const SEVERITY_GRADES: [u32; 4] = [2, 3, 4, 1];

/// Inverse class frequency normalized to mean 1 over the classes present.
/// Absent classes are reported and clamped to the largest present weight.
pub fn class_weights(counts: &[usize], what: &str) -> Vec<f64> {
    let inv: Vec<Option<f64>> = counts.iter().map(|&c| (c > 0).then(|| 1.0 / c as f64)).collect();
    let present: Vec<f64> = inv.iter().flatten().copied().collect();
    if present.is_empty() {
        log::warn!("{what}: no training examples; using unit class weights");
        return vec![1.0; counts.len()];
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    let max = present.iter().cloned().fold(0.0, f64::max) / mean;
    inv.iter()
        .enumerate()
        .map(|(i, w)| match w {
            Some(w) => w / mean,
            None => {
                log::warn!("{what}: class {i} absent from the training split; weight clamped to {max:.4}");
                max
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub relevance: Vec<f64>,
    pub mechanism: Vec<f64>,
    pub side: Vec<f64>,
    pub severity: Vec<f64>,
}

impl LossWeights {
    pub fn from_samples(samples: &[SceneSample]) -> Result<Self> {
        let mut rel = [0usize; 2];
        let mut mech = [0usize; 8];
        let mut side = [0usize; 3];
        let mut sev = [0usize; 4];
        for s in samples {
            for e in &s.entities {
                let l = e.labels.ok_or_else(|| unlabeled(s))?;
                rel[l.relevant as usize] += 1;
                if let Some(r) = l.relation {
                    mech[r.mechanism] += 1;
                    side[r.side] += 1;
                    sev[r.severity] += 1;
                }
            }
        }
        Ok(Self {
            relevance: class_weights(&rel, "relevance"),
            mechanism: class_weights(&mech, "mechanism"),
            side: class_weights(&side, "side"),
            severity: class_weights(&sev, "severity"),
        })
    }
}

fn unlabeled(s: &SceneSample) -> SceneError {
    SceneError::Validation(format!("sample {} has no labels", s.id))
}

/// Total loss of one minibatch. During warm-up the head losses enter with
/// weight 0; afterwards the relevance loss enters at `lambda_eres`.
pub fn batch_loss(
    model: &SceneModel,
    tape: &Tape,
    p: &Bound,
    batch: &[(&SceneInputs, &SceneSample)],
    weights: &LossWeights,
    warmup: bool,
) -> Result<Var> {
    let mut rel_logits = Vec::new();
    let mut mech = Vec::new();
    let mut side = Vec::new();
    let mut sev = Vec::new();
    let (mut rel_y, mut mech_y, mut side_y, mut sev_y) = (vec![], vec![], vec![], vec![]);
    for (inp, s) in batch {
        let (eres, _, heads) = model.forward(tape, p, inp)?;
        rel_logits.push(eres.logits);
        let mut gold = Vec::new();
        for (i, e) in s.entities.iter().enumerate() {
            let l = e.labels.ok_or_else(|| unlabeled(s))?;
            rel_y.push(l.relevant as usize);
            if let Some(r) = l.relation {
                gold.push(i);
                mech_y.push(r.mechanism);
                side_y.push(r.side);
                sev_y.push(r.severity);
            }
        }
        mech.push(tape.gather_rows(heads.mechanism, &gold)?);
        side.push(tape.gather_rows(heads.side, &gold)?);
        sev.push(tape.gather_rows(heads.severity, &gold)?);
    }
    let g = model.config.focal_gamma;
    let l_rel = tape.softmax_focal_loss(tape.concat_rows(&rel_logits)?, &rel_y, &weights.relevance, g)?;
    let l_mech = tape.softmax_focal_loss(tape.concat_rows(&mech)?, &mech_y, &weights.mechanism, g)?;
    let l_side = tape.softmax_focal_loss(tape.concat_rows(&side)?, &side_y, &weights.side, g)?;
    let l_sev = tape.softmax_focal_loss(tape.concat_rows(&sev)?, &sev_y, &weights.severity, g)?;
    let heads = tape.add(tape.add(l_mech, l_side)?, l_sev)?;
    let (w_rel, w_heads) = match (warmup, model.config.use_eres) {
        (true, _) => (1.0, 0.0),
        (false, true) => (model.config.lambda_eres, 1.0),
        (false, false) => (0.0, 1.0),
    };
    Ok(tape.add(tape.mul_scalar(l_rel, w_rel), tape.mul_scalar(heads, w_heads))?)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneTrainReport {
    pub epoch_loss: Vec<f64>,
    /// Mean of the mechanism, side and severity accuracies on validation.
    pub val_head_acc: Vec<f64>,
    pub warmup_epochs: usize,
    /// Epoch whose parameters were kept (best post-warm-up `val_head_acc`,
    /// later epochs winning ties).
    pub best_epoch: usize,
    pub weights: Option<LossWeights>,
}

fn check_samples(samples: &[SceneSample], dims: SceneDims) -> Result<Vec<SceneInputs>> {
    samples
        .iter()
        .map(|s| {
            if !s.entities.is_empty() && SceneDims::of(s) != dims {
                return Err(SceneError::Validation(format!(
                    "sample {} has widths {:?}",
                    s.id,
                    SceneDims::of(s)
                )));
            }
            SceneInputs::from_sample(s)
        })
        .collect()
}

pub fn train_scene(
    config: SceneConfig,
    prior: KnowledgePrior,
    train: &[SceneSample],
    val: &[SceneSample],
) -> Result<(SceneModel, SceneTrainReport)> {
    let first = train
        .iter()
        .find(|s| !s.entities.is_empty())
        .ok_or_else(|| SceneError::Validation("training split has no entities".into()))?;
    let dims = SceneDims::of(first);
    let train_in = check_samples(train, dims)?;
    if let Some(s) = train.iter().chain(val).find(|s| !s.is_labeled()) {
        return Err(unlabeled(s));
    }
    let weights = LossWeights::from_samples(train)?;
    let mut model = SceneModel::new(config, dims, prior)?;
    let cfg = model.config.clone();
    let opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = SceneTrainReport {
        warmup_epochs: cfg.warmup_epochs(),
        weights: Some(weights.clone()),
        ..Default::default()
    };
    let mut best: Option<(f64, crate::tensor::ParamGroup)> = None;
    for epoch in 0..cfg.epochs {
        let warmup = epoch < report.warmup_epochs;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_scenes) {
            let batch: Vec<(&SceneInputs, &SceneSample)> = chunk.iter().map(|&i| (&train_in[i], &train[i])).collect();
            let tape = Tape::new();
            let p = model.params.bind(&tape);
            let loss = batch_loss(&model, &tape, &p, &batch, &weights, warmup)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(SceneError::Divergence { epoch, loss: value });
            }
            let grads = tape.backward(loss);
            model.params.clear_grad();
            model.params.accumulate(&p, &grads);
            opt.step(&mut model.params)?;
            total += value;
            steps += 1;
        }
        let mean = total / steps.max(1) as f64;
        report.epoch_loss.push(mean);
        let acc = if val.is_empty() {
            f64::NAN
        } else {
            let e = evaluate_scenes(&model, val, &[1])?;
            (e.mechanism_acc + e.side_acc + e.severity_acc) / 3.0
        };
        report.val_head_acc.push(acc);
        log::info!("scene epoch {epoch}: loss {mean:.6}, val head acc {acc:.4}");
        let better = best.as_ref().is_none_or(|(b, _)| acc >= *b);
        if !warmup && !acc.is_nan() && better {
            best = Some((acc, model.params.clone()));
            report.best_epoch = epoch;
        }
    }
    match best {
        Some((_, params)) => model.params = params,
        None => report.best_epoch = cfg.epochs.saturating_sub(1),
    }
    Ok((model, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityPrediction {
    pub p_relevant: f64,
    pub selected: bool,
    pub mechanism: Vec<f64>,
    pub side: Vec<f64>,
    pub severity: Vec<f64>,
}

impl EntityPrediction {
    pub fn mechanism_id(&self) -> usize {
        argmax(&self.mechanism)
    }

    pub fn side_id(&self) -> usize {
        argmax(&self.side)
    }

    pub fn severity_id(&self) -> usize {
        argmax(&self.severity)
    }

    /// `p_rel · E[grade]` under the severity distribution.
    pub fn priority(&self) -> f64 {
        let expected: f64 = self
            .severity
            .iter()
            .zip(SEVERITY_GRADES)
            .map(|(p, g)| p * g as f64)
            .sum();
        self.p_relevant * expected
    }
}

/// First index of the maximum.
fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) },
        )
        .0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePrediction {
    pub id: String,
    pub entities: Vec<EntityPrediction>,
}

fn softmax_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|i| {
            let r = t.row(i);
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|x| x / z).collect()
        })
        .collect()
}

pub fn predict(model: &SceneModel, sample: &SceneSample) -> Result<ScenePrediction> {
    let inp = SceneInputs::from_sample(sample)?;
    let tape = Tape::new();
    let p = model.params.bind_frozen(&tape);
    let (eres, _, heads) = model.forward(&tape, &p, &inp)?;
    let logits = tape.value(eres.logits);
    let selected = if model.config.use_eres {
        select_relevant(&logits)
    } else {
        (0..inp.len()).collect()
    };
    let rel = softmax_rows(&logits);
    let mech = softmax_rows(&tape.value(heads.mechanism));
    let side = softmax_rows(&tape.value(heads.side));
    let sev = softmax_rows(&tape.value(heads.severity));
    let entities = (0..inp.len())
        .map(|i| EntityPrediction {
            p_relevant: if model.config.use_eres { rel[i][1] } else { 1.0 },
            selected: selected.contains(&i),
            mechanism: mech[i].clone(),
            side: side[i].clone(),
            severity: sev[i].clone(),
        })
        .collect();
    Ok(ScenePrediction {
        id: sample.id.clone(),
        entities,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEval {
    pub entities: usize,
    pub relevant: usize,
    pub selected: usize,
    pub relevance: ClassificationReport,
    /// Head accuracies over gold-relevant entities.
    pub mechanism_acc: f64,
    pub side_acc: f64,
    pub severity_acc: f64,
    /// Correct mechanisms over the union of gold-relevant and selected
    /// entities: a gold entity must also be selected to count.
    pub end_to_end_mechanism_acc: f64,
    /// Hazard-prioritization ranking by `p_rel · E[grade]`.
    pub ranking: RankingReport,
    /// Triplet retrieval with the mechanism as predicate.
    pub retrieval: RecallReport,
}

pub fn evaluate_scenes(model: &SceneModel, samples: &[SceneSample], ks: &[usize]) -> Result<SceneEval> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let (mut relevant, mut selected) = (0usize, 0usize);
    let (mut mech_ok, mut side_ok, mut sev_ok) = (0usize, 0usize, 0usize);
    let (mut union, mut e2e_ok) = (0usize, 0usize);
    let mut lists = Vec::new();
    let mut triplets = Vec::new();
    for s in samples {
        let pred = predict(model, s)?;
        let mut items = Vec::with_capacity(s.entities.len());
        let mut st = SceneTriplets::default();
        for (i, (e, pe)) in s.entities.iter().zip(&pred.entities).enumerate() {
            let l = e.labels.ok_or_else(|| unlabeled(s))?;
            scores.push(pe.p_relevant);
            labels.push(l.relevant);
            selected += pe.selected as usize;
            if l.relevant || pe.selected {
                union += 1;
            }
            let grade = l.relation.map_or(0, |r| SEVERITY_GRADES[r.severity]);
            items.push((pe.priority(), grade));
            if let Some(r) = l.relation {
                relevant += 1;
                let m_ok = pe.mechanism_id() == r.mechanism;
                mech_ok += m_ok as usize;
                side_ok += (pe.side_id() == r.side) as usize;
                sev_ok += (pe.severity_id() == r.severity) as usize;
                e2e_ok += (m_ok && pe.selected) as usize;
                st.gold.push((i.to_string(), MECHANISMS[r.mechanism].to_string()));
            }
            if pe.selected {
                for (m, pm) in pe.mechanism.iter().enumerate() {
                    st.predicted
                        .push((i.to_string(), MECHANISMS[m].to_string(), pe.p_relevant * pm));
                }
            }
        }
        if !items.is_empty() {
            lists.push(RankedList::from_items(&items)?);
        }
        triplets.push(st);
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(SceneEval {
        entities: scores.len(),
        relevant,
        selected,
        relevance: classification_report(&scores, &labels)?,
        mechanism_acc: ratio(mech_ok, relevant),
        side_acc: ratio(side_ok, relevant),
        severity_acc: ratio(sev_ok, relevant),
        end_to_end_mechanism_acc: ratio(e2e_ok, union),
        ranking: ranking_report(&lists, ks)?,
        retrieval: retrieval_recall(&triplets, ks)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub full: SceneEval,
    /// Zeroed bridge-embedding cue and severity priors.
    pub without_kge: SceneEval,
    /// Every entity passes selection.
    pub without_eres: SceneEval,
}

impl AblationReport {
    /// Both ablations score strictly below the full model.
    pub fn direction_holds(&self) -> bool {
        let full = self.full.end_to_end_mechanism_acc;
        self.without_kge.end_to_end_mechanism_acc < full && self.without_eres.end_to_end_mechanism_acc < full
    }
}

/// Trains and evaluates the full model and both ablations with one config.
pub fn run_ablations(
    config: &SceneConfig,
    prior: &KnowledgePrior,
    train: &[SceneSample],
    val: &[SceneSample],
    test: &[SceneSample],
    ks: &[usize],
) -> Result<AblationReport> {
    let run = |use_kge: bool, use_eres: bool| -> Result<SceneEval> {
        let cfg = SceneConfig {
            use_kge,
            use_eres,
            ..config.clone()
        };
        let (m, _) = train_scene(cfg, prior.clone(), train, val)?;
        evaluate_scenes(&m, test, ks)
    };
    Ok(AblationReport {
        full: run(true, true)?,
        without_kge: run(false, true)?,
        without_eres: run(true, false)?,
    })
}
