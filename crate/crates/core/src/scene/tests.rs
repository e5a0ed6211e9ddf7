use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{gradcheck, init, Tape, Tensor, TensorError, LN_EPS};

// ---------- plain-loop reference pieces ----------

fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let dout = b.len();
    (0..dout)
        .map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i * dout + j]).sum::<f64>())
        .collect()
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + LN_EPS).sqrt() * gain[i] + bias[i])
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

struct Hand<'a>(&'a SceneModel);

impl Hand<'_> {
    fn v(&self, name: &str) -> Vec<f64> {
        self.0.params.value(name).unwrap().data().to_vec()
    }

    fn lin(&self, name: &str, x: &[f64]) -> Vec<f64> {
        affine(x, &self.v(&format!("{name}.w")), &self.v(&format!("{name}.b")))
    }

    fn ln(&self, name: &str, x: &[f64]) -> Vec<f64> {
        layer_norm(x, &self.v(&format!("{name}.gain")), &self.v(&format!("{name}.bias")))
    }

    fn mlp(&self, name: &str, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = self.lin(&format!("{name}.0"), x).into_iter().map(gelu).collect();
        self.lin(&format!("{name}.1"), &h)
    }

    /// Returns `(outputs per query, head-averaged weights per query)`.
    fn mha(&self, name: &str, heads: usize, q: &[Vec<f64>], kv: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let qp: Vec<Vec<f64>> = q.iter().map(|r| self.lin(&format!("{name}.q"), r)).collect();
        let kp: Vec<Vec<f64>> = kv.iter().map(|r| self.lin(&format!("{name}.k"), r)).collect();
        let vp: Vec<Vec<f64>> = kv.iter().map(|r| self.lin(&format!("{name}.v"), r)).collect();
        let d = qp[0].len();
        let dh = d / heads;
        let mut outs = Vec::new();
        let mut weights = Vec::new();
        for qr in &qp {
            let mut cat = vec![0.0; d];
            let mut avg = vec![0.0; kv.len()];
            for h in 0..heads {
                let s: Vec<f64> = kp
                    .iter()
                    .map(|kr| (0..dh).map(|c| qr[h * dh + c] * kr[h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let p = softmax(&s);
                for (j, pj) in p.iter().enumerate() {
                    avg[j] += pj / heads as f64;
                    for c in 0..dh {
                        cat[h * dh + c] += pj * vp[j][h * dh + c];
                    }
                }
            }
            outs.push(self.lin(&format!("{name}.o"), &cat));
            weights.push(avg);
        }
        (outs, weights)
    }

    /// `(logits, weights, fused)` per entity.
    fn eres(&self, inp: &SceneInputs) -> (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>) {
        let m = self.0;
        let path = self.lin("eres.phi_p", &inp.path_rgb);
        let (ctx, w) = self.mha("eres.attn", m.config.eres_heads, &[path.clone()], &inp.embeddings);
        let (ctx, w) = (&ctx[0], &w[0]);
        let gc = self.v("eres.gamma_ctx")[0];
        let gg = self.v("eres.gamma_gate")[0];
        let fused: Vec<Vec<f64>> = inp
            .embeddings
            .iter()
            .enumerate()
            .map(|(o, e)| (0..e.len()).map(|c| e[c] + gc * ctx[c] + gg * w[o] * path[c]).collect())
            .collect();
        let logits = fused
            .iter()
            .enumerate()
            .map(|(o, f)| {
                let mut x = f.clone();
                x.push(w[o]);
                self.mlp("eres.cls", &x)
            })
            .collect();
        (logits, w.clone(), fused)
    }

    /// `(blocks, pair)` per entity.
    fn descriptor(&self, inp: &SceneInputs, rel: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let m = self.0;
        let dp = m.config.d_pair;
        (0..inp.len())
            .map(|o| {
                let mut sem_in = inp.embeddings[o].clone();
                sem_in.extend(&rel[o]);
                let (ov, px) = inp.geometry[o];
                let kge = if m.config.use_kge {
                    self.lin("desc.phi_kge", m.prior.classes.row(inp.classes[o]))
                } else {
                    vec![0.0; dp]
                };
                let blocks: Vec<f64> = [
                    self.lin("desc.phi_vis", &inp.path_vis),
                    self.lin("desc.phi_vis", &inp.vehicle_vis),
                    self.lin("desc.phi_vis", &inp.entity_vis[o]),
                    self.lin("desc.phi_sem", &sem_in),
                    self.lin("desc.phi_geo", &[ov, px]),
                    kge,
                ]
                .concat();
                let g: Vec<f64> = self
                    .mlp("desc.gate", &self.ln("desc.gate_ln", &blocks))
                    .into_iter()
                    .map(sigmoid)
                    .collect();
                let pair = (0..dp)
                    .map(|c| (0..6).map(|b| g[b * dp + c] * blocks[b * dp + c]).sum())
                    .collect();
                (blocks, pair)
            })
            .unzip()
    }

    fn prior(&self, pair: &[f64]) -> Vec<f64> {
        let m = self.0;
        let q = self.lin("prior.align", pair);
        let mut cat = Vec::new();
        for (name, nodes) in &m.prior.groups {
            let rows: Vec<Vec<f64>> = (0..nodes.rows()).map(|i| nodes.row(i).to_vec()).collect();
            let (a, _) = self.mha("prior.attn", m.config.prior_heads, &[q.clone()], &rows);
            cat.extend(self.lin(&format!("prior.phi.{name}"), &a[0]));
        }
        self.ln("prior.ln", &cat)
    }

    /// `(mech, side, sev)` for one entity.
    fn heads(&self, blocks: &[f64], pair: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let m = self.0;
        let dp = m.config.d_pair;
        let a: Vec<f64> = self
            .ln("mech.ln", &self.lin("mech.align", pair))
            .into_iter()
            .map(|x| x.max(0.0))
            .collect();
        let tem = self.v("mech.log_tem")[0].exp();
        let mech = (0..m.prior.mechanisms.rows())
            .map(|j| {
                let pr = m.prior.mechanisms.row(j);
                let dot: f64 = a.iter().zip(pr).map(|(x, y)| x * y).sum();
                let na = (a.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
                let np = (pr.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
                tem * dot / (na * np)
            })
            .collect();
        let img = &blocks[..5 * dp];
        let g: Vec<f64> = self
            .mlp("side.gate", &self.ln("side.gate_ln", img))
            .into_iter()
            .map(sigmoid)
            .collect();
        let fused: Vec<f64> = (0..dp)
            .map(|c| (0..5).map(|b| g[b * dp + c] * img[b * dp + c]).sum())
            .collect();
        let side = self.mlp("side.mlp", &self.ln("side.ln", &fused));
        let mut sev_in = pair.to_vec();
        sev_in.extend(self.prior(pair));
        let h: Vec<f64> = self
            .ln("sev.ln", &self.lin("sev.in", &sev_in))
            .into_iter()
            .map(gelu)
            .collect();
        let sev = self.lin("sev.out", &h);
        (mech, side, sev)
    }
}

// ---------- fixtures ----------

fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap {
        channels: c,
        height: h,
        width: w,
        data: (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    loop {
        let m = Mask::from_fn(h, w, |_, _| false);
        let mut m = m;
        for y in 0..h {
            for x in 0..w {
                m.set(y, x, rng.random_bool(0.4));
            }
        }
        if m.count() > 0 {
            return m;
        }
    }
}

fn toy_sample(seed: u64, entities: usize, embed: usize) -> SceneSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (4, 4);
    let rgb = random_map(&mut rng, 3, h, w);
    let disp = random_map(&mut rng, 2, h, w);
    let path = random_mask(&mut rng, h, w);
    let vehicle = random_mask(&mut rng, h, w);
    let entities = (0..entities)
        .map(|i| {
            let relevant = i % 2 == 0;
            Entity {
                mask: random_mask(&mut rng, h, w),
                embedding: (0..embed).map(|_| rng.random_range(-1.0..1.0)).collect(),
                class: rng.random_range(0..CITYSCAPES_CLASSES.len()),
                labels: Some(EntityLabels {
                    relevant,
                    relation: relevant.then_some(RelationLabel {
                        mechanism: rng.random_range(0..8),
                        side: rng.random_range(0..3),
                        severity: rng.random_range(0..4),
                    }),
                }),
            }
        })
        .collect();
    SceneSample {
        id: format!("toy{seed}"),
        rgb,
        disp,
        path,
        vehicle,
        entities,
    }
}

fn toy_prior(dim: usize, sizes: &[usize]) -> KnowledgePrior {
    let mut rng = init::rng(17);
    let mut p = KnowledgePrior::synthetic(4, dim);
    p.groups = sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| (format!("G{i}"), init::uniform(&mut rng, &[n, dim], 1.0)))
        .collect();
    p
}

fn toy_config() -> SceneConfig {
    SceneConfig {
        d_pair: 4,
        d_prior: 3,
        eres_heads: 2,
        prior_heads: 2,
        seed: 3,
        ..SceneConfig::default()
    }
}

const DIMS: SceneDims = SceneDims {
    rgb: 3,
    disp: 2,
    embed: 8,
};

/// Moves every parameter off its initial value so biases, gains and the
/// scalar gains all take part.
fn jitter(m: &mut SceneModel, seed: u64) {
    let mut rng = init::rng(seed);
    let names: Vec<String> = m.params.names().map(str::to_owned).collect();
    for n in names {
        let base = m.params.value(&n).unwrap().clone();
        let noise = init::uniform(&mut rng, base.shape(), 0.3);
        let data = base.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
        m.params
            .set_value(&n, Tensor::new(base.shape().to_vec(), data).unwrap())
            .unwrap();
    }
}

fn toy_model(sizes: &[usize]) -> SceneModel {
    let mut m = SceneModel::new(toy_config(), DIMS, toy_prior(8, sizes)).unwrap();
    jitter(&mut m, 11);
    m
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn assert_close(a: &[Vec<f64>], b: &[Vec<f64>], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.len(), y.len());
        for (u, v) in x.iter().zip(y) {
            assert!((u - v).abs() <= tol, "{u} vs {v}");
        }
    }
}

fn set(m: &mut SceneModel, name: &str, value: f64) {
    let shape = m.params.value(name).unwrap().shape().to_vec();
    m.params.set_value(name, Tensor::filled(&shape, value)).unwrap();
}

// ---------- pooling and geometry ----------

#[test]
fn masked_pool_examples() {
    let mut f = FeatureMap::zeros(2, 3, 3);
    f.data.iter_mut().for_each(|v| *v = 5.0);
    let m = Mask::from_fn(3, 3, |y, x| y + x < 3);
    for v in masked_pool(&f, &m).unwrap() {
        assert!((v - 5.0).abs() < 1e-6);
    }
    assert_eq!(masked_pool(&f, &Mask::empty(3, 3)).unwrap(), vec![0.0, 0.0]);
    assert!(masked_pool(&f, &Mask::empty(2, 3)).is_err());
}

proptest! {
    #[test]
    fn masked_pool_matches_loop(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_map(&mut rng, 4, 3, 3);
        let bits: Vec<bool> = (0..9).map(|_| rng.random_bool(0.5)).collect();
        let m = Mask::from_fn(3, 3, |y, x| bits[y * 3 + x]);
        let got = masked_pool(&f, &m).unwrap();
        for c in 0..4 {
            let mut num = 0.0;
            let mut den = 0.0;
            for y in 0..3 {
                for x in 0..3 {
                    let mv = if bits[y * 3 + x] { 1.0 } else { 0.0 };
                    num += f.data[c * 9 + y * 3 + x] * mv;
                    den += mv;
                }
            }
            prop_assert!((got[c] - num / (den + 1e-6)).abs() <= 1e-12);
        }
    }

    #[test]
    fn mask_pack_round_trips(h in 1usize..7, w in 1usize..7, seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bits: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.5)).collect();
        let m = Mask::from_fn(h, w, |y, x| bits[y * w + x]);
        prop_assert_eq!(Mask::unpack(h, w, &m.pack()).unwrap(), m);
    }

    #[test]
    fn mechanism_logits_ignore_positive_scale(seed in 0u64..200, s in 0.01f64..100.0) {
        let mut rng = init::rng(seed);
        let a = init::uniform(&mut rng, &[1, 6], 1.0);
        let protos = init::uniform(&mut rng, &[8, 6], 1.0);
        let scaled = Tensor::new(vec![1, 6], a.data().iter().map(|v| v * s).collect()).unwrap();
        let tape = Tape::new();
        let lt = tape.constant(Tensor::scalar(1.3));
        let pr = tape.constant(protos);
        let x = tape.value(mechanism_logits(&tape, tape.constant(a), pr, lt).unwrap());
        let y = tape.value(mechanism_logits(&tape, tape.constant(scaled), pr, lt).unwrap());
        prop_assert!(x.max_abs_diff(&y) <= 1e-9);
        prop_assert_eq!(argmax(x.data()), argmax(y.data()));
    }
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

#[test]
fn geometry_examples() {
    let path = Mask::from_fn(6, 6, |y, _| y >= 3);
    let inside = Mask::from_fn(6, 6, |y, x| y == 4 && x < 2);
    let outside = Mask::from_fn(6, 6, |y, x| y == 0 && x < 2);
    assert_eq!(compute_geometry(&inside, &path, &inside).0, 1.0);
    assert_eq!(compute_geometry(&outside, &path, &inside).0, 0.0);
    // same centroid (4, 0.5) for both masks
    assert_eq!(compute_geometry(&inside, &path, &inside).1, 1.0);
    let (_, px) = compute_geometry(&outside, &path, &inside);
    assert!((px - (1.0 - 4.0 / 72f64.sqrt())).abs() < 1e-12);
    assert_eq!(compute_geometry(&Mask::empty(6, 6), &path, &inside), (0.0, 0.0));
    assert_eq!(compute_geometry(&inside, &path, &Mask::empty(6, 6)), (1.0, 0.0));
}

// ---------- relevance selection ----------

#[test]
fn single_entity_gets_all_attention() {
    let m = toy_model(&[2, 3]);
    let inp = SceneInputs::from_sample(&toy_sample(1, 1, 8)).unwrap();
    let tape = Tape::new();
    let p = m.params.bind_frozen(&tape);
    let out = m.eres(&tape, &p, &inp).unwrap();
    assert_eq!(tape.value(out.weights).data(), &[1.0]);
}

#[test]
fn zero_gammas_leave_embeddings() {
    let mut m = toy_model(&[2, 3]);
    set(&mut m, "eres.gamma_ctx", 0.0);
    set(&mut m, "eres.gamma_gate", 0.0);
    let inp = SceneInputs::from_sample(&toy_sample(2, 3, 8)).unwrap();
    let tape = Tape::new();
    let p = m.params.bind_frozen(&tape);
    let out = m.eres(&tape, &p, &inp).unwrap();
    assert_eq!(rows(&tape.value(out.fused)), inp.embeddings);
}

#[test]
fn eres_matches_hand_computation() {
    let m = toy_model(&[2, 3]);
    let inp = SceneInputs::from_sample(&toy_sample(3, 2, 8)).unwrap();
    let tape = Tape::new();
    let p = m.params.bind_frozen(&tape);
    let out = m.eres(&tape, &p, &inp).unwrap();
    let (logits, w, fused) = Hand(&m).eres(&inp);
    assert_close(&rows(&tape.value(out.logits)), &logits, 1e-9);
    assert_close(&rows(&tape.value(out.weights)), &[w.clone()], 1e-9);
    assert_close(&rows(&tape.value(out.fused)), &fused, 1e-9);
    assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
}

#[test]
fn attention_rows_sum_to_one() {
    let m = toy_model(&[2, 3]);
    for seed in 0..10 {
        let inp = SceneInputs::from_sample(&toy_sample(seed, 1 + seed as usize % 6, 8)).unwrap();
        let tape = Tape::new();
        let p = m.params.bind_frozen(&tape);
        let w = tape.value(m.eres(&tape, &p, &inp).unwrap().weights);
        assert!((w.data().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn selection_rule() {
    let t = Tensor::from_rows(&[vec![0.2, 0.9], vec![0.9, 0.2], vec![0.5, 0.5]]).unwrap();
    assert_eq!(select_relevant(&t), vec![0]);
    let kept = Tensor::from_rows(&[vec![0.2, 0.9]]).unwrap();
    assert_eq!(select_relevant(&kept), vec![0]);
}

proptest! {
    #[test]
    fn selection_is_idempotent(vals in prop::collection::vec(-3.0f64..3.0, 0..20)) {
        let n = vals.len() / 2;
        let t = Tensor::new(vec![n, 2], vals[..2 * n].to_vec()).unwrap();
        let first = select_relevant(&t);
        let sub = Tensor::from_rows(&first.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let sub = if first.is_empty() { Tensor::zeros(&[0, 2]) } else { sub };
        prop_assert_eq!(select_relevant(&sub), (0..first.len()).collect::<Vec<_>>());
    }
}

/// With both gains at zero and the classifier ignoring the attention
/// weight column, a duplicated entity cannot change the originals' fate.
#[test]
fn duplicate_entity_keeps_selection() {
    let mut m = toy_model(&[2, 3]);
    set(&mut m, "eres.gamma_ctx", 0.0);
    set(&mut m, "eres.gamma_gate", 0.0);
    let mut w1 = m.params.value("eres.cls.0.w").unwrap().clone();
    let cols = w1.cols();
    let d = DIMS.embed;
    w1.data_mut()[d * cols..].iter_mut().for_each(|v| *v = 0.0);
    m.params.set_value("eres.cls.0.w", w1).unwrap();
    for seed in 0..20 {
        let s = toy_sample(seed, 4, 8);
        let mut dup = s.clone();
        dup.entities.push(s.entities[seed as usize % 4].clone());
        let sel = |s: &SceneSample| {
            let tape = Tape::new();
            let p = m.params.bind_frozen(&tape);
            let inp = SceneInputs::from_sample(s).unwrap();
            select_relevant(&tape.value(m.eres(&tape, &p, &inp).unwrap().logits))
        };
        let a = sel(&s);
        let b: Vec<usize> = sel(&dup).into_iter().filter(|&i| i < 4).collect();
        assert_eq!(a, b);
    }
}

#[test]
fn zero_entities_give_empty_outputs() {
    let m = toy_model(&[2, 3]);
    let mut s = toy_sample(4, 2, 8);
    s.entities.clear();
    let inp = SceneInputs::from_sample(&s).unwrap();
    let tape = Tape::new();
    let p = m.params.bind_frozen(&tape);
    let (e, d, h) = m.forward(&tape, &p, &inp).unwrap();
    assert_eq!(tape.shape(e.logits), vec![0, 2]);
    assert_eq!(tape.shape(d.pair), vec![0, 4]);
    assert_eq!(tape.shape(h.mechanism), vec![0, 8]);
    let pred = predict(&m, &s).unwrap();
    assert!(pred.entities.is_empty());
}

// ---------- descriptor ----------

fn descriptor_of(m: &SceneModel, inp: &SceneInputs) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let tape = Tape::new();
    let p = m.params.bind_frozen(&tape);
    let e = m.eres(&tape, &p, inp).unwrap();
    let d = m.descriptor(&tape, &p, inp, e.logits).unwrap();
    (
        rows(&tape.value(d.blocks)),
        rows(&tape.value(d.gates)),
        rows(&tape.value(d.pair)),
    )
}

#[test]
fn closed_gates_give_zero_pair() {
    let mut m = toy_model(&[2, 3]);
    set(&mut m, "desc.gate.1.w", 0.0);
    set(&mut m, "desc.gate.1.b", -1e3);
    let inp = SceneInputs::from_sample(&toy_sample(5, 3, 8)).unwrap();
    let (_, _, pair) = descriptor_of(&m, &inp);
    assert!(pair.iter().flatten().all(|v| v.abs() < 1e-12));
}

#[test]
fn half_open_gates_on_equal_blocks_give_three_v() {
    let mut m = toy_model(&[2, 3]);
    let v = [0.5, -1.0, 2.0, 0.25];
    for name in ["desc.phi_vis", "desc.phi_sem", "desc.phi_geo", "desc.phi_kge"] {
        set(&mut m, &format!("{name}.w"), 0.0);
        m.params
            .set_value(&format!("{name}.b"), Tensor::vector(v.to_vec()))
            .unwrap();
    }
    set(&mut m, "desc.gate.1.w", 0.0);
    set(&mut m, "desc.gate.1.b", 0.0);
    let inp = SceneInputs::from_sample(&toy_sample(6, 3, 8)).unwrap();
    let (_, gates, pair) = descriptor_of(&m, &inp);
    assert!(gates.iter().flatten().all(|&g| g == 0.5));
    let want: Vec<Vec<f64>> = (0..3).map(|_| v.iter().map(|x| 3.0 * x).collect()).collect();
    assert_close(&pair, &want, 1e-12);
}

#[test]
fn descriptor_matches_hand_computation() {
    let m = toy_model(&[2, 3]);
    let inp = SceneInputs::from_sample(&toy_sample(7, 3, 8)).unwrap();
    let (blocks, gates, pair) = descriptor_of(&m, &inp);
    let hand = Hand(&m);
    let (logits, _, _) = hand.eres(&inp);
    let (hb, hp) = hand.descriptor(&inp, &logits);
    assert_close(&blocks, &hb, 1e-9);
    assert_close(&pair, &hp, 1e-9);
    assert!(gates.iter().flatten().all(|&g| g > 0.0 && g < 1.0));
    assert!(pair.iter().flatten().all(|v| v.is_finite()));
}

#[test]
fn disabled_kge_zeroes_its_block_and_priors() {
    let mut cfg = toy_config();
    cfg.use_kge = false;
    let mut m = SceneModel::new(cfg, DIMS, toy_prior(8, &[2, 3])).unwrap();
    jitter(&mut m, 2);
    let inp = SceneInputs::from_sample(&toy_sample(8, 3, 8)).unwrap();
    let (blocks, _, _) = descriptor_of(&m, &inp);
    assert!(blocks.iter().all(|b| b[20..].iter().all(|&v| v == 0.0)));
    let tape = Tape::new();
    let p = m.params.bind_frozen(&tape);
    let (_, _, h) = m.forward(&tape, &p, &inp).unwrap();
    assert!(tape.value(h.prior).data().iter().all(|&v| v == 0.0));
}

// ---------- priors and heads ----------

#[test]
fn single_node_groups_ignore_the_query() {
    let m = toy_model(&[1, 1]);
    let hand = Hand(&m);
    let tape = Tape::new();
    let p = m.params.bind_frozen(&tape);
    let pair = tape.constant(Tensor::from_rows(&[vec![1.0, -2.0, 0.5, 3.0], vec![-4.0, 0.1, 0.0, 2.0]]).unwrap());
    let out = rows(&tape.value(m.priors(&tape, &p, pair).unwrap()));
    assert_close(&[out[0].clone()], &[out[1].clone()], 1e-12);
    let mut cat = Vec::new();
    for (name, nodes) in &m.prior.groups {
        let value = hand.lin("prior.attn.o", &hand.lin("prior.attn.v", nodes.row(0)));
        cat.extend(hand.lin(&format!("prior.phi.{name}"), &value));
    }
    assert_close(&[out[0].clone()], &[hand.ln("prior.ln", &cat)], 1e-9);
}

#[test]
fn prior_width_is_groups_times_projection() {
    let m = SceneModel::new(toy_config(), DIMS, KnowledgePrior::synthetic(1, 8)).unwrap();
    let tape = Tape::new();
    let p = m.params.bind_frozen(&tape);
    let pair = tape.constant(Tensor::filled(&[2, 4], 0.3));
    assert_eq!(tape.shape(m.priors(&tape, &p, pair).unwrap()), vec![2, 7 * 3]);
}

#[test]
fn two_group_priors_match_hand_computation() {
    let m = toy_model(&[2, 3]);
    let tape = Tape::new();
    let p = m.params.bind_frozen(&tape);
    let pairs = vec![vec![0.3, -0.7, 1.1, 0.2], vec![-1.0, 0.4, 0.0, 0.9]];
    let out = rows(
        &tape.value(
            m.priors(&tape, &p, tape.constant(Tensor::from_rows(&pairs).unwrap()))
                .unwrap(),
        ),
    );
    let hand: Vec<Vec<f64>> = pairs.iter().map(|q| Hand(&m).prior(q)).collect();
    assert_close(&out, &hand, 1e-9);
}

#[test]
fn mechanism_cosine_properties() {
    let tape = Tape::new();
    let protos = Tensor::from_rows(&[vec![1.0, 0.0, 2.0], vec![0.0, 1.0, 0.0], vec![3.0, 3.0, 0.0]]).unwrap();
    let lt = tape.constant(Tensor::scalar(2.0f64.ln()));
    let a = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0, 2.0]]).unwrap());
    let s = tape.value(mechanism_logits(&tape, a, tape.constant(protos), lt).unwrap());
    assert!((s.data()[0] - 2.0).abs() <= 1e-9);
    assert!(s.data()[1] < s.data()[0] && s.data()[2] < s.data()[0]);

    let same = Tensor::from_rows(&vec![vec![0.4, -1.0, 2.0]; 8]).unwrap();
    let a = tape.constant(Tensor::from_rows(&[vec![0.3, 0.2, -0.1]]).unwrap());
    let s = tape.value(mechanism_logits(&tape, a, tape.constant(same), lt).unwrap());
    assert!(s.data().iter().all(|&v| v == s.data()[0]));
}

#[test]
fn full_heads_match_hand_computation() {
    let m = toy_model(&[2, 3]);
    let inp = SceneInputs::from_sample(&toy_sample(9, 3, 8)).unwrap();
    let tape = Tape::new();
    let p = m.params.bind_frozen(&tape);
    let (_, _, h) = m.forward(&tape, &p, &inp).unwrap();
    let hand = Hand(&m);
    let (logits, _, _) = hand.eres(&inp);
    let (blocks, pairs) = hand.descriptor(&inp, &logits);
    let (mut mech, mut side, mut sev) = (vec![], vec![], vec![]);
    for (b, pr) in blocks.iter().zip(&pairs) {
        let (x, y, z) = hand.heads(b, pr);
        mech.push(x);
        side.push(y);
        sev.push(z);
    }
    assert_close(&rows(&tape.value(h.mechanism)), &mech, 1e-9);
    assert_close(&rows(&tape.value(h.side)), &side, 1e-9);
    assert_close(&rows(&tape.value(h.severity)), &sev, 1e-9);
}

#[test]
fn severity_depends_on_the_prior() {
    let m = toy_model(&[2, 3]);
    let mut rng = init::rng(21);
    let pair = init::uniform(&mut rng, &[3, 4], 1.0);
    let prior = init::uniform(&mut rng, &[3, 6], 1.0);
    let tape = Tape::new();
    let p = m.params.bind_frozen(&tape);
    let pv = tape.var(prior.clone());
    let s = m.severity(&tape, &p, tape.constant(pair.clone()), pv).unwrap();
    let g = tape.backward(tape.sum(s)).wrt(pv);
    assert!(g.data().iter().any(|v| v.abs() > 1e-6));
    let shifted = Tensor::new(
        prior.shape().to_vec(),
        prior.data().iter().map(|v| v + 0.5 * v.sin()).collect(),
    )
    .unwrap();
    let s2 = m
        .severity(&tape, &p, tape.constant(pair), tape.constant(shifted))
        .unwrap();
    assert!(tape.value(s).max_abs_diff(&tape.value(s2)) > 1e-6);
}

// ---------- losses and training ----------

fn toy_batch() -> (Vec<SceneSample>, Vec<SceneInputs>) {
    let samples: Vec<SceneSample> = (0..2).map(|i| toy_sample(30 + i, 3, 8)).collect();
    let inputs = samples.iter().map(|s| SceneInputs::from_sample(s).unwrap()).collect();
    (samples, inputs)
}

fn to_tensor_err(e: SceneError) -> TensorError {
    match e {
        SceneError::Tensor(t) => t,
        other => TensorError::Validation(other.to_string()),
    }
}

#[test]
fn end_to_end_gradient_check() {
    let m = toy_model(&[2, 3]);
    let (samples, inputs) = toy_batch();
    let batch: Vec<_> = inputs.iter().zip(&samples).collect();
    let weights = LossWeights::from_samples(&samples).unwrap();
    let err = gradcheck::check_params(
        &m.params,
        |tape, p| batch_loss(&m, tape, p, &batch, &weights, false).map_err(to_tensor_err),
        |name, i| (i * 5 + name.len()) % 4 == 0,
    )
    .unwrap();
    assert!(err <= 1e-3, "relative error {err}");
}

#[test]
fn warmup_zeroes_head_gradients() {
    let mut m = toy_model(&[2, 3]);
    let (samples, inputs) = toy_batch();
    let batch: Vec<_> = inputs.iter().zip(&samples).collect();
    let weights = LossWeights::from_samples(&samples).unwrap();
    let tape = Tape::new();
    let p = m.params.bind(&tape);
    let loss = batch_loss(&m, &tape, &p, &batch, &weights, true).unwrap();
    let grads = tape.backward(loss);
    m.params.clear_grad();
    m.params.accumulate(&p, &grads);
    let heads = m.head_params();
    assert!(!heads.is_empty());
    for (name, param) in m.params.iter() {
        let g = param.grad.as_ref().unwrap();
        if heads.iter().any(|h| h == name) {
            assert!(g.data().iter().all(|&v| v == 0.0), "{name}");
        }
    }
    assert!(m
        .params
        .param("eres.cls.1.w")
        .unwrap()
        .grad
        .as_ref()
        .unwrap()
        .data()
        .iter()
        .any(|&v| v != 0.0));
}

#[test]
fn phase_two_loss_is_weighted_sum() {
    let (samples, inputs) = toy_batch();
    let batch: Vec<_> = inputs.iter().zip(&samples).collect();
    let weights = LossWeights::from_samples(&samples).unwrap();
    let loss_at = |lambda: f64| {
        let mut m = toy_model(&[2, 3]);
        m.config.lambda_eres = lambda;
        let tape = Tape::new();
        let p = m.params.bind_frozen(&tape);
        let l = batch_loss(&m, &tape, &p, &batch, &weights, false).unwrap();
        tape.scalar(l)
    };
    let (l0, l1, l) = (loss_at(0.0), loss_at(1.0), loss_at(0.1));
    assert!((l - (l0 + 0.1 * (l1 - l0))).abs() <= 1e-12);
    assert_eq!(SceneConfig::default().lambda_eres, 0.1);
    assert_eq!(SceneConfig::default().focal_gamma, 2.0);
    assert_eq!(
        SceneConfig {
            epochs: 30,
            ..Default::default()
        }
        .warmup_epochs(),
        6
    );
}

#[test]
fn class_weights_are_mean_one_inverse_frequency() {
    assert_eq!(class_weights(&[1, 3], "t"), vec![1.5, 0.5]);
    let w = class_weights(&[2, 0, 6], "t");
    assert_eq!(w, vec![1.5, 1.5, 0.5]);
    assert_eq!(class_weights(&[0, 0], "t"), vec![1.0, 1.0]);
}

#[test]
fn short_training_runs_and_checkpoints_round_trip() {
    let cfg = synth::SynthSceneConfig {
        train: 6,
        val: 2,
        test: 2,
        embed_dim: 8,
        ..Default::default()
    };
    let data = synth::generate(&cfg).unwrap();
    let sc = SceneConfig {
        epochs: 3,
        ..toy_config()
    };
    let (m, report) = train_scene(sc, KnowledgePrior::synthetic(2, 8), &data.train, &data.val).unwrap();
    assert_eq!(report.epoch_loss.len(), 3);
    assert_eq!(report.warmup_epochs, 1);
    assert!(report.best_epoch >= 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene.ckpt");
    m.save(&path).unwrap();
    let back = SceneModel::load(&path, KnowledgePrior::synthetic(2, 8)).unwrap();
    assert_eq!(
        predict(&back, &data.test[0]).unwrap(),
        predict(&m, &data.test[0]).unwrap()
    );
    let eval = evaluate_scenes(&m, &data.test, &[1, 3]).unwrap();
    assert!(eval.entities > 0 && eval.end_to_end_mechanism_acc <= 1.0);
}

#[test]
fn config_validation() {
    assert!(SceneConfig::default().validate().is_ok());
    for bad in [
        SceneConfig {
            d_pair: 0,
            ..Default::default()
        },
        SceneConfig {
            warmup_frac: 1.5,
            ..Default::default()
        },
        SceneConfig {
            lr: 0.0,
            ..Default::default()
        },
        SceneConfig {
            batch_scenes: 0,
            ..Default::default()
        },
    ] {
        assert!(matches!(bad.validate(), Err(SceneError::Config(_))));
    }
    let mut prior = toy_prior(8, &[2]);
    prior.groups[0].1 = Tensor::zeros(&[0, 8]);
    assert!(SceneModel::new(toy_config(), DIMS, prior).is_err());
    let odd = SceneConfig {
        prior_heads: 3,
        ..toy_config()
    };
    assert!(SceneModel::new(odd, DIMS, toy_prior(8, &[2])).is_err());
}

#[test]
fn prior_from_embeddings_requires_bridges_and_groups() {
    use crate::kge::Embeddings;
    let mut ids = Vec::new();
    for c in CITYSCAPES_CLASSES {
        ids.push(format!("CITYSCAPES:{c}"));
    }
    for m in MECHANISMS {
        ids.push(format!("MECHANISM:{m}"));
    }
    for g in PRIOR_GROUPS {
        ids.push(format!("{g}:a"));
        ids.push(format!("{g}:b"));
    }
    let rows: Vec<Vec<f64>> = (0..ids.len()).map(|i| vec![i as f64, 1.0]).collect();
    let emb = Embeddings::new(ids.clone(), rows.clone()).unwrap();
    let p = KnowledgePrior::from_embeddings(&emb).unwrap();
    assert_eq!(p.classes.row(13), &[13.0, 1.0]);
    assert_eq!(p.mechanisms.row(0), &[19.0, 1.0]);
    assert_eq!(p.groups.len(), 7);
    assert_eq!(p.groups[3].1.rows(), 2);

    let keep: Vec<usize> = (0..ids.len()).filter(|&i| ids[i] != "CITYSCAPES:car").collect();
    let emb = Embeddings::new(
        keep.iter().map(|&i| ids[i].clone()).collect(),
        keep.iter().map(|&i| rows[i].clone()).collect(),
    )
    .unwrap();
    assert!(matches!(
        KnowledgePrior::from_embeddings(&emb),
        Err(SceneError::Config(_))
    ));

    let keep: Vec<usize> = (0..ids.len()).filter(|&i| !ids[i].starts_with("DAMSEV:")).collect();
    let emb = Embeddings::new(
        keep.iter().map(|&i| ids[i].clone()).collect(),
        keep.iter().map(|&i| rows[i].clone()).collect(),
    )
    .unwrap();
    assert!(matches!(
        KnowledgePrior::from_embeddings(&emb),
        Err(SceneError::Config(_))
    ));
}

// ---------- archive ----------

#[test]
fn archive_round_trip() {
    let data = synth::generate(&synth::SynthSceneConfig {
        train: 3,
        val: 0,
        test: 0,
        ..Default::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    for s in &data.train {
        s.save(dir.path()).unwrap();
    }
    let back = load_dir(dir.path()).unwrap();
    assert_eq!(back, data.train);

    let mut unlabeled = data.train[0].clone();
    unlabeled.id = "u".into();
    unlabeled.entities.iter_mut().for_each(|e| e.labels = None);
    let path = unlabeled.save(dir.path()).unwrap();
    assert_eq!(SceneSample::load(&path).unwrap(), unlabeled);

    std::fs::write(&path, b"NOTASCNE").unwrap();
    assert!(matches!(SceneSample::load(&path), Err(SceneError::Archive(_))));
}

#[test]
fn sample_validation() {
    let mut s = toy_sample(40, 2, 8);
    assert!(s.validate().is_ok());
    s.entities[0].labels = None;
    assert!(s.validate().is_err());
    let mut s = toy_sample(40, 2, 8);
    s.entities[1].labels = Some(EntityLabels {
        relevant: true,
        relation: None,
    });
    assert!(s.validate().is_err());
    let mut s = toy_sample(40, 2, 8);
    s.path = Mask::empty(3, 4);
    assert!(s.validate().is_err());
}
