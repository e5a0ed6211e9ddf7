//! Relevance selection, pair descriptor, prior aggregator and relation heads.

use serde::{Deserialize, Serialize};

use super::{KnowledgePrior, Result, SceneConfig, SceneError, SceneInputs, MECHANISMS, SEVERITIES, SIDES};
use crate::tensor::init;
use crate::tensor::nn::{Activation, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::tensor::{checkpoint, Bound, ParamGroup, Tape, Tensor, Var};

/// Number of descriptor blocks, and of image-based ones used by the side head.
pub const BLOCKS: usize = 6;
pub const IMAGE_BLOCKS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneDims {
    pub rgb: usize,
    pub disp: usize,
    /// Decoder embedding width.
    pub embed: usize,
}

impl SceneDims {
    pub fn of(sample: &super::SceneSample) -> Self {
        Self {
            rgb: sample.rgb.channels,
            disp: sample.disp.channels,
            embed: sample.embed_dim(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EresOutput {
    /// `O × 2` relevance logits.
    pub logits: Var,
    /// `1 × O` head-averaged attention of the path token.
    pub weights: Var,
    /// `1 × D` path-conditioned entity summary.
    pub context: Var,
    /// `1 × D` path token.
    pub path: Var,
    /// `O × D`.
    pub fused: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Descriptor {
    /// `O × 6·Dp`: `[h_ep | h_ev | h_vis | h_sem | h_geo | h_kge]`.
    pub blocks: Var,
    /// `O × 6·Dp`, in `(0, 1)`.
    pub gates: Var,
    /// `O × Dp`.
    pub pair: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub mechanism: Var,
    pub side: Var,
    pub severity: Var,
    pub prior: Var,
}

/// Entities whose relevant-class logit strictly exceeds the other one.
pub fn select_relevant(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .filter(|&i| {
            let r = logits.row(i);
            r[1] > r[0]
        })
        .collect()
}

/// `tem · cos(a_i, proto_j)` with `tem = exp(log_tem)`.
pub fn mechanism_logits(tape: &Tape, aligned: Var, prototypes: Var, log_tem: Var) -> Result<Var> {
    let a = tape.normalize_rows(aligned);
    let pr = tape.normalize_rows(prototypes);
    let cos = tape.matmul_nt(a, pr)?;
    Ok(tape.scale(cos, tape.exp(log_tem))?)
}

/// `k` stacked `d × d` identities: right-multiplying sums `k` column blocks.
fn block_sum_matrix(k: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[k * d, d]);
    for b in 0..k {
        for i in 0..d {
            t.data_mut()[(b * d + i) * d + i] = 1.0;
        }
    }
    t
}

#[derive(Clone, Debug)]
pub struct SceneModel {
    pub config: SceneConfig,
    pub dims: SceneDims,
    pub prior: KnowledgePrior,
    pub params: ParamGroup,
    pub phi_p: Linear,
    pub eres_attn: MultiHeadAttention,
    pub gamma_ctx: String,
    pub gamma_gate: String,
    pub eres_mlp: Mlp,
    pub phi_vis: Linear,
    pub phi_sem: Linear,
    pub phi_geo: Linear,
    pub phi_kge: Linear,
    pub gate_ln: LayerNorm,
    pub gate: Mlp,
    pub mech_align: Linear,
    pub mech_ln: LayerNorm,
    pub log_tem: String,
    pub side_gate_ln: LayerNorm,
    pub side_gate: Mlp,
    pub side_ln: LayerNorm,
    pub side_mlp: Mlp,
    pub prior_align: Linear,
    pub prior_attn: MultiHeadAttention,
    pub phi_prior: Vec<Linear>,
    pub prior_ln: LayerNorm,
    pub sev_in: Linear,
    pub sev_ln: LayerNorm,
    pub sev_out: Linear,
}

impl SceneModel {
    pub fn new(config: SceneConfig, dims: SceneDims, prior: KnowledgePrior) -> Result<Self> {
        config.validate()?;
        prior.validate()?;
        if dims.rgb == 0 || dims.disp == 0 || dims.embed == 0 {
            return Err(SceneError::Config(format!("feature widths must be positive: {dims:?}")));
        }
        let mut g = ParamGroup::new();
        let mut rng = init::rng(config.seed);
        let (d, dp, dk) = (dims.embed, config.d_pair, prior.dim);
        let vis = dims.rgb + dims.disp;
        let gp = prior.groups.len() * config.d_prior;
        let gelu = Activation::Gelu;
        let gamma_ctx = "eres.gamma_ctx".to_string();
        let gamma_gate = "eres.gamma_gate".to_string();
        let log_tem = "mech.log_tem".to_string();
        let phi_p = Linear::new(&mut g, &mut rng, "eres.phi_p", dims.rgb, d)?;
        let eres_attn = MultiHeadAttention::new(&mut g, &mut rng, "eres.attn", d, config.eres_heads)?;
        g.insert(&gamma_ctx, Tensor::scalar(0.5))?;
        g.insert(&gamma_gate, Tensor::scalar(0.5))?;
        let eres_mlp = Mlp::new(&mut g, &mut rng, "eres.cls", (d + 1, d, 2), gelu)?;
        let phi_vis = Linear::new(&mut g, &mut rng, "desc.phi_vis", vis, dp)?;
        let phi_sem = Linear::new(&mut g, &mut rng, "desc.phi_sem", d + 2, dp)?;
        let phi_geo = Linear::new(&mut g, &mut rng, "desc.phi_geo", 2, dp)?;
        let phi_kge = Linear::new(&mut g, &mut rng, "desc.phi_kge", dk, dp)?;
        let gate_ln = LayerNorm::new(&mut g, "desc.gate_ln", BLOCKS * dp)?;
        let gate = Mlp::new(&mut g, &mut rng, "desc.gate", (BLOCKS * dp, 2 * dp, BLOCKS * dp), gelu)?;
        let mech_align = Linear::new(&mut g, &mut rng, "mech.align", dp, dk)?;
        let mech_ln = LayerNorm::new(&mut g, "mech.ln", dk)?;
        g.insert(&log_tem, Tensor::scalar(10f64.ln()))?;
        let side_gate_ln = LayerNorm::new(&mut g, "side.gate_ln", IMAGE_BLOCKS * dp)?;
        let side_gate = Mlp::new(
            &mut g,
            &mut rng,
            "side.gate",
            (IMAGE_BLOCKS * dp, 2 * dp, IMAGE_BLOCKS * dp),
            gelu,
        )?;
        let side_ln = LayerNorm::new(&mut g, "side.ln", dp)?;
        let side_mlp = Mlp::new(&mut g, &mut rng, "side.mlp", (dp, dp, SIDES.len()), gelu)?;
        let prior_align = Linear::new(&mut g, &mut rng, "prior.align", dp, dk)?;
        let prior_attn = MultiHeadAttention::new(&mut g, &mut rng, "prior.attn", dk, config.prior_heads)?;
        let phi_prior = prior
            .groups
            .iter()
            .map(|(name, _)| Linear::new(&mut g, &mut rng, &format!("prior.phi.{name}"), dk, config.d_prior))
            .collect::<Result<Vec<_>, _>>()?;
        let prior_ln = LayerNorm::new(&mut g, "prior.ln", gp)?;
        let sev_in = Linear::new(&mut g, &mut rng, "sev.in", dp + gp, dp)?;
        let sev_ln = LayerNorm::new(&mut g, "sev.ln", dp)?;
        let sev_out = Linear::new(&mut g, &mut rng, "sev.out", dp, SEVERITIES.len())?;
        Ok(Self {
            config,
            dims,
            prior,
            params: g,
            phi_p,
            eres_attn,
            gamma_ctx,
            gamma_gate,
            eres_mlp,
            phi_vis,
            phi_sem,
            phi_geo,
            phi_kge,
            gate_ln,
            gate,
            mech_align,
            mech_ln,
            log_tem,
            side_gate_ln,
            side_gate,
            side_ln,
            side_mlp,
            prior_align,
            prior_attn,
            phi_prior,
            prior_ln,
            sev_in,
            sev_ln,
            sev_out,
        })
    }

    /// Names of every parameter outside the relevance module.
    pub fn head_params(&self) -> Vec<String> {
        self.params
            .names()
            .filter(|n| !n.starts_with("eres."))
            .map(str::to_owned)
            .collect()
    }

    fn check_inputs(&self, inp: &SceneInputs) -> Result<()> {
        let vis = self.dims.rgb + self.dims.disp;
        let ok = inp.path_rgb.len() == self.dims.rgb
            && inp.path_vis.len() == vis
            && inp.vehicle_vis.len() == vis
            && inp.entity_vis.iter().all(|v| v.len() == vis)
            && inp.embeddings.iter().all(|e| e.len() == self.dims.embed)
            && inp.entity_vis.len() == inp.len()
            && inp.geometry.len() == inp.len()
            && inp.classes.len() == inp.len();
        if !ok {
            return Err(SceneError::Validation(format!(
                "scene inputs do not match model widths {:?}",
                self.dims
            )));
        }
        Ok(())
    }

    /// Path token, cross-attention over entities, fused features and
    /// relevance logits. Zero entities give zero-row outputs.
    pub fn eres(&self, tape: &Tape, p: &Bound, inp: &SceneInputs) -> Result<EresOutput> {
        self.check_inputs(inp)?;
        let d = self.dims.embed;
        let o = inp.len();
        let path = self.phi_p.forward(
            tape,
            p,
            tape.constant(Tensor::new(vec![1, self.dims.rgb], inp.path_rgb.clone())?),
        )?;
        if o == 0 {
            return Ok(EresOutput {
                logits: tape.constant(Tensor::zeros(&[0, 2])),
                weights: tape.constant(Tensor::zeros(&[1, 0])),
                context: tape.constant(Tensor::zeros(&[1, d])),
                path,
                fused: tape.constant(Tensor::zeros(&[0, d])),
            });
        }
        let e = tape.constant(Tensor::from_rows(&inp.embeddings)?);
        let (context, weights) = self.eres_attn.forward(tape, p, path, e, e, 1)?;
        let ctx_rows = tape.gather_rows(context, &vec![0; o])?;
        let ctx = tape.scale(ctx_rows, p.get(&self.gamma_ctx)?)?;
        let gated = tape.matmul_tn(weights, path)?;
        let gated = tape.scale(gated, p.get(&self.gamma_gate)?)?;
        let fused = tape.add(tape.add(e, ctx)?, gated)?;
        let wt = tape.transpose(weights)?;
        let logits = self.eres_mlp.forward(tape, p, tape.concat_cols(&[fused, wt])?)?;
        Ok(EresOutput {
            logits,
            weights,
            context,
            path,
            fused,
        })
    }

    /// The six projected cues, their gates and the fused pair vector.
    /// `relevance` is the `O × 2` logit block fed to the semantic cue.
    pub fn descriptor(&self, tape: &Tape, p: &Bound, inp: &SceneInputs, relevance: Var) -> Result<Descriptor> {
        self.check_inputs(inp)?;
        let o = inp.len();
        let dp = self.config.d_pair;
        let vis_w = self.dims.rgb + self.dims.disp;
        let rows = |v: &[f64], w: usize| -> Result<Var> {
            let data: Vec<f64> = (0..o).flat_map(|_| v.iter().copied()).collect();
            Ok(tape.constant(Tensor::new(vec![o, w], data)?))
        };
        let h_ep = self.phi_vis.forward(tape, p, rows(&inp.path_vis, vis_w)?)?;
        let h_ev = self.phi_vis.forward(tape, p, rows(&inp.vehicle_vis, vis_w)?)?;
        let ent_vis = tape.constant(Tensor::new(vec![o, vis_w], inp.entity_vis.concat())?);
        let h_vis = self.phi_vis.forward(tape, p, ent_vis)?;
        let emb = tape.constant(Tensor::new(vec![o, self.dims.embed], inp.embeddings.concat())?);
        let h_sem = self.phi_sem.forward(tape, p, tape.concat_cols(&[emb, relevance])?)?;
        let geo: Vec<f64> = inp.geometry.iter().flat_map(|&(a, b)| [a, b]).collect();
        let h_geo = self
            .phi_geo
            .forward(tape, p, tape.constant(Tensor::new(vec![o, 2], geo)?))?;
        let h_kge = if self.config.use_kge {
            let rows: Vec<Vec<f64>> = inp
                .classes
                .iter()
                .map(|&c| self.prior.classes.row(c).to_vec())
                .collect();
            let bridge = tape.constant(Tensor::new(vec![o, self.prior.dim], rows.concat())?);
            self.phi_kge.forward(tape, p, bridge)?
        } else {
            tape.constant(Tensor::zeros(&[o, dp]))
        };
        let blocks = tape.concat_cols(&[h_ep, h_ev, h_vis, h_sem, h_geo, h_kge])?;
        let pre = self.gate.forward(tape, p, self.gate_ln.forward(tape, p, blocks)?)?;
        let gates = tape.sigmoid(pre);
        let pair = tape.matmul(tape.mul(gates, blocks)?, tape.constant(block_sum_matrix(BLOCKS, dp)))?;
        Ok(Descriptor { blocks, gates, pair })
    }

    /// Per-group attention of the aligned pair query over that group's
    /// node embeddings, projected, concatenated and layer-normed.
    pub fn priors(&self, tape: &Tape, p: &Bound, pair: Var) -> Result<Var> {
        let o = tape.shape(pair)[0];
        let width = self.prior.groups.len() * self.config.d_prior;
        if !self.config.use_kge || o == 0 {
            return Ok(tape.constant(Tensor::zeros(&[o, width])));
        }
        let q = self.prior_align.forward(tape, p, pair)?;
        let parts = self
            .prior
            .groups
            .iter()
            .zip(&self.phi_prior)
            .map(|((_, nodes), phi)| {
                let kv = tape.constant(nodes.clone());
                let (a, _) = self.prior_attn.forward(tape, p, q, kv, kv, 1)?;
                Ok(phi.forward(tape, p, a)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.prior_ln.forward(tape, p, tape.concat_cols(&parts)?)?)
    }

    pub fn severity(&self, tape: &Tape, p: &Bound, pair: Var, prior: Var) -> Result<Var> {
        let h = self.sev_in.forward(tape, p, tape.concat_cols(&[pair, prior])?)?;
        let h = tape.gelu(self.sev_ln.forward(tape, p, h)?);
        Ok(self.sev_out.forward(tape, p, h)?)
    }

    pub fn heads(&self, tape: &Tape, p: &Bound, desc: &Descriptor) -> Result<HeadOutput> {
        let dp = self.config.d_pair;
        let a = self.mech_align.forward(tape, p, desc.pair)?;
        let a = tape.relu(self.mech_ln.forward(tape, p, a)?);
        let protos = tape.constant(self.prior.mechanisms.clone());
        let mechanism = mechanism_logits(tape, a, protos, p.get(&self.log_tem)?)?;

        let img = tape.slice_cols(desc.blocks, 0, IMAGE_BLOCKS * dp)?;
        let g = tape.sigmoid(
            self.side_gate
                .forward(tape, p, self.side_gate_ln.forward(tape, p, img)?)?,
        );
        let fused = tape.matmul(tape.mul(g, img)?, tape.constant(block_sum_matrix(IMAGE_BLOCKS, dp)))?;
        let side = self.side_mlp.forward(tape, p, self.side_ln.forward(tape, p, fused)?)?;

        let prior = self.priors(tape, p, desc.pair)?;
        let severity = self.severity(tape, p, desc.pair, prior)?;
        Ok(HeadOutput {
            mechanism,
            side,
            severity,
            prior,
        })
    }

    /// Full pass over one scene. Heads run on every entity; selection is
    /// applied by the caller. With relevance disabled the semantic cue sees
    /// zero logits.
    pub fn forward(&self, tape: &Tape, p: &Bound, inp: &SceneInputs) -> Result<(EresOutput, Descriptor, HeadOutput)> {
        let eres = self.eres(tape, p, inp)?;
        let rel = if self.config.use_eres {
            eres.logits
        } else {
            tape.constant(Tensor::zeros(&[inp.len(), 2]))
        };
        if inp.is_empty() {
            let z = |w: usize| tape.constant(Tensor::zeros(&[0, w]));
            let desc = Descriptor {
                blocks: z(BLOCKS * self.config.d_pair),
                gates: z(BLOCKS * self.config.d_pair),
                pair: z(self.config.d_pair),
            };
            let heads = HeadOutput {
                mechanism: z(MECHANISMS.len()),
                side: z(SIDES.len()),
                severity: z(SEVERITIES.len()),
                prior: z(self.prior.groups.len() * self.config.d_prior),
            };
            return Ok((eres, desc, heads));
        }
        let desc = self.descriptor(tape, p, inp, rel)?;
        let heads = self.heads(tape, p, &desc)?;
        Ok((eres, desc, heads))
    }

    pub fn manifest(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "scene",
            "config": self.config,
            "dims": self.dims,
            "prior_dim": self.prior.dim,
            "groups": self.prior.groups.iter().map(|(g, t)| (g.clone(), t.rows())).collect::<Vec<_>>(),
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        Ok(checkpoint::save(path, &self.manifest(), &self.params)?)
    }

    /// Rebuilds the model from an archive; `prior` must match the one used
    /// for training.
    pub fn load(path: &std::path::Path, prior: KnowledgePrior) -> Result<Self> {
        let (manifest, group) = checkpoint::load(path)?;
        if manifest["kind"] != "scene" {
            return Err(SceneError::Config("checkpoint is not a scene model".into()));
        }
        let parse = |key: &str| manifest[key].clone();
        let config: SceneConfig =
            serde_json::from_value(parse("config")).map_err(|e| SceneError::Config(format!("manifest: {e}")))?;
        let dims: SceneDims =
            serde_json::from_value(parse("dims")).map_err(|e| SceneError::Config(format!("manifest: {e}")))?;
        let mut m = Self::new(config, dims, prior)?;
        if manifest["prior_dim"] != m.prior.dim {
            return Err(SceneError::Config(
                "knowledge prior width differs from the checkpoint".into(),
            ));
        }
        checkpoint::restore_into(&mut m.params, &group)?;
        Ok(m)
    }
}
