//! Parameterised layers. Each layer registers its tensors in a
//! [`ParamGroup`] under a name prefix and reads them back from a [`Bound`]
//! during the forward pass.

use super::init::{self, InitRng};
use super::optim::Bound;
use super::{ParamGroup, Result, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, tape: &Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Gelu => tape.gelu(x),
        }
    }
}

/// `y = x·W + b` with `W` stored `d_in × d_out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: String,
    pub b: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(group: &mut ParamGroup, rng: &mut InitRng, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        group.insert(&w, init::weight(rng, d_in, d_out))?;
        group.insert(&b, Tensor::zeros(&[d_out]))?;
        Ok(Self { w, b, d_in, d_out })
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.get(&self.w)?, p.get(&self.b)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: String,
    pub bias: String,
    pub d: usize,
}

impl LayerNorm {
    pub fn new(group: &mut ParamGroup, name: &str, d: usize) -> Result<Self> {
        let gain = format!("{name}.gain");
        let bias = format!("{name}.bias");
        group.insert(&gain, Tensor::filled(&[d], 1.0))?;
        group.insert(&bias, Tensor::zeros(&[d]))?;
        Ok(Self { gain, bias, d })
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.get(&self.gain)?, p.get(&self.bias)?)
    }
}

/// Two linear layers with an activation in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
    pub act: Activation,
}

impl Mlp {
    pub fn new(
        group: &mut ParamGroup,
        rng: &mut InitRng,
        name: &str,
        dims: (usize, usize, usize),
        act: Activation,
    ) -> Result<Self> {
        Ok(Self {
            first: Linear::new(group, rng, &format!("{name}.0"), dims.0, dims.1)?,
            second: Linear::new(group, rng, &format!("{name}.1"), dims.1, dims.2)?,
            act,
        })
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, p, x)?;
        let h = self.act.apply(tape, h);
        self.second.forward(tape, p, h)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d: usize,
}

impl MultiHeadAttention {
    pub fn new(group: &mut ParamGroup, rng: &mut InitRng, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Config(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(group, rng, &format!("{name}.q"), d, d)?,
            k: Linear::new(group, rng, &format!("{name}.k"), d, d)?,
            v: Linear::new(group, rng, &format!("{name}.v"), d, d)?,
            o: Linear::new(group, rng, &format!("{name}.o"), d, d)?,
            heads,
            d,
        })
    }

    /// Returns `(out, weights)`: the output-projected heads (`batch·lq × d`)
    /// and the head-averaged attention probabilities (`batch·lq × lk`).
    pub fn forward(&self, tape: &Tape, p: &Bound, q: Var, k: Var, v: Var, batch: usize) -> Result<(Var, Var)> {
        let qp = self.q.forward(tape, p, q)?;
        let kp = self.k.forward(tape, p, k)?;
        let vp = self.v.forward(tape, p, v)?;
        let fused = tape.attention(qp, kp, vp, batch, self.heads)?;
        let width = tape.shape(fused)[1];
        let heads_out = tape.slice_cols(fused, 0, self.d)?;
        let weights = tape.slice_cols(fused, self.d, width)?;
        let out = self.o.forward(tape, p, heads_out)?;
        Ok((out, weights))
    }
}

/// Pre-norm block: `x = x + MHA(LN(x)); x = x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ffn: Mlp,
    pub ln2: LayerNorm,
}

impl EncoderLayer {
    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var, batch: usize) -> Result<Var> {
        let n = self.ln1.forward(tape, p, x)?;
        let (a, _) = self.attn.forward(tape, p, n, n, n, batch)?;
        let x = tape.add(x, a)?;
        let f = self.ffn.forward(tape, p, self.ln2.forward(tape, p, x)?)?;
        tape.add(x, f)
    }
}

/// Stack of [`EncoderLayer`]s with feed-forward width `2d`.
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub layers: Vec<EncoderLayer>,
}

impl TransformerEncoder {
    pub fn new(
        group: &mut ParamGroup,
        rng: &mut InitRng,
        name: &str,
        d: usize,
        heads: usize,
        layers: usize,
    ) -> Result<Self> {
        let layers = (0..layers)
            .map(|l| {
                let pre = format!("{name}.{l}");
                Ok(EncoderLayer {
                    attn: MultiHeadAttention::new(group, rng, &format!("{pre}.attn"), d, heads)?,
                    ln1: LayerNorm::new(group, &format!("{pre}.ln1"), d)?,
                    ffn: Mlp::new(group, rng, &format!("{pre}.ffn"), (d, 2 * d, d), Activation::Gelu)?,
                    ln2: LayerNorm::new(group, &format!("{pre}.ln2"), d)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// `x` holds `batch` sequences of equal length stacked row-wise.
    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var, batch: usize) -> Result<Var> {
        let rows = tape.shape(x)[0];
        if rows == 0 {
            return Err(TensorError::EmptyDimension("transformer_encoder"));
        }
        self.layers
            .iter()
            .try_fold(x, |x, layer| layer.forward(tape, p, x, batch))
    }
}
