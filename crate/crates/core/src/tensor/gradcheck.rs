//! Central finite-difference checks against [`Tape::backward`].
//!
//! Non-scalar outputs are reduced with a fixed, non-uniform projection so
//! that every output element contributes a distinct weight.

use super::optim::Bound;
use super::{ParamGroup, Result, Tape, Tensor, Var};

pub const STEP: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, 1e-3)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

fn projection(n: usize) -> Tensor {
    Tensor::vector((0..n).map(|i| 0.3 + (1.7 * i as f64 + 0.4).sin()).collect())
}

fn reduce(tape: &Tape, out: Var) -> Result<Var> {
    let shape = tape.shape(out);
    let n: usize = shape.iter().product();
    let w = tape.constant(projection(n).reshape(&shape)?);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Maximum relative error over every element of every input.
pub fn check_inputs<F>(f: F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&tape, &vars)?;
        let loss = reduce(&tape, out)?;
        Ok(tape.scalar(loss))
    };
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.var(x.clone())).collect();
    let out = f(&tape, &vars)?;
    let loss = reduce(&tape, out)?;
    let grads = tape.backward(loss);
    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for i in 0..xs[k].numel() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + STEP;
            let up = eval(&xs)?;
            xs[k].data_mut()[i] = orig - STEP;
            let down = eval(&xs)?;
            xs[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_error(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}

/// Maximum relative error over the parameter elements accepted by `select`
/// (called with the parameter name and flat element index).
pub fn check_params<F, S>(group: &ParamGroup, f: F, select: S) -> Result<f64>
where
    F: Fn(&Tape, &Bound) -> Result<Var>,
    S: Fn(&str, usize) -> bool,
{
    let eval = |g: &ParamGroup| -> Result<f64> {
        let tape = Tape::new();
        let p = g.bind_frozen(&tape);
        let out = f(&tape, &p)?;
        let loss = reduce(&tape, out)?;
        Ok(tape.scalar(loss))
    };
    let tape = Tape::new();
    let bound = group.bind(&tape);
    let out = f(&tape, &bound)?;
    let loss = reduce(&tape, out)?;
    let grads = tape.backward(loss);
    let mut work = group.clone();
    let mut worst = 0.0f64;
    let names: Vec<String> = group.names().map(str::to_owned).collect();
    for name in names {
        let analytic = grads.wrt(bound.get(&name)?);
        let base = group.value(&name)?.clone();
        for i in 0..base.numel() {
            if !select(&name, i) {
                continue;
            }
            let mut t = base.clone();
            t.data_mut()[i] += STEP;
            work.set_value(&name, t.clone())?;
            let up = eval(&work)?;
            t.data_mut()[i] -= 2.0 * STEP;
            work.set_value(&name, t)?;
            let down = eval(&work)?;
            work.set_value(&name, base.clone())?;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_error(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}
