use std::collections::HashMap;

use indexmap::IndexMap;

use super::{Gradients, Result, Tape, Tensor, TensorError, Var};

/// A learned tensor with its gradient slot and Adam moments.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Param {
    fn new(value: Tensor) -> Self {
        let n = value.numel();
        Self {
            value,
            grad: None,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Named parameters in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamGroup {
    params: IndexMap<String, Param>,
}

/// Tape handles for every parameter of a group, produced by [`ParamGroup::bind`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::Config(format!("unknown parameter {name}")))
    }
}

impl ParamGroup {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(TensorError::Config(format!("duplicate parameter {name}")));
        }
        self.params.insert(name, Param::new(value));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn param(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| TensorError::Config(format!("unknown parameter {name}")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.param(name).map(|p| &p.value)
    }

    /// Replaces a value in place; the shape must not change.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| TensorError::Config(format!("unknown parameter {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(TensorError::Shape {
                op: "set_value",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = Some(Tensor::zeros(p.value.shape()));
        }
    }

    pub fn clear_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    pub fn set_grad(&mut self, name: &str, grad: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| TensorError::Config(format!("unknown parameter {name}")))?;
        if grad.shape() != p.value.shape() {
            return Err(TensorError::Shape {
                op: "set_grad",
                lhs: p.value.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        p.grad = Some(grad);
        Ok(())
    }

    /// Records every parameter on `tape` as a gradient-carrying leaf.
    pub fn bind(&self, tape: &Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, p)| (k.clone(), tape.var(p.value.clone())))
            .collect();
        Bound { vars }
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_frozen(&self, tape: &Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, p)| (k.clone(), tape.constant(p.value.clone())))
            .collect();
        Bound { vars }
    }

    /// Adds the gradients of a backward sweep into each parameter's slot.
    /// Parameters that did not influence the output receive zeros.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) {
        for (name, p) in self.params.iter_mut() {
            let Some(&var) = bound.vars.get(name) else { continue };
            let g = grads.wrt(var);
            match &mut p.grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Copy, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            ..Self::default()
        }
    }

    /// One update of every parameter. Fails before touching anything if a
    /// gradient is missing.
    pub fn step(&self, group: &mut ParamGroup) -> Result<()> {
        if let Some((name, _)) = group.params.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(TensorError::TrainingState(format!("parameter {name} has no gradient")));
        }
        let (b1, b2) = self.betas;
        for p in group.params.values_mut() {
            let grad = p.grad.as_ref().expect("checked above");
            p.step += 1;
            let bc1 = 1.0 - b1.powi(p.step as i32);
            let bc2 = 1.0 - b2.powi(p.step as i32);
            let decay = 1.0 - self.lr * self.weight_decay;
            let vals = p.value.data_mut();
            for i in 0..vals.len() {
                let g = grad.data()[i];
                p.m[i] = b1 * p.m[i] + (1.0 - b1) * g;
                p.v[i] = b2 * p.v[i] + (1.0 - b2) * g * g;
                let mhat = p.m[i] / bc1;
                let vhat = p.v[i] / bc2;
                vals[i] = vals[i] * decay - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Functional form of [`AdamW::step`].
pub fn adamw_step(group: &mut ParamGroup, lr: f64, betas: (f64, f64), weight_decay: f64) -> Result<()> {
    AdamW {
        lr,
        betas,
        eps: 1e-8,
        weight_decay,
    }
    .step(group)
}
