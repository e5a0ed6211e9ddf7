use std::cell::{Ref, RefCell};

use super::gemm::gemm;
use super::{Result, Tensor, TensorError, LN_EPS};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        a: Var,
        bias: Var,
    },
    MulCol {
        a: Var,
        col: Var,
    },
    Scale {
        a: Var,
        s: Var,
    },
    AddScalar(Var),
    MulScalar {
        a: Var,
        c: f64,
    },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Gather {
        src: Var,
        idx: Vec<usize>,
    },
    IndexAdd {
        src: Var,
        idx: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        a: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        a: Var,
        start: usize,
    },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        lq: usize,
        lk: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Bce {
        logits: Var,
        targets: Vec<f64>,
    },
    Focal {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
        gamma: f64,
        log_probs: Vec<f64>,
    },
    NormalizeRows {
        a: Var,
        norms: Vec<f64>,
    },
    RelLinear {
        x: Var,
        w: Var,
        b: Var,
        groups: Vec<(usize, Vec<usize>)>,
        d_in: usize,
        d_out: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for a single forward pass; [`Tape::backward`] sweeps
/// them in reverse.
///
/// Operations take `&self` so calls can be nested freely.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor, zero when the value did not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contribution: &[f64]) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contribution) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contribution.to_vec()),
    }
}

fn grad_slot<'g>(grads: &'g mut [Option<Vec<f64>>], v: Var, len: usize) -> &'g mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// A value that gradients flow into.
    pub fn var(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A value treated as a constant by the backward sweep.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value_ref(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.value_ref(v).clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value_ref(v).shape().to_vec()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value_ref(v).data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = self.value_ref(v);
        (t.rows(), t.cols())
    }

    fn matmul_impl(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
        if av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let (m, k) = if ta {
            (av.shape()[1], av.shape()[0])
        } else {
            (av.shape()[0], av.shape()[1])
        };
        let (k2, n) = if tb {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if k != k2 {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), ta, bv.data(), tb, &mut out, false);
        let rg = nodes[a.0].requires_grad || nodes[b.0].requires_grad;
        drop(nodes);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, m, k, n, ta, tb }, rg))
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, false)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, true)
    }

    /// `aᵀ · b` for `a: k×m`, `b: k×n`.
    pub fn matmul_tn(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true, false)
    }

    fn binary(&self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
        if av.numel() != bv.numel() || av.cols() != bv.cols() {
            return Err(shape_err(name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = nodes[a.0].requires_grad || nodes[b.0].requires_grad;
        drop(nodes);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`c` vector to every row of `a`.
    pub fn add_row(&self, a: Var, bias: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[a.0].value, &nodes[bias.0].value);
        let c = av.cols();
        if bv.numel() != c {
            return Err(shape_err("add_row", av.shape(), bv.shape()));
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            for (x, b) in row.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = nodes[a.0].requires_grad || nodes[bias.0].requires_grad;
        drop(nodes);
        Ok(self.push(out, Op::AddRow { a, bias }, rg))
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&self, a: Var, col: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (av, cv) = (&nodes[a.0].value, &nodes[col.0].value);
        let (r, c) = (av.rows(), av.cols());
        if cv.numel() != r {
            return Err(shape_err("mul_col", av.shape(), cv.shape()));
        }
        let mut data = av.data().to_vec();
        for (i, row) in data.chunks_mut(c.max(1)).enumerate() {
            let s = cv.data()[i];
            row.iter_mut().for_each(|x| *x *= s);
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = nodes[a.0].requires_grad || nodes[col.0].requires_grad;
        drop(nodes);
        Ok(self.push(out, Op::MulCol { a, col }, rg))
    }

    /// Multiplies every element of `a` by the single-element tensor `s`.
    pub fn scale(&self, a: Var, s: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (av, sv) = (&nodes[a.0].value, &nodes[s.0].value);
        if sv.numel() != 1 {
            return Err(shape_err("scale", av.shape(), sv.shape()));
        }
        let k = sv.data()[0];
        let out = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x * k).collect())?;
        let rg = nodes[a.0].requires_grad || nodes[s.0].requires_grad;
        drop(nodes);
        Ok(self.push(out, Op::Scale { a, s }, rg))
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let nodes = self.nodes.borrow();
        let av = &nodes[a.0].value;
        let out = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| f(*x)).collect()).expect("unary shape");
        let rg = nodes[a.0].requires_grad;
        drop(nodes);
        self.push(out, op, rg)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn mul_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::MulScalar { a, c })
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Normalizes each row over the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (xv, gv, bv) = (&nodes[x.0].value, &nodes[gain.0].value, &nodes[bias.0].value);
        let d = xv.cols();
        if d == 0 {
            return Err(TensorError::EmptyDimension("layer_norm"));
        }
        if gv.numel() != d || bv.numel() != d {
            return Err(shape_err("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = nodes[x.0].requires_grad || nodes[gain.0].requires_grad || nodes[bias.0].requires_grad;
        drop(nodes);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&self, a: Var) -> Var {
        let nodes = self.nodes.borrow();
        let av = &nodes[a.0].value;
        let c = av.cols().max(1);
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        let out = Tensor::new(av.shape().to_vec(), data).expect("softmax shape");
        let rg = nodes[a.0].requires_grad;
        drop(nodes);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Selects rows of `src` (embedding lookup).
    pub fn gather_rows(&self, src: Var, idx: &[usize]) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let sv = &nodes[src.0].value;
        let (r, c) = (sv.rows(), sv.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(TensorError::Validation(format!(
                    "gather_rows: index {i} out of range for {r} rows"
                )));
            }
            data.extend_from_slice(&sv.data()[i * c..(i + 1) * c]);
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        let rg = nodes[src.0].requires_grad;
        drop(nodes);
        Ok(self.push(out, Op::Gather { src, idx: idx.to_vec() }, rg))
    }

    /// Sums row `i` of `src` into output row `idx[i]`; the output has `rows` rows.
    pub fn index_add_rows(&self, src: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let sv = &nodes[src.0].value;
        let (r, c) = (sv.rows(), sv.cols());
        if idx.len() != r {
            return Err(shape_err("index_add_rows", sv.shape(), &[idx.len()]));
        }
        let mut data = vec![0.0; rows * c];
        for (i, &t) in idx.iter().enumerate() {
            if t >= rows {
                return Err(TensorError::Validation(format!(
                    "index_add_rows: target {t} out of range for {rows} rows"
                )));
            }
            let src_row = &sv.data()[i * c..(i + 1) * c];
            for (o, s) in data[t * c..(t + 1) * c].iter_mut().zip(src_row) {
                *o += s;
            }
        }
        let out = Tensor::new(vec![rows, c], data)?;
        let rg = nodes[src.0].requires_grad;
        drop(nodes);
        Ok(self.push(out, Op::IndexAdd { src, idx: idx.to_vec() }, rg))
    }

    /// Concatenates along the last dimension; all parts must have equal row counts.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::EmptyDimension("concat_cols"));
        }
        let nodes = self.nodes.borrow();
        let rows = nodes[parts[0].0].value.rows();
        let mut total = 0;
        for p in parts {
            let v = &nodes[p.0].value;
            if v.rows() != rows {
                return Err(shape_err("concat_cols", nodes[parts[0].0].value.shape(), v.shape()));
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(nodes[p.0].value.row(r));
            }
        }
        let rg = parts.iter().any(|p| nodes[p.0].requires_grad);
        drop(nodes);
        Ok(self.push(
            Tensor::new(vec![rows, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Columns `start..end` of every row.
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let av = &nodes[a.0].value;
        let (rows, c) = (av.rows(), av.cols());
        if start > end || end > c {
            return Err(shape_err("slice_cols", av.shape(), &[start, end]));
        }
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&av.row(r)[start..end]);
        }
        let rg = nodes[a.0].requires_grad;
        drop(nodes);
        Ok(self.push(
            Tensor::new(vec![rows, end - start], data)?,
            Op::SliceCols { a, start },
            rg,
        ))
    }

    /// Stacks parts vertically; all parts must have equal column counts.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::EmptyDimension("concat_rows"));
        }
        let nodes = self.nodes.borrow();
        let c = nodes[parts[0].0].value.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = &nodes[p.0].value;
            if v.cols() != c {
                return Err(shape_err("concat_rows", nodes[parts[0].0].value.shape(), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(|p| nodes[p.0].requires_grad);
        drop(nodes);
        Ok(self.push(Tensor::new(vec![rows, c], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let av = &nodes[a.0].value;
        let (rows, c) = (av.rows(), av.cols());
        if start > end || end > rows {
            return Err(shape_err("slice_rows", av.shape(), &[start, end]));
        }
        let data = av.data()[start * c..end * c].to_vec();
        let rg = nodes[a.0].requires_grad;
        drop(nodes);
        Ok(self.push(Tensor::new(vec![end - start, c], data)?, Op::SliceRows { a, start }, rg))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.requires_grad(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a);
        let av = self.value_ref(a);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = av.data()[i * c + j];
            }
        }
        drop(av);
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(a), rg))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value_ref(a).data().iter().sum();
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&self, a: Var) -> Var {
        let t = self.value_ref(a);
        let n = t.numel().max(1) as f64;
        let s = t.data().iter().sum::<f64>() / n;
        drop(t);
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Scaled dot-product attention for `batch` independent sequences.
    ///
    /// `q` holds `batch·lq` rows and `k`, `v` hold `batch·lk` rows, all of
    /// width `d`; rows of one sequence are contiguous. The result has
    /// `d + lk` columns: the per-head outputs concatenated, followed by the
    /// attention probabilities averaged over heads.
    pub fn attention(&self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
        let d = qv.cols();
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Config(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        if kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows() {
            return Err(shape_err("attention", qv.shape(), kv.shape()));
        }
        if batch == 0 || qv.rows() % batch != 0 || kv.rows() % batch != 0 {
            return Err(shape_err("attention", qv.shape(), &[batch]));
        }
        let lq = qv.rows() / batch;
        let lk = kv.rows() / batch;
        if lk == 0 {
            return Err(TensorError::EmptyDimension("attention keys"));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let width = d + lk;
        let mut out = vec![0.0; batch * lq * width];
        let mut probs = vec![0.0; batch * heads * lq * lk];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut s = vec![0.0; lk];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..lq {
                    let qrow = &qd[(b * lq + i) * d + off..(b * lq + i) * d + off + dh];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..lk {
                        let krow = &kd[(b * lk + j) * d + off..(b * lk + j) * d + off + dh];
                        let dot: f64 = qrow.iter().zip(krow).map(|(x, y)| x * y).sum();
                        s[j] = dot * scale;
                        mx = mx.max(s[j]);
                    }
                    let mut z = 0.0;
                    for sj in s.iter_mut() {
                        *sj = (*sj - mx).exp();
                        z += *sj;
                    }
                    let pbase = ((b * heads + h) * lq + i) * lk;
                    let orow = (b * lq + i) * width;
                    for j in 0..lk {
                        let p = s[j] / z;
                        probs[pbase + j] = p;
                        out[orow + d + j] += p / heads as f64;
                        let vrow = &vd[(b * lk + j) * d + off..(b * lk + j) * d + off + dh];
                        for c in 0..dh {
                            out[orow + off + c] += p * vrow[c];
                        }
                    }
                }
            }
        }
        let rg = nodes[q.0].requires_grad || nodes[k.0].requires_grad || nodes[v.0].requires_grad;
        drop(nodes);
        Ok(self.push(
            Tensor::new(vec![batch * lq, width], out)?,
            Op::Attention {
                q,
                k,
                v,
                batch,
                lq,
                lk,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy with logits, in the stable
    /// `max(x,0) − x·t + log(1 + e^{−|x|})` form.
    pub fn bce_with_logits(&self, logits: Var, targets: &[f64]) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[logits.0].value;
        if lv.numel() != targets.len() {
            return Err(shape_err("bce_with_logits", lv.shape(), &[targets.len()]));
        }
        if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(TensorError::Validation(format!("target {t} outside [0, 1]")));
        }
        let n = targets.len().max(1) as f64;
        let loss: f64 = lv
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let rg = nodes[logits.0].requires_grad;
        drop(nodes);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over rows of `−w_c·(1−p_c)^γ·log p_c`, `p = softmax(logits)`.
    ///
    /// An empty batch yields a zero loss.
    pub fn softmax_focal_loss(&self, logits: Var, labels: &[usize], class_weights: &[f64], gamma: f64) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[logits.0].value;
        let (n, c) = (lv.rows(), lv.cols());
        if labels.len() != n || class_weights.len() != c {
            return Err(shape_err(
                "softmax_focal_loss",
                lv.shape(),
                &[labels.len(), class_weights.len()],
            ));
        }
        if let Some(l) = labels.iter().find(|l| **l >= c) {
            return Err(TensorError::Validation(format!("label {l} outside {c} classes")));
        }
        if class_weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(TensorError::Validation(
                "class weights must be finite and non-negative".into(),
            ));
        }
        let mut log_probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for r in 0..n {
            let row = lv.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for j in 0..c {
                log_probs[r * c + j] = row[j] - lse;
            }
            let lp = log_probs[r * c + labels[r]];
            let p = lp.exp();
            loss -= class_weights[labels[r]] * (1.0 - p).powf(gamma) * lp;
        }
        if n > 0 {
            loss /= n as f64;
        }
        let rg = nodes[logits.0].requires_grad;
        drop(nodes);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Focal {
                logits,
                labels: labels.to_vec(),
                weights: class_weights.to_vec(),
                gamma,
                log_probs,
            },
            rg,
        ))
    }

    /// Divides each row by its Euclidean norm (with a 1e-12 guard under the root).
    pub fn normalize_rows(&self, a: Var) -> Var {
        let nodes = self.nodes.borrow();
        let av = &nodes[a.0].value;
        let c = av.cols().max(1);
        let mut data = av.data().to_vec();
        let mut norms = Vec::with_capacity(av.rows());
        for row in data.chunks_mut(c) {
            let nrm = (row.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
            row.iter_mut().for_each(|x| *x /= nrm);
            norms.push(nrm);
        }
        let out = Tensor::new(av.shape().to_vec(), data).expect("normalize shape");
        let rg = nodes[a.0].requires_grad;
        drop(nodes);
        self.push(out, Op::NormalizeRows { a, norms }, rg)
    }

    /// Row-wise linear map selected per row: `out[i] = x[i]·W[rel[i]] + b[rel[i]]`.
    ///
    /// `w` stacks the per-relation `d_in × d_out` matrices vertically
    /// (`R·d_in × d_out`); `b` is `R × d_out`.
    pub fn rel_linear(&self, x: Var, w: Var, b: Var, rel: &[usize]) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (xv, wv, bv) = (&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value);
        let (e, d_in) = (xv.rows(), xv.cols());
        let d_out = wv.cols();
        let n_rel = bv.rows();
        if rel.len() != e || wv.rows() != n_rel * d_in || bv.cols() != d_out {
            return Err(shape_err("rel_linear", xv.shape(), wv.shape()));
        }
        let mut by_rel: Vec<Vec<usize>> = vec![Vec::new(); n_rel];
        for (i, &r) in rel.iter().enumerate() {
            if r >= n_rel {
                return Err(TensorError::Validation(format!("relation {r} outside {n_rel}")));
            }
            by_rel[r].push(i);
        }
        let groups: Vec<(usize, Vec<usize>)> = by_rel
            .into_iter()
            .enumerate()
            .filter(|(_, rows)| !rows.is_empty())
            .collect();
        let mut out = vec![0.0; e * d_out];
        for (r, rows) in &groups {
            let mut xr = Vec::with_capacity(rows.len() * d_in);
            for &i in rows {
                xr.extend_from_slice(xv.row(i));
            }
            let mut yr = vec![0.0; rows.len() * d_out];
            let wr = &wv.data()[r * d_in * d_out..(r + 1) * d_in * d_out];
            gemm(rows.len(), d_in, d_out, &xr, false, wr, false, &mut yr, false);
            let br = bv.row(*r);
            for (k, &i) in rows.iter().enumerate() {
                for j in 0..d_out {
                    out[i * d_out + j] = yr[k * d_out + j] + br[j];
                }
            }
        }
        let rg = nodes[x.0].requires_grad || nodes[w.0].requires_grad || nodes[b.0].requires_grad;
        drop(nodes);
        Ok(self.push(
            Tensor::new(vec![e, d_out], out)?,
            Op::RelLinear {
                x,
                w,
                b,
                groups,
                d_in,
                d_out,
            },
            rg,
        ))
    }

    /// `x·w + b` with `w` stored as `in × out`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Reverse sweep from `output`, seeding its gradient with ones.
    pub fn backward(&self, output: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if nodes[output.0].requires_grad {
            grads[output.0] = Some(vec![1.0; nodes[output.0].value.numel()]);
        }
        for i in (0..=output.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(&nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads, shapes }
    }

    fn backward_node(&self, nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &nodes[i];
        let val = |v: Var| &nodes[v.0].value;
        let needs = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n, ta, tb } => {
                let (av, bv) = (val(a).data(), val(b).data());
                if needs(a) {
                    let ga = grad_slot(grads, a, m * k);
                    match (ta, tb) {
                        (false, false) => gemm(m, n, k, g, false, bv, true, ga, true),
                        (false, true) => gemm(m, n, k, g, false, bv, false, ga, true),
                        (true, false) => gemm(k, n, m, bv, false, g, true, ga, true),
                        (true, true) => unreachable!("matmul with both operands transposed"),
                    }
                }
                if needs(b) {
                    let gb = grad_slot(grads, b, k * n);
                    match (ta, tb) {
                        (false, false) => gemm(k, m, n, av, true, g, false, gb, true),
                        (false, true) => gemm(n, m, k, g, true, av, false, gb, true),
                        (true, false) => gemm(k, m, n, av, false, g, false, gb, true),
                        (true, true) => unreachable!("matmul with both operands transposed"),
                    }
                }
            }
            &Op::Add(a, b) => {
                if needs(a) {
                    accumulate(grads, a, g);
                }
                if needs(b) {
                    accumulate(grads, b, g);
                }
            }
            &Op::Sub(a, b) => {
                if needs(a) {
                    accumulate(grads, a, g);
                }
                if needs(b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    accumulate(grads, b, &neg);
                }
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    let c: Vec<f64> = g.iter().zip(val(b).data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, a, &c);
                }
                if needs(b) {
                    let c: Vec<f64> = g.iter().zip(val(a).data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, b, &c);
                }
            }
            &Op::AddRow { a, bias } => {
                if needs(a) {
                    accumulate(grads, a, g);
                }
                if needs(bias) {
                    let c = val(bias).numel();
                    let gb = grad_slot(grads, bias, c);
                    for row in g.chunks(c.max(1)) {
                        for (x, y) in gb.iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                }
            }
            &Op::MulCol { a, col } => {
                let c = val(a).cols().max(1);
                if needs(a) {
                    let cv = val(col).data();
                    let contrib: Vec<f64> = g
                        .chunks(c)
                        .enumerate()
                        .flat_map(|(r, row)| row.iter().map(move |x| x * cv[r]))
                        .collect();
                    accumulate(grads, a, &contrib);
                }
                if needs(col) {
                    let av = val(a).data();
                    let contrib: Vec<f64> = g
                        .chunks(c)
                        .zip(av.chunks(c))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                        .collect();
                    accumulate(grads, col, &contrib);
                }
            }
            &Op::Scale { a, s } => {
                let k = val(s).data()[0];
                if needs(a) {
                    let contrib: Vec<f64> = g.iter().map(|x| x * k).collect();
                    accumulate(grads, a, &contrib);
                }
                if needs(s) {
                    let ds: f64 = g.iter().zip(val(a).data()).map(|(x, y)| x * y).sum();
                    accumulate(grads, s, &[ds]);
                }
            }
            &Op::AddScalar(a) => accumulate(grads, a, g),
            &Op::MulScalar { a, c } => {
                let contrib: Vec<f64> = g.iter().map(|x| x * c).collect();
                accumulate(grads, a, &contrib);
            }
            &Op::Relu(a) => {
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(val(a).data())
                    .map(|(x, y)| if *y > 0.0 { *x } else { 0.0 })
                    .collect();
                accumulate(grads, a, &contrib);
            }
            &Op::Gelu(a) => {
                let contrib: Vec<f64> = g.iter().zip(val(a).data()).map(|(x, y)| x * gelu_grad(*y)).collect();
                accumulate(grads, a, &contrib);
            }
            &Op::Sigmoid(a) => {
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(x, s)| x * s * (1.0 - s))
                    .collect();
                accumulate(grads, a, &contrib);
            }
            &Op::Exp(a) => {
                let contrib: Vec<f64> = g.iter().zip(node.value.data()).map(|(x, y)| x * y).collect();
                accumulate(grads, a, &contrib);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = val(*x).cols();
                let gv = val(*gain).data();
                if needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            dx[r * d + j] = inv / d as f64 * (d as f64 * dh - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    accumulate(grads, *x, &dx);
                }
                if needs(*gain) {
                    let gg = grad_slot(grads, *gain, d);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if needs(*bias) {
                    let gb = grad_slot(grads, *bias, d);
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            gb[j] += gr[j];
                        }
                    }
                }
            }
            &Op::Softmax(a) => {
                let c = node.value.cols().max(1);
                let mut dx = vec![0.0; g.len()];
                for ((dr, gr), yr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(node.value.data().chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, a, &dx);
            }
            Op::Gather { src, idx } => {
                let sv = val(*src);
                let c = sv.cols();
                let gs = grad_slot(grads, *src, sv.numel());
                for (k, &r) in idx.iter().enumerate() {
                    for j in 0..c {
                        gs[r * c + j] += g[k * c + j];
                    }
                }
            }
            Op::IndexAdd { src, idx } => {
                let c = val(*src).cols();
                let mut contrib = Vec::with_capacity(idx.len() * c);
                for &t in idx {
                    contrib.extend_from_slice(&g[t * c..(t + 1) * c]);
                }
                accumulate(grads, *src, &contrib);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut off = 0;
                for p in parts {
                    let c = val(*p).cols();
                    if needs(*p) {
                        let mut contrib = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            contrib.extend_from_slice(&g[r * total + off..r * total + off + c]);
                        }
                        accumulate(grads, *p, &contrib);
                    }
                    off += c;
                }
            }
            &Op::SliceCols { a, start } => {
                let av = val(a);
                let (rows, c) = (av.rows(), av.cols());
                let w = node.value.cols();
                let ga = grad_slot(grads, a, rows * c);
                for r in 0..rows {
                    for j in 0..w {
                        ga[r * c + start + j] += g[r * w + j];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(*p).numel();
                    if needs(*p) {
                        accumulate(grads, *p, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            &Op::SliceRows { a, start } => {
                let av = val(a);
                let c = av.cols();
                let ga = grad_slot(grads, a, av.numel());
                for (x, y) in ga[start * c..start * c + g.len()].iter_mut().zip(g) {
                    *x += y;
                }
            }
            &Op::Reshape(a) => accumulate(grads, a, g),
            &Op::Transpose(a) => {
                let (r, c) = (val(a).rows(), val(a).cols());
                let mut contrib = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        contrib[i * c + j] = g[j * r + i];
                    }
                }
                accumulate(grads, a, &contrib);
            }
            &Op::Sum(a) => {
                let n = val(a).numel();
                accumulate(grads, a, &vec![g[0]; n]);
            }
            &Op::Mean(a) => {
                let n = val(a).numel();
                accumulate(grads, a, &vec![g[0] / n.max(1) as f64; n]);
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                lq,
                lk,
                heads,
                probs,
            } => {
                let (batch, lq, lk, heads) = (*batch, *lq, *lk, *heads);
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let d = val(*q).cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let width = d + lk;
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                let mut dp = vec![0.0; lk];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = h * dh;
                        for i in 0..lq {
                            let grow = (b * lq + i) * width;
                            let pbase = ((b * heads + h) * lq + i) * lk;
                            let p = &probs[pbase..pbase + lk];
                            let gout = &g[grow + off..grow + off + dh];
                            for j in 0..lk {
                                let vrow = (b * lk + j) * d + off;
                                let mut s = g[grow + d + j] / heads as f64;
                                for c in 0..dh {
                                    s += gout[c] * vd[vrow + c];
                                    dv[vrow + c] += p[j] * gout[c];
                                }
                                dp[j] = s;
                            }
                            let dot: f64 = p.iter().zip(&dp).map(|(x, y)| x * y).sum();
                            let qrow = (b * lq + i) * d + off;
                            for j in 0..lk {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                let krow = (b * lk + j) * d + off;
                                for c in 0..dh {
                                    dq[qrow + c] += ds * kd[krow + c];
                                    dk[krow + c] += ds * qd[qrow + c];
                                }
                            }
                        }
                    }
                }
                if needs(*q) {
                    accumulate(grads, *q, &dq);
                }
                if needs(*k) {
                    accumulate(grads, *k, &dk);
                }
                if needs(*v) {
                    accumulate(grads, *v, &dv);
                }
            }
            Op::Bce { logits, targets } => {
                let n = targets.len().max(1) as f64;
                let contrib: Vec<f64> = val(*logits)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(x, t)| g[0] * (sigmoid(*x) - t) / n)
                    .collect();
                accumulate(grads, *logits, &contrib);
            }
            Op::Focal {
                logits,
                labels,
                weights,
                gamma,
                log_probs,
            } => {
                let c = val(*logits).cols();
                let n = labels.len();
                let mut contrib = vec![0.0; n * c];
                for r in 0..n {
                    let y = labels[r];
                    let lp = log_probs[r * c + y];
                    let p = lp.exp();
                    let one_m = 1.0 - p;
                    // d loss / d p_c, multiplied through by p_c
                    let mod_term = if *gamma == 0.0 || one_m <= 0.0 {
                        0.0
                    } else {
                        gamma * one_m.powf(gamma - 1.0) * p * lp
                    };
                    let coef = -weights[y] * (one_m.powf(*gamma) - mod_term);
                    for j in 0..c {
                        let pj = log_probs[r * c + j].exp();
                        let delta = if j == y { 1.0 } else { 0.0 };
                        contrib[r * c + j] = g[0] * coef * (delta - pj) / n as f64;
                    }
                }
                accumulate(grads, *logits, &contrib);
            }
            Op::NormalizeRows { a, norms } => {
                let c = node.value.cols().max(1);
                let mut dx = vec![0.0; g.len()];
                for (r, nrm) in norms.iter().enumerate() {
                    let y = &node.value.data()[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] = (gr[j] - y[j] * dot) / nrm;
                    }
                }
                accumulate(grads, *a, &dx);
            }
            Op::RelLinear {
                x,
                w,
                b,
                groups,
                d_in,
                d_out,
            } => {
                let (d_in, d_out) = (*d_in, *d_out);
                let xv = val(*x);
                let wv = val(*w).data();
                let mut dx = if needs(*x) { Some(vec![0.0; xv.numel()]) } else { None };
                let mut dw = if needs(*w) { Some(vec![0.0; wv.len()]) } else { None };
                let mut db = if needs(*b) {
                    Some(vec![0.0; val(*b).numel()])
                } else {
                    None
                };
                for (r, rows) in groups {
                    let mut gr = Vec::with_capacity(rows.len() * d_out);
                    for &i in rows {
                        gr.extend_from_slice(&g[i * d_out..(i + 1) * d_out]);
                    }
                    let wr = &wv[r * d_in * d_out..(r + 1) * d_in * d_out];
                    if let Some(dx) = dx.as_mut() {
                        let mut dxr = vec![0.0; rows.len() * d_in];
                        gemm(rows.len(), d_out, d_in, &gr, false, wr, true, &mut dxr, false);
                        for (k, &i) in rows.iter().enumerate() {
                            dx[i * d_in..(i + 1) * d_in].copy_from_slice(&dxr[k * d_in..(k + 1) * d_in]);
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        let mut xr = Vec::with_capacity(rows.len() * d_in);
                        for &i in rows {
                            xr.extend_from_slice(xv.row(i));
                        }
                        let dwr = &mut dw[r * d_in * d_out..(r + 1) * d_in * d_out];
                        gemm(d_in, rows.len(), d_out, &xr, true, &gr, false, dwr, true);
                    }
                    if let Some(db) = db.as_mut() {
                        for row in gr.chunks(d_out) {
                            for j in 0..d_out {
                                db[r * d_out + j] += row[j];
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    accumulate(grads, *x, &dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, &dw);
                }
                if let Some(db) = db {
                    accumulate(grads, *b, &db);
                }
            }
        }
    }
}
