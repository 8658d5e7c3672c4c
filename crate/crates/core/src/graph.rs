//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every primitive as it is applied, so node indices are
//! already a topological order. [`Graph::backward`] walks the tape once in
//! reverse and returns gradients for every node that depends on a leaf with
//! `requires_grad` set.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt, matmul_raw, matmul_tn, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            // zero at the kink
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Activation, Var),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    BatchNormInfer {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Reshape(Var),
    DilatedConv {
        x: Var,
        weight: Var,
        bias: Var,
        offsets: Vec<isize>,
    },
    NormalizeRows(Var, Vec<f64>),
    Gather(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics captured by a training-mode batch norm node.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    pub batch: usize,
}

/// Recorded computation.
pub struct Graph {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Turns the non-finite value check on or off (on by default in debug builds).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Inserts a leaf. Gradients are tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad;
        let mut value = t;
        value.grad = None;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite value produced by {}",
                op_name(&op)
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn mat(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.mat(a)?;
        let (q2, r) = self.mat(b)?;
        if q != q2 {
            return Err(Error::dim(format!(
                "matmul inner extents differ: [{p}x{q}] x [{q2}x{r}]"
            )));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), p, q, r);
        let out = Tensor::matrix(p, r, data)?;
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = if ta.shape() == tb.shape() || tb.numel() == 1 {
            ta.shape().to_vec()
        } else if ta.numel() == 1 {
            tb.shape().to_vec()
        } else {
            return Err(Error::dim(format!(
                "elementwise shapes {:?} and {:?} are not broadcast-compatible",
                ta.shape(),
                tb.shape()
            )));
        };
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let (x, y) = (pick(da, i), pick(db, i));
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Binary(kind, a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// Adds a `[1×q]` (or `[q]`) bias to every row of `x[p×q]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (p, q) = self.mat(x)?;
        if self.value(bias).numel() != q {
            return Err(Error::dim(format!(
                "bias of {} values cannot be added to rows of width {q}",
                self.value(bias).numel()
            )));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(q) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let out = Tensor::matrix(p, q, data)?;
        self.push(out, Op::AddRow(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v + c).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, Op::AddScalar(x), &[x])
    }

    pub fn activate(&mut self, x: Var, act: Activation) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| act.apply(v)).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, Op::Unary(act, x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activate(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activate(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activate(x, Activation::Sigmoid)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (p, q) = self.mat(x)?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(q) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let out = Tensor::matrix(p, q, data)?;
        self.push(out, Op::SoftmaxRows(x), &[x])
    }

    /// Normalizes each row to zero mean and unit variance, then applies `gamma`/`beta`.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (p, q) = self.mat(x)?;
        self.check_affine(gamma, beta, q)?;
        let src = self.value(x).data();
        let mut xhat = vec![0.0; p * q];
        let mut inv_std = vec![0.0; p];
        for i in 0..p {
            let row = &src[i * q..(i + 1) * q];
            let mean = row.iter().sum::<f64>() / q as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / q as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..q {
                xhat[i * q + j] = (row[j] - mean) * inv;
            }
        }
        let out = self.affine(&xhat, p, q, gamma, beta)?;
        self.push(
            out,
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Batch normalization over the rows of `x[B×d]` using batch statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (b, d) = self.mat(x)?;
        if b < 2 {
            return Err(Error::BatchSize(format!(
                "training-mode batch norm needs at least 2 rows, got {b}"
            )));
        }
        self.check_affine(gamma, beta, d)?;
        let src = self.value(x).data();
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for row in src.chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= b as f64);
        for row in src.chunks(d) {
            for j in 0..d {
                let c = row[j] - mean[j];
                var[j] += c * c;
            }
        }
        var.iter_mut().for_each(|v| *v /= b as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; b * d];
        for i in 0..b {
            for j in 0..d {
                xhat[i * d + j] = (src[i * d + j] - mean[j]) * inv_std[j];
            }
        }
        let out = self.affine(&xhat, b, d, gamma, beta)?;
        self.push(
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mean,
                var,
            },
            &[x, gamma, beta],
        )
    }

    /// Batch normalization with fixed running statistics.
    pub fn batch_norm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (b, d) = self.mat(x)?;
        self.check_affine(gamma, beta, d)?;
        if running_mean.len() != d || running_var.len() != d {
            return Err(Error::dim("running statistics width mismatch"));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let src = self.value(x).data();
        let mut xhat = vec![0.0; b * d];
        for i in 0..b {
            for j in 0..d {
                xhat[i * d + j] = (src[i * d + j] - running_mean[j]) * inv_std[j];
            }
        }
        let out = self.affine(&xhat, b, d, gamma, beta)?;
        self.push(
            out,
            Op::BatchNormInfer {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Statistics recorded by a [`Graph::batch_norm_train`] node.
    pub fn batch_stats(&self, v: Var) -> Option<BatchStats> {
        match &self.nodes[v.0].op {
            Op::BatchNormTrain { mean, var, x, .. } => Some(BatchStats {
                mean: mean.clone(),
                var: var.clone(),
                batch: self.value(*x).rows(),
            }),
            _ => None,
        }
    }

    fn check_affine(&self, gamma: Var, beta: Var, width: usize) -> Result<()> {
        if self.value(gamma).numel() != width || self.value(beta).numel() != width {
            return Err(Error::dim(format!(
                "scale/shift must have {width} values, got {} and {}",
                self.value(gamma).numel(),
                self.value(beta).numel()
            )));
        }
        Ok(())
    }

    fn affine(&self, xhat: &[f64], p: usize, q: usize, gamma: Var, beta: Var) -> Result<Tensor> {
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let data = xhat
            .chunks(q)
            .flat_map(|row| row.iter().enumerate().map(|(j, v)| v * g[j] + b[j]))
            .collect();
        Tensor::matrix(p, q, data)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (p, q) = self.mat(x)?;
        let src = self.value(x).data();
        let mut data = vec![0.0; p * q];
        for i in 0..p {
            for j in 0..q {
                data[j * p + i] = src[i * q + j];
            }
        }
        let out = Tensor::matrix(q, p, data)?;
        self.push(out, Op::Transpose(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean over rows: `[L×d] -> [1×d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (l, d) = self.mat(x)?;
        let mut acc = vec![0.0; d];
        for row in self.value(x).data().chunks(d) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= l as f64);
        self.push(Tensor::row(&acc), Op::MeanRows(x), &[x])
    }

    /// Column-wise max over rows: `[L×d] -> [1×d]`. Ties resolve to the earliest row.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let (l, d) = self.mat(x)?;
        let src = self.value(x).data();
        let mut best = src[..d].to_vec();
        let mut arg = vec![0usize; d];
        for t in 1..l {
            for j in 0..d {
                let v = src[t * d + j];
                if v > best[j] {
                    best[j] = v;
                    arg[j] = t;
                }
            }
        }
        self.push(Tensor::row(&best), Op::MaxRows(x, arg), &[x])
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let rows = self.mat(*first)?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.mat(p)?;
            if r != rows {
                return Err(Error::dim(format!("concat_cols row mismatch: {r} vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &c) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let cols = self.mat(*first)?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.mat(p)?;
            if c != cols {
                return Err(Error::dim(format!("concat_rows width mismatch: {c} vs {cols}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (l, d) = self.mat(x)?;
        if len == 0 || start + len > l {
            return Err(Error::dim(format!(
                "row slice {start}..{} out of range for {l} rows",
                start + len
            )));
        }
        let data = self.value(x).data()[start * d..(start + len) * d].to_vec();
        let out = Tensor::matrix(len, d, data)?;
        self.push(out, Op::SliceRows(x, start), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), &[x])
    }

    /// One-dimensional convolution along rows with explicit tap offsets.
    ///
    /// `weight` is `[taps, d_in, d_out]`, `bias` holds `d_out` values, and
    /// output row `t` is `bias + Σ_i x[t + offsets[i]] · weight[i]` where rows
    /// outside `0..L` read as zero. Output length equals input length.
    pub fn dilated_conv(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        offsets: &[isize],
    ) -> Result<Var> {
        let (l, d_in) = self.mat(x)?;
        let wshape = self.value(weight).shape().to_vec();
        let [taps, w_in, d_out] = wshape[..] else {
            return Err(Error::dim(format!(
                "conv weight must be [taps, d_in, d_out], got {wshape:?}"
            )));
        };
        if taps != offsets.len() || w_in != d_in {
            return Err(Error::dim(format!(
                "conv weight {wshape:?} does not match {} taps over width {d_in}",
                offsets.len()
            )));
        }
        if self.value(bias).numel() != d_out {
            return Err(Error::dim("conv bias width mismatch"));
        }
        let xs = self.value(x).data();
        let ws = self.value(weight).data();
        let mut data = Vec::with_capacity(l * d_out);
        for _ in 0..l {
            data.extend_from_slice(self.value(bias).data());
        }
        for (i, &off) in offsets.iter().enumerate() {
            let w_tap = &ws[i * d_in * d_out..(i + 1) * d_in * d_out];
            for t in 0..l {
                let src = t as isize + off;
                if src < 0 || src >= l as isize {
                    continue;
                }
                let x_row = &xs[src as usize * d_in..(src as usize + 1) * d_in];
                let out_row = &mut data[t * d_out..(t + 1) * d_out];
                for (k, &xv) in x_row.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    for (o, wv) in out_row.iter_mut().zip(&w_tap[k * d_out..(k + 1) * d_out]) {
                        *o += xv * wv;
                    }
                }
            }
        }
        let out = Tensor::matrix(l, d_out, data)?;
        self.push(
            out,
            Op::DilatedConv {
                x,
                weight,
                bias,
                offsets: offsets.to_vec(),
            },
            &[x, weight, bias],
        )
    }

    /// Scales each row to unit L2 norm; all-zero rows stay zero.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (p, q) = self.mat(x)?;
        let mut data = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(p);
        for row in data.chunks_mut(q) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        let out = Tensor::matrix(p, q, data)?;
        self.push(out, Op::NormalizeRows(x, norms), &[x])
    }

    /// Picks flat positions of `x` into a `[1×k]` row.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::dim(format!(
                "gather index {bad} out of range for {} values",
                src.len()
            )));
        }
        if indices.is_empty() {
            return Err(Error::dim("gather of zero indices"));
        }
        let data: Vec<f64> = indices.iter().map(|&i| src[i]).collect();
        self.push(Tensor::row(&data), Op::Gather(x, indices.to_vec()), &[x])
    }

    /// Discrete choices made by the forward pass: relu input signs, max-pool
    /// argmaxes and gathered positions. Two evaluations with equal signatures
    /// lie on the same smooth piece of the recorded function.
    pub fn branch_signature(&self) -> Vec<usize> {
        let mut sig = Vec::new();
        for n in &self.nodes {
            match &n.op {
                Op::Unary(Activation::Relu, x) => {
                    sig.extend(self.value(*x).data().iter().map(|&v| usize::from(v > 0.0)))
                }
                Op::MaxRows(_, arg) => sig.extend_from_slice(arg),
                Op::Gather(_, idx) => sig.extend_from_slice(idx),
                _ => {}
            }
        }
        sig
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar seed, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let acc = |v: Var, delta: Vec<f64>, grads: &mut [Option<Vec<f64>>]| {
            if !needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(&delta) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (p, q) = self.value(*a).dims2().expect("matrix");
                let r = node.value.cols();
                if needs(*a) {
                    acc(*a, matmul_nt(g, self.value(*b).data(), p, r, q), grads);
                }
                if needs(*b) {
                    acc(*b, matmul_tn(self.value(*a).data(), g, p, q, r), grads);
                }
            }
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
                let reduce = |full: Vec<f64>, n: usize| {
                    if n == 1 && full.len() != 1 {
                        vec![full.iter().sum()]
                    } else {
                        full
                    }
                };
                let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
                    Binary::Add => (g.to_vec(), g.to_vec()),
                    Binary::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
                    Binary::Mul => (
                        g.iter()
                            .enumerate()
                            .map(|(i, gv)| gv * pick(tb.data(), i))
                            .collect(),
                        g.iter()
                            .enumerate()
                            .map(|(i, gv)| gv * pick(ta.data(), i))
                            .collect(),
                    ),
                };
                acc(*a, reduce(ga, ta.numel()), grads);
                acc(*b, reduce(gb, tb.numel()), grads);
            }
            Op::AddRow(x, bias) => {
                acc(*x, g.to_vec(), grads);
                if needs(*bias) {
                    let q = node.value.cols();
                    let mut gb = vec![0.0; q];
                    for row in g.chunks(q) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    acc(*bias, gb, grads);
                }
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect(), grads),
            Op::AddScalar(x) => acc(*x, g.to_vec(), grads),
            Op::Unary(act, x) => {
                let xs = self.value(*x).data();
                let ys = node.value.data();
                let gx = g
                    .iter()
                    .zip(xs.iter().zip(ys))
                    .map(|(gv, (&xv, &yv))| gv * act.derivative(xv, yv))
                    .collect();
                acc(*x, gx, grads);
            }
            Op::SoftmaxRows(x) => {
                let q = node.value.cols();
                let y = node.value.data();
                let mut gx = vec![0.0; y.len()];
                for ((gr, yr), out) in g.chunks(q).zip(y.chunks(q)).zip(gx.chunks_mut(q)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..q {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, gx, grads);
            }
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let q = node.value.cols();
                let gam = self.value(*gamma).data();
                let (gg, gbeta) = affine_param_grads(g, xhat, q);
                acc(*gamma, gg, grads);
                acc(*beta, gbeta, grads);
                if needs(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for (i, inv) in inv_std.iter().enumerate() {
                        let range = i * q..(i + 1) * q;
                        let dxhat: Vec<f64> =
                            g[range.clone()].iter().zip(gam).map(|(a, b)| a * b).collect();
                        let xh = &xhat[range.clone()];
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let n = q as f64;
                        for j in 0..q {
                            gx[i * q + j] = inv / n * (n * dxhat[j] - sum_d - xh[j] * sum_dx);
                        }
                    }
                    acc(*x, gx, grads);
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                ..
            } => {
                let (b, d) = (node.value.rows(), node.value.cols());
                let gam = self.value(*gamma).data();
                let (gg, gbeta) = affine_param_grads(g, xhat, d);
                acc(*gamma, gg, grads);
                acc(*beta, gbeta, grads);
                if needs(*x) {
                    let n = b as f64;
                    let mut sum_d = vec![0.0; d];
                    let mut sum_dx = vec![0.0; d];
                    for i in 0..b {
                        for j in 0..d {
                            let dxh = g[i * d + j] * gam[j];
                            sum_d[j] += dxh;
                            sum_dx[j] += dxh * xhat[i * d + j];
                        }
                    }
                    let mut gx = vec![0.0; b * d];
                    for i in 0..b {
                        for j in 0..d {
                            let dxh = g[i * d + j] * gam[j];
                            gx[i * d + j] = inv_std[j] / n
                                * (n * dxh - sum_d[j] - xhat[i * d + j] * sum_dx[j]);
                        }
                    }
                    acc(*x, gx, grads);
                }
            }
            Op::BatchNormInfer {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = node.value.cols();
                let gam = self.value(*gamma).data();
                let (gg, gbeta) = affine_param_grads(g, xhat, d);
                acc(*gamma, gg, grads);
                acc(*beta, gbeta, grads);
                if needs(*x) {
                    let gx = g
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| gv * gam[i % d] * inv_std[i % d])
                        .collect();
                    acc(*x, gx, grads);
                }
            }
            Op::Transpose(x) => {
                let (p, q) = self.value(*x).dims2().expect("matrix");
                let mut gx = vec![0.0; p * q];
                for i in 0..p {
                    for j in 0..q {
                        gx[i * q + j] = g[j * p + i];
                    }
                }
                acc(*x, gx, grads);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).numel()], grads),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0] / n as f64; n], grads);
            }
            Op::MeanRows(x) => {
                let l = self.value(*x).rows();
                let scaled: Vec<f64> = g.iter().map(|v| v / l as f64).collect();
                acc(*x, scaled.repeat(l), grads);
            }
            Op::MaxRows(x, arg) => {
                let d = arg.len();
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (j, &t) in arg.iter().enumerate() {
                    gx[t * d + j] += g[j];
                }
                acc(*x, gx, grads);
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if needs(p) {
                        let mut gp = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            gp.extend_from_slice(&g[i * total + offset..i * total + offset + c]);
                        }
                        acc(p, gp, grads);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    acc(p, g[offset..offset + n].to_vec(), grads);
                    offset += n;
                }
            }
            Op::SliceRows(x, start) => {
                let d = node.value.cols();
                let mut gx = vec![0.0; self.value(*x).numel()];
                gx[start * d..start * d + g.len()].copy_from_slice(g);
                acc(*x, gx, grads);
            }
            Op::Reshape(x) => acc(*x, g.to_vec(), grads),
            Op::DilatedConv {
                x,
                weight,
                bias,
                offsets,
            } => {
                let (l, d_in) = self.value(*x).dims2().expect("matrix");
                let d_out = node.value.cols();
                let xs = self.value(*x).data();
                let ws = self.value(*weight).data();
                let mut gx = vec![0.0; l * d_in];
                let mut gw = vec![0.0; ws.len()];
                for (i, &off) in offsets.iter().enumerate() {
                    let base = i * d_in * d_out;
                    for t in 0..l {
                        let src = t as isize + off;
                        if src < 0 || src >= l as isize {
                            continue;
                        }
                        let src = src as usize;
                        let g_row = &g[t * d_out..(t + 1) * d_out];
                        for k in 0..d_in {
                            let w_row = &ws[base + k * d_out..base + (k + 1) * d_out];
                            gx[src * d_in + k] +=
                                g_row.iter().zip(w_row).map(|(a, b)| a * b).sum::<f64>();
                            let xv = xs[src * d_in + k];
                            let gw_row = &mut gw[base + k * d_out..base + (k + 1) * d_out];
                            for (gwv, gv) in gw_row.iter_mut().zip(g_row) {
                                *gwv += xv * gv;
                            }
                        }
                    }
                }
                let mut gb = vec![0.0; d_out];
                for row in g.chunks(d_out) {
                    for (a, v) in gb.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                acc(*x, gx, grads);
                acc(*weight, gw, grads);
                acc(*bias, gb, grads);
            }
            Op::NormalizeRows(x, norms) => {
                let q = node.value.cols();
                let y = node.value.data();
                let mut gx = vec![0.0; y.len()];
                for (i, &n) in norms.iter().enumerate() {
                    if n == 0.0 {
                        continue;
                    }
                    let range = i * q..(i + 1) * q;
                    let yr = &y[range.clone()];
                    let gr = &g[range.clone()];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..q {
                        gx[i * q + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                acc(*x, gx, grads);
            }
            Op::Gather(x, indices) => {
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (gv, &i) in g.iter().zip(indices) {
                    gx[i] += gv;
                }
                acc(*x, gx, grads);
            }
        }
    }
}

fn affine_param_grads(g: &[f64], xhat: &[f64], width: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gg = vec![0.0; width];
    let mut gb = vec![0.0; width];
    for (gr, xr) in g.chunks(width).zip(xhat.chunks(width)) {
        for j in 0..width {
            gg[j] += gr[j] * xr[j];
            gb[j] += gr[j];
        }
    }
    (gg, gb)
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Binary(..) => "elementwise",
        Op::AddRow(..) => "add_row",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Unary(..) => "activation",
        Op::SoftmaxRows(..) => "softmax_rows",
        Op::LayerNormRows { .. } => "layer_norm",
        Op::BatchNormTrain { .. } | Op::BatchNormInfer { .. } => "batch_norm",
        Op::Transpose(..) => "transpose",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::MeanRows(..) => "mean_rows",
        Op::MaxRows(..) => "max_rows",
        Op::ConcatCols(..) | Op::ConcatRows(..) => "concat",
        Op::SliceRows(..) => "slice_rows",
        Op::Reshape(..) => "reshape",
        Op::DilatedConv { .. } => "dilated_conv",
        Op::NormalizeRows(..) => "normalize_rows",
        Op::Gather(..) => "gather",
    }
}

/// Output of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the seed with respect to `v`, if `v` lies on a differentiable path.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, rows: &[Vec<f64>]) -> Var {
        g.leaf(Tensor::from_rows(rows).with_requires_grad(true))
    }

    #[test]
    fn matmul_small_cases() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::identity(2));
        let b = g.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0]);

        let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn activations_on_sign_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[-1.0, 0.0, 2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(Tensor::row(&[0.0]));
        let t = g.tanh(z).unwrap();
        assert_eq!(g.value(t).data(), &[0.0]);
        let h = g.constant(Tensor::row(&[0.5]));
        let s = g.sigmoid(h).unwrap();
        assert!((g.value(s).item() - 1.0 / (1.0 + (-0.5f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(&[0.0, 1.0, -1.0]).with_requires_grad(true));
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn incompatible_broadcast_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(g.add(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn scalar_broadcast_gradient_reduces() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[vec![1.0, 2.0, 3.0]]);
        let c = g.leaf(Tensor::scalar(2.0).with_requires_grad(true));
        let m = g.mul(a, c).unwrap();
        let s = g.sum(m).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(c).unwrap(), &[6.0]);
        assert_eq!(grads.get(a).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![1000.0, 1000.0]]));
        let s = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5, 0.5, 0.5]);

        let x = g.constant(Tensor::row(&[1.0, 2.0, 3.0]));
        let s = g.softmax_rows(x).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in g.value(s).data().iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-15);
        }
        let expected = [0.0900, 0.2447, 0.6652];
        for (v, e) in g.value(s).data().iter().zip(expected) {
            assert!((v - e).abs() < 1e-4);
        }
    }

    #[test]
    fn batch_norm_cases() {
        let mut g = Graph::new();
        let gamma = g.constant(Tensor::row(&[1.0]));
        let beta = g.constant(Tensor::row(&[0.0]));
        let x = g.constant(Tensor::from_rows(&[vec![1.0], vec![3.0]]));
        let y = g.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
        let scale = 1.0 / (1.0 + 1e-5f64).sqrt();
        assert!((g.value(y).data()[0] + scale).abs() < 1e-15);
        assert!((g.value(y).data()[1] - scale).abs() < 1e-15);
        let stats = g.batch_stats(y).unwrap();
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.var, vec![1.0]);

        let same = g.constant(Tensor::from_rows(&[vec![4.0], vec![4.0], vec![4.0]]));
        let y = g.batch_norm_train(same, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let single = g.constant(Tensor::row(&[1.0]));
        assert!(matches!(
            g.batch_norm_train(single, gamma, beta, 1e-5),
            Err(Error::BatchSize(_))
        ));

        let x = g.constant(Tensor::from_rows(&[vec![0.3], vec![-2.0]]));
        let y = g.batch_norm_infer(x, gamma, beta, &[0.0], &[1.0], 1e-5).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(x)) < 1e-5);
    }

    #[test]
    fn backward_simple_cases() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap().with_requires_grad(true));
        let s = g.sum(x).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_requires_grad(true));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_seed() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(&[1.0, 2.0]).with_requires_grad(true));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(&[1.0, 2.0]).with_requires_grad(true));
        let c = g.constant(Tensor::row(&[3.0, 4.0]));
        let m = g.mul(x, c).unwrap();
        let s = g.sum(m).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn max_rows_ties_pick_first_row() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_rows(&[vec![1.0], vec![1.0]]).with_requires_grad(true));
        let m = g.max_rows(x).unwrap();
        let s = g.sum(m).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn non_finite_values_are_reported() {
        let mut g = Graph::new();
        g.set_check_finite(true);
        let x = g.constant(Tensor::row(&[f64::MAX]));
        assert!(matches!(g.scale(x, 10.0), Err(Error::Numerical(_))));
    }
}
