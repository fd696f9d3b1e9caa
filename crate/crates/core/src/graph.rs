//! Reverse-mode automatic differentiation over an append-only record.
//!
//! Every operation evaluates eagerly and appends a node holding its output
//! and enough saved state to run its backward rule. Nodes are stored in
//! execution order, which is already a topological order, so `backward`
//! is a single reverse sweep.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::math::{self, axpy, dot};
use crate::tensor::{softmax_in_place, Tensor};

pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Conv1d { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleBy { x: Var, s: Var },
    ScaleConst { x: Var, c: f64 },
    Sigmoid(Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    Reshape(Var),
    SoftmaxRows(Var),
    RowSum(Var),
    SumAll(Var),
    BatchNormTrain {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        scale: Var,
        shift: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaskMul { x: Var, mask: Vec<f64> },
    SoftmaxXent(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Computation record: values plus backward rules, in execution order.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every tracked node.
#[derive(Debug, Clone)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient buffer of `v`; `None` for untracked nodes.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn dim_err(op: &'static str, left: &Tensor, right: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: left.shape().to_vec(),
        right: right.shape().to_vec(),
    }
}

fn matrix_shape(like: &Tensor, rows: usize, cols: usize) -> Vec<usize> {
    let mut s = like.shape().to_vec();
    if s.len() >= 2 && s[..s.len() - 1].iter().product::<usize>() == rows {
        *s.last_mut().unwrap() = cols;
        s
    } else {
        vec![rows, cols]
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|i| self.nodes[i.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// `y = x W^T + b` over the last dimension of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape().len() != 2 || xv.cols() != wv.shape()[1] {
            return Err(dim_err("linear", xv, wv));
        }
        let (n, inp, out) = (xv.rows(), wv.shape()[1], wv.shape()[0]);
        let bias = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.len() != out {
                    return Err(dim_err("linear", wv, bv));
                }
                Some(bv.data())
            }
            None => None,
        };
        let (xd, wd) = (xv.data(), wv.data());
        let mut y = vec![0.0; n * out];
        for i in 0..n {
            let xr = &xd[i * inp..(i + 1) * inp];
            let yr = &mut y[i * out..(i + 1) * out];
            for (o, yo) in yr.iter_mut().enumerate() {
                *yo = dot(xr, &wd[o * inp..(o + 1) * inp]) + bias.map_or(0.0, |b| b[o]);
            }
        }
        let shape = matrix_shape(xv, n, out);
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Tensor::from_parts(shape, y), Op::Linear { x, w, b }, &inputs))
    }

    /// `a (n x k) * b (k x m)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.cols() != bv.shape()[0] {
            return Err(dim_err("matmul", av, bv));
        }
        let (n, k, m) = (av.rows(), av.cols(), bv.cols());
        let (ad, bd) = (av.data(), bv.data());
        let mut y = vec![0.0; n * m];
        for i in 0..n {
            let yr = &mut y[i * m..(i + 1) * m];
            for p in 0..k {
                axpy(ad[i * k + p], &bd[p * m..(p + 1) * m], yr);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, m], y),
            Op::MatMul { a, b },
            &[a, b],
        ))
    }

    /// `a (n x k) * b^T` where `b` is `m x k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(dim_err("matmul_nt", av, bv));
        }
        let (n, k, m) = (av.rows(), av.cols(), bv.rows());
        let (ad, bd) = (av.data(), bv.data());
        let mut y = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                y[i * m + j] = dot(&ad[i * k..(i + 1) * k], &bd[j * k..(j + 1) * k]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, m], y),
            Op::MatMulNt { a, b },
            &[a, b],
        ))
    }

    /// Same-padded 1-D cross-correlation along the rows of `x (len x in)`.
    /// `w` is `out x in x width`, `width` odd.
    pub fn conv1d_same(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.is_empty() {
            return Err(Error::EmptyInput("conv1d_same"));
        }
        let ws = wv.shape();
        if ws.len() != 3 || ws[1] != xv.cols() || ws[2] % 2 == 0 {
            return Err(dim_err("conv1d_same", xv, wv));
        }
        let (len, inp, out, width) = (xv.rows(), ws[1], ws[0], ws[2]);
        if let Some(b) = b {
            if self.value(b).len() != out {
                return Err(dim_err("conv1d_same", wv, self.value(b)));
            }
        }
        let taps = transpose_taps(wv.data(), out, inp, width);
        let xd = xv.data();
        let half = width / 2;
        let mut y = vec![0.0; len * out];
        for p in 0..len {
            let yr = &mut y[p * out..(p + 1) * out];
            if let Some(b) = b {
                yr.copy_from_slice(self.nodes[b.0].value.data());
            }
            for t in 0..width {
                let Some(q) = (p + t).checked_sub(half).filter(|&q| q < len) else {
                    continue;
                };
                let xr = &xd[q * inp..(q + 1) * inp];
                for (o, yo) in yr.iter_mut().enumerate() {
                    *yo += dot(&taps[(t * out + o) * inp..(t * out + o + 1) * inp], xr);
                }
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(
            Tensor::from_parts(vec![len, out], y),
            Op::Conv1d { x, w, b },
            &inputs,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() || av.cols() != bv.cols() {
            return Err(dim_err(op, av, bv));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let av = self.value(a);
        let y: Vec<f64> = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::from_parts(shape, y), op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, Op::Add(a, b), |p, q| p + q))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, Op::Sub(a, b), |p, q| p - q))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, Op::Mul(a, b), |p, q| p * q))
    }

    /// Multiplies every entry of `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(dim_err("scale_by", self.value(x), sv));
        }
        let c = sv.item();
        let xv = self.value(x);
        let y = xv.data().iter().map(|v| v * c).collect();
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, y), Op::ScaleBy { x, s }, &[x, s]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let y = xv.data().iter().map(|v| v * c).collect();
        let shape = xv.shape().to_vec();
        self.push(Tensor::from_parts(shape, y), Op::ScaleConst { x, c }, &[x])
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let xv = self.value(x);
        let y = xv.data().iter().map(|&v| f(v)).collect();
        let shape = xv.shape().to_vec();
        self.push(Tensor::from_parts(shape, y), op, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), math::sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    /// Concatenation along the last dimension; all parts share `rows()`.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput("concat_cols"))?;
        let n = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != n {
                return Err(dim_err("concat_cols", self.value(first), self.value(p)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut y = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                y.extend_from_slice(self.value(p).row(i));
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, total], y),
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    /// Vertical stacking; all parts share `cols()`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput("concat_rows"))?;
        let c = self.value(first).cols();
        let mut y = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != c {
                return Err(dim_err("concat_rows", self.value(first), pv));
            }
            y.extend_from_slice(pv.data());
        }
        let n = y.len() / c;
        Ok(self.push(
            Tensor::from_parts(vec![n, c], y),
            Op::ConcatRows(parts.to_vec()),
            parts,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if len == 0 || start + len > xv.rows() {
            return Err(contract("slice_rows out of range"));
        }
        let c = xv.cols();
        let y = xv.data()[start * c..(start + len) * c].to_vec();
        Ok(self.push(
            Tensor::from_parts(vec![len, c], y),
            Op::SliceRows { x, start },
            &[x],
        ))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || len == 0 || start + len > xv.cols() {
            return Err(contract("slice_cols out of range"));
        }
        let c = xv.cols();
        let mut y = Vec::with_capacity(xv.rows() * len);
        for r in xv.data().chunks(c) {
            y.extend_from_slice(&r[start..start + len]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![xv.rows(), len], y),
            Op::SliceCols { x, start },
            &[x],
        ))
    }

    /// Row `k` of the output is row `idx[k]` of `x`; gradients scatter-add.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if idx.is_empty() {
            return Err(Error::EmptyInput("gather_rows"));
        }
        if idx.iter().any(|&i| i >= xv.rows()) {
            return Err(contract("gather_rows index out of range"));
        }
        let c = xv.cols();
        let mut y = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            y.extend_from_slice(xv.row(i));
        }
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), c], y),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Softmax over the last dimension of each row.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut y = xv.data().to_vec();
        for r in y.chunks_mut(c) {
            softmax_in_place(r);
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::from_parts(shape, y), Op::SoftmaxRows(x), &[x])
    }

    /// Sum over the last dimension: `n x c -> n x 1`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let y: Vec<f64> = xv.data().chunks(xv.cols()).map(|r| r.iter().sum()).collect();
        let n = y.len();
        self.push(Tensor::from_parts(vec![n, 1], y), Op::RowSum(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    /// Batch normalization with batch statistics (biased variance).
    /// Returns the output and the batch mean and unbiased variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        if n < 2 {
            return Err(contract("batch_norm in training mode needs at least 2 rows"));
        }
        self.check_feature_vec("batch_norm", x, scale)?;
        self.check_feature_vec("batch_norm", x, shift)?;
        let xd = xv.data();
        let mut mean = vec![0.0; c];
        for r in xd.chunks(c) {
            axpy(1.0, r, &mut mean);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for r in xd.chunks(c) {
            for j in 0..c {
                let d = r[j] - mean[j];
                var[j] += d * d;
            }
        }
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / math::sqrt(v / n as f64 + BATCH_NORM_EPS))
            .collect();
        let unbiased: Vec<f64> = var.iter().map(|v| v / (n - 1) as f64).collect();
        let mut xhat = vec![0.0; n * c];
        let (sd, hd) = (self.value(scale).data(), self.value(shift).data());
        let mut y = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                let h = (xd[i * c + j] - mean[j]) * inv_std[j];
                xhat[i * c + j] = h;
                y[i * c + j] = sd[j] * h + hd[j];
            }
        }
        let shape = xv.shape().to_vec();
        let out = self.push(
            Tensor::from_parts(shape, y),
            Op::BatchNormTrain {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            },
            &[x, scale, shift],
        );
        Ok((out, mean, unbiased))
    }

    /// Batch normalization with fixed running statistics: an affine map.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var> {
        self.check_feature_vec("batch_norm", x, scale)?;
        self.check_feature_vec("batch_norm", x, shift)?;
        let xv = self.value(x);
        let c = xv.cols();
        if running_mean.len() != c || running_var.len() != c {
            return Err(contract("batch_norm running statistics width"));
        }
        if running_var.iter().any(|&v| !(v > 0.0)) {
            return Err(contract("batch_norm running variance must be positive"));
        }
        let inv_std: Vec<f64> = running_var
            .iter()
            .map(|v| 1.0 / math::sqrt(v + BATCH_NORM_EPS))
            .collect();
        let (sd, hd) = (self.value(scale).data(), self.value(shift).data());
        let y = xv
            .data()
            .chunks(c)
            .flat_map(|r| {
                (0..c).map(|j| sd[j] * (r[j] - running_mean[j]) * inv_std[j] + hd[j])
            })
            .collect();
        let shape = xv.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, y),
            Op::BatchNormEval {
                x,
                scale,
                shift,
                mean: running_mean.to_vec(),
                inv_std,
            },
            &[x, scale, shift],
        ))
    }

    fn check_feature_vec(&self, op: &'static str, x: Var, p: Var) -> Result<()> {
        if self.value(p).len() != self.value(x).cols() {
            return Err(dim_err(op, self.value(x), self.value(p)));
        }
        Ok(())
    }

    /// Multiplies by a fixed mask (dropout with the keep-scale folded in).
    pub fn mask_mul(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(contract("mask length"));
        }
        let y = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, y), Op::MaskMul { x, mask }, &[x]))
    }

    /// In-batch softmax cross-entropy over a square score matrix whose
    /// diagonal holds the ground-truth pairs. Output is a scalar.
    pub fn batch_softmax_loss(&mut self, scores: Var) -> Result<Var> {
        let l = batch_softmax_loss(self.value(scores))?;
        Ok(self.push(Tensor::scalar(l), Op::SoftmaxXent(scores), &[scores]))
    }

    /// Gradient of the scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(contract("backward needs a scalar loss"));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(gy) = grads[id].take() else {
                continue;
            };
            self.backprop_node(id, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if node.tracked && grads[id].is_none() {
                grads[id] = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(Grads { grads })
    }

    fn backprop_node(&self, id: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        let tracked = |v: Var| self.nodes[v.0].tracked;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].tracked {
                return;
            }
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(g);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (n, inp, out) = (xv.rows(), wv.shape()[1], wv.shape()[0]);
                let (xd, wd) = (xv.data(), wv.data());
                acc(*x, &mut |g| {
                    for i in 0..n {
                        let gr = &mut g[i * inp..(i + 1) * inp];
                        for o in 0..out {
                            axpy(gy[i * out + o], &wd[o * inp..(o + 1) * inp], gr);
                        }
                    }
                });
                acc(*w, &mut |g| {
                    for i in 0..n {
                        let xr = &xd[i * inp..(i + 1) * inp];
                        for o in 0..out {
                            axpy(gy[i * out + o], xr, &mut g[o * inp..(o + 1) * inp]);
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |g| {
                        for r in gy.chunks(out) {
                            axpy(1.0, r, g);
                        }
                    });
                }
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                let (ad, bd) = (av.data(), bv.data());
                acc(*a, &mut |g| {
                    for i in 0..n {
                        for p in 0..k {
                            g[i * k + p] += dot(&gy[i * m..(i + 1) * m], &bd[p * m..(p + 1) * m]);
                        }
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..n {
                        for p in 0..k {
                            axpy(ad[i * k + p], &gy[i * m..(i + 1) * m], &mut g[p * m..(p + 1) * m]);
                        }
                    }
                });
            }
            Op::MatMulNt { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.rows());
                let (ad, bd) = (av.data(), bv.data());
                acc(*a, &mut |g| {
                    for i in 0..n {
                        for j in 0..m {
                            axpy(gy[i * m + j], &bd[j * k..(j + 1) * k], &mut g[i * k..(i + 1) * k]);
                        }
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..n {
                        for j in 0..m {
                            axpy(gy[i * m + j], &ad[i * k..(i + 1) * k], &mut g[j * k..(j + 1) * k]);
                        }
                    }
                });
            }
            Op::Conv1d { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let ws = wv.shape();
                let (len, inp, out, width) = (xv.rows(), ws[1], ws[0], ws[2]);
                let half = width / 2;
                let xd = xv.data();
                let neighbor = |p: usize, t: usize| (p + t).checked_sub(half).filter(|&q| q < len);
                if tracked(*x) {
                    let taps = transpose_taps(wv.data(), out, inp, width);
                    acc(*x, &mut |g| {
                        for p in 0..len {
                            for t in 0..width {
                                let Some(q) = neighbor(p, t) else { continue };
                                let gr = &mut g[q * inp..(q + 1) * inp];
                                for o in 0..out {
                                    axpy(
                                        gy[p * out + o],
                                        &taps[(t * out + o) * inp..(t * out + o + 1) * inp],
                                        gr,
                                    );
                                }
                            }
                        }
                    });
                }
                acc(*w, &mut |g| {
                    for p in 0..len {
                        for t in 0..width {
                            let Some(q) = neighbor(p, t) else { continue };
                            for o in 0..out {
                                let go = gy[p * out + o];
                                for i in 0..inp {
                                    g[(o * inp + i) * width + t] += go * xd[q * inp + i];
                                }
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |g| {
                        for r in gy.chunks(out) {
                            axpy(1.0, r, g);
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| axpy(1.0, gy, g));
                acc(*b, &mut |g| axpy(1.0, gy, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| axpy(1.0, gy, g));
                acc(*b, &mut |g| axpy(-1.0, gy, g));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |g| {
                    for k in 0..g.len() {
                        g[k] += gy[k] * bd[k];
                    }
                });
                acc(*b, &mut |g| {
                    for k in 0..g.len() {
                        g[k] += gy[k] * ad[k];
                    }
                });
            }
            Op::ScaleBy { x, s } => {
                let c = val(*s).item();
                let xd = val(*x).data();
                acc(*x, &mut |g| axpy(c, gy, g));
                acc(*s, &mut |g| g[0] += dot(gy, xd));
            }
            Op::ScaleConst { x, c } => acc(*x, &mut |g| axpy(*c, gy, g)),
            Op::Sigmoid(x) => {
                let yd = node.value.data();
                acc(*x, &mut |g| {
                    for k in 0..g.len() {
                        g[k] += gy[k] * yd[k] * (1.0 - yd[k]);
                    }
                });
            }
            Op::Relu(x) => {
                let xd = val(*x).data();
                acc(*x, &mut |g| {
                    for k in 0..g.len() {
                        if xd[k] > 0.0 {
                            g[k] += gy[k];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let c = val(p).cols();
                    acc(p, &mut |g| {
                        for (i, gr) in g.chunks_mut(c).enumerate() {
                            axpy(1.0, &gy[i * total + off..i * total + off + c], gr);
                        }
                    });
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    acc(p, &mut |g| axpy(1.0, &gy[off..off + n], g));
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let c = val(*x).cols();
                acc(*x, &mut |g| axpy(1.0, gy, &mut g[start * c..start * c + gy.len()]));
            }
            Op::SliceCols { x, start } => {
                let c = val(*x).cols();
                let len = node.value.cols();
                acc(*x, &mut |g| {
                    for (gr, gyr) in g.chunks_mut(c).zip(gy.chunks(len)) {
                        axpy(1.0, gyr, &mut gr[*start..*start + len]);
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let c = val(*x).cols();
                acc(*x, &mut |g| {
                    for (k, &i) in idx.iter().enumerate() {
                        axpy(1.0, &gy[k * c..(k + 1) * c], &mut g[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |g| axpy(1.0, gy, g)),
            Op::SoftmaxRows(x) => {
                let c = node.value.cols();
                let yd = node.value.data();
                acc(*x, &mut |g| {
                    for (r, gr) in g.chunks_mut(c).enumerate() {
                        let yr = &yd[r * c..(r + 1) * c];
                        let gyr = &gy[r * c..(r + 1) * c];
                        let inner = dot(yr, gyr);
                        for k in 0..c {
                            gr[k] += yr[k] * (gyr[k] - inner);
                        }
                    }
                });
            }
            Op::RowSum(x) => {
                let c = val(*x).cols();
                acc(*x, &mut |g| {
                    for (r, gr) in g.chunks_mut(c).enumerate() {
                        gr.iter_mut().for_each(|v| *v += gy[r]);
                    }
                });
            }
            Op::SumAll(x) => acc(*x, &mut |g| g.iter_mut().for_each(|v| *v += gy[0])),
            Op::BatchNormTrain {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            } => {
                let c = node.value.cols();
                let n = node.value.rows();
                let sd = val(*scale).data();
                acc(*scale, &mut |g| {
                    for i in 0..n {
                        for j in 0..c {
                            g[j] += gy[i * c + j] * xhat[i * c + j];
                        }
                    }
                });
                acc(*shift, &mut |g| {
                    for r in gy.chunks(c) {
                        axpy(1.0, r, g);
                    }
                });
                acc(*x, &mut |g| {
                    let mut sum_d = vec![0.0; c];
                    let mut sum_dx = vec![0.0; c];
                    for i in 0..n {
                        for j in 0..c {
                            let d = gy[i * c + j] * sd[j];
                            sum_d[j] += d;
                            sum_dx[j] += d * xhat[i * c + j];
                        }
                    }
                    let nf = n as f64;
                    for i in 0..n {
                        for j in 0..c {
                            let d = gy[i * c + j] * sd[j];
                            g[i * c + j] +=
                                inv_std[j] / nf * (nf * d - sum_d[j] - xhat[i * c + j] * sum_dx[j]);
                        }
                    }
                });
            }
            Op::BatchNormEval {
                x,
                scale,
                shift,
                mean,
                inv_std,
            } => {
                let c = node.value.cols();
                let xd = val(*x).data();
                let sd = val(*scale).data();
                acc(*scale, &mut |g| {
                    for (i, r) in gy.chunks(c).enumerate() {
                        for j in 0..c {
                            g[j] += r[j] * (xd[i * c + j] - mean[j]) * inv_std[j];
                        }
                    }
                });
                acc(*shift, &mut |g| {
                    for r in gy.chunks(c) {
                        axpy(1.0, r, g);
                    }
                });
                acc(*x, &mut |g| {
                    for (k, gk) in g.iter_mut().enumerate() {
                        *gk += gy[k] * sd[k % c] * inv_std[k % c];
                    }
                });
            }
            Op::MaskMul { x, mask } => acc(*x, &mut |g| {
                for k in 0..g.len() {
                    g[k] += gy[k] * mask[k];
                }
            }),
            Op::SoftmaxXent(x) => {
                let xv = val(*x);
                let n = xv.rows();
                let c = xv.cols();
                acc(*x, &mut |g| {
                    for i in 0..n {
                        let mut p = xv.row(i).to_vec();
                        softmax_in_place(&mut p);
                        p[i] -= 1.0;
                        axpy(gy[0] / n as f64, &p, &mut g[i * c..(i + 1) * c]);
                    }
                });
            }
        }
    }
}

/// `[o][i][t]` kernel layout to `[t][o][i]` so each tap is contiguous.
fn transpose_taps(w: &[f64], out: usize, inp: usize, width: usize) -> Vec<f64> {
    let mut taps = vec![0.0; w.len()];
    for o in 0..out {
        for i in 0..inp {
            for t in 0..width {
                taps[(t * out + o) * inp + i] = w[(o * inp + i) * width + t];
            }
        }
    }
    taps
}

/// `(1/B) sum_i -log softmax(scores[i])[i]` over a square `B x B` matrix.
///
/// Shared by the composition and correction objectives.
pub fn batch_softmax_loss(scores: &Tensor) -> Result<f64> {
    let (n, c) = (scores.rows(), scores.cols());
    if scores.shape().len() != 2 || n != c {
        return Err(contract("batch softmax loss needs a square score matrix"));
    }
    let mut total = 0.0;
    for i in 0..n {
        let row = scores.row(i);
        total += math::logsumexp(row) - row[i];
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_and_bias() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let x0 = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let w2 = g.constant(t(&[2, 2], &[5.0, -7.0, 0.5, 9.0]));
        let b2 = g.constant(t(&[2], &[3.0, -1.0]));
        let y = g.linear(x0, w2, Some(b2)).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, -1.0]);
    }

    #[test]
    fn linear_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let w = g.constant(Tensor::zeros(&[4, 2]));
        match g.linear(x, w, None) {
            Err(Error::Dimension { op, left, right }) => {
                assert_eq!(op, "linear");
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![4, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn conv_identity_kernel_and_padding() {
        let (inp, len) = (2, 3);
        let mut k = vec![0.0; inp * inp * 3];
        for i in 0..inp {
            k[(i * inp + i) * 3 + 1] = 1.0;
        }
        let xs = [1.0, -2.0, 0.5, 3.0, 4.0, -1.0];
        let mut g = Graph::new();
        let x = g.constant(t(&[len, inp], &xs));
        let w = g.constant(t(&[inp, inp, 3], &k));
        let y = g.conv1d_same(x, w, None).unwrap();
        assert_eq!(g.value(y).data(), &xs);

        // [I, I, I] on a single token: neighbours are zero padding.
        let mut k3 = vec![0.0; inp * inp * 3];
        for i in 0..inp {
            for tap in 0..3 {
                k3[(i * inp + i) * 3 + tap] = 1.0;
            }
        }
        let x1 = g.constant(t(&[1, inp], &[0.25, -4.0]));
        let w3 = g.constant(t(&[inp, inp, 3], &k3));
        let y = g.conv1d_same(x1, w3, None).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, -4.0]);
    }

    #[test]
    fn conv_rejects_even_width() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 2]));
        let w = g.constant(Tensor::zeros(&[2, 2, 2]));
        assert!(g.conv1d_same(x, w, None).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let s = g.sum_all(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn unreached_variable_gets_zero() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        let y = g.variable(t(&[2], &[3.0, 4.0]));
        let s = g.sum_all(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 0.0]);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn loss_uniform_is_ln_b() {
        let l = batch_softmax_loss(&Tensor::filled(&[32, 32], 0.7)).unwrap();
        assert!((l - 3.465736).abs() < 1e-6);
        assert!(batch_softmax_loss(&Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn loss_saturated() {
        let mut s = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            s.data_mut()[i * 4 + i] = 20.0;
        }
        let l = batch_softmax_loss(&s).unwrap();
        assert!(l > 0.0 && l < 1e-6);
        assert!((l - 3.0 * math::exp(-20.0)).abs() < 1e-12);
    }
}
