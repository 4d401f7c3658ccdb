//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive in execution order. [`Graph::backward`]
//! walks the tape in reverse and returns gradients for the parameters of the
//! store the graph was built against. Parameter values are shared with the
//! store (no copy), so building a graph for inference is cheap.

use std::collections::HashMap;
use std::sync::Arc;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LogSoftmax(Var),
    Softmax(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    SumAll(Var),
    PickSum(Var, Vec<(usize, usize)>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Tensor,
        inv_std: Vec<f64>,
    },
    OuterAdd(Var, Var),
    ScalarWithGrad(Var, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn check(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: self.store.shared_value(id),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(check("matmul", out)?, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let mut out = ta.clone();
        out.add_assign(tb)?;
        Ok(self.push(check("add", out)?, Op::Add(a, b)))
    }

    /// `a [m x n] + b [1 x n]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = ta.clone();
        let bias = tb.data();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bias) {
                *o += b;
            }
        }
        Ok(self.push(check("add_row", out)?, Op::AddRow(a, b)))
    }

    /// `x W + b`.
    pub fn affine(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let w = self.param(w);
        let b = self.param(b);
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(check("mul", out)?, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * factor);
        Ok(self.push(check("scale", out)?, Op::Scale(a, factor)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        Ok(self.push(check("sigmoid", out)?, Op::Sigmoid(a)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        Ok(self.push(check("tanh", out)?, Op::Tanh(a)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        Ok(self.push(check("relu", out)?, Op::Relu(a)))
    }

    /// Row-wise log-softmax over the last dimension.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.cols() == 0 {
            return Err(Error::shape("log_softmax", "empty last dimension"));
        }
        let mut out = t.clone();
        for r in 0..out.rows() {
            log_softmax_in_place(out.row_mut(r));
        }
        Ok(self.push(check("log_softmax", out)?, Op::LogSoftmax(a)))
    }

    /// Row-wise softmax. `mask[r * cols + c] == false` forces weight zero
    /// and removes that entry from the normalization; every row must keep
    /// at least one unmasked entry.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        if let Some(m) = mask {
            if m.len() != rows * cols {
                return Err(Error::shape(
                    "softmax",
                    format!("mask has {} entries for {rows}x{cols}", m.len()),
                ));
            }
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let src = t.row(r);
            let keep = |c: usize| mask.is_none_or(|m| m[r * cols + c]);
            let max = (0..cols)
                .filter(|&c| keep(c))
                .map(|c| src[c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::shape("softmax", format!("row {r} fully masked")));
            }
            let dst = out.row_mut(r);
            let mut total = 0.0;
            for c in 0..cols {
                if keep(c) {
                    dst[c] = (src[c] - max).exp();
                    total += dst[c];
                }
            }
            for v in dst.iter_mut() {
                *v /= total;
            }
        }
        Ok(self.push(check("softmax", out)?, Op::Softmax(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}+{len} > {}", t.cols()),
            ));
        }
        let mut out = Tensor::zeros(t.rows(), len);
        for r in 0..t.rows() {
            out.row_mut(r).copy_from_slice(&t.row(r)[start..start + len]);
        }
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols.max(1);
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.rows() {
            return Err(Error::shape(
                "slice_rows",
                format!("{start}+{len} > {}", t.rows()),
            ));
        }
        let c = t.cols();
        let out = Tensor::new(vec![len, c], t.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(out, Op::SliceRows(a, start)))
    }

    /// Embedding lookup: row `indices[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let c = t.cols();
        let mut out = Tensor::zeros(indices.len(), c);
        for (i, &idx) in indices.iter().enumerate() {
            if idx >= t.rows() {
                return Err(Error::shape(
                    "gather_rows",
                    format!("index {idx} >= {}", t.rows()),
                ));
            }
            out.row_mut(i).copy_from_slice(t.row(idx));
        }
        Ok(self.push(out, Op::GatherRows(table, indices.to_vec())))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    /// Sum of the selected `(row, col)` entries as a scalar.
    pub fn pick_sum(&mut self, a: Var, picks: &[(usize, usize)]) -> Result<Var> {
        let t = self.value(a);
        let mut s = 0.0;
        for &(r, c) in picks {
            if r >= t.rows() || c >= t.cols() {
                return Err(Error::shape("pick_sum", format!("({r},{c}) out of range")));
            }
            s += t.get(r, c);
        }
        Ok(self.push(Tensor::scalar(s), Op::PickSum(a, picks.to_vec())))
    }

    /// Per-row layer normalization with learned gain and bias (`1 x n` each).
    pub fn layer_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId) -> Result<Var> {
        let gamma = self.param(gamma);
        let beta = self.param(beta);
        let (t, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let n = t.cols();
        if g.len() != n || b.len() != n {
            return Err(Error::shape("layer_norm", "gain/bias width mismatch"));
        }
        let mut normed = Tensor::zeros(t.rows(), n);
        let mut out = Tensor::zeros(t.rows(), n);
        let mut inv_std = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for c in 0..n {
                let xh = (row[c] - mean) * inv;
                normed.set(r, c, xh);
                out.set(r, c, xh * g.data()[c] + b.data()[c]);
            }
        }
        let out = check("layer_norm", out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
        ))
    }

    /// `out[t * U + u] = a[t] + b[u]` for `a [T x J]`, `b [U x J]`.
    pub fn outer_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(Error::shape(
                "outer_add",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (t_len, u_len, j) = (ta.rows(), tb.rows(), ta.cols());
        let mut out = Tensor::zeros(t_len * u_len, j);
        for t in 0..t_len {
            for u in 0..u_len {
                let dst = out.row_mut(t * u_len + u);
                for ((d, x), y) in dst.iter_mut().zip(ta.row(t)).zip(tb.row(u)) {
                    *d = x + y;
                }
            }
        }
        Ok(self.push(check("outer_add", out)?, Op::OuterAdd(a, b)))
    }

    /// Records a scalar computed outside the graph whose gradient with
    /// respect to `input` is already known.
    pub fn scalar_with_grad(&mut self, input: Var, value: f64, grad: Tensor) -> Result<Var> {
        let t = self.value(input);
        if grad.len() != t.len() {
            return Err(Error::shape("scalar_with_grad", "gradient shape mismatch"));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: "scalar_with_grad",
            });
        }
        let grad = check("scalar_with_grad", grad)?;
        Ok(self.push(Tensor::scalar(value), Op::ScalarWithGrad(input, grad)))
    }

    /// Backpropagates from a scalar `loss`, returning gradients for every
    /// parameter of the store. Parameters not on the tape get no entry,
    /// which reads as zero.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Tensor::scalar(1.0));
        let mut grads = Gradients::empty(self.store.len());

        for i in (0..=loss.0).rev() {
            let Some(dout) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => grads.accumulate(*id, dout)?,
                Op::MatMul(a, b) => {
                    let da = dout.matmul_t(self.value(*b))?;
                    let db = self.value(*a).t_matmul(&dout)?;
                    acc(&mut adj, *a, da)?;
                    acc(&mut adj, *b, db)?;
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, dout.clone())?;
                    acc(&mut adj, *b, dout)?;
                }
                Op::AddRow(a, b) => {
                    let mut db = Tensor::zeros(1, dout.cols());
                    for r in 0..dout.rows() {
                        for (d, g) in db.data_mut().iter_mut().zip(dout.row(r)) {
                            *d += g;
                        }
                    }
                    acc(&mut adj, *a, dout)?;
                    acc(&mut adj, *b, db)?;
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let da = zip_map(&dout, tb, |g, v| g * v);
                    let db = zip_map(&dout, ta, |g, v| g * v);
                    acc(&mut adj, *a, da)?;
                    acc(&mut adj, *b, db)?;
                }
                Op::Scale(a, f) => acc(&mut adj, *a, dout.map(|g| g * f))?,
                Op::Sigmoid(a) => acc(&mut adj, *a, zip_map(&dout, y, |g, s| g * s * (1.0 - s)))?,
                Op::Tanh(a) => acc(&mut adj, *a, zip_map(&dout, y, |g, t| g * (1.0 - t * t)))?,
                Op::Relu(a) => {
                    let x = self.value(*a);
                    acc(&mut adj, *a, zip_map(&dout, x, |g, v| if v > 0.0 { g } else { 0.0 }))?
                }
                Op::LogSoftmax(a) => {
                    let mut dx = dout.clone();
                    for r in 0..dx.rows() {
                        let total: f64 = dout.row(r).iter().sum();
                        for (d, lp) in dx.row_mut(r).iter_mut().zip(y.row(r)) {
                            *d -= lp.exp() * total;
                        }
                    }
                    acc(&mut adj, *a, dx)?;
                }
                Op::Softmax(a) => {
                    let mut dx = dout.clone();
                    for r in 0..dx.rows() {
                        let dot: f64 = dout.row(r).iter().zip(y.row(r)).map(|(g, p)| g * p).sum();
                        for (d, p) in dx.row_mut(r).iter_mut().zip(y.row(r)) {
                            *d = p * (*d - dot);
                        }
                    }
                    acc(&mut adj, *a, dx)?;
                }
                Op::Transpose(a) => acc(&mut adj, *a, dout.transpose())?,
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut dp = Tensor::zeros(dout.rows(), w);
                        for r in 0..dout.rows() {
                            dp.row_mut(r).copy_from_slice(&dout.row(r)[offset..offset + w]);
                        }
                        offset += w;
                        acc(&mut adj, p, dp)?;
                    }
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut da = Tensor::zeros(src.rows(), src.cols());
                    for r in 0..dout.rows() {
                        da.row_mut(r)[*start..*start + dout.cols()].copy_from_slice(dout.row(r));
                    }
                    acc(&mut adj, *a, da)?;
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        let c = dout.cols();
                        let dp = Tensor::new(
                            vec![rows, c],
                            dout.data()[offset * c..(offset + rows) * c].to_vec(),
                        )?;
                        offset += rows;
                        acc(&mut adj, p, dp)?;
                    }
                }
                Op::SliceRows(a, start) => {
                    let src = self.value(*a);
                    let c = src.cols();
                    let mut da = Tensor::zeros(src.rows(), c);
                    da.data_mut()[start * c..start * c + dout.len()].copy_from_slice(dout.data());
                    acc(&mut adj, *a, da)?;
                }
                Op::GatherRows(table, indices) => {
                    let src = self.value(*table);
                    let mut dt = Tensor::zeros(src.rows(), src.cols());
                    for (i, &idx) in indices.iter().enumerate() {
                        for (d, g) in dt.row_mut(idx).iter_mut().zip(dout.row(i)) {
                            *d += g;
                        }
                    }
                    acc(&mut adj, *table, dt)?;
                }
                Op::SumAll(a) => {
                    let src = self.value(*a);
                    let g = dout.item()?;
                    acc(&mut adj, *a, Tensor::filled(src.rows(), src.cols(), g))?;
                }
                Op::PickSum(a, picks) => {
                    let src = self.value(*a);
                    let g = dout.item()?;
                    let mut da = Tensor::zeros(src.rows(), src.cols());
                    for &(r, c) in picks {
                        da.set(r, c, da.get(r, c) + g);
                    }
                    acc(&mut adj, *a, da)?;
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    normed,
                    inv_std,
                } => {
                    let g = self.value(*gamma);
                    let n = dout.cols();
                    let mut dx = Tensor::zeros(dout.rows(), n);
                    let mut dgamma = Tensor::zeros(1, n);
                    let mut dbeta = Tensor::zeros(1, n);
                    for r in 0..dout.rows() {
                        let dy = dout.row(r);
                        let xh = normed.row(r);
                        let dxh: Vec<f64> = dy.iter().zip(g.data()).map(|(a, b)| a * b).collect();
                        let mean_dxh = dxh.iter().sum::<f64>() / n as f64;
                        let mean_dxh_xh =
                            dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for c in 0..n {
                            dx.set(r, c, inv_std[r] * (dxh[c] - mean_dxh - xh[c] * mean_dxh_xh));
                            dgamma.data_mut()[c] += dy[c] * xh[c];
                            dbeta.data_mut()[c] += dy[c];
                        }
                    }
                    acc(&mut adj, *x, dx)?;
                    acc(&mut adj, *gamma, dgamma)?;
                    acc(&mut adj, *beta, dbeta)?;
                }
                Op::OuterAdd(a, b) => {
                    let (t_len, u_len) = (self.value(*a).rows(), self.value(*b).rows());
                    let j = dout.cols();
                    let mut da = Tensor::zeros(t_len, j);
                    let mut db = Tensor::zeros(u_len, j);
                    for t in 0..t_len {
                        for u in 0..u_len {
                            let g = dout.row(t * u_len + u);
                            for (d, v) in da.row_mut(t).iter_mut().zip(g) {
                                *d += v;
                            }
                            for (d, v) in db.row_mut(u).iter_mut().zip(g) {
                                *d += v;
                            }
                        }
                    }
                    acc(&mut adj, *a, da)?;
                    acc(&mut adj, *b, db)?;
                }
                Op::ScalarWithGrad(input, grad) => {
                    let g = dout.item()?;
                    acc(&mut adj, *input, grad.map(|v| v * g))?;
                }
            }
        }
        Ok(grads)
    }
}

fn acc(adj: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map operands share a shape")
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// `log(exp(a) + exp(b))`, tolerating `-inf` operands.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}
