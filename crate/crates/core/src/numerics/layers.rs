//! Parameterized building blocks shared by both passes.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.add_uniform(format!("{prefix}.w"), input, output, input, rng)?;
        let b = store.add_uniform(format!("{prefix}.b"), 1, output, input, rng)?;
        Ok(Self {
            w,
            b,
            input,
            output,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.affine(x, self.w, self.b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{prefix}.gamma"), Tensor::filled(1, dim, 1.0))?;
        let beta = store.add(format!("{prefix}.beta"), Tensor::zeros(1, dim))?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.layer_norm(x, self.gamma, self.beta)
    }
}

/// Single LSTM layer, gate layout `[input, forget, cell, output]`.
#[derive(Debug, Clone)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w_ih = store.add_uniform(format!("{prefix}.w_ih"), input, 4 * hidden, hidden, rng)?;
        let w_hh = store.add_uniform(format!("{prefix}.w_hh"), hidden, 4 * hidden, hidden, rng)?;
        let bias = store.add_uniform(format!("{prefix}.bias"), 1, 4 * hidden, hidden, rng)?;
        Ok(Self {
            w_ih,
            w_hh,
            bias,
            input,
            hidden,
        })
    }

    /// Input projection `x W_ih` for a whole `T x input` sequence at once.
    pub fn project_inputs(&self, g: &mut Graph, xs: Var) -> Result<Var> {
        let w = g.param(self.w_ih);
        g.matmul(xs, w)
    }

    /// One recurrence step given the precomputed `1 x 4H` input projection.
    pub fn step_projected(&self, g: &mut Graph, x_proj: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let w_hh = g.param(self.w_hh);
        let bias = g.param(self.bias);
        let hw = g.matmul(h, w_hh)?;
        let pre = g.add(x_proj, hw)?;
        let pre = g.add_row(pre, bias)?;
        let n = self.hidden;
        let i = g.slice_cols(pre, 0, n)?;
        let f = g.slice_cols(pre, n, n)?;
        let cand = g.slice_cols(pre, 2 * n, n)?;
        let o = g.slice_cols(pre, 3 * n, n)?;
        let i = g.sigmoid(i)?;
        let f = g.sigmoid(f)?;
        let cand = g.tanh(cand)?;
        let o = g.sigmoid(o)?;
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c_new = g.add(keep, write)?;
        let c_act = g.tanh(c_new)?;
        let h_new = g.mul(o, c_act)?;
        Ok((h_new, c_new))
    }
}

/// Standard LSTM cell: `(h, c) = cell(x, h_prev, c_prev)`.
pub fn lstm_cell(
    g: &mut Graph,
    params: &LstmParams,
    x: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let dims = [
        (g.value(x).cols(), params.input),
        (g.value(h_prev).cols(), params.hidden),
        (g.value(c_prev).cols(), params.hidden),
    ];
    if dims.iter().any(|(got, want)| got != want) {
        return Err(Error::shape("lstm_cell", format!("{dims:?}")));
    }
    let xp = params.project_inputs(g, x)?;
    params.step_projected(g, xp, h_prev, c_prev)
}

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionParams {
    /// `dim` is the model width; keys and values are read from `kv_dim`-wide rows.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{prefix}.q"), dim, dim, rng)?,
            key: Linear::new(store, &format!("{prefix}.k"), kv_dim, dim, rng)?,
            value: Linear::new(store, &format!("{prefix}.v"), kv_dim, dim, rng)?,
            out: Linear::new(store, &format!("{prefix}.o"), dim, dim, rng)?,
            heads,
            dim,
        })
    }
}

/// Output of [`attend`]: the concatenated per-head context and, per head,
/// the `Tq x Tk` attention weights.
pub struct Attended {
    pub context: Var,
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention over already-projected `q [Tq x D]`,
/// `k`, `v [Tk x D]`. `mask` is `Tq x Tk` row-major, `true` = may attend.
pub fn attend(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Attended> {
    let dim = g.value(q).cols();
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!(
            "attention width {dim} is not divisible by {heads} heads"
        )));
    }
    let (tq, tk) = (g.value(q).rows(), g.value(k).rows());
    if let Some(m) = mask {
        if m.len() != tq * tk {
            return Err(Error::shape(
                "attention",
                format!("mask has {} entries, expected {tq}x{tk}", m.len()),
            ));
        }
    }
    let head_dim = dim / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut contexts = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * head_dim, head_dim)?;
        let kh = g.slice_cols(k, h * head_dim, head_dim)?;
        let vh = g.slice_cols(v, h * head_dim, head_dim)?;
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let p = g.softmax(scores, mask)?;
        contexts.push(g.matmul(p, vh)?);
        weights.push(p);
    }
    let context = g.concat_cols(&contexts)?;
    Ok(Attended { context, weights })
}

/// Multi-head attention with learned projections; queries from `q_in`,
/// keys and values from `kv_in`.
pub fn multi_head_attention(
    g: &mut Graph,
    p: &AttentionParams,
    q_in: Var,
    kv_in: Var,
    mask: Option<&[bool]>,
) -> Result<Var> {
    Ok(multi_head_attention_with_weights(g, p, q_in, kv_in, mask)?.0)
}

pub fn multi_head_attention_with_weights(
    g: &mut Graph,
    p: &AttentionParams,
    q_in: Var,
    kv_in: Var,
    mask: Option<&[bool]>,
) -> Result<(Var, Vec<Var>)> {
    let q = p.query.forward(g, q_in)?;
    let k = p.key.forward(g, kv_in)?;
    let v = p.value.forward(g, kv_in)?;
    let att = attend(g, q, k, v, p.heads, mask)?;
    let out = p.out.forward(g, att.context)?;
    Ok((out, att.weights))
}

/// Lower-triangular `n x n` mask.
pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|i| i % n <= i / n).collect()
}

/// Fixed sinusoidal position table, `len x dim`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            t.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}
