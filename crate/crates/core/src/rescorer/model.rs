//! Pre-norm Transformer decoder that scores token sequences by
//! teacher forcing, cross-attending to audio embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSequence, Vocab};
use crate::error::{Error, Result};
use crate::numerics::layers::{
    attend, causal_mask, sinusoidal_positions, AttentionParams, LayerNorm, Linear,
};
use crate::numerics::{seeded_rng, Checkpoint, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RescorerConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Longest decoder sequence, counting the start and end symbols.
    pub max_len: usize,
    pub dropout: f64,
    /// Width of the audio embeddings used as cross-attention keys and values.
    pub memory_dim: usize,
}

impl Default for RescorerConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            dim: 64,
            heads: 4,
            ff_dim: 128,
            max_len: 64,
            dropout: 0.1,
            memory_dim: 64,
        }
    }
}

impl RescorerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "rescorer dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.layers == 0 || self.ff_dim == 0 || self.max_len < 2 || self.memory_dim == 0 {
            return Err(Error::Config(format!(
                "rescorer needs layers, ff_dim, memory_dim >= 1 and max_len >= 2, got {self:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} is outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Teacher-forced log-probability of one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescorerScore {
    pub total_logprob: f64,
    /// `log P(y_u | h, y_<u)` for each token, then `log P(eos | h, y)`.
    pub per_token_logprobs: Vec<f64>,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: AttentionParams,
    ln_cross: LayerNorm,
    cross_attn: AttentionParams,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

/// Dropout masks drawn from a caller-owned generator; `None` disables dropout.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut crate::numerics::Rng,
}

#[derive(Debug, Clone)]
pub struct Rescorer {
    pub config: RescorerConfig,
    pub vocab: Vocab,
    store: ParamStore,
    embedding: ParamId,
    layers: Vec<DecoderLayer>,
    ln_final: LayerNorm,
    out: Linear,
}

impl Rescorer {
    pub fn new(config: RescorerConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let mut store = ParamStore::new();
        let d = config.dim;
        // row 0 is the start symbol, row k the content symbol k
        let embedding = store.add_uniform("rescorer.embedding", vocab.size as usize + 1, d, 1, &mut rng)?;
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("rescorer.layer{i}");
            layers.push(DecoderLayer {
                ln_self: LayerNorm::new(&mut store, &format!("{p}.ln_self"), d)?,
                self_attn: AttentionParams::new(&mut store, &format!("{p}.self_attn"), d, d, config.heads, &mut rng)?,
                ln_cross: LayerNorm::new(&mut store, &format!("{p}.ln_cross"), d)?,
                cross_attn: AttentionParams::new(
                    &mut store,
                    &format!("{p}.cross_attn"),
                    d,
                    config.memory_dim,
                    config.heads,
                    &mut rng,
                )?,
                ln_ff: LayerNorm::new(&mut store, &format!("{p}.ln_ff"), d)?,
                ff_in: Linear::new(&mut store, &format!("{p}.ff_in"), d, config.ff_dim, &mut rng)?,
                ff_out: Linear::new(&mut store, &format!("{p}.ff_out"), config.ff_dim, d, &mut rng)?,
            });
        }
        let ln_final = LayerNorm::new(&mut store, "rescorer.ln_final", d)?;
        let out = Linear::new(&mut store, "rescorer.out", d, vocab.size as usize + 1, &mut rng)?;
        Ok(Self {
            config,
            vocab,
            store,
            embedding,
            layers,
            ln_final,
            out,
        })
    }

    pub fn from_checkpoint(config: RescorerConfig, vocab: Vocab, ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Self::new(config, vocab, 0)?;
        ckpt.load_into(&mut model.store)?;
        Ok(model)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Output column of the end-of-sequence symbol.
    pub fn eos_index(&self) -> usize {
        self.vocab.size as usize
    }

    fn check_sequence(&self, y: &TokenSequence) -> Result<()> {
        self.vocab.check(y.as_slice())?;
        let len = y.len() + 2;
        if len > self.config.max_len {
            return Err(Error::Length {
                len,
                max: self.config.max_len,
            });
        }
        Ok(())
    }

    /// Decoder input rows (start symbol then tokens) and target columns
    /// (tokens then end-of-sequence).
    fn teacher_forcing(&self, y: &TokenSequence) -> (Vec<usize>, Vec<usize>) {
        let mut inputs = Vec::with_capacity(y.len() + 1);
        inputs.push(0);
        inputs.extend(y.as_slice().iter().map(|&t| t as usize));
        let mut targets: Vec<usize> = y.as_slice().iter().map(|&t| t as usize - 1).collect();
        targets.push(self.eos_index());
        (inputs, targets)
    }

    fn dropout(&self, g: &mut Graph, x: Var, drop: &mut Option<Dropout<'_>>) -> Result<Var> {
        let Some(d) = drop else { return Ok(x) };
        if d.rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - d.rate;
        let shape = g.value(x).shape().to_vec();
        let n = g.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if d.rng.random_bool(keep) { 1.0 / keep } else { 0.0 })
            .collect();
        let m = g.constant(Tensor::new(shape, mask)?);
        g.mul(x, m)
    }

    /// Log-softmax outputs for `items`, each a list of embedding rows of
    /// common length `len`, stacked item-major. Every item attends to the
    /// same `memory`. Positions past an item's content only see earlier
    /// positions, so their contents never reach valid rows.
    pub(crate) fn forward_padded(
        &self,
        g: &mut Graph,
        memory: Var,
        items: &[Vec<usize>],
        drop: &mut Option<Dropout<'_>>,
    ) -> Result<Var> {
        let len = items.first().map_or(0, Vec::len);
        if len == 0 || items.iter().any(|it| it.len() != len) {
            return Err(Error::shape("rescorer", "items must share a nonzero length"));
        }
        if g.value(memory).cols() != self.config.memory_dim {
            return Err(Error::shape(
                "rescorer",
                format!(
                    "memory width {} does not match {}",
                    g.value(memory).cols(),
                    self.config.memory_dim
                ),
            ));
        }
        if g.value(memory).rows() == 0 {
            return Err(Error::shape("rescorer", "empty audio memory"));
        }
        let d = self.config.dim;
        let table = g.param(self.embedding);
        let flat: Vec<usize> = items.iter().flatten().copied().collect();
        let emb = g.gather_rows(table, &flat)?;
        let pos = sinusoidal_positions(len, d);
        let mut pos_all = Vec::with_capacity(flat.len() * d);
        for _ in items {
            pos_all.extend_from_slice(pos.data());
        }
        let pos = g.constant(Tensor::new(vec![flat.len(), d], pos_all)?);
        let mut x = g.add(emb, pos)?;
        x = self.dropout(g, x, drop)?;
        let mask = causal_mask(len);

        for layer in &self.layers {
            // causal self-attention, one item at a time
            let a = layer.ln_self.forward(g, x)?;
            let p = &layer.self_attn;
            let q = p.query.forward(g, a)?;
            let k = p.key.forward(g, a)?;
            let v = p.value.forward(g, a)?;
            let mut ctx = Vec::with_capacity(items.len());
            for i in 0..items.len() {
                let qi = g.slice_rows(q, i * len, len)?;
                let ki = g.slice_rows(k, i * len, len)?;
                let vi = g.slice_rows(v, i * len, len)?;
                ctx.push(attend(g, qi, ki, vi, p.heads, Some(&mask))?.context);
            }
            let ctx = g.concat_rows(&ctx)?;
            let s = p.out.forward(g, ctx)?;
            let s = self.dropout(g, s, drop)?;
            x = g.add(x, s)?;

            // cross-attention to the audio memory
            let a = layer.ln_cross.forward(g, x)?;
            let p = &layer.cross_attn;
            let q = p.query.forward(g, a)?;
            let k = p.key.forward(g, memory)?;
            let v = p.value.forward(g, memory)?;
            let ctx = attend(g, q, k, v, p.heads, None)?.context;
            let s = p.out.forward(g, ctx)?;
            let s = self.dropout(g, s, drop)?;
            x = g.add(x, s)?;

            let a = layer.ln_ff.forward(g, x)?;
            let f = layer.ff_in.forward(g, a)?;
            let f = g.relu(f)?;
            let f = layer.ff_out.forward(g, f)?;
            let f = self.dropout(g, f, drop)?;
            x = g.add(x, f)?;
        }
        let x = self.ln_final.forward(g, x)?;
        let logits = self.out.forward(g, x)?;
        g.log_softmax(logits)
    }

    /// Negative teacher-forced log-likelihood of `y` given `memory`.
    pub fn nll_graph(
        &self,
        g: &mut Graph,
        memory: Var,
        y: &TokenSequence,
        drop: &mut Option<Dropout<'_>>,
    ) -> Result<Var> {
        self.check_sequence(y)?;
        let (inputs, targets) = self.teacher_forcing(y);
        let lp = self.forward_padded(g, memory, &[inputs], drop)?;
        let picks: Vec<(usize, usize)> = targets.into_iter().enumerate().collect();
        let ll = g.pick_sum(lp, &picks)?;
        g.scale(ll, -1.0)
    }

    pub fn score(&self, h: &Tensor, y: &TokenSequence) -> Result<RescorerScore> {
        Ok(self.score_batch(h, std::slice::from_ref(y))?.remove(0))
    }

    /// Scores every sequence against the same embeddings in one padded pass.
    pub fn score_batch(&self, h: &Tensor, ys: &[TokenSequence]) -> Result<Vec<RescorerScore>> {
        if ys.is_empty() {
            return Ok(Vec::new());
        }
        let mut prepared = Vec::with_capacity(ys.len());
        for y in ys {
            self.check_sequence(y)?;
            prepared.push(self.teacher_forcing(y));
        }
        let len = prepared.iter().map(|(i, _)| i.len()).max().unwrap_or(1);
        let items: Vec<Vec<usize>> = prepared
            .iter()
            .map(|(inputs, _)| {
                let mut row = inputs.clone();
                row.resize(len, 0);
                row
            })
            .collect();
        let mut g = Graph::new(&self.store);
        let mem = g.constant(h.clone());
        let lp = self.forward_padded(&mut g, mem, &items, &mut None)?;
        let lp = g.value(lp);
        Ok(prepared
            .iter()
            .enumerate()
            .map(|(i, (_, targets))| {
                let per_token: Vec<f64> = targets
                    .iter()
                    .enumerate()
                    .map(|(p, &c)| lp.get(i * len + p, c))
                    .collect();
                RescorerScore {
                    total_logprob: per_token.iter().sum(),
                    per_token_logprobs: per_token,
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn tiny_config() -> RescorerConfig {
        RescorerConfig {
            layers: 1,
            dim: 4,
            heads: 2,
            ff_dim: 5,
            max_len: 8,
            dropout: 0.1,
            memory_dim: 3,
        }
    }

    fn memory(rows: usize, cols: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = seeded_rng(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    // ---- straight-line reference, one position at a time ----

    fn param<'a>(m: &'a Rescorer, name: &str) -> &'a Tensor {
        m.store().value(m.store().id(name).unwrap())
    }

    fn affine(m: &Rescorer, prefix: &str, x: &[f64]) -> Vec<f64> {
        let w = param(m, &format!("{prefix}.w"));
        let b = param(m, &format!("{prefix}.b"));
        (0..w.cols())
            .map(|j| b.data()[j] + (0..w.rows()).map(|i| x[i] * w.get(i, j)).sum::<f64>())
            .collect()
    }

    fn norm(m: &Rescorer, prefix: &str, x: &[f64]) -> Vec<f64> {
        let g = param(m, &format!("{prefix}.gamma"));
        let b = param(m, &format!("{prefix}.beta"));
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g.data()[i] + b.data()[i])
            .collect()
    }

    fn attention(m: &Rescorer, prefix: &str, query: &[f64], keys: &[Vec<f64>], heads: usize) -> Vec<f64> {
        let q = affine(m, &format!("{prefix}.q"), query);
        let ks: Vec<_> = keys.iter().map(|k| affine(m, &format!("{prefix}.k"), k)).collect();
        let vs: Vec<_> = keys.iter().map(|k| affine(m, &format!("{prefix}.v"), k)).collect();
        let hd = q.len() / heads;
        let mut ctx = vec![0.0; q.len()];
        for h in 0..heads {
            let r = h * hd..(h + 1) * hd;
            let s: Vec<f64> = ks
                .iter()
                .map(|k| r.clone().map(|i| q[i] * k[i]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
            for (j, v) in vs.iter().enumerate() {
                let p = (s[j] - mx).exp() / z;
                for i in r.clone() {
                    ctx[i] += p * v[i];
                }
            }
        }
        affine(m, &format!("{prefix}.o"), &ctx)
    }

    fn reference_score(m: &Rescorer, h: &Tensor, y: &[u32]) -> f64 {
        let d = m.config.dim;
        let emb = param(m, "rescorer.embedding");
        let mem: Vec<Vec<f64>> = (0..h.rows()).map(|r| h.row(r).to_vec()).collect();
        let mut inputs = vec![0usize];
        inputs.extend(y.iter().map(|&t| t as usize));
        let mut targets: Vec<usize> = y.iter().map(|&t| t as usize - 1).collect();
        targets.push(m.vocab.size as usize);
        let mut states: Vec<Vec<f64>> = Vec::new();
        let mut total = 0.0;
        for (p, &tok) in inputs.iter().enumerate() {
            let mut x: Vec<f64> = (0..d)
                .map(|i| {
                    let angle = p as f64 / 10000f64.powf(2.0 * (i / 2) as f64 / d as f64);
                    emb.get(tok, i) + if i % 2 == 0 { angle.sin() } else { angle.cos() }
                })
                .collect();
            // single layer: self-attention needs the normed states of every
            // position up to this one
            let a = norm(m, "rescorer.layer0.ln_self", &x);
            states.push(a.clone());
            let s = attention(m, "rescorer.layer0.self_attn", &a, &states, m.config.heads);
            x.iter_mut().zip(&s).for_each(|(v, s)| *v += s);
            let a = norm(m, "rescorer.layer0.ln_cross", &x);
            let c = attention(m, "rescorer.layer0.cross_attn", &a, &mem, m.config.heads);
            x.iter_mut().zip(&c).for_each(|(v, s)| *v += s);
            let a = norm(m, "rescorer.layer0.ln_ff", &x);
            let f: Vec<f64> = affine(m, "rescorer.layer0.ff_in", &a).into_iter().map(|v| v.max(0.0)).collect();
            let f = affine(m, "rescorer.layer0.ff_out", &f);
            x.iter_mut().zip(&f).for_each(|(v, s)| *v += s);
            let logits = affine(m, "rescorer.out", &norm(m, "rescorer.ln_final", &x));
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += logits[targets[p]] - lse;
        }
        total
    }

    #[test]
    fn matches_straight_line_reference() {
        let mut m = Rescorer::new(tiny_config(), Vocab::new(3), 5).unwrap();
        let ids: Vec<_> = m.store().ids().collect();
        for id in ids {
            m.store_mut().value_mut(id).data_mut().iter_mut().for_each(|v| *v *= 0.3);
        }
        let h = memory(4, 3, 1);
        for y in [vec![2u32, 3], vec![], vec![1, 1, 2, 3]] {
            let got = m.score(&h, &TokenSequence(y.clone())).unwrap();
            let want = reference_score(&m, &h, &y);
            assert!((got.total_logprob - want).abs() < 1e-10, "{y:?}: {} vs {want}", got.total_logprob);
            assert_eq!(got.per_token_logprobs.len(), y.len() + 1);
            let sum: f64 = got.per_token_logprobs.iter().sum();
            assert!((sum - got.total_logprob).abs() < 1e-9);
            assert!(got.total_logprob <= 0.0);
        }
    }

    #[test]
    fn zero_output_projection_is_uniform() {
        let mut m = Rescorer::new(tiny_config(), Vocab::new(3), 5).unwrap();
        for name in ["rescorer.out.w", "rescorer.out.b"] {
            let id = m.store().id(name).unwrap();
            m.store_mut().value_mut(id).data_mut().fill(0.0);
        }
        let s = m.score(&memory(3, 3, 2), &TokenSequence(vec![1, 3])).unwrap();
        assert!((s.total_logprob + 3.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn batch_equals_individual_and_padding_is_inert() {
        let m = Rescorer::new(tiny_config(), Vocab::new(3), 6).unwrap();
        let h = memory(5, 3, 3);
        let ys: Vec<TokenSequence> = [vec![1u32], vec![3, 2, 1, 2], vec![], vec![2, 2]]
            .into_iter()
            .map(TokenSequence)
            .collect();
        let batch = m.score_batch(&h, &ys).unwrap();
        for (y, b) in ys.iter().zip(&batch) {
            let one = m.score(&h, y).unwrap();
            assert!((one.total_logprob - b.total_logprob).abs() < 1e-9);
        }
        // fill the padded tail with arbitrary symbols
        let y = TokenSequence(vec![2, 1]);
        let (inputs, targets) = m.teacher_forcing(&y);
        let mut g = Graph::new(m.store());
        let mem = g.constant(h.clone());
        let mut a = inputs.clone();
        a.extend([3, 1, 2]);
        let mut b = inputs.clone();
        b.extend([0, 0, 0]);
        let lp = m.forward_padded(&mut g, mem, &[a, b], &mut None).unwrap();
        let lp = g.value(lp);
        for (p, &c) in targets.iter().enumerate() {
            assert_eq!(lp.get(p, c), lp.get(6 + p, c));
        }
    }

    #[test]
    fn rejects_long_and_invalid_sequences() {
        let m = Rescorer::new(tiny_config(), Vocab::new(3), 1).unwrap();
        let h = memory(2, 3, 1);
        assert!(matches!(
            m.score(&h, &TokenSequence(vec![1; 7])),
            Err(Error::Length { len: 9, max: 8 })
        ));
        assert!(matches!(m.score(&h, &TokenSequence(vec![4])), Err(Error::Vocab { id: 4, .. })));
        let mut cfg = tiny_config();
        cfg.heads = 3;
        assert!(matches!(Rescorer::new(cfg, Vocab::new(3), 1), Err(Error::Config(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = Rescorer::new(tiny_config(), Vocab::new(3), 8).unwrap();
        let h = memory(3, 3, 4);
        let y = TokenSequence(vec![3, 1, 2]);
        let mut store = m.store().clone();
        let report = grad_check(
            &mut store,
            |g| {
                let mem = g.constant(h.clone());
                m.nll_graph(g, mem, &y, &mut None)
            },
            1e-4,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn dropout_only_when_requested() {
        let m = Rescorer::new(tiny_config(), Vocab::new(3), 8).unwrap();
        let h = memory(3, 3, 4);
        let y = TokenSequence(vec![3, 1, 2]);
        let eval = |drop: &mut Option<Dropout<'_>>| {
            let mut g = Graph::new(m.store());
            let mem = g.constant(h.clone());
            let l = m.nll_graph(&mut g, mem, &y, drop).unwrap();
            g.value(l).item().unwrap()
        };
        let plain = eval(&mut None);
        assert!((plain + m.score(&h, &y).unwrap().total_logprob).abs() < 1e-12);
        let mut rng = seeded_rng(1);
        let dropped = eval(&mut Some(Dropout { rate: 0.5, rng: &mut rng }));
        assert_ne!(plain, dropped);
    }
}
