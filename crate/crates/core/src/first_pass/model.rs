//! Streaming transducer: frame-stacking recurrent encoder with a fixed
//! lookahead window, LSTM label predictor and additive joiner.

use serde::{Deserialize, Serialize};

use crate::corpus::{FeatureMatrix, Vocab};
use crate::error::{Error, Result};
use crate::numerics::graph::log_softmax_in_place;
use crate::numerics::layers::{Linear, LstmParams};
use crate::numerics::{seeded_rng, Checkpoint, Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub feature_dim: usize,
    /// Consecutive input frames concatenated into one encoder step.
    pub stack: usize,
    pub layers: usize,
    pub dim: usize,
    /// Future stacked frames visible to each encoder step.
    pub lookahead: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            stack: 2,
            layers: 2,
            dim: 64,
            lookahead: 2,
        }
    }
}

impl EncoderConfig {
    pub fn input_width(&self) -> usize {
        (self.lookahead + 1) * self.stack * self.feature_dim
    }

    pub fn output_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.stack)
    }

    /// Last raw input frame that encoder row `t` may depend on.
    pub fn horizon(&self, t: usize) -> usize {
        self.stack * (t + self.lookahead) + self.stack - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.stack == 0 || self.dim == 0 || self.layers == 0 || self.feature_dim == 0 {
            return Err(Error::Config(format!(
                "encoder needs stack, layers, dim and feature_dim >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden: 64,
            layers: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JoinerConfig {
    pub dim: usize,
}

impl Default for JoinerConfig {
    fn default() -> Self {
        Self { dim: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct FirstPassConfig {
    pub encoder: EncoderConfig,
    pub predictor: PredictorConfig,
    pub joiner: JoinerConfig,
}

#[derive(Debug, Clone)]
struct Encoder {
    layers: Vec<LstmParams>,
}

#[derive(Debug, Clone)]
struct Predictor {
    embedding: crate::numerics::ParamId,
    layers: Vec<LstmParams>,
}

#[derive(Debug, Clone)]
struct Joiner {
    enc_proj: Linear,
    pred_proj: Linear,
    out: Linear,
}

/// LSTM state of every predictor layer plus the projected top output.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorState {
    h: Vec<Tensor>,
    c: Vec<Tensor>,
    /// Top-layer output `g_u`.
    pub output: Tensor,
}

/// Encoder per-layer recurrent state for incremental encoding.
#[derive(Debug, Clone)]
pub struct EncoderState {
    h: Vec<Tensor>,
    c: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct FirstPassModel {
    pub config: FirstPassConfig,
    pub vocab: Vocab,
    store: ParamStore,
    encoder: Encoder,
    predictor: Predictor,
    joiner: Joiner,
}

impl FirstPassModel {
    pub fn new(config: FirstPassConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.encoder.validate()?;
        let mut rng = seeded_rng(seed);
        let mut store = ParamStore::new();
        let ec = config.encoder;
        let mut layers = Vec::with_capacity(ec.layers);
        for i in 0..ec.layers {
            let input = if i == 0 { ec.input_width() } else { ec.dim };
            layers.push(LstmParams::new(
                &mut store,
                &format!("encoder.layer{i}"),
                input,
                ec.dim,
                &mut rng,
            )?);
        }
        let encoder = Encoder { layers };

        let pc = config.predictor;
        let embedding = store.add_uniform(
            "predictor.embedding",
            vocab.size as usize + 1,
            pc.embed_dim,
            pc.embed_dim,
            &mut rng,
        )?;
        let mut layers = Vec::with_capacity(pc.layers);
        for i in 0..pc.layers.max(1) {
            let input = if i == 0 { pc.embed_dim } else { pc.hidden };
            layers.push(LstmParams::new(
                &mut store,
                &format!("predictor.layer{i}"),
                input,
                pc.hidden,
                &mut rng,
            )?);
        }
        let predictor = Predictor { embedding, layers };

        let j = config.joiner.dim;
        let joiner = Joiner {
            enc_proj: Linear::new(&mut store, "joiner.enc_proj", ec.dim, j, &mut rng)?,
            pred_proj: Linear::new(&mut store, "joiner.pred_proj", pc.hidden, j, &mut rng)?,
            out: Linear::new(&mut store, "joiner.out", j, vocab.size as usize + 1, &mut rng)?,
        };
        Ok(Self {
            config,
            vocab,
            store,
            encoder,
            predictor,
            joiner,
        })
    }

    pub fn from_checkpoint(config: FirstPassConfig, vocab: Vocab, ckpt: &Checkpoint) -> Result<Self> {
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

    pub fn num_classes(&self) -> usize {
        self.vocab.size as usize + 1
    }

    // ---------------------------------------------------------------- encoder

    /// Row `t` of the stacked-with-lookahead encoder input.
    fn encoder_input_row(&self, x: &FeatureMatrix, t: usize) -> Vec<f64> {
        let ec = self.config.encoder;
        let f = ec.feature_dim;
        let mut row = vec![0.0; ec.input_width()];
        for w in 0..=ec.lookahead {
            for s in 0..ec.stack {
                let frame = (t + w) * ec.stack + s;
                if frame < x.num_frames() {
                    let off = (w * ec.stack + s) * f;
                    row[off..off + f].copy_from_slice(x.frame(frame));
                }
            }
        }
        row
    }

    fn check_features(&self, x: &FeatureMatrix) -> Result<()> {
        if x.dim() != self.config.encoder.feature_dim {
            return Err(Error::shape(
                "encode",
                format!(
                    "feature dim {} does not match encoder {}",
                    x.dim(),
                    self.config.encoder.feature_dim
                ),
            ));
        }
        Ok(())
    }

    /// Encoder forward on a graph; returns the `T' x D` embedding sequence.
    pub fn encode_graph(&self, g: &mut Graph, x: &FeatureMatrix) -> Result<Var> {
        self.check_features(x)?;
        let ec = self.config.encoder;
        let steps = ec.output_len(x.num_frames());
        let mut data = Vec::with_capacity(steps * ec.input_width());
        for t in 0..steps {
            data.extend(self.encoder_input_row(x, t));
        }
        let mut seq = g.constant(Tensor::new(vec![steps, ec.input_width()], data)?);
        for layer in &self.encoder.layers {
            let proj = layer.project_inputs(g, seq)?;
            let mut h = g.constant(Tensor::zeros(1, ec.dim));
            let mut c = g.constant(Tensor::zeros(1, ec.dim));
            let mut outs = Vec::with_capacity(steps);
            for t in 0..steps {
                let xp = g.slice_rows(proj, t, 1)?;
                (h, c) = layer.step_projected(g, xp, h, c)?;
                outs.push(h);
            }
            seq = g.concat_rows(&outs)?;
        }
        Ok(seq)
    }

    /// Audio embeddings without recording gradients.
    pub fn encode(&self, x: &FeatureMatrix) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let h = self.encode_graph(&mut g, x)?;
        Ok(g.value(h).clone())
    }

    pub fn encoder_start(&self) -> EncoderState {
        let d = self.config.encoder.dim;
        let n = self.encoder.layers.len();
        EncoderState {
            h: vec![Tensor::zeros(1, d); n],
            c: vec![Tensor::zeros(1, d); n],
        }
    }

    /// Advances the encoder by one step given its stacked input row.
    /// Produces exactly the row `encode` would at the same position.
    pub fn encoder_step(&self, state: &mut EncoderState, input_row: Vec<f64>) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let mut x = g.constant(Tensor::row_vector(input_row));
        for (i, layer) in self.encoder.layers.iter().enumerate() {
            let xp = layer.project_inputs(&mut g, x)?;
            let h = g.constant(state.h[i].clone());
            let c = g.constant(state.c[i].clone());
            let (h, c) = layer.step_projected(&mut g, xp, h, c)?;
            state.h[i] = g.value(h).clone();
            state.c[i] = g.value(c).clone();
            x = h;
        }
        Ok(g.value(x).clone())
    }

    /// Stacked encoder input row `t` for a partially received utterance.
    pub fn stacked_input(&self, x: &FeatureMatrix, t: usize) -> Result<Vec<f64>> {
        self.check_features(x)?;
        Ok(self.encoder_input_row(x, t))
    }

    // -------------------------------------------------------------- predictor

    fn predictor_embed(&self, g: &mut Graph, tokens: &[u32]) -> Result<Var> {
        self.vocab.check(tokens)?;
        let table = g.param(self.predictor.embedding);
        let mut idx = Vec::with_capacity(tokens.len() + 1);
        idx.push(0);
        idx.extend(tokens.iter().map(|&t| t as usize));
        g.gather_rows(table, &idx)
    }

    /// Predictor outputs `g_0..g_U` as a `(U + 1) x H` matrix.
    pub fn predict_graph(&self, g: &mut Graph, tokens: &[u32]) -> Result<Var> {
        let emb = self.predictor_embed(g, tokens)?;
        let hidden = self.config.predictor.hidden;
        let steps = tokens.len() + 1;
        let mut seq = emb;
        for layer in &self.predictor.layers {
            let proj = layer.project_inputs(g, seq)?;
            let mut h = g.constant(Tensor::zeros(1, hidden));
            let mut c = g.constant(Tensor::zeros(1, hidden));
            let mut outs = Vec::with_capacity(steps);
            for u in 0..steps {
                let xp = g.slice_rows(proj, u, 1)?;
                (h, c) = layer.step_projected(g, xp, h, c)?;
                outs.push(h);
            }
            seq = g.concat_rows(&outs)?;
        }
        Ok(seq)
    }

    pub fn predict(&self, tokens: &[u32]) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let v = self.predict_graph(&mut g, tokens)?;
        Ok(g.value(v).clone())
    }

    /// State after the start symbol only (`g_0`).
    pub fn predictor_start(&self) -> Result<PredictorState> {
        let n = self.predictor.layers.len();
        let hidden = self.config.predictor.hidden;
        let zero = PredictorState {
            h: vec![Tensor::zeros(1, hidden); n],
            c: vec![Tensor::zeros(1, hidden); n],
            output: Tensor::zeros(1, hidden),
        };
        self.predictor_feed(&zero, 0)
    }

    /// Feeds one content symbol; blanks never reach the predictor.
    pub fn predictor_step(&self, state: &PredictorState, token: u32) -> Result<PredictorState> {
        self.vocab.check(&[token])?;
        self.predictor_feed(state, token as usize)
    }

    fn predictor_feed(&self, state: &PredictorState, index: usize) -> Result<PredictorState> {
        let mut g = Graph::new(&self.store);
        let table = g.param(self.predictor.embedding);
        let mut x = g.gather_rows(table, &[index])?;
        let mut next = state.clone();
        for (i, layer) in self.predictor.layers.iter().enumerate() {
            let xp = layer.project_inputs(&mut g, x)?;
            let h = g.constant(state.h[i].clone());
            let c = g.constant(state.c[i].clone());
            let (h, c) = layer.step_projected(&mut g, xp, h, c)?;
            next.h[i] = g.value(h).clone();
            next.c[i] = g.value(c).clone();
            x = h;
        }
        next.output = g.value(x).clone();
        Ok(next)
    }

    // ----------------------------------------------------------------- joiner

    /// Joiner logits for every `(t, u)` cell, row `t * (U + 1) + u`.
    pub fn joint_logits_graph(&self, g: &mut Graph, h: Var, pred: Var) -> Result<Var> {
        let he = self.joiner.enc_proj.forward(g, h)?;
        let hp = self.joiner.pred_proj.forward(g, pred)?;
        let z = g.outer_add(he, hp)?;
        let z = g.tanh(z)?;
        self.joiner.out.forward(g, z)
    }

    /// `enc_proj(h)` for every frame, reused across hypotheses during search.
    pub fn project_encoder(&self, h: &Tensor) -> Result<Tensor> {
        let w = self.store.value(self.joiner.enc_proj.w);
        let b = self.store.value(self.joiner.enc_proj.b);
        add_bias(h.matmul(w)?, b)
    }

    pub fn project_predictor(&self, g_u: &Tensor) -> Result<Tensor> {
        let w = self.store.value(self.joiner.pred_proj.w);
        let b = self.store.value(self.joiner.pred_proj.b);
        add_bias(g_u.matmul(w)?, b)
    }

    /// Joiner logits from already-projected encoder and predictor rows.
    pub fn join_projected(&self, enc_row: &[f64], pred_row: &[f64]) -> Result<Vec<f64>> {
        let z: Vec<f64> = enc_row
            .iter()
            .zip(pred_row)
            .map(|(a, b)| (a + b).tanh())
            .collect();
        let w = self.store.value(self.joiner.out.w);
        let b = self.store.value(self.joiner.out.b);
        let logits = add_bias(Tensor::row_vector(z).matmul(w)?, b)?;
        Ok(logits.into_data())
    }

    /// `join(h_t, g_u)`: logits over blank plus content symbols.
    pub fn join(&self, h_t: &[f64], g_u: &[f64]) -> Result<Vec<f64>> {
        let he = self.project_encoder(&Tensor::row_vector(h_t.to_vec()))?;
        let hp = self.project_predictor(&Tensor::row_vector(g_u.to_vec()))?;
        self.join_projected(he.data(), hp.data())
    }

    pub fn join_log_probs(&self, enc_row: &[f64], pred_row: &[f64]) -> Result<Vec<f64>> {
        let mut lp = self.join_projected(enc_row, pred_row)?;
        log_softmax_in_place(&mut lp);
        Ok(lp)
    }
}

fn add_bias(mut t: Tensor, b: &Tensor) -> Result<Tensor> {
    if b.len() != t.cols() {
        return Err(Error::shape("bias", "width mismatch"));
    }
    for r in 0..t.rows() {
        for (v, bb) in t.row_mut(r).iter_mut().zip(b.data()) {
            *v += bb;
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_config() -> FirstPassConfig {
        FirstPassConfig {
            encoder: EncoderConfig {
                feature_dim: 3,
                stack: 2,
                layers: 2,
                dim: 5,
                lookahead: 2,
            },
            predictor: PredictorConfig {
                embed_dim: 4,
                hidden: 5,
                layers: 1,
            },
            joiner: JoinerConfig { dim: 6 },
        }
    }

    fn random_features(rng: &mut impl Rng, frames: usize, dim: usize) -> FeatureMatrix {
        let data = (0..frames * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureMatrix::new(Tensor::new(vec![frames, dim], data).unwrap()).unwrap()
    }

    fn zero_all(model: &mut FirstPassModel) {
        let ids: Vec<_> = model.store().ids().collect();
        for id in ids {
            model.store_mut().value_mut(id).data_mut().fill(0.0);
        }
    }

    #[test]
    fn output_length_rounds_up() {
        let cfg = small_config();
        let model = FirstPassModel::new(cfg, Vocab::new(3), 1).unwrap();
        let mut rng = seeded_rng(2);
        let h = model.encode(&random_features(&mut rng, 7, 3)).unwrap();
        assert_eq!(h.shape(), &[4, 5]);
        assert_eq!(cfg.encoder.horizon(0), 5);
    }

    #[test]
    fn zero_weights_give_zero_embeddings_and_uniform_joiner() {
        let mut model = FirstPassModel::new(small_config(), Vocab::new(3), 1).unwrap();
        zero_all(&mut model);
        let mut rng = seeded_rng(3);
        let h = model.encode(&random_features(&mut rng, 5, 3)).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
        let g = model.predict(&[1, 2]).unwrap();
        let mut lp = model.join(h.row(0), g.row(2)).unwrap();
        log_softmax_in_place(&mut lp);
        for v in lp {
            assert!((v.exp() - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_dim_mismatch_is_a_shape_error() {
        let model = FirstPassModel::new(small_config(), Vocab::new(3), 1).unwrap();
        let x = FeatureMatrix::zeros(4, 2);
        assert!(matches!(model.encode(&x), Err(Error::Shape { .. })));
    }

    #[test]
    fn rows_ignore_frames_past_their_horizon() {
        let cfg = small_config();
        let model = FirstPassModel::new(cfg, Vocab::new(3), 4).unwrap();
        let mut rng = seeded_rng(5);
        for _ in 0..5 {
            let frames = rng.random_range(1..=13);
            let x = random_features(&mut rng, frames, 3);
            let h = model.encode(&x).unwrap();
            for t in 0..h.rows() {
                let first_free = cfg.encoder.horizon(t) + 1;
                if first_free >= frames {
                    continue;
                }
                let mut data = x.tensor().clone();
                for r in first_free..frames {
                    data.row_mut(r).iter_mut().for_each(|v| *v = rng.random_range(-5.0..5.0));
                }
                let h2 = model.encode(&FeatureMatrix::new(data).unwrap()).unwrap();
                for r in 0..=t {
                    assert_eq!(h.row(r), h2.row(r));
                }
            }
        }
    }

    #[test]
    fn incremental_encoder_matches_batch() {
        let model = FirstPassModel::new(small_config(), Vocab::new(3), 6).unwrap();
        let mut rng = seeded_rng(7);
        let x = random_features(&mut rng, 9, 3);
        let h = model.encode(&x).unwrap();
        let mut state = model.encoder_start();
        for t in 0..h.rows() {
            let row = model.encoder_step(&mut state, model.stacked_input(&x, t).unwrap()).unwrap();
            assert_eq!(row.data(), h.row(t));
        }
    }

    #[test]
    fn incremental_predictor_matches_batch() {
        let model = FirstPassModel::new(small_config(), Vocab::new(3), 8).unwrap();
        let mut rng = seeded_rng(9);
        for _ in 0..10 {
            let len = rng.random_range(0..6);
            let y: Vec<u32> = (0..len).map(|_| rng.random_range(1..=3)).collect();
            let batch = model.predict(&y).unwrap();
            assert_eq!(batch.rows(), y.len() + 1);
            let mut state = model.predictor_start().unwrap();
            assert!(state.output.max_abs_diff(&Tensor::row_vector(batch.row(0).to_vec())) < 1e-12);
            for (u, &tok) in y.iter().enumerate() {
                state = model.predictor_step(&state, tok).unwrap();
                let want = Tensor::row_vector(batch.row(u + 1).to_vec());
                assert!(state.output.max_abs_diff(&want) < 1e-12);
            }
            // causality: a prefix's states are unchanged by extending it
            let mut ext = y.clone();
            ext.push(1);
            let longer = model.predict(&ext).unwrap();
            for u in 0..=y.len() {
                assert_eq!(batch.row(u), longer.row(u));
            }
        }
    }

    #[test]
    fn predictor_rejects_out_of_vocab() {
        let model = FirstPassModel::new(small_config(), Vocab::new(3), 1).unwrap();
        assert!(matches!(model.predict(&[1, 4]), Err(Error::Vocab { id: 4, .. })));
        assert!(matches!(model.predict(&[0]), Err(Error::Vocab { id: 0, .. })));
    }

    #[test]
    fn checkpoint_round_trip_and_missing_tensor() {
        let model = FirstPassModel::new(small_config(), Vocab::new(3), 11).unwrap();
        let ckpt = model.to_checkpoint();
        let loaded = FirstPassModel::from_checkpoint(small_config(), Vocab::new(3), &ckpt).unwrap();
        let again =
            FirstPassModel::from_checkpoint(small_config(), Vocab::new(3), &loaded.to_checkpoint()).unwrap();
        let x = FeatureMatrix::zeros(4, 3);
        assert_eq!(loaded.encode(&x).unwrap(), again.encode(&x).unwrap());
        assert!(model.encode(&x).unwrap().max_abs_diff(&loaded.encode(&x).unwrap()) < 1e-6);
        let mut partial = ckpt.clone();
        partial.remove("encoder.layer0.w_ih");
        assert!(matches!(
            FirstPassModel::from_checkpoint(small_config(), Vocab::new(3), &partial),
            Err(Error::Checkpoint(_))
        ));
    }
}
