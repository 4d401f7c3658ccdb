use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::lattice::transducer_nll;
use super::model::{FirstPassConfig, FirstPassModel};
use crate::corpus::{PairedExample, TokenSequence, Vocab};
use crate::error::{Error, Result};
use crate::numerics::{seeded_rng, Adam, AdamConfig, Checkpoint, Gradients, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FirstPassTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stops early after this many optimizer steps when set.
    pub max_steps: Option<usize>,
    /// Supplied by the run configuration's shared optimizer settings.
    #[serde(skip)]
    pub adam: AdamConfig,
}

impl Default for FirstPassTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            max_steps: None,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss after every optimizer step.
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

/// Records the per-utterance transducer NLL on `g`.
pub fn utterance_loss(model: &FirstPassModel, g: &mut Graph, ex: &PairedExample) -> Result<Var> {
    let h = model.encode_graph(g, &ex.features)?;
    let frames = g.value(h).rows();
    transducer_loss_graph(model, g, h, &ex.tokens, frames)
}

pub fn transducer_loss_graph(
    model: &FirstPassModel,
    g: &mut Graph,
    h: Var,
    y: &TokenSequence,
    frames: usize,
) -> Result<Var> {
    let pred = model.predict_graph(g, y.as_slice())?;
    let logits = model.joint_logits_graph(g, h, pred)?;
    let lp = g.log_softmax(logits)?;
    transducer_nll(g, lp, y.as_slice(), frames)
}

/// `-log P(y | h)` for fixed audio embeddings.
pub fn transducer_loss(model: &FirstPassModel, h: &Tensor, y: &TokenSequence) -> Result<f64> {
    if h.rows() == 0 && !y.is_empty() {
        return Err(Error::InvalidLattice(format!(
            "{} labels but no encoder frames",
            y.len()
        )));
    }
    let mut g = Graph::new(model.store());
    let hv = g.constant(h.clone());
    let loss = transducer_loss_graph(model, &mut g, hv, y, h.rows())?;
    g.value(loss).item()
}

/// Mean loss and gradients over a batch; utterances run in parallel and
/// gradients are summed in batch order so results do not depend on
/// scheduling.
pub fn batch_gradients(model: &FirstPassModel, batch: &[&PairedExample]) -> Result<(f64, Gradients)> {
    let results: Vec<Result<(f64, Gradients)>> = batch
        .par_iter()
        .map(|ex| {
            let mut g = Graph::new(model.store());
            let loss = utterance_loss(model, &mut g, ex)?;
            let value = g.value(loss).item()?;
            Ok((value, g.backward(loss)?))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = Gradients::empty(model.store().len());
    for r in results {
        let (l, g) = r?;
        total += l;
        grads.merge(g)?;
    }
    let n = batch.len().max(1) as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}

/// Step 1: fits encoder, predictor and joiner on paired data and returns
/// the frozen checkpoint.
pub fn train_first_pass(
    paired: &[PairedExample],
    config: FirstPassConfig,
    vocab: Vocab,
    train: &FirstPassTrainConfig,
    seed: u64,
) -> Result<(Checkpoint, TrainReport)> {
    if paired.is_empty() {
        return Err(Error::Config("first-pass training needs paired examples".into()));
    }
    if train.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut model = FirstPassModel::new(config, vocab, seed)?;
    let mut opt = Adam::new(train.adam, model.store());
    let mut rng = seeded_rng(seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..paired.len()).collect();
    let mut report = TrainReport::default();
    let max_steps = train.max_steps.unwrap_or(usize::MAX);

    'outer: for _epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        let mut epoch_batches = 0usize;
        for chunk in order.chunks(train.batch_size) {
            if report.step_losses.len() >= max_steps {
                break 'outer;
            }
            let batch: Vec<&PairedExample> = chunk.iter().map(|&i| &paired[i]).collect();
            let step = report.step_losses.len();
            let (loss, grads) = batch_gradients(&model, &batch).map_err(|e| match e {
                Error::NonFinite { op } => diverged(step, &train.adam, format!("non-finite value in {op}")),
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(diverged(step, &train.adam, format!("loss {loss}")));
            }
            let store = model.store_mut();
            store.zero_grad();
            store.accumulate(&grads)?;
            opt.step(store)?;
            report.step_losses.push(loss);
            epoch_total += loss;
            epoch_batches += 1;
        }
        if epoch_batches > 0 {
            report.epoch_losses.push(epoch_total / epoch_batches as f64);
        }
    }
    Ok((model.to_checkpoint(), report))
}

fn diverged(step: usize, adam: &AdamConfig, what: String) -> Error {
    Error::Diverged {
        step,
        detail: format!(
            "{what}; learning rate {}, gradient clip {:?}",
            adam.learning_rate, adam.clip_norm
        ),
    }
}
