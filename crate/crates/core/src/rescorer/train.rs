//! Step 2: rescorer training on paired batches, optionally mixed with
//! text-only batches that cross-attend to the frozen `h_avg`.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{Dropout, Rescorer, RescorerConfig};
use crate::corpus::{BatchSampler, MixedBatch, Modality, PairedExample, TextExample, TokenSequence};
use crate::error::{Error, Result};
use crate::first_pass::{compute_h_avg, median_frames, FirstPassModel, HAvgMode};
use crate::numerics::checkpoint::H_AVG_NAME;
use crate::numerics::{seeded_rng, Adam, AdamConfig, Checkpoint, Gradients, Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointTrainConfig {
    /// Fraction of text-only examples among all presented examples.
    pub ratio: f64,
    /// Training length in passes over the paired pool's worth of examples,
    /// whatever the ratio.
    pub epochs: f64,
    pub batch_size: usize,
    /// Supplied by the run configuration's single seed.
    #[serde(skip)]
    pub seed: u64,
    pub h_avg_mode: HAvgMode,
    /// Raw input frames of the dummy sequence; defaults to the median
    /// paired-set length.
    pub dummy_frames: Option<usize>,
    pub max_steps: Option<usize>,
    /// Supplied by the run configuration's shared optimizer settings.
    #[serde(skip)]
    pub adam: AdamConfig,
}

impl Default for JointTrainConfig {
    fn default() -> Self {
        Self {
            ratio: 0.4,
            epochs: 15.0,
            batch_size: 16,
            seed: 0,
            h_avg_mode: HAvgMode::ZeroDummy,
            dummy_frames: None,
            max_steps: None,
            adam: AdamConfig::default(),
        }
    }
}

impl JointTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) || self.ratio.is_nan() {
            return Err(Error::Config(format!(
                "ratio: mixing ratio {} is outside [0, 1]",
                self.ratio
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size: must be at least 1".into()));
        }
        if !(self.epochs > 0.0) {
            return Err(Error::Config(format!("epochs: {} is not positive", self.epochs)));
        }
        Ok(())
    }

    pub fn num_steps(&self, n_paired: usize) -> usize {
        self.max_steps.unwrap_or_else(|| {
            ((self.epochs * n_paired as f64) / self.batch_size as f64).ceil().max(1.0) as usize
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Paired batches only.
    Standard,
    /// Paired and text-only batches at the configured ratio.
    Joint,
}

/// Frozen encoder outputs of the paired pool, keyed by example id.
#[derive(Debug, Clone, Default)]
pub struct AudioMemories {
    by_id: HashMap<String, Tensor>,
}

impl AudioMemories {
    pub fn encode_all(model: &FirstPassModel, paired: &[PairedExample]) -> Result<Self> {
        let encoded: Vec<Result<(String, Tensor)>> = paired
            .par_iter()
            .map(|ex| Ok((ex.id.clone(), model.encode(&ex.features)?)))
            .collect();
        let mut by_id = HashMap::with_capacity(encoded.len());
        for r in encoded {
            let (id, h) = r?;
            by_id.insert(id, h);
        }
        Ok(Self { by_id })
    }

    pub fn get(&self, id: &str) -> Result<&Tensor> {
        self.by_id
            .get(id)
            .ok_or_else(|| Error::Contract(format!("no audio embeddings for paired example {id}")))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RescorerTrainReport {
    pub losses: Vec<(Modality, f64)>,
    pub h_avg_frames: Option<usize>,
}

impl RescorerTrainReport {
    pub fn losses_of(&self, modality: Modality) -> Vec<f64> {
        self.losses
            .iter()
            .filter(|(m, _)| *m == modality)
            .map(|(_, l)| *l)
            .collect()
    }
}

fn item_seed(seed: u64, step: usize, item: usize) -> crate::numerics::Rng {
    let mut rng = seeded_rng(seed ^ 0xD20F_0u64);
    rng.set_stream(((step as u64) << 16) | item as u64);
    rng
}

/// Mean NLL and gradients over one homogeneous batch. Only rescorer
/// parameters are in the graph; embeddings enter as constants.
pub fn batch_gradients(
    rescorer: &Rescorer,
    batch: &MixedBatch<'_>,
    memories: &AudioMemories,
    h_avg: Option<&Tensor>,
    seed: u64,
    step: usize,
) -> Result<(f64, Gradients)> {
    let items: Vec<(&Tensor, &TokenSequence)> = match batch {
        MixedBatch::Paired(exs) => exs
            .iter()
            .map(|e| Ok((memories.get(&e.id)?, &e.tokens)))
            .collect::<Result<_>>()?,
        MixedBatch::Text(exs) => {
            let h = h_avg.ok_or_else(|| {
                Error::Checkpoint(format!("text-only batch needs {H_AVG_NAME}, which is missing"))
            })?;
            exs.iter().map(|e| (h, &e.tokens)).collect()
        }
    };
    let rate = rescorer.config.dropout;
    let results: Vec<Result<(f64, Gradients)>> = items
        .par_iter()
        .enumerate()
        .map(|(i, (h, y))| {
            let mut rng = item_seed(seed, step, i);
            let mut drop = Some(Dropout { rate, rng: &mut rng });
            let mut g = Graph::new(rescorer.store());
            let mem = g.constant((*h).clone());
            let loss = rescorer.nll_graph(&mut g, mem, y, &mut drop)?;
            Ok((g.value(loss).item()?, g.backward(loss)?))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = Gradients::empty(rescorer.store().len());
    for r in results {
        let (l, g) = r?;
        total += l;
        grads.merge(g)?;
    }
    let n = items.len().max(1) as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}

/// One optimizer update; returns the batch loss.
pub fn train_step(
    rescorer: &mut Rescorer,
    opt: &mut Adam,
    batch: &MixedBatch<'_>,
    memories: &AudioMemories,
    h_avg: Option<&Tensor>,
    seed: u64,
    step: usize,
) -> Result<f64> {
    let (loss, grads) = batch_gradients(rescorer, batch, memories, h_avg, seed, step)?;
    if !loss.is_finite() {
        return Err(Error::Diverged {
            step,
            detail: format!("rescorer loss {loss}"),
        });
    }
    let store = rescorer.store_mut();
    store.zero_grad();
    store.accumulate(&grads)?;
    opt.step(store)?;
    Ok(loss)
}

/// Trains a fresh rescorer against the frozen first pass. The returned
/// checkpoint holds the rescorer parameters and, in joint mode, the
/// `h_avg` buffer.
#[allow(clippy::too_many_arguments)]
pub fn train_rescorer(
    first_pass: &FirstPassModel,
    paired: &[PairedExample],
    text: &[TextExample],
    config: RescorerConfig,
    train: &JointTrainConfig,
    mode: TrainMode,
) -> Result<(Checkpoint, RescorerTrainReport)> {
    train.validate()?;
    let memories = AudioMemories::encode_all(first_pass, paired)?;
    let (ratio, text_pool, h_avg, frames) = match mode {
        TrainMode::Standard => (0.0, &[][..], None, None),
        TrainMode::Joint => {
            if train.ratio > 0.0 && text.is_empty() {
                return Err(Error::Config(format!(
                    "ratio {} needs text-only examples, but the text pool is empty",
                    train.ratio
                )));
            }
            let frames = match train.dummy_frames {
                Some(f) => f,
                None => median_frames(paired)
                    .ok_or_else(|| Error::Config("rescorer training needs paired examples".into()))?,
            };
            // held at checkpoint precision so in-process and reloaded runs agree
            let mut holder = Checkpoint::new();
            holder.insert(H_AVG_NAME, &compute_h_avg(first_pass, frames, train.h_avg_mode, paired)?);
            let h = holder.remove(H_AVG_NAME).expect("just inserted");
            (train.ratio, text, Some(h), Some(frames))
        }
    };
    let rescorer = Rescorer::new(config, first_pass.vocab, train.seed)?;
    run_training(rescorer, paired, text_pool, &memories, h_avg, ratio, train, frames)
}

#[allow(clippy::too_many_arguments)]
fn run_training(
    mut rescorer: Rescorer,
    paired: &[PairedExample],
    text: &[TextExample],
    memories: &AudioMemories,
    h_avg: Option<Tensor>,
    ratio: f64,
    train: &JointTrainConfig,
    frames: Option<usize>,
) -> Result<(Checkpoint, RescorerTrainReport)> {
    let mut opt = Adam::new(train.adam, rescorer.store());
    let sampler = BatchSampler::new(paired, text, ratio, train.batch_size, train.seed)?;
    let steps = train.num_steps(paired.len());
    let mut report = RescorerTrainReport {
        losses: Vec::with_capacity(steps),
        h_avg_frames: frames,
    };
    for (step, batch) in sampler.take(steps).enumerate() {
        let loss = train_step(&mut rescorer, &mut opt, &batch, memories, h_avg.as_ref(), train.seed, step)?;
        report.losses.push((batch.modality(), loss));
    }
    let mut ckpt = rescorer.to_checkpoint();
    if let Some(h) = &h_avg {
        ckpt.insert(H_AVG_NAME, h);
    }
    Ok((ckpt, report))
}
