//! Second-pass n-best selection.

use serde::{Deserialize, Serialize};

use super::model::{Rescorer, RescorerScore};
use crate::error::{Error, Result};
use crate::first_pass::{Hypothesis, NBestList};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectConfig {
    /// Weight on the first-pass score; `0` ranks by rescorer score alone.
    pub lambda: f64,
    /// Divide rescorer totals by the number of scored factors (tokens + eos).
    pub length_normalize: bool,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            length_normalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub best: Hypothesis,
    /// First-pass rank of `best`.
    pub rank: usize,
    pub scores: Vec<RescorerScore>,
    pub combined: Vec<f64>,
}

/// Combined score per hypothesis, in n-best order.
pub fn combine(nbest: &NBestList, scores: &[RescorerScore], config: SelectConfig) -> Vec<f64> {
    nbest
        .iter()
        .zip(scores)
        .map(|(hyp, s)| {
            let rs = if config.length_normalize {
                s.total_logprob / s.per_token_logprobs.len() as f64
            } else {
                s.total_logprob
            };
            if config.lambda == 0.0 {
                rs
            } else if config.lambda == 1.0 {
                hyp.first_pass_logprob
            } else {
                config.lambda * hyp.first_pass_logprob + (1.0 - config.lambda) * rs
            }
        })
        .collect()
}

/// Index of the highest score; earlier entries win ties.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Scores every hypothesis in one batched pass and returns the winner.
pub fn rescore_select(
    rescorer: &Rescorer,
    h: &Tensor,
    nbest: &NBestList,
    config: SelectConfig,
) -> Result<Selection> {
    if nbest.is_empty() {
        return Err(Error::Contract("cannot select from an empty n-best list".into()));
    }
    if !(0.0..=1.0).contains(&config.lambda) {
        return Err(Error::Config(format!(
            "lambda {} is outside [0, 1]",
            config.lambda
        )));
    }
    let seqs: Vec<_> = nbest.iter().map(|h| h.tokens.clone()).collect();
    let scores = rescorer.score_batch(h, &seqs)?;
    let combined = combine(nbest, &scores, config);
    let rank = argmax_first(&combined).expect("nonempty");
    Ok(Selection {
        best: nbest.0[rank].clone(),
        rank,
        scores,
        combined,
    })
}
