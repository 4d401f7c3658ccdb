use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{PairedExample, TextExample};
use crate::error::{Error, Result};
use crate::numerics::{seeded_rng, Rng as SeededRng};

/// Fraction of text-only examples: `n_text / (n_text + n_paired)`.
pub fn mixing_ratio(n_text: usize, n_paired: usize) -> Result<f64> {
    let total = n_text + n_paired;
    if total == 0 {
        return Err(Error::UndefinedRatio);
    }
    Ok(n_text as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Paired,
    TextOnly,
}

/// A modality-homogeneous training batch.
#[derive(Debug, Clone, PartialEq)]
pub enum MixedBatch<'a> {
    Paired(Vec<&'a PairedExample>),
    Text(Vec<&'a TextExample>),
}

impl MixedBatch<'_> {
    pub fn modality(&self) -> Modality {
        match self {
            MixedBatch::Paired(_) => Modality::Paired,
            MixedBatch::Text(_) => Modality::TextOnly,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            MixedBatch::Paired(v) => v.len(),
            MixedBatch::Text(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ids(&self) -> Vec<&str> {
        match self {
            MixedBatch::Paired(v) => v.iter().map(|e| e.id.as_str()).collect(),
            MixedBatch::Text(v) => v.iter().map(|e| e.id.as_str()).collect(),
        }
    }
}

/// Endless stream of batches. Each batch is text-only with probability
/// `target_ratio`; members are drawn uniformly with replacement from the
/// chosen pool.
#[derive(Debug, Clone)]
pub struct BatchSampler<'a> {
    paired: &'a [PairedExample],
    text: &'a [TextExample],
    target_ratio: f64,
    batch_size: usize,
    rng: SeededRng,
}

impl<'a> BatchSampler<'a> {
    pub fn new(
        paired: &'a [PairedExample],
        text: &'a [TextExample],
        target_ratio: f64,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&target_ratio) {
            return Err(Error::Config(format!(
                "mixing ratio {target_ratio} is outside [0, 1]"
            )));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if target_ratio > 0.0 && text.is_empty() {
            return Err(Error::Config(format!(
                "mixing ratio {target_ratio} needs text-only examples, but the text pool is empty"
            )));
        }
        if target_ratio < 1.0 && paired.is_empty() {
            return Err(Error::Config(format!(
                "mixing ratio {target_ratio} needs paired examples, but the paired pool is empty"
            )));
        }
        Ok(Self {
            paired,
            text,
            target_ratio,
            batch_size,
            rng: seeded_rng(seed),
        })
    }
}

impl<'a> Iterator for BatchSampler<'a> {
    type Item = MixedBatch<'a>;

    fn next(&mut self) -> Option<Self::Item> {
        let text_only = self.rng.random_bool(self.target_ratio);
        let batch = if text_only {
            let n = self.text.len();
            MixedBatch::Text(
                (0..self.batch_size)
                    .map(|_| &self.text[self.rng.random_range(0..n)])
                    .collect(),
            )
        } else {
            let n = self.paired.len();
            MixedBatch::Paired(
                (0..self.batch_size)
                    .map(|_| &self.paired[self.rng.random_range(0..n)])
                    .collect(),
            )
        };
        Some(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Domain, FeatureMatrix, TokenSequence};

    fn pools() -> (Vec<PairedExample>, Vec<TextExample>) {
        let paired = (0..5)
            .map(|i| PairedExample {
                id: format!("p{i}"),
                features: FeatureMatrix::zeros(2, 3),
                tokens: TokenSequence::new(vec![1]),
                domain: Domain::A,
            })
            .collect();
        let text = (0..7)
            .map(|i| TextExample {
                id: format!("t{i}"),
                tokens: TokenSequence::new(vec![2]),
                domain: Domain::B,
            })
            .collect();
        (paired, text)
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(mixing_ratio(0, 100).unwrap(), 0.0);
        assert_eq!(mixing_ratio(100, 100).unwrap(), 0.5);
        assert!((mixing_ratio(27, 1).unwrap() - 0.964).abs() < 5e-4);
        assert!(matches!(mixing_ratio(0, 0), Err(Error::UndefinedRatio)));
        for n in 1..50 {
            assert_eq!(mixing_ratio(0, n).unwrap(), 0.0);
            assert_eq!(mixing_ratio(n, 0).unwrap(), 1.0);
        }
    }

    #[test]
    fn degenerate_ratios() {
        let (paired, text) = pools();
        let all_paired = BatchSampler::new(&paired, &text, 0.0, 4, 1).unwrap();
        assert!(all_paired.take(200).all(|b| b.modality() == Modality::Paired));
        let all_text = BatchSampler::new(&paired, &text, 1.0, 4, 1).unwrap();
        assert!(all_text.take(200).all(|b| b.modality() == Modality::TextOnly));
    }

    #[test]
    fn empirical_fraction_tracks_target() {
        let (paired, text) = pools();
        let s = BatchSampler::new(&paired, &text, 0.4, 2, 2024).unwrap();
        let n = 10_000;
        let text_batches = s
            .take(n)
            .filter(|b| b.modality() == Modality::TextOnly)
            .count();
        let frac = text_batches as f64 / n as f64;
        assert!((frac - 0.4).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn batches_are_homogeneous_and_reproducible() {
        let (paired, text) = pools();
        let a: Vec<_> = BatchSampler::new(&paired, &text, 0.5, 3, 9)
            .unwrap()
            .take(50)
            .map(|b| (b.modality(), b.ids().join(",")))
            .collect();
        let b: Vec<_> = BatchSampler::new(&paired, &text, 0.5, 3, 9)
            .unwrap()
            .take(50)
            .map(|b| (b.modality(), b.ids().join(",")))
            .collect();
        assert_eq!(a, b);
        for (m, ids) in &a {
            let prefix = if *m == Modality::Paired { 'p' } else { 't' };
            assert!(ids.split(',').all(|id| id.starts_with(prefix)));
        }
    }

    #[test]
    fn empty_required_pool_is_a_config_error() {
        let (paired, text) = pools();
        assert!(matches!(
            BatchSampler::new(&paired, &[], 0.4, 2, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            BatchSampler::new(&[], &text, 0.4, 2, 0),
            Err(Error::Config(_))
        ));
        assert!(BatchSampler::new(&[], &text, 1.0, 2, 0).is_ok());
        assert!(BatchSampler::new(&paired, &[], 0.0, 2, 0).is_ok());
        assert!(BatchSampler::new(&paired, &text, 1.5, 2, 0).is_err());
    }
}
