//! Stand-in cross-attention memory for text-only rescorer training.

use serde::{Deserialize, Serialize};

use super::model::FirstPassModel;
use crate::corpus::{FeatureMatrix, PairedExample};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum HAvgMode {
    /// Encoder output for an all-zero input of the dummy length.
    #[default]
    ZeroDummy,
    /// Mean over the paired set of each utterance's time-averaged
    /// embedding, repeated for the dummy length.
    Empirical,
}

impl std::str::FromStr for HAvgMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" | "zero-dummy" => Ok(HAvgMode::ZeroDummy),
            "empirical" => Ok(HAvgMode::Empirical),
            other => Err(Error::Config(format!(
                "unknown h_avg mode {other:?}, expected zero or empirical"
            ))),
        }
    }
}

/// Median input length (frames) over the paired set.
pub fn median_frames(paired: &[PairedExample]) -> Option<usize> {
    let mut lens: Vec<usize> = paired.iter().map(|e| e.features.num_frames()).collect();
    if lens.is_empty() {
        return None;
    }
    lens.sort_unstable();
    Some(lens[lens.len() / 2])
}

/// `h_avg` with `ceil(dummy_frames / stack)` rows.
pub fn compute_h_avg(
    model: &FirstPassModel,
    dummy_frames: usize,
    mode: HAvgMode,
    paired: &[PairedExample],
) -> Result<Tensor> {
    if dummy_frames == 0 {
        return Err(Error::Config("dummy length must be at least 1 frame".into()));
    }
    let f = model.config.encoder.feature_dim;
    match mode {
        HAvgMode::ZeroDummy => model.encode(&FeatureMatrix::zeros(dummy_frames, f)),
        HAvgMode::Empirical => {
            if paired.is_empty() {
                return Err(Error::Config(
                    "empirical h_avg needs paired examples".into(),
                ));
            }
            let d = model.config.encoder.dim;
            let mut mean = vec![0.0; d];
            for ex in paired {
                let h = model.encode(&ex.features)?;
                let rows = h.rows() as f64;
                for r in 0..h.rows() {
                    for (m, v) in mean.iter_mut().zip(h.row(r)) {
                        *m += v / rows;
                    }
                }
            }
            mean.iter_mut().for_each(|m| *m /= paired.len() as f64);
            let steps = model.config.encoder.output_len(dummy_frames);
            let data = (0..steps).flat_map(|_| mean.iter().copied()).collect();
            Tensor::new(vec![steps, d], data)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, SplitCounts, SyntheticTaskSpec, Vocab};
    use crate::first_pass::model::{EncoderConfig, FirstPassConfig};

    fn config() -> FirstPassConfig {
        FirstPassConfig {
            encoder: EncoderConfig {
                feature_dim: 4,
                dim: 8,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn paired() -> Vec<PairedExample> {
        let counts = SplitCounts {
            paired_a: 9,
            paired_b: 3,
            text_a: 0,
            text_b: 0,
            test_a: 0,
            test_b: 0,
        };
        synth_corpus(&SyntheticTaskSpec::with_vocab(6, 4), &counts, 3).unwrap().paired
    }

    #[test]
    fn zero_encoder_gives_zero_memory() {
        let mut model = FirstPassModel::new(config(), Vocab::new(6), 1).unwrap();
        let ids: Vec<_> = model.store().ids().filter(|id| model.store().get(*id).name.starts_with("encoder")).collect();
        for id in ids {
            model.store_mut().value_mut(id).data_mut().fill(0.0);
        }
        let h = compute_h_avg(&model, 9, HAvgMode::ZeroDummy, &[]).unwrap();
        assert_eq!(h.shape(), &[5, 8]);
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_and_data_independent() {
        let model = FirstPassModel::new(config(), Vocab::new(6), 2).unwrap();
        let a = compute_h_avg(&model, 10, HAvgMode::ZeroDummy, &[]).unwrap();
        let b = compute_h_avg(&model, 10, HAvgMode::ZeroDummy, &paired()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, model.encode(&FeatureMatrix::zeros(10, 4)).unwrap());
    }

    #[test]
    fn empirical_mode_is_the_corpus_mean() {
        let model = FirstPassModel::new(config(), Vocab::new(6), 2).unwrap();
        let data = paired();
        let h = compute_h_avg(&model, 7, HAvgMode::Empirical, &data).unwrap();
        assert_eq!(h.shape(), &[4, 8]);
        // independent two-stage mean
        let per_utt: Vec<Vec<f64>> = data
            .iter()
            .map(|ex| {
                let e = model.encode(&ex.features).unwrap();
                (0..8)
                    .map(|c| (0..e.rows()).map(|r| e.get(r, c)).sum::<f64>() / e.rows() as f64)
                    .collect()
            })
            .collect();
        for c in 0..8 {
            let want = per_utt.iter().map(|m| m[c]).sum::<f64>() / per_utt.len() as f64;
            for r in 0..4 {
                assert!((h.get(r, c) - want).abs() < 1e-12);
            }
        }
        assert!(matches!(
            compute_h_avg(&model, 7, HAvgMode::Empirical, &[]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn median_and_mode_parsing() {
        let data = paired();
        let mut lens: Vec<_> = data.iter().map(|e| e.features.num_frames()).collect();
        lens.sort();
        assert_eq!(median_frames(&data), Some(lens[lens.len() / 2]));
        assert_eq!(median_frames(&[]), None);
        assert_eq!("zero".parse::<HAvgMode>().unwrap(), HAvgMode::ZeroDummy);
        assert_eq!("empirical".parse::<HAvgMode>().unwrap(), HAvgMode::Empirical);
        assert!("mean".parse::<HAvgMode>().is_err());
    }
}
