//! Perceived latency: wall-clock time from submitting the final feature
//! frame to having the final hypothesis, second pass included.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{PairedExample, TokenSequence};
use crate::error::{Error, Result};
use crate::first_pass::{BeamConfig, FirstPassModel, StreamingDecoder};
use crate::rescorer::{rescore_select, Rescorer, SelectConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyConfig {
    pub utterances: usize,
    pub repetitions: usize,
    /// Untimed passes over the first few utterances before measuring.
    pub warmup: usize,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        Self {
            utterances: 100,
            repetitions: 3,
            warmup: 10,
        }
    }
}

/// One recognizer under measurement: the shared first pass, optionally
/// followed by a rescorer.
pub struct LatencySystem<'a> {
    pub name: String,
    pub rescorer: Option<&'a Rescorer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemLatency {
    pub system: String,
    /// Milliseconds per utterance, averaged over repetitions.
    pub per_utterance_ms: Vec<f64>,
    /// Mean over utterances of each repetition.
    pub repetition_means_ms: Vec<f64>,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub utterances: usize,
    pub repetitions: usize,
    pub systems: Vec<SystemLatency>,
}

impl LatencyReport {
    pub fn get(&self, system: &str) -> Option<&SystemLatency> {
        self.systems.iter().find(|s| s.system == system)
    }
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn recognize(
    model: &FirstPassModel,
    rescorer: Option<&Rescorer>,
    ex: &PairedExample,
    beam: BeamConfig,
    nbest: usize,
    select: SelectConfig,
) -> Result<(f64, TokenSequence)> {
    let frames = ex.features.num_frames();
    if frames == 0 {
        return Err(Error::Contract(format!("{} has no frames", ex.id)));
    }
    let mut dec = StreamingDecoder::new(model, beam)?;
    for t in 0..frames - 1 {
        dec.push_frame(ex.features.frame(t))?;
    }
    let start = Instant::now();
    dec.push_frame(ex.features.frame(frames - 1))?;
    let (list, h) = dec.finish_with_embeddings()?;
    let list = list.truncated(nbest);
    let best = match rescorer {
        Some(r) => rescore_select(r, &h, &list, select)?.best.tokens,
        None => list
            .best()
            .ok_or_else(|| Error::Contract(format!("empty n-best list for {}", ex.id)))?
            .tokens
            .clone(),
    };
    Ok((start.elapsed().as_secs_f64() * 1e3, best))
}

/// Times every system on the first `config.utterances` test utterances.
/// Systems are interleaved per utterance so slow drift in machine load
/// affects them alike, and everything runs on a single worker thread.
pub fn measure_latency(
    model: &FirstPassModel,
    systems: &[LatencySystem<'_>],
    test: &[PairedExample],
    beam: BeamConfig,
    nbest: usize,
    select: SelectConfig,
    config: &LatencyConfig,
) -> Result<LatencyReport> {
    if config.repetitions == 0 || config.utterances == 0 {
        return Err(Error::Config("latency: utterances and repetitions must be at least 1".into()));
    }
    let test = &test[..config.utterances.min(test.len())];
    if test.is_empty() {
        return Err(Error::Config("latency: test set is empty".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(format!("latency: {e}")))?;
    pool.install(|| {
        for ex in test.iter().take(config.warmup) {
            for s in systems {
                recognize(model, s.rescorer, ex, beam, nbest, select)?;
            }
        }
        // times[system][rep][utt]
        let mut times = vec![vec![vec![0.0; test.len()]; config.repetitions]; systems.len()];
        for rep in 0..config.repetitions {
            for (u, ex) in test.iter().enumerate() {
                for (k, s) in systems.iter().enumerate() {
                    times[k][rep][u] = recognize(model, s.rescorer, ex, beam, nbest, select)?.0;
                }
            }
        }
        let n = test.len() as f64;
        let reps = config.repetitions as f64;
        let systems = systems
            .iter()
            .zip(times)
            .map(|(s, t)| {
                let per_utterance_ms: Vec<f64> =
                    (0..test.len()).map(|u| t.iter().map(|r| r[u]).sum::<f64>() / reps).collect();
                let repetition_means_ms: Vec<f64> = t.iter().map(|r| r.iter().sum::<f64>() / n).collect();
                let mut sorted = per_utterance_ms.clone();
                sorted.sort_by(f64::total_cmp);
                SystemLatency {
                    system: s.name.clone(),
                    mean_ms: repetition_means_ms.iter().sum::<f64>() / reps,
                    p50_ms: percentile(&sorted, 50.0),
                    p95_ms: percentile(&sorted, 95.0),
                    per_utterance_ms,
                    repetition_means_ms,
                }
            })
            .collect();
        Ok(LatencyReport {
            utterances: test.len(),
            repetitions: config.repetitions,
            systems,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, SplitCounts, SyntheticTaskSpec};
    use crate::first_pass::{EncoderConfig, FirstPassConfig};
    use crate::rescorer::RescorerConfig;

    #[test]
    fn report_structure() {
        let counts = SplitCounts {
            paired_a: 0,
            paired_b: 0,
            text_a: 0,
            text_b: 0,
            test_a: 3,
            test_b: 4,
        };
        let corpus = synth_corpus(&SyntheticTaskSpec::with_vocab(6, 4), &counts, 3).unwrap();
        let fp = FirstPassConfig {
            encoder: EncoderConfig {
                feature_dim: 4,
                dim: 8,
                ..Default::default()
            },
            ..Default::default()
        };
        let model = FirstPassModel::new(fp, corpus.vocab, 1).unwrap();
        let rc = RescorerConfig {
            memory_dim: 8,
            ..Default::default()
        };
        let rescorer = Rescorer::new(rc, corpus.vocab, 1).unwrap();
        let systems = [
            LatencySystem {
                name: "BS".into(),
                rescorer: None,
            },
            LatencySystem {
                name: "BS+RS".into(),
                rescorer: Some(&rescorer),
            },
        ];
        let cfg = LatencyConfig {
            utterances: 5,
            repetitions: 3,
            warmup: 1,
        };
        let rep = measure_latency(&model, &systems, &corpus.test, BeamConfig::default(), 10, SelectConfig::default(), &cfg)
            .unwrap();
        assert_eq!((rep.utterances, rep.repetitions), (5, 3));
        for s in &rep.systems {
            assert_eq!(s.per_utterance_ms.len(), 5);
            assert_eq!(s.repetition_means_ms.len(), 3);
            assert!(s.per_utterance_ms.iter().all(|&t| t >= 0.0));
            assert!(s.p50_ms <= s.p95_ms);
        }
    }

    #[test]
    fn nearest_rank() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 10.0);
        assert_eq!(percentile(&v, 95.0), 19.0);
        assert_eq!(percentile(&[4.0], 95.0), 4.0);
    }
}
