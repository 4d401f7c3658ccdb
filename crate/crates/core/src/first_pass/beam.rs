//! Time-synchronous transducer beam search and greedy decoding.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::model::{FirstPassModel, PredictorState};
use crate::corpus::{TokenSequence, Vocab};
use crate::error::{Error, Result};
use crate::numerics::{log_add, Tensor};

pub const DEFAULT_MAX_EMISSIONS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: TokenSequence,
    pub first_pass_logprob: f64,
}

/// Hypotheses sorted by first-pass score, best first, with distinct token sequences.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NBestList(pub Vec<Hypothesis>);

impl NBestList {
    pub fn new(mut hyps: Vec<Hypothesis>) -> Self {
        hyps.sort_by(|a, b| b.first_pass_logprob.total_cmp(&a.first_pass_logprob));
        Self(hyps)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn best(&self) -> Option<&Hypothesis> {
        self.0.first()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Hypothesis> {
        self.0.iter()
    }

    pub fn truncated(&self, n: usize) -> Self {
        Self(self.0.iter().take(n).cloned().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamConfig {
    pub beam: usize,
    /// Cap on symbols emitted within a single frame.
    pub max_emissions: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam: 10,
            max_emissions: DEFAULT_MAX_EMISSIONS,
        }
    }
}

/// Memoizes predictor states and projections by label history.
struct PredictorCache<'m> {
    model: &'m FirstPassModel,
    states: HashMap<Vec<u32>, (PredictorState, Tensor)>,
}

impl<'m> PredictorCache<'m> {
    fn new(model: &'m FirstPassModel) -> Result<Self> {
        let start = model.predictor_start()?;
        let proj = model.project_predictor(&start.output)?;
        let mut states = HashMap::new();
        states.insert(Vec::new(), (start, proj));
        Ok(Self { model, states })
    }

    fn projection(&mut self, prefix: &[u32]) -> Result<&Tensor> {
        if !self.states.contains_key(prefix) {
            let (last, head) = prefix.split_last().expect("empty prefix is cached");
            self.projection(head)?;
            let parent = &self.states[head].0;
            let state = self.model.predictor_step(parent, *last)?;
            let proj = self.model.project_predictor(&state.output)?;
            self.states.insert(prefix.to_vec(), (state, proj));
        }
        Ok(&self.states[prefix].1)
    }
}

/// Log-probabilities of blank and every symbol at frame `t` after `prefix`.
pub struct StepScorer<'m> {
    model: &'m FirstPassModel,
    cache: PredictorCache<'m>,
}

impl<'m> StepScorer<'m> {
    pub fn new(model: &'m FirstPassModel) -> Result<Self> {
        Ok(Self {
            model,
            cache: PredictorCache::new(model)?,
        })
    }

    pub fn log_probs(&mut self, enc_row: &[f64], prefix: &[u32]) -> Result<Vec<f64>> {
        let proj = self.cache.projection(prefix)?;
        self.model.join_log_probs(enc_row, proj.data())
    }

    pub fn vocab(&self) -> Vocab {
        self.model.vocab
    }
}

/// Incremental beam search; feed projected encoder rows one frame at a time.
pub struct BeamSearch<'m> {
    scorer: StepScorer<'m>,
    config: BeamConfig,
    beam: Vec<(Vec<u32>, f64)>,
}

impl<'m> BeamSearch<'m> {
    pub fn new(model: &'m FirstPassModel, config: BeamConfig) -> Result<Self> {
        if config.beam == 0 {
            return Err(Error::Config("beam size must be at least 1".into()));
        }
        Ok(Self {
            scorer: StepScorer::new(model)?,
            config,
            beam: vec![(Vec::new(), 0.0)],
        })
    }

    /// Consumes one frame. `enc_row` is the joiner's projection of `h_t`.
    pub fn step(&mut self, enc_row: &[f64]) -> Result<()> {
        let width = self.config.beam;
        let vocab = self.scorer.vocab().size;
        // Hypotheses that closed frame t with a blank, merged by sequence.
        let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();
        let mut finished_idx: HashMap<Vec<u32>, usize> = HashMap::new();
        let mut active = std::mem::take(&mut self.beam);
        for level in 0..=self.config.max_emissions {
            if active.is_empty() {
                break;
            }
            let mut expanded = Vec::new();
            for (seq, score) in &active {
                let lp = self.scorer.log_probs(enc_row, seq)?;
                let closed = score + lp[0];
                match finished_idx.get(seq) {
                    Some(&i) => finished[i].1 = log_add(finished[i].1, closed),
                    None => {
                        finished_idx.insert(seq.clone(), finished.len());
                        finished.push((seq.clone(), closed));
                    }
                }
                if level < self.config.max_emissions {
                    for k in 1..=vocab {
                        let mut next = seq.clone();
                        next.push(k);
                        expanded.push((next, score + lp[k as usize]));
                    }
                }
            }
            // Closed and still-emitting hypotheses compete for the same beam;
            // on equal scores closed entries win, then lower symbol ids.
            let mut pool: Vec<(bool, Vec<u32>, f64)> = finished
                .drain(..)
                .map(|(s, v)| (true, s, v))
                .chain(expanded.into_iter().map(|(s, v)| (false, s, v)))
                .collect();
            pool.sort_by(|a, b| b.2.total_cmp(&a.2));
            pool.truncate(width);
            finished_idx.clear();
            active = Vec::new();
            for (closed, seq, score) in pool {
                if closed {
                    finished_idx.insert(seq.clone(), finished.len());
                    finished.push((seq, score));
                } else {
                    active.push((seq, score));
                }
            }
        }
        finished.sort_by(|a, b| b.1.total_cmp(&a.1));
        finished.truncate(width);
        self.beam = finished;
        Ok(())
    }

    pub fn current(&self) -> NBestList {
        NBestList(
            self.beam
                .iter()
                .map(|(s, v)| Hypothesis {
                    tokens: TokenSequence(s.clone()),
                    first_pass_logprob: *v,
                })
                .collect(),
        )
    }

    pub fn finish(self) -> NBestList {
        self.current()
    }
}

/// Beam search over a full embedding sequence `h [T' x D]`.
pub fn beam_search(model: &FirstPassModel, h: &Tensor, config: BeamConfig) -> Result<NBestList> {
    let enc = model.project_encoder(h)?;
    let mut search = BeamSearch::new(model, config)?;
    for t in 0..enc.rows() {
        search.step(enc.row(t))?;
    }
    Ok(search.finish())
}

/// Per frame, emit the argmax symbol until blank wins or the cap is hit.
pub fn greedy_decode(model: &FirstPassModel, h: &Tensor, max_emissions: usize) -> Result<Hypothesis> {
    let enc = model.project_encoder(h)?;
    let mut scorer = StepScorer::new(model)?;
    let mut seq = Vec::new();
    let mut score = 0.0;
    for t in 0..enc.rows() {
        let mut emitted = 0;
        loop {
            let lp = scorer.log_probs(enc.row(t), &seq)?;
            let candidates = if emitted < max_emissions { lp.len() } else { 1 };
            let (best, &best_lp) = lp[..candidates]
                .iter()
                .enumerate()
                .fold((0, &lp[0]), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
            score += best_lp;
            if best == 0 {
                break;
            }
            seq.push(best as u32);
            emitted += 1;
        }
    }
    Ok(Hypothesis {
        tokens: TokenSequence(seq),
        first_pass_logprob: score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::first_pass::model::{EncoderConfig, FirstPassConfig, JoinerConfig, PredictorConfig};
    use crate::numerics::graph::log_softmax_in_place;
    use crate::numerics::seeded_rng;
    use rand::Rng;
    use std::collections::BTreeMap;

    fn tiny_model(vocab: u32, seed: u64, sharpness: f64) -> FirstPassModel {
        let cfg = FirstPassConfig {
            encoder: EncoderConfig {
                feature_dim: 2,
                stack: 1,
                layers: 1,
                dim: 4,
                lookahead: 0,
            },
            predictor: PredictorConfig {
                embed_dim: 3,
                hidden: 4,
                layers: 1,
            },
            joiner: JoinerConfig { dim: 5 },
        };
        let mut model = FirstPassModel::new(cfg, Vocab::new(vocab), seed).unwrap();
        let ids: Vec<_> = model.store().ids().collect();
        for id in ids {
            model.store_mut().value_mut(id).data_mut().iter_mut().for_each(|v| *v *= sharpness);
        }
        model
    }

    fn random_h(rng: &mut impl Rng, frames: usize, dim: usize) -> Tensor {
        let data = (0..frames * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::new(vec![frames, dim], data).unwrap()
    }

    /// Sums every alignment with at most `cap` emissions per frame, scoring
    /// each step with the batch predictor and the unprojected joiner.
    fn exhaustive(model: &FirstPassModel, h: &Tensor, cap: usize) -> BTreeMap<Vec<u32>, f64> {
        fn lp_at(model: &FirstPassModel, h: &Tensor, t: usize, prefix: &[u32]) -> Vec<f64> {
            let g = model.predict(prefix).unwrap();
            let mut lp = model.join(h.row(t), g.row(prefix.len())).unwrap();
            log_softmax_in_place(&mut lp);
            lp
        }
        fn walk(
            model: &FirstPassModel,
            h: &Tensor,
            cap: usize,
            t: usize,
            emitted: usize,
            prefix: &mut Vec<u32>,
            score: f64,
            out: &mut BTreeMap<Vec<u32>, f64>,
        ) {
            if t == h.rows() {
                let e = out.entry(prefix.clone()).or_insert(f64::NEG_INFINITY);
                *e = log_add(*e, score);
                return;
            }
            let lp = lp_at(model, h, t, prefix);
            walk(model, h, cap, t + 1, 0, prefix, score + lp[0], out);
            if emitted < cap {
                for k in 1..lp.len() {
                    prefix.push(k as u32);
                    walk(model, h, cap, t, emitted + 1, prefix, score + lp[k], out);
                    prefix.pop();
                }
            }
        }
        let mut out = BTreeMap::new();
        walk(model, h, cap, 0, 0, &mut Vec::new(), 0.0, &mut out);
        out
    }

    #[test]
    fn full_width_beam_matches_exhaustive_search() {
        let mut rng = seeded_rng(21);
        for seed in 0..60 {
            let model = tiny_model(2, seed, 3.0);
            let frames = rng.random_range(1..=3);
            let h = random_h(&mut rng, frames, 4);
            let oracle = exhaustive(&model, &h, 2);
            let cfg = BeamConfig {
                beam: 4096,
                max_emissions: 2,
            };
            let nbest = beam_search(&model, &h, cfg).unwrap();
            assert_eq!(nbest.len(), oracle.len());
            for hyp in nbest.iter() {
                let want = oracle[&hyp.tokens.0];
                assert!((hyp.first_pass_logprob - want).abs() < 1e-9);
            }
            let (best_seq, best) = oracle
                .iter()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap();
            let top = nbest.best().unwrap();
            assert!(&top.tokens.0 == best_seq || (top.first_pass_logprob - best).abs() < 1e-12);
            let total: f64 = oracle.values().map(|v| v.exp()).sum();
            assert!(total <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn nbest_is_sorted_and_distinct() {
        let mut rng = seeded_rng(4);
        let model = tiny_model(3, 7, 2.0);
        let h = random_h(&mut rng, 6, 4);
        let nbest = beam_search(&model, &h, BeamConfig::default()).unwrap();
        assert!(nbest.len() <= 10);
        assert!(nbest.0.windows(2).all(|w| w[0].first_pass_logprob >= w[1].first_pass_logprob));
        let mut seqs: Vec<_> = nbest.iter().map(|h| h.tokens.clone()).collect();
        seqs.sort();
        seqs.dedup();
        assert_eq!(seqs.len(), nbest.len());
        assert!(nbest.iter().all(|h| h.first_pass_logprob <= 0.0));
    }

    #[test]
    fn width_one_equals_greedy() {
        let mut rng = seeded_rng(8);
        for seed in 0..40 {
            let model = tiny_model(3, seed, 2.5);
            let frames = rng.random_range(1..=6);
            let h = random_h(&mut rng, frames, 4);
            let cfg = BeamConfig {
                beam: 1,
                max_emissions: 3,
            };
            let nbest = beam_search(&model, &h, cfg).unwrap();
            let greedy = greedy_decode(&model, &h, 3).unwrap();
            assert_eq!(nbest.len(), 1);
            assert_eq!(nbest.best().unwrap().tokens, greedy.tokens);
            assert!((nbest.best().unwrap().first_pass_logprob - greedy.first_pass_logprob).abs() < 1e-12);
        }
    }

    #[test]
    fn dominant_blank_yields_empty_sequence() {
        let mut model = tiny_model(3, 1, 1.0);
        let b = model.store().id("joiner.out.b").unwrap();
        let mut bias = model.store().value(b).clone();
        bias.data_mut()[0] = 50.0;
        model.store_mut().set_value(b, bias).unwrap();
        let mut rng = seeded_rng(2);
        let h = random_h(&mut rng, 5, 4);
        let one = beam_search(&model, &h, BeamConfig { beam: 1, max_emissions: 3 }).unwrap();
        assert_eq!(one.len(), 1);
        assert!(one.best().unwrap().tokens.is_empty());
        let ten = beam_search(&model, &h, BeamConfig::default()).unwrap();
        assert!(ten.best().unwrap().tokens.is_empty());
        assert!(ten.best().unwrap().first_pass_logprob > -1e-9);
        assert!(ten.iter().skip(1).all(|h| h.first_pass_logprob < -40.0));
    }

    #[test]
    fn zero_width_is_a_config_error() {
        let model = tiny_model(2, 1, 1.0);
        let h = Tensor::zeros(2, 4);
        let cfg = BeamConfig {
            beam: 0,
            max_emissions: 3,
        };
        assert!(matches!(beam_search(&model, &h, cfg), Err(Error::Config(_))));
    }
}
