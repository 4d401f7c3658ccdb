use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{wer, WerReport};
use crate::corpus::{Domain, PairedExample, TokenSequence};
use crate::error::{Error, Result};
use crate::first_pass::{beam_search, BeamConfig, FirstPassModel, NBestList};
use crate::numerics::Tensor;
use crate::rescorer::{rescore_select, Rescorer, SelectConfig};

pub const BASELINE: &str = "BS";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub beam: BeamConfig,
    /// Hypotheses handed to each rescorer.
    pub nbest: usize,
    pub select: SelectConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            beam: BeamConfig::default(),
            nbest: 10,
            select: SelectConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nbest == 0 || self.beam.beam < self.nbest {
            return Err(Error::Config(format!(
                "beam {} cannot supply {} hypotheses",
                self.beam.beam, self.nbest
            )));
        }
        Ok(())
    }
}

/// First-pass output for one test utterance, shared by every rescorer
/// under comparison.
#[derive(Debug, Clone)]
pub struct DecodedUtterance {
    pub id: String,
    pub domain: Domain,
    pub reference: TokenSequence,
    pub embeddings: Tensor,
    pub nbest: NBestList,
}

pub fn decode_testset(
    model: &FirstPassModel,
    test: &[PairedExample],
    config: &EvalConfig,
) -> Result<Vec<DecodedUtterance>> {
    config.validate()?;
    test.par_iter()
        .map(|ex| {
            let h = model.encode(&ex.features)?;
            let nbest = beam_search(model, &h, config.beam)?.truncated(config.nbest);
            Ok(DecodedUtterance {
                id: ex.id.clone(),
                domain: ex.domain,
                reference: ex.tokens.clone(),
                embeddings: h,
                nbest,
            })
        })
        .collect()
}

/// Picks one entry of an utterance's n-best list.
pub trait Selector: Sync {
    fn select(&self, utt: &DecodedUtterance) -> Result<usize>;
}

pub struct RescorerSelector<'a> {
    pub rescorer: &'a Rescorer,
    pub config: SelectConfig,
}

impl Selector for RescorerSelector<'_> {
    fn select(&self, utt: &DecodedUtterance) -> Result<usize> {
        Ok(rescore_select(self.rescorer, &utt.embeddings, &utt.nbest, self.config)?.rank)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemResult {
    pub system: String,
    /// `None` pools every domain.
    pub domain: Option<Domain>,
    pub report: WerReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub results: Vec<SystemResult>,
}

impl PipelineReport {
    pub fn get(&self, system: &str, domain: Option<Domain>) -> Option<&WerReport> {
        self.results
            .iter()
            .find(|r| r.system == system && r.domain == domain)
            .map(|r| &r.report)
    }

    pub fn wer(&self, system: &str, domain: Option<Domain>) -> Option<f64> {
        self.get(system, domain).map(|r| r.wer)
    }
}

fn domain_reports(system: &str, utts: &[DecodedUtterance], hyps: &[TokenSequence]) -> Result<Vec<SystemResult>> {
    let mut out = Vec::new();
    let refs: Vec<TokenSequence> = utts.iter().map(|u| u.reference.clone()).collect();
    out.push(SystemResult {
        system: system.to_string(),
        domain: None,
        report: wer(&refs, hyps)?,
    });
    for d in Domain::ALL {
        let (r, h): (Vec<_>, Vec<_>) = utts
            .iter()
            .zip(hyps)
            .filter(|(u, _)| u.domain == d)
            .map(|(u, h)| (u.reference.clone(), h.clone()))
            .unzip();
        if r.iter().map(TokenSequence::len).sum::<usize>() > 0 {
            out.push(SystemResult {
                system: system.to_string(),
                domain: Some(d),
                report: wer(&r, &h)?,
            });
        }
    }
    Ok(out)
}

/// WER of the first-pass top hypothesis (`BS`) and of each named
/// selector over the same n-best lists.
pub fn evaluate_pipeline(utts: &[DecodedUtterance], systems: &[(&str, &dyn Selector)]) -> Result<PipelineReport> {
    let top: Vec<TokenSequence> = utts
        .iter()
        .map(|u| {
            u.nbest
                .best()
                .map(|h| h.tokens.clone())
                .ok_or_else(|| Error::Contract(format!("empty n-best list for {}", u.id)))
        })
        .collect::<Result<_>>()?;
    let mut results = domain_reports(BASELINE, utts, &top)?;
    for (name, selector) in systems {
        let picks: Vec<usize> = utts.par_iter().map(|u| selector.select(u)).collect::<Result<_>>()?;
        let hyps: Vec<TokenSequence> = utts
            .iter()
            .zip(picks)
            .map(|(u, i)| u.nbest.0[i].tokens.clone())
            .collect();
        results.extend(domain_reports(name, utts, &hyps)?);
    }
    Ok(PipelineReport { results })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, SplitCounts, SyntheticTaskSpec};
    use crate::eval::metrics::align;
    use crate::first_pass::{EncoderConfig, FirstPassConfig};
    use crate::rescorer::RescorerConfig;

    struct OracleSelector;

    impl Selector for OracleSelector {
        fn select(&self, utt: &DecodedUtterance) -> Result<usize> {
            let scores: Vec<f64> = utt
                .nbest
                .iter()
                .map(|h| -(align(utt.reference.as_slice(), h.tokens.as_slice()).total() as f64))
                .collect();
            Ok(crate::rescorer::select::argmax_first(&scores).unwrap())
        }
    }

    fn setup() -> (FirstPassModel, Vec<PairedExample>) {
        let counts = SplitCounts {
            paired_a: 0,
            paired_b: 0,
            text_a: 0,
            text_b: 0,
            test_a: 6,
            test_b: 6,
        };
        let corpus = synth_corpus(&SyntheticTaskSpec::with_vocab(6, 4), &counts, 5).unwrap();
        let cfg = FirstPassConfig {
            encoder: EncoderConfig {
                feature_dim: 4,
                dim: 8,
                ..Default::default()
            },
            ..Default::default()
        };
        (FirstPassModel::new(cfg, corpus.vocab, 1).unwrap(), corpus.test)
    }

    #[test]
    fn baseline_only_without_rescorers() {
        let (fp, test) = setup();
        let utts = decode_testset(&fp, &test, &EvalConfig::default()).unwrap();
        let rep = evaluate_pipeline(&utts, &[]).unwrap();
        assert!(rep.results.iter().all(|r| r.system == BASELINE));
        assert_eq!(rep.results.len(), 3);
    }

    #[test]
    fn oracle_selection_never_hurts_and_runs_repeat() {
        let (fp, test) = setup();
        let utts = decode_testset(&fp, &test, &EvalConfig::default()).unwrap();
        let rescorer = Rescorer::new(
            RescorerConfig {
                memory_dim: 8,
                ..Default::default()
            },
            fp.vocab,
            2,
        )
        .unwrap();
        let rs = RescorerSelector {
            rescorer: &rescorer,
            config: SelectConfig::default(),
        };
        let systems: [(&str, &dyn Selector); 2] = [("oracle", &OracleSelector), ("BS+RS", &rs)];
        let rep = evaluate_pipeline(&utts, &systems).unwrap();
        for d in [None, Some(Domain::A), Some(Domain::B)] {
            assert!(rep.wer("oracle", d).unwrap() <= rep.wer(BASELINE, d).unwrap());
        }
        let again = evaluate_pipeline(&decode_testset(&fp, &test, &EvalConfig::default()).unwrap(), &systems).unwrap();
        assert_eq!(rep, again);
    }

    #[test]
    fn beam_must_cover_nbest() {
        let (fp, test) = setup();
        let cfg = EvalConfig {
            nbest: 12,
            ..Default::default()
        };
        assert!(matches!(decode_testset(&fp, &test, &cfg), Err(Error::Config(_))));
    }
}
