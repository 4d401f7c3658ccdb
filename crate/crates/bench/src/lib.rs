//! Fixtures shared by the benchmarks: default-size models on synthetic
//! utterances.

use tpt_core::corpus::{synth_corpus, PairedExample, SplitCounts, SyntheticTaskSpec};
use tpt_core::first_pass::{beam_search, BeamConfig, FirstPassConfig, FirstPassModel, NBestList};
use tpt_core::numerics::Tensor;
use tpt_core::rescorer::{Rescorer, RescorerConfig};

pub struct Fixture {
    pub first_pass: FirstPassModel,
    pub rescorer: Rescorer,
    pub utterances: Vec<PairedExample>,
    pub embeddings: Vec<Tensor>,
    pub nbest: Vec<NBestList>,
}

/// Untrained default-size models and `n` test utterances.
pub fn fixture(n: usize) -> Fixture {
    let counts = SplitCounts {
        paired_a: 0,
        paired_b: 0,
        text_a: 0,
        text_b: 0,
        test_a: n / 2,
        test_b: n - n / 2,
    };
    let corpus = synth_corpus(&SyntheticTaskSpec::default(), &counts, 1).expect("default task is valid");
    let first_pass = FirstPassModel::new(FirstPassConfig::default(), corpus.vocab, 1).expect("default config");
    let rescorer = Rescorer::new(RescorerConfig::default(), corpus.vocab, 1).expect("default config");
    let embeddings: Vec<Tensor> = corpus
        .test
        .iter()
        .map(|ex| first_pass.encode(&ex.features).expect("features match encoder"))
        .collect();
    let nbest = embeddings
        .iter()
        .map(|h| beam_search(&first_pass, h, BeamConfig::default()).expect("valid beam"))
        .collect();
    Fixture {
        first_pass,
        rescorer,
        utterances: corpus.test,
        embeddings,
        nbest,
    }
}
