//! Token and feature data model, the synthetic two-domain corpus, and the
//! mixing-ratio batch sampler.

mod io;
mod sampler;
mod synth;

pub use io::{load_corpus, save_corpus, CorpusFile, CorpusHeader, FORMAT_NAME, FORMAT_VERSION};
pub use sampler::{mixing_ratio, BatchSampler, MixedBatch, Modality};
pub use synth::{synth_corpus, Corpus, SplitCounts, SyntheticTaskSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Symbol inventory. Content symbols are `1..=size`; `0` is the transducer
/// blank, `size + 1` the decoder start symbol and `size + 2` end-of-sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: u32,
}

impl Vocab {
    pub const BLANK: u32 = 0;

    pub fn new(size: u32) -> Self {
        Self { size }
    }

    pub fn bos(&self) -> u32 {
        self.size + 1
    }

    pub fn eos(&self) -> u32 {
        self.size + 2
    }

    pub fn is_content(&self, id: u32) -> bool {
        (1..=self.size).contains(&id)
    }

    pub fn check(&self, tokens: &[u32]) -> Result<()> {
        match tokens.iter().find(|&&t| !self.is_content(t)) {
            Some(&id) => Err(Error::Vocab {
                id,
                size: self.size,
            }),
            None => Ok(()),
        }
    }
}

/// Ordered content symbols `y_1..y_U`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<u32>);

impl TokenSequence {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self(tokens)
    }

    pub fn validated(tokens: Vec<u32>, vocab: &Vocab) -> Result<Self> {
        vocab.check(&tokens)?;
        Ok(Self(tokens))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }
}

impl From<Vec<u32>> for TokenSequence {
    fn from(v: Vec<u32>) -> Self {
        Self(v)
    }
}

/// `T x F` acoustic feature frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    frames: Tensor,
}

impl FeatureMatrix {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.shape().len() != 2 || frames.rows() == 0 {
            return Err(Error::Schema(format!(
                "feature matrix needs shape [T>=1, F], got {:?}",
                frames.shape()
            )));
        }
        if !frames.all_finite() {
            return Err(Error::Schema("feature matrix has non-finite entries".into()));
        }
        Ok(Self { frames })
    }

    pub fn zeros(frames: usize, dim: usize) -> Self {
        Self {
            frames: Tensor::zeros(frames, dim),
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.frames.row(t)
    }

    /// First `n` frames.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        let f = self.dim();
        let data = self.frames.data()[..n * f].to_vec();
        Self::new(Tensor::new(vec![n, f], data)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

impl Domain {
    pub const ALL: [Domain; 2] = [Domain::A, Domain::B];

    pub fn label(self) -> &'static str {
        match self {
            Domain::A => "A",
            Domain::B => "B",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedExample {
    pub id: String,
    pub features: FeatureMatrix,
    pub tokens: TokenSequence,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextExample {
    pub id: String,
    pub tokens: TokenSequence,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Example {
    Paired(PairedExample),
    Text(TextExample),
}

impl Example {
    pub fn id(&self) -> &str {
        match self {
            Example::Paired(p) => &p.id,
            Example::Text(t) => &t.id,
        }
    }

    pub fn modality(&self) -> Modality {
        match self {
            Example::Paired(_) => Modality::Paired,
            Example::Text(_) => Modality::TextOnly,
        }
    }
}
