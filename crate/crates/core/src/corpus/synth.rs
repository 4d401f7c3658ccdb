//! Synthetic paired/text corpus with two domains sharing one vocabulary.
//!
//! Content symbols come in acoustically close pairs `(2j+1, 2j+2)`: both
//! members share a pair centre and differ by a small offset, so frame noise
//! confuses them and only symbol context can tell them apart. Domain B's
//! bigram table strongly prefers one pair member in each context; domain A
//! is indifferent between members. Text-only data in domain B therefore
//! carries exactly the information a paired-data-only model lacks.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use super::io::{load_corpus, save_corpus, CorpusFile, CorpusHeader};
use super::{Domain, Example, FeatureMatrix, PairedExample, TextExample, TokenSequence, Vocab};
use crate::error::{Error, Result};
use crate::numerics::{seeded_rng, Tensor};

const TABLE_SEED: u64 = 0x5EED_7AB1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub vocab_size: u32,
    pub feature_dim: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub noise_sigma: f64,
    pub prototype_seed: u64,
    /// Standard deviation of the pair centres.
    pub prototype_scale: f64,
    /// Standard deviation of each member's offset from its pair centre.
    pub pair_offset_scale: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// `(V + 1) x V` bigram table; row 0 is the start distribution, row `k`
    /// follows symbol `k`, column `j` is symbol `j + 1`.
    pub transitions_a: Vec<Vec<f64>>,
    pub transitions_b: Vec<Vec<f64>>,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        let vocab_size = 24;
        let (transitions_a, transitions_b) = default_transitions(vocab_size, TABLE_SEED);
        Self {
            vocab_size,
            feature_dim: 16,
            min_duration: 2,
            max_duration: 4,
            noise_sigma: 0.3,
            prototype_seed: 17,
            prototype_scale: 1.0,
            pair_offset_scale: 0.08,
            min_len: 3,
            max_len: 12,
            transitions_a,
            transitions_b,
        }
    }
}

fn pair_of(token: u32) -> u32 {
    (token - 1) / 2
}

fn pair_members(pair: u32, vocab_size: u32) -> Vec<u32> {
    [2 * pair + 1, 2 * pair + 2]
        .into_iter()
        .filter(|&t| t <= vocab_size)
        .collect()
}

/// Default bigram tables. Both domains pick the next pair from a sparse
/// per-context distribution; B then strongly prefers one member of the
/// pair, A splits evenly. Self-transitions are excluded.
pub fn default_transitions(vocab_size: u32, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let v = vocab_size as usize;
    let n_pairs = vocab_size.div_ceil(2);
    let mut rng = seeded_rng(seed);
    let pair_dist = |rng: &mut crate::numerics::Rng, alpha: f64| -> Vec<f64> {
        let gamma = Gamma::new(alpha, 1.0).expect("positive shape");
        let draws: Vec<f64> = (0..n_pairs).map(|_| gamma.sample(rng) + 1e-3).collect();
        let total: f64 = draws.iter().sum();
        draws.into_iter().map(|d| d / total).collect()
    };
    let mut table_a = vec![vec![0.0; v]; v + 1];
    let mut table_b = vec![vec![0.0; v]; v + 1];
    for prev in 0..=v {
        let pa = pair_dist(&mut rng, 0.7);
        let pb = pair_dist(&mut rng, 0.7);
        for pair in 0..n_pairs {
            let members = pair_members(pair, vocab_size);
            let preferred = rng.random_range(0..members.len());
            for (m, &tok) in members.iter().enumerate() {
                let col = tok as usize - 1;
                let share_b = match members.len() {
                    1 => 1.0,
                    _ if m == preferred => 0.9,
                    _ => 0.1,
                };
                table_a[prev][col] = pa[pair as usize] / members.len() as f64;
                table_b[prev][col] = pb[pair as usize] * share_b;
            }
        }
        if prev > 0 {
            table_a[prev][prev - 1] = 0.0;
            table_b[prev][prev - 1] = 0.0;
        }
        for row in [&mut table_a[prev], &mut table_b[prev]] {
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= total);
        }
    }
    (table_a, table_b)
}

impl SyntheticTaskSpec {
    /// Default task with a different inventory and feature width; the
    /// transition tables are regenerated to match.
    pub fn with_vocab(vocab_size: u32, feature_dim: usize) -> Self {
        let (transitions_a, transitions_b) = default_transitions(vocab_size, TABLE_SEED);
        Self {
            vocab_size,
            feature_dim,
            transitions_a,
            transitions_b,
            ..Self::default()
        }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.vocab_size)
    }

    pub fn transitions(&self, domain: Domain) -> &[Vec<f64>] {
        match domain {
            Domain::A => &self.transitions_a,
            Domain::B => &self.transitions_b,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.vocab_size < 2 {
            return bad(format!("vocab size {} < 2", self.vocab_size));
        }
        if self.feature_dim == 0 {
            return bad("feature dim must be positive".into());
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return bad(format!(
                "duration range {}..={} is empty or starts at 0",
                self.min_duration, self.max_duration
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!(
                "length range {}..={} is empty or starts at 0",
                self.min_len, self.max_len
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma {} must be finite and >= 0", self.noise_sigma));
        }
        if !(self.prototype_scale > 0.0 && self.pair_offset_scale >= 0.0) {
            return bad("prototype scales must be positive".into());
        }
        let v = self.vocab_size as usize;
        for (name, table) in [("A", &self.transitions_a), ("B", &self.transitions_b)] {
            if table.len() != v + 1 || table.iter().any(|r| r.len() != v) {
                return bad(format!("transition table {name} must be {}x{v}", v + 1));
            }
            for (i, row) in table.iter().enumerate() {
                let total: f64 = row.iter().sum();
                if row.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                    return bad(format!(
                        "transition table {name} row {i} is not a distribution (sum {total})"
                    ));
                }
            }
        }
        Ok(())
    }

    /// Prototype vectors, one row per content symbol (row `k - 1` is symbol `k`).
    pub fn prototypes(&self) -> Tensor {
        let mut rng = seeded_rng(self.prototype_seed);
        let f = self.feature_dim;
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let n_pairs = self.vocab_size.div_ceil(2) as usize;
        let centres: Vec<Vec<f64>> = (0..n_pairs)
            .map(|_| (0..f).map(|_| unit.sample(&mut rng) * self.prototype_scale).collect())
            .collect();
        let mut out = Tensor::zeros(self.vocab_size as usize, f);
        for tok in 1..=self.vocab_size {
            let centre = &centres[pair_of(tok) as usize];
            for (j, c) in centre.iter().enumerate() {
                let offset = unit.sample(&mut rng) * self.pair_offset_scale;
                out.set(tok as usize - 1, j, c + offset);
            }
        }
        out
    }

    pub fn sample_tokens(&self, domain: Domain, rng: &mut impl Rng) -> TokenSequence {
        let len = rng.random_range(self.min_len..=self.max_len);
        let table = self.transitions(domain);
        let mut prev = 0usize;
        let mut tokens = Vec::with_capacity(len);
        for _ in 0..len {
            let row = &table[prev];
            let mut r: f64 = rng.random();
            let mut next = row.len() - 1;
            for (j, &p) in row.iter().enumerate() {
                if r < p {
                    next = j;
                    break;
                }
                r -= p;
            }
            // Guard against landing on a zero-probability tail entry.
            while row[next] == 0.0 && next > 0 {
                next -= 1;
            }
            tokens.push(next as u32 + 1);
            prev = next + 1;
        }
        TokenSequence(tokens)
    }

    /// Renders a symbol sequence: each symbol's prototype repeated for a
    /// sampled duration, concatenated, plus i.i.d. Gaussian noise.
    pub fn render(
        &self,
        tokens: &TokenSequence,
        prototypes: &Tensor,
        rng: &mut impl Rng,
    ) -> Result<FeatureMatrix> {
        let f = self.feature_dim;
        let mut data = Vec::new();
        for &tok in tokens.as_slice() {
            let dur = rng.random_range(self.min_duration..=self.max_duration);
            for _ in 0..dur {
                data.extend_from_slice(prototypes.row(tok as usize - 1));
            }
        }
        if self.noise_sigma > 0.0 {
            let noise = Normal::new(0.0, self.noise_sigma).expect("valid sigma");
            for v in &mut data {
                *v += noise.sample(rng);
            }
        }
        let frames = data.len() / f;
        FeatureMatrix::new(Tensor::new(vec![frames, f], data)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitCounts {
    pub paired_a: usize,
    pub paired_b: usize,
    pub text_a: usize,
    pub text_b: usize,
    pub test_a: usize,
    pub test_b: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            paired_a: 2000,
            paired_b: 200,
            text_a: 0,
            text_b: 5000,
            test_a: 500,
            test_b: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub feature_dim: usize,
    pub paired: Vec<PairedExample>,
    pub text: Vec<TextExample>,
    pub test: Vec<PairedExample>,
}

pub const PAIRED_FILE: &str = "paired.jsonl";
pub const TEXT_FILE: &str = "text.jsonl";
pub const TEST_FILE: &str = "test.jsonl";

impl Corpus {
    pub fn test_set(&self, domain: Domain) -> Vec<&PairedExample> {
        self.test.iter().filter(|e| e.domain == domain).collect()
    }

    fn header(&self) -> CorpusHeader {
        CorpusHeader::new(self.vocab.size, self.feature_dim)
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let file = |examples: Vec<Example>| CorpusFile {
            header: self.header(),
            examples,
        };
        save_corpus(
            dir.join(PAIRED_FILE),
            &file(self.paired.iter().cloned().map(Example::Paired).collect()),
        )?;
        save_corpus(
            dir.join(TEXT_FILE),
            &file(self.text.iter().cloned().map(Example::Text).collect()),
        )?;
        save_corpus(
            dir.join(TEST_FILE),
            &file(self.test.iter().cloned().map(Example::Paired).collect()),
        )?;
        Ok(())
    }

    /// Reads a corpus directory. A missing text-only file reads as an empty pool.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let paired = load_corpus(dir.join(PAIRED_FILE))?;
        let text_path = dir.join(TEXT_FILE);
        let text = if text_path.exists() {
            Some(load_corpus(text_path)?)
        } else {
            None
        };
        let test_path = dir.join(TEST_FILE);
        let test = if test_path.exists() {
            Some(load_corpus(test_path)?)
        } else {
            None
        };
        let header = paired.header;
        for other in [&text, &test].into_iter().flatten() {
            if other.header.vocab_size != header.vocab_size
                || other.header.feature_dim != header.feature_dim
            {
                return Err(Error::Schema(
                    "corpus files disagree on vocab size or feature dim".into(),
                ));
            }
        }
        let paired_only = |f: CorpusFile, what: &str| -> Result<Vec<PairedExample>> {
            f.examples
                .into_iter()
                .map(|e| match e {
                    Example::Paired(p) => Ok(p),
                    Example::Text(t) => Err(Error::Schema(format!(
                        "{what} file contains text-only record {}",
                        t.id
                    ))),
                })
                .collect()
        };
        let text = match text {
            Some(f) => f
                .examples
                .into_iter()
                .map(|e| match e {
                    Example::Text(t) => Ok(t),
                    Example::Paired(p) => Err(Error::Schema(format!(
                        "text file contains paired record {}",
                        p.id
                    ))),
                })
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        Ok(Self {
            vocab: Vocab::new(header.vocab_size),
            feature_dim: header.feature_dim,
            paired: paired_only(paired, "paired")?,
            text,
            test: match test {
                Some(f) => paired_only(f, "test")?,
                None => Vec::new(),
            },
        })
    }
}

/// Deterministic corpus generation. Each split draws from its own stream
/// of the seeded generator, so changing one count leaves the others intact.
pub fn synth_corpus(spec: &SyntheticTaskSpec, counts: &SplitCounts, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let protos = spec.prototypes();
    let stream = |k: u64| {
        let mut rng = seeded_rng(seed);
        rng.set_stream(k);
        rng
    };
    let paired_split = |domain: Domain, n: usize, tag: &str, k: u64| -> Result<Vec<PairedExample>> {
        let mut rng = stream(k);
        (0..n)
            .map(|i| {
                let tokens = spec.sample_tokens(domain, &mut rng);
                let features = spec.render(&tokens, &protos, &mut rng)?;
                Ok(PairedExample {
                    id: format!("{tag}{}-{i:05}", domain.label()),
                    features,
                    tokens,
                    domain,
                })
            })
            .collect()
    };
    let text_split = |domain: Domain, n: usize, k: u64| -> Vec<TextExample> {
        let mut rng = stream(k);
        (0..n)
            .map(|i| TextExample {
                id: format!("text{}-{i:05}", domain.label()),
                tokens: spec.sample_tokens(domain, &mut rng),
                domain,
            })
            .collect()
    };
    let mut paired = paired_split(Domain::A, counts.paired_a, "pair", 1)?;
    paired.extend(paired_split(Domain::B, counts.paired_b, "pair", 2)?);
    let mut text = text_split(Domain::A, counts.text_a, 3);
    text.extend(text_split(Domain::B, counts.text_b, 4));
    let mut test = paired_split(Domain::A, counts.test_a, "test", 5)?;
    test.extend(paired_split(Domain::B, counts.test_b, "test", 6)?);
    Ok(Corpus {
        vocab: spec.vocab(),
        feature_dim: spec.feature_dim,
        paired,
        text,
        test,
    })
}
