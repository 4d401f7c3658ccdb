//! JSON Lines corpus files: a header record followed by one record per example.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Domain, Example, FeatureMatrix, PairedExample, TextExample, TokenSequence, Vocab};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FORMAT_NAME: &str = "tpt-corpus";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusHeader {
    pub version: u32,
    pub vocab_size: u32,
    pub feature_dim: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHeader {
    format: String,
    version: u32,
    vocab_size: u32,
    feature_dim: usize,
}

impl CorpusHeader {
    pub fn new(vocab_size: u32, feature_dim: usize) -> Self {
        Self {
            version: FORMAT_VERSION,
            vocab_size,
            feature_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusFile {
    pub header: CorpusHeader,
    pub examples: Vec<Example>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    domain: Domain,
    tokens: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shape: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<Vec<Vec<f64>>>,
}

impl Record {
    fn from_example(e: &Example) -> Self {
        match e {
            Example::Paired(p) => {
                let t = p.features.tensor();
                Record {
                    id: p.id.clone(),
                    domain: p.domain,
                    tokens: p.tokens.0.clone(),
                    shape: Some([t.rows(), t.cols()]),
                    features: Some((0..t.rows()).map(|r| t.row(r).to_vec()).collect()),
                }
            }
            Example::Text(t) => Record {
                id: t.id.clone(),
                domain: t.domain,
                tokens: t.tokens.0.clone(),
                shape: None,
                features: None,
            },
        }
    }

    fn into_example(self, header: &CorpusHeader, line: usize) -> Result<Example> {
        let schema = |m: String| Error::Schema(format!("line {line}: {m}"));
        Vocab::new(header.vocab_size)
            .check(&self.tokens)
            .map_err(|e| schema(e.to_string()))?;
        let tokens = TokenSequence(self.tokens);
        match (self.shape, self.features) {
            (None, None) => Ok(Example::Text(TextExample {
                id: self.id,
                tokens,
                domain: self.domain,
            })),
            (Some([t, f]), Some(rows)) => {
                if f != header.feature_dim {
                    return Err(schema(format!(
                        "feature dim {f} differs from header {}",
                        header.feature_dim
                    )));
                }
                if rows.len() != t || rows.iter().any(|r| r.len() != f) {
                    return Err(schema(format!("features do not match shape [{t}, {f}]")));
                }
                let data = rows.into_iter().flatten().collect();
                let features = FeatureMatrix::new(Tensor::new(vec![t, f], data)?)
                    .map_err(|e| schema(e.to_string()))?;
                Ok(Example::Paired(PairedExample {
                    id: self.id,
                    features,
                    tokens,
                    domain: self.domain,
                }))
            }
            _ => Err(schema("\"shape\" and \"features\" must appear together".into())),
        }
    }
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &CorpusFile) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_corpus(&mut w, corpus)?;
    w.flush()?;
    Ok(())
}

pub fn write_corpus(mut w: impl Write, corpus: &CorpusFile) -> Result<()> {
    let header = RawHeader {
        format: FORMAT_NAME.to_string(),
        version: corpus.header.version,
        vocab_size: corpus.header.vocab_size,
        feature_dim: corpus.header.feature_dim,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for e in &corpus.examples {
        serde_json::to_writer(&mut w, &Record::from_example(e))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<CorpusFile> {
    read_corpus(BufReader::new(std::fs::File::open(path)?))
}

pub fn read_corpus(r: impl BufRead) -> Result<CorpusFile> {
    let mut lines = r.lines().enumerate();
    let (_, first) = lines.next().ok_or(Error::Parse {
        line: 1,
        detail: "missing header record".into(),
    })?;
    let raw: RawHeader = serde_json::from_str(&first?).map_err(|e| Error::Parse {
        line: 1,
        detail: e.to_string(),
    })?;
    if raw.format != FORMAT_NAME || raw.version != FORMAT_VERSION {
        return Err(Error::Schema(format!(
            "unsupported corpus format {:?} version {}",
            raw.format, raw.version
        )));
    }
    let header = CorpusHeader::new(raw.vocab_size, raw.feature_dim);
    let mut examples = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            detail: e.to_string(),
        })?;
        examples.push(rec.into_example(&header, line_no)?);
    }
    Ok(CorpusFile { header, examples })
}
