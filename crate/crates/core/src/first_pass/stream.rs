//! Frame-by-frame recognition: each encoder step runs as soon as its
//! lookahead window has arrived and is searched immediately.

use super::beam::{BeamConfig, BeamSearch, NBestList};
use super::model::{EncoderState, FirstPassModel};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub struct StreamingDecoder<'m> {
    model: &'m FirstPassModel,
    state: EncoderState,
    search: BeamSearch<'m>,
    frames: Vec<f64>,
    embeddings: Vec<f64>,
    received: usize,
    emitted: usize,
}

impl<'m> StreamingDecoder<'m> {
    pub fn new(model: &'m FirstPassModel, config: BeamConfig) -> Result<Self> {
        Ok(Self {
            model,
            state: model.encoder_start(),
            search: BeamSearch::new(model, config)?,
            frames: Vec::new(),
            embeddings: Vec::new(),
            received: 0,
            emitted: 0,
        })
    }

    /// Encoder steps computed so far.
    pub fn steps(&self) -> usize {
        self.emitted
    }

    pub fn push_frame(&mut self, frame: &[f64]) -> Result<()> {
        let f = self.model.config.encoder.feature_dim;
        if frame.len() != f {
            return Err(Error::shape(
                "push_frame",
                format!("frame has {} values, expected {f}", frame.len()),
            ));
        }
        if !frame.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "push_frame" });
        }
        self.frames.extend_from_slice(frame);
        self.received += 1;
        let ec = self.model.config.encoder;
        while ec.horizon(self.emitted) < self.received {
            self.advance()?;
        }
        Ok(())
    }

    fn advance(&mut self) -> Result<()> {
        let ec = self.model.config.encoder;
        let f = ec.feature_dim;
        let mut row = vec![0.0; ec.input_width()];
        for w in 0..=ec.lookahead {
            for s in 0..ec.stack {
                let frame = (self.emitted + w) * ec.stack + s;
                if frame < self.received {
                    let off = (w * ec.stack + s) * f;
                    row[off..off + f].copy_from_slice(&self.frames[frame * f..(frame + 1) * f]);
                }
            }
        }
        let h = self.model.encoder_step(&mut self.state, row)?;
        let proj = self.model.project_encoder(&h)?;
        self.embeddings.extend_from_slice(h.data());
        self.search.step(proj.data())?;
        self.emitted += 1;
        Ok(())
    }

    /// Flushes the steps whose lookahead reaches past the end of input.
    pub fn finish(self) -> Result<NBestList> {
        Ok(self.finish_with_embeddings()?.0)
    }

    /// Like [`finish`](Self::finish), also returning the encoder outputs
    /// for a second pass.
    pub fn finish_with_embeddings(mut self) -> Result<(NBestList, Tensor)> {
        let total = self.model.config.encoder.output_len(self.received);
        while self.emitted < total {
            self.advance()?;
        }
        let h = Tensor::new(vec![self.emitted, self.model.config.encoder.dim], self.embeddings)?;
        Ok((self.search.finish(), h))
    }
}

/// Streams `frames` through a fresh decoder.
pub fn stream_decode(model: &FirstPassModel, frames: &Tensor, config: BeamConfig) -> Result<NBestList> {
    let mut dec = StreamingDecoder::new(model, config)?;
    for t in 0..frames.rows() {
        dec.push_frame(frames.row(t))?;
    }
    dec.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{FeatureMatrix, Vocab};
    use crate::first_pass::beam::beam_search;
    use crate::first_pass::model::{EncoderConfig, FirstPassConfig, JoinerConfig, PredictorConfig};
    use crate::numerics::seeded_rng;
    use rand::Rng;

    #[test]
    fn streaming_matches_offline_search() {
        let cfg = FirstPassConfig {
            encoder: EncoderConfig {
                feature_dim: 3,
                dim: 6,
                ..Default::default()
            },
            predictor: PredictorConfig {
                embed_dim: 4,
                hidden: 6,
                layers: 1,
            },
            joiner: JoinerConfig { dim: 6 },
        };
        let model = FirstPassModel::new(cfg, Vocab::new(4), 3).unwrap();
        let mut rng = seeded_rng(1);
        for frames in 1..12 {
            let data = (0..frames * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = FeatureMatrix::new(Tensor::new(vec![frames, 3], data).unwrap()).unwrap();
            let offline = beam_search(&model, &model.encode(&x).unwrap(), BeamConfig::default()).unwrap();
            let online = stream_decode(&model, x.tensor(), BeamConfig::default()).unwrap();
            assert_eq!(offline, online);
            let mut dec = StreamingDecoder::new(&model, BeamConfig::default()).unwrap();
            for t in 0..frames {
                dec.push_frame(x.frame(t)).unwrap();
            }
            let (_, h) = dec.finish_with_embeddings().unwrap();
            let reference = model.encode(&x).unwrap();
            assert_eq!(h.shape(), reference.shape());
            for (a, b) in h.data().iter().zip(reference.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn steps_wait_for_lookahead() {
        let cfg = FirstPassConfig {
            encoder: EncoderConfig {
                feature_dim: 2,
                dim: 4,
                ..Default::default()
            },
            ..Default::default()
        };
        let model = FirstPassModel::new(cfg, Vocab::new(3), 1).unwrap();
        let mut dec = StreamingDecoder::new(&model, BeamConfig::default()).unwrap();
        // stack 2, lookahead 2: step 0 needs frames 0..=5
        for i in 0..5 {
            dec.push_frame(&[0.1 * i as f64, 0.0]).unwrap();
            assert_eq!(dec.steps(), 0);
        }
        dec.push_frame(&[0.0, 0.0]).unwrap();
        assert_eq!(dec.steps(), 1);
        assert!(dec.push_frame(&[0.0]).is_err());
    }
}
