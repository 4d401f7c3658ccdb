//! First pass: streaming transducer, its loss, n-best search and the
//! averaged audio memory handed to the rescorer.

pub mod beam;
pub mod havg;
pub mod lattice;
pub mod model;
pub mod stream;
pub mod train;

pub use beam::{beam_search, greedy_decode, BeamConfig, BeamSearch, Hypothesis, NBestList};
pub use havg::{compute_h_avg, median_frames, HAvgMode};
pub use lattice::{transducer_nll, TransducerLattice};
pub use model::{EncoderConfig, FirstPassConfig, FirstPassModel, JoinerConfig, PredictorConfig};
pub use stream::{stream_decode, StreamingDecoder};
pub use train::{train_first_pass, transducer_loss, FirstPassTrainConfig, TrainReport};

use crate::numerics::Checkpoint;

/// Element count of checkpoint tensors under `prefix`, buffers excluded.
pub fn count_parameters(ckpt: &Checkpoint, prefix: &str) -> usize {
    ckpt.count_parameters(prefix)
}
