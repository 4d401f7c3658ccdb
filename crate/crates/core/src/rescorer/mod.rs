//! Second pass: Transformer rescorer, its standard and joint audio/text
//! training, and n-best selection.

pub mod model;
pub mod select;
pub mod train;

pub use model::{Dropout, Rescorer, RescorerConfig, RescorerScore};
pub use select::{rescore_select, SelectConfig, Selection};
pub use train::{
    batch_gradients, train_rescorer, train_step, AudioMemories, JointTrainConfig, RescorerTrainReport, TrainMode,
};
