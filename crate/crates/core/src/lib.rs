pub mod config;
pub mod corpus;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod first_pass;
pub mod numerics;
pub mod rescorer;

pub use config::{PathsConfig, RunConfig};
pub use error::{Error, Result};
