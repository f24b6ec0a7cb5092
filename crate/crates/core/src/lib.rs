pub mod aggregation;
pub mod blocks;
pub mod cli;
pub mod decoding;
pub mod error;
pub mod gradsuite;
pub mod io;
pub mod metrics;
pub mod tensor;
pub mod threshopt;
pub mod training;

pub use error::{Error, Result};
