pub mod baselines;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod harness;
pub mod matching;
pub mod stitching;
pub mod training;
pub mod tensor;

pub use error::{Error, Result};
