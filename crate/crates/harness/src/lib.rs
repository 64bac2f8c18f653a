//! Evaluation harness: synthetic scenes, dataset runs and ablation matrices.

pub mod dataset;
pub mod decoders;
pub mod error;
pub mod eval;
pub mod extract;
pub mod run;
pub mod synth;

pub use error::{HarnessError, Result};
