//! Modular language models assembled from independently trained experts.

pub mod baselines;
pub mod branch;
pub mod clihub;
pub mod corpora;
pub mod error;
pub mod evalx;
pub mod lmcore;
pub mod merge;
pub mod numcore;

pub use error::{Error, Result};
