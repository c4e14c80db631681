//! Command-line front end, run configuration and checkpoint persistence.

pub mod checkpoint;
pub mod cli;

pub use checkpoint::{load_model, model_fingerprint, save_model, shared_fingerprint, ArtifactKind, CheckpointManifest};
