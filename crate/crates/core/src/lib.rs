//! Sparse placement of LoRA adapter parameters on a synthetic teacher/student
//! MLP.
//!
//! The pipeline: score every entry of the adapter's up-projection `B` from
//! gradient statistics at the zero-adapter point ([`discovery`]), train only
//! the top-`k` entries under a clean or a noisy optimization regime
//! ([`training`]), and explain the outcome with gradient-structure and
//! knockout diagnostics ([`diagnostics`]). [`experiment`] drives full sweeps
//! and writes CSV/JSON outputs.

pub mod diagnostics;
pub mod discovery;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod mask;
pub mod model;
pub mod rng;
pub mod svd;
pub mod task;
pub mod training;

pub use error::{Error, Result};

/// Version stamped into every JSON file this crate writes.
pub const SCHEMA_VERSION: u32 = 1;

pub(crate) fn schema_version() -> u32 {
    SCHEMA_VERSION
}
