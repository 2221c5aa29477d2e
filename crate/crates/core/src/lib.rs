//! Domain-generalization toolkit for two-stream change segmentation:
//! autodiff core, network, synthetic multi-domain data, split protocols,
//! training with SWA, test-time BN adaptation and xView2-style scoring.

pub mod adaptation;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod splits;
pub mod training;

pub use error::{Error, Result};
