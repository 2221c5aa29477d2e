//! Minimal deterministic reverse-mode autodiff with the layers the
//! segmentation network needs.

pub(crate) mod conv;
pub mod norm;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use norm::{BnRunningStats, BnSource, ChannelMoments, DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM};
pub use params::{ParamId, Parameter, ParameterStore};
pub use scalar::{DType, Float};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Normalization regime of every BN layer during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    /// Batch statistics; running statistics are updated by the caller.
    Train,
    /// Running statistics.
    Eval,
    /// Running statistics for the output, plus exact input moments reported
    /// back without touching the running statistics.
    Collect,
}
