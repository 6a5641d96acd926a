//! Kernels for fused node kinds.
//!
//! Each kernel streams its operands once and records every full pass in a
//! [`PassLog`](crate::sweep::PassLog); the executor turns those logs into
//! the measured sweep ledger.

mod conv;
mod norm;

use serde::{Deserialize, Serialize};

pub use conv::{
    conv_bwd, conv_fwd, fused_conv_stats_bwd, fused_conv_stats_fwd, fused_norm_relu_conv_fwd, fused_nrc_bwd, ConvBwdOut,
    ConvFwdOut, ConvGradIn, ConvPrologue, NrcGrads,
};
pub use norm::{
    fused_concat_stats_fwd, fused_pool_stats_fwd, fused_split_bwd_bn_dx, sub_bn1_bwd, sub_bn2_bwd, GradValue,
    PendingBnGrad,
};

pub(crate) use conv::{conv_bwd_logged, conv_fwd_logged};
pub(crate) use norm::{
    fused_concat_stats_fwd_logged, fused_pool_stats_fwd_logged, fused_split_bwd_bn_dx_logged, sub_bn1_bwd_logged,
    sub_bn2_bwd_logged,
};

/// Default per-worker on-chip working-set budget.
pub const DEFAULT_ON_CHIP_BUDGET: usize = 256 * 1024;

/// Deliberate defects for self-testing the verification suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fault {
    /// Fused normalize-ReLU-conv backward leaves dγ at zero.
    SkipDgamma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelConfig {
    pub on_chip_budget: usize,
    pub fault: Option<Fault>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig { on_chip_budget: DEFAULT_ON_CHIP_BUDGET, fault: None }
    }
}

impl KernelConfig {
    /// Input planes of `plane_len` elements that fit the budget together (at least one).
    pub(crate) fn planes_per_tile<T: crate::tensor::Real>(&self, plane_len: usize) -> usize {
        (self.on_chip_budget / (plane_len * T::BYTES).max(1)).max(1)
    }
}
