//! Unfused reference kernels.
//!
//! These define the semantics every fused kernel is checked against and the
//! pass structure of the baseline graph. Convolution here is a plain direct
//! loop; the executor's convolution engine lives in [`crate::kernels`].

mod bn;
mod conv;
mod eltwise;
mod layout;
mod pool;

pub use bn::{
    bn_bwd, bn_fwd, bn_stats_onepass, bn_stats_onepass_acc, bn_stats_twopass, BnCoeffs, BnGrads, BnParams, ChannelNorm,
    ChannelStats, DEFAULT_EPS,
};
pub use conv::{conv2d_bwd, conv2d_fwd, ConvGeometry, ConvGrads, ConvParams};
pub use eltwise::{ews_bwd, ews_fwd, relu_bwd, relu_fwd};
pub use layout::{concat_bwd, concat_fwd, split_bwd, split_fwd, Planes};
pub use pool::{avgpool_bwd, avgpool_fwd, PoolGeometry};

pub(crate) use bn::{
    bn_bwd_logged, bn_fwd_logged, bn_stats_onepass_logged, bn_stats_twopass_logged, check_stats, dgamma_dbeta_logged,
    plane_relu_dbeta_dgamma, plane_sums, stats_from_partials, DxCoeffs,
};
pub(crate) use eltwise::relu;
pub(crate) use layout::same_dims;
pub(crate) use pool::avgpool_plane;
pub(crate) use eltwise::{ews_fwd_logged, relu_bwd_logged, relu_fwd_logged};
pub(crate) use layout::{concat_bwd_logged, concat_fwd_logged, split_bwd_logged};
pub(crate) use pool::{avgpool_bwd_logged, avgpool_fwd_logged};
