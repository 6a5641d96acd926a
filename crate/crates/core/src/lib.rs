//! Batch-normalization fission and fusion for CNN training.
//!
//! The crate contains a small NCHW training engine ([`ops`], [`kernels`]),
//! a layer-graph IR with DenseNet/ResNet builders ([`graph`]), the rewrite
//! pass that splits BN into a statistics half and a normalization half and
//! folds each half into neighbouring convolutions ([`fusion`]), and an
//! analytic memory-sweep model that is cross-checked against instrumented
//! execution ([`traffic`]).

pub mod bench;
pub mod error;
pub mod fmap;
pub mod fusion;
pub mod graph;
pub mod kernels;
pub mod ops;
pub mod rng;
pub mod sweep;
pub mod tensor;
pub mod traffic;
pub mod verify;

pub use error::{Error, Result};
pub use fmap::FeatureMap;
pub use rng::{tensor_random, Rng};
pub use tensor::{approx_eq, ApproxReport, Dims, Real, Tensor4D};
