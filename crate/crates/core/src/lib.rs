//! Multi-branch re-parameterizable convolutional networks.
//!
//! The crate trains networks whose blocks hold up to seven parallel
//! conv-like branches behind learnable binary gates, searches the branch
//! set per block under a global budget, and losslessly fuses the result
//! into a single-path network of plain convolutions for fast inference.
//!
//! Layering, bottom up:
//! - [`tensor`], [`scalar`], [`kernels`]: dense NCHW arrays and the numeric
//!   kernels (im2col convolution, batch norm, pooling, classifier head).
//! - [`autodiff`], [`params`], [`optim`]: reverse-mode tape, named
//!   parameter store, SGD/Adam.
//! - [`blocks`]: the searchable multi-branch block with center-crop weight
//!   sharing.
//! - [`fusion`]: exact collapse of any gated block into one convolution.
//! - [`search`]: budgeted differentiable branch selection.
//! - [`data`], [`train`]: dataset handling and the training loop.
//! - [`oracle`]: independent reference implementations used by tests.

pub mod autodiff;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fusion;
pub mod kernels;
pub mod oracle;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod scalar;
pub mod search;
pub mod tensor;
pub mod train;

pub use autodiff::{Mode, Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamKind, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
