//! Shift-convolution stereo matching.
//!
//! A small NCHW tensor library with reverse-mode differentiation
//! ([`autograd`]), the shift-concatenation cost volume and its baselines
//! ([`matching`]), the encoder/decoder disparity network ([`network`]),
//! losses and metrics, PFM/PNM IO with a synthetic stereo generator
//! ([`data`]), and two-stage training ([`train`]).

pub mod autograd;
pub mod data;
pub mod disparity;
pub mod error;
pub mod kernels;
pub mod losses;
pub mod matching;
pub mod network;
pub mod params;
pub mod tensor;
pub mod train;

pub use autograd::{grad_check, grad_check_smooth, GradCheck, Graph, Var};
pub use disparity::DisparityMap;
pub use error::{Error, Result};
pub use matching::{ShiftConvConfig, ShiftVariant};
pub use network::{CostVolumeKind, Network, NetworkConfig};
pub use params::ParamStore;
pub use tensor::{Scalar, Shape, Tensor};
