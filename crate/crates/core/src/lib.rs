//! Deterministic diffusion for imaging through nonlocal forward models.
//!
//! The crate covers the simulated optics, the degradation schedule, the
//! restoration network and its training loop, the deterministic and
//! stochastic reverse samplers, uncertainty propagation, metrics and a small
//! tensor archive format.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod archive;
pub mod ddm;
pub mod dpm;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod nn;
pub mod optics;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod uq;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use schedule::{Schedule, Violation};
pub use tensor::{DType, Scalar, Tensor};
