//! Multi-contrast MR super-resolution with separable attention.
//!
//! The crate covers the whole experimental pipeline: k-space truncation
//! degradation ([`fourier`]), synthetic paired-contrast phantoms
//! ([`phantom`]), differentiable building blocks on a tensor tape
//! ([`autograd`], [`blocks`]), the two-branch network and its ablation
//! variants ([`model`]), and training and evaluation ([`train`],
//! [`metrics`], [`gradcheck`]).

pub mod autograd;
pub mod blocks;
pub mod checkpoint;
pub mod error;
pub mod fourier;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod params;
pub mod phantom;
pub mod tensor;
pub mod tensor_io;
pub mod train;

pub use error::{Error, ParseError, Result};
pub use tensor::{Scalar, Shape, Tensor};
