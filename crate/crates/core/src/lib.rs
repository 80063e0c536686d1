//! Multi-teacher knowledge distillation core.
//!
//! Everything here is `no_std` + `alloc`: a small reverse-mode autodiff tape,
//! an Adam optimizer, a BERT-style encoder with attentive pooling, the
//! multi-teacher losses, and synthetic classification tasks with metrics.
//! IO, configuration files and the CLI live in the `mtkd` crate.

#![no_std]
#![warn(clippy::std_instead_of_alloc)]
#![warn(clippy::std_instead_of_core)]

extern crate alloc;

pub mod adam;
pub mod audit;
pub mod distill;
pub mod encoder;
mod error;
pub mod ops;
pub mod params;
pub mod gradcheck;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tasks;
pub mod tensor;

pub use self::{error::*, params::Parameters, rng::Rng, scalar::Scalar, tape::*, tensor::*};
