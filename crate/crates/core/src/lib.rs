//! Channel-wise feature warping (volumetric transformer) with the minimal
//! training stack it needs: a dense tensor type, a reverse-mode tape,
//! a differentiable bilinear sampler, losses, SGD, synthetic data and
//! model builders.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the CLI and
//! anything touching the filesystem live in the companion `vtn` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod loss;
pub mod model;
pub mod nn;
pub mod param;
pub mod sampler;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vtn;

pub use error::{Error, Result};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{OpKind, Tape, Var};
pub use tensor::{Real, Tensor};
