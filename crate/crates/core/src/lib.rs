//! Recurrent video restoration transformer, from scratch.
//!
//! A desk-scale implementation of clip-recurrent video restoration:
//! guided deformable attention for clip-to-clip alignment, recurrent
//! feature refinement with 3D window attention, and an end-to-end
//! trainable model over a minimal reverse-mode-differentiable tensor
//! kernel. Everything runs on CPU, deterministically, at 32- or 64-bit
//! precision.

pub mod error;
pub mod kernel;
pub mod rng;
pub mod tape;
pub mod tensor;

pub mod flow;
pub mod gda;
pub mod model;
pub mod rfr;
pub mod gradcheck;
pub mod io;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
