//! A small, single-threaded, deterministic neural-network toolkit.
//!
//! Tensors are dense `NCHW` arrays. Models record their forward pass on a
//! [`Tape`], and [`Tape::backward`] replays it in reverse to produce
//! parameter gradients. Convolutions are lowered onto `matrixmultiply`
//! GEMM calls without an explicit im2col buffer.

pub mod adam;
pub mod io;
pub mod kernels;
pub mod layers;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;

mod error;

pub use adam::{Adam, AdamConfig};
pub use error::{Error, Result};
pub use params::{ParamId, ParamKind, ParamStore};
pub use scalar::{DType, Float};
pub use tape::{BnStat, Gradients, Mode, NodeId, Tape};
pub use tensor::Tensor;
