//! Dense CPU tensors with a small reverse-mode autodiff tape.
//!
//! The op set is exactly what a compact conditional U-Net needs: strided
//! convolutions, group normalization, linear layers, multi-head attention,
//! nearest upsampling, channel concatenation and a masked squared-error loss.
//! Everything is generic over [`Float`] so the same model code runs in `f32`
//! for training and in `f64` for finite-difference gradient checks.

mod graph;
pub mod init;
mod ops;
pub mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tensor::{gemm, Float, MatMut, MatRef, Tensor, TensorError};
