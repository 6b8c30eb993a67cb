//! Pseudo-healthy reconstruction of tumorous brain MRI slices with a
//! masked-inpainting diffusion model and an edge-conditioned control branch.

pub mod config;
pub mod control;
pub mod dataset;
pub mod diffusion;
pub mod edge;
pub mod error;
pub mod fsutil;
pub mod inference;
pub mod metrics;
pub mod pipeline;
pub mod prompt;
pub mod training;

pub use error::{Error, Result};
