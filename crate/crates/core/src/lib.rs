//! Multi-scale discriminative cue modeling for fine-grained classification
//! on a small pooled-attention vision transformer, with its own
//! reverse-mode autodiff on `f64` tensors.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod msca;
pub mod msda;
pub mod msts;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
