//! Two-tower multimodal puzzle solver with cross-attention fusion.
//!
//! A vision transformer encodes the puzzle image, a text transformer encodes
//! the question with its five options, and a cross-attention fusion stack
//! mixes the two before a five-way classifier. A CLIP-style matching head is
//! provided as a baseline. Everything runs on a small reverse-mode autodiff
//! tape in [`autodiff`].

pub mod autodiff;
pub mod data;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod head;
pub mod model;
pub mod nn;
pub mod tensor;

pub use error::{CheckpointError, Error, Result};
pub use tensor::Tensor;
