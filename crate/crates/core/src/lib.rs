//! Lightweight CNN and CNN-LSTM classifiers for bean leaf disease images.
//!
//! The crate is self-contained: tensors and reverse-mode differentiation
//! ([`autodiff`]), layers and the two model builders ([`layers`]), the
//! dataset split and augmentation pipeline ([`data`]), Adam training and
//! checkpoints ([`training`]), evaluation metrics ([`metrics`]) and Grad-CAM
//! heatmaps ([`explain`]). The `leafkit` binary wraps all of it ([`cli`]).

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod explain;
pub(crate) mod gemm;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod tensor;
pub mod training;

pub use error::{LeafError, Result};
pub use tensor::Tensor;
