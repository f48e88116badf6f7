//! Convolutional networks with trainable spatial attention branches for
//! ordinal image grading.
//!
//! The crate is a small self-contained deep-learning engine: dense `f64`
//! tensors, define-by-run reverse-mode autodiff, the attention module and its
//! branch heads, backbone builders, a synthetic joint-gap image generator with
//! its preprocessing pipeline, Adam training with plateau scheduling and early
//! stopping, and kappa-based evaluation.

pub mod attention;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod kernels;
pub mod layers;
pub mod metrics;
pub mod par;
pub mod params;
pub mod report;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NodeId};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
