//! Bi-temporal remote-sensing change captioning.
//!
//! A siamese spatial-channel attention encoder refines features of the
//! "before" and "after" images, a cosine-similarity guided fusion merges
//! them in a single stage, and a transformer decoder generates the caption.
//! Everything runs on a small reverse-mode tensor engine so each layer can
//! be checked against finite differences.

mod backward;
pub mod config;
pub mod container;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Mode, Var};
pub use params::{ParamId, ParamStore};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
