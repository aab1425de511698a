//! Minimal dense tensors for small neural models.
//!
//! All arithmetic is done in `f64` on the CPU. Gradients come from a
//! single-use [`Tape`] that records primitives during the forward pass;
//! [`AdamState`] applies the resulting gradients to a [`ParamStore`].

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, Manifest};
pub use error::{Result, TensorError};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{sigmoid, Tape, Var};
pub use tensor::Tensor;
