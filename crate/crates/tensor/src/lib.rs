//! Minimal dense-tensor arithmetic with tape-based reverse-mode automatic
//! differentiation.
//!
//! Everything is `f64`. A [`Tape`] records operations on [`Var`] handles in
//! execution order; [`Tape::backward`] consumes the tape and returns the
//! gradient of a scalar loss with respect to every node that requires one.
//! Learnable weights live in a [`ParamStore`] and are bound onto a fresh tape
//! for every forward pass.

mod checkpoint;
mod error;
mod nn;
mod optim;
mod tape;
mod tensor;

pub use checkpoint::{
    load_checkpoint, read_manifest, save_checkpoint, write_manifest, CheckpointManifest, OptimizerSnapshot, ParamShape,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use error::{Result, TensorError};
pub use nn::{BoundParams, LinearBlock, MlpBlock, ParamStore};
pub use optim::{AdamW, AdamWConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
