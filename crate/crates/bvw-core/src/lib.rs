//! Core library for the recurrent vision transformer workbench: tensors with
//! reverse-mode autodiff, model family, training, analysis, and the exact
//! fixed-point construction tools.

pub mod adapt;
pub mod analyze;
pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod earlyexit;
pub mod gradcheck;
pub mod linalg;
pub mod model;
pub mod prune;
pub mod rng;
pub mod scalar;
pub mod simulate;
pub mod tape;
pub mod tensor;
pub mod train;

pub use scalar::Scalar;
pub use tape::{Grads, Tape, TapeError, Var};
pub use tensor::{Tensor, Trans};
