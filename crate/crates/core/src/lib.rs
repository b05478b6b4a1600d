//! Differentiable stacks for recurrent language models.
//!
//! The centrepiece is the nondeterministic stack: an LSTM controller emits
//! weights for the transitions of a pushdown automaton, and a log-space dynamic
//! program sums over every run of that automaton to produce a reading of the
//! top of the stack. Transition weights can be normalized per configuration or
//! left unnormalized and renormalized only at read time, and the reading can
//! expose either the top symbol alone or the joint (state, top symbol).
//!
//! Everything numeric is generic over [`Scalar`] (`f32`/`f64`); the aliases at
//! the crate root fix the 64-bit default used for training and evaluation.

pub mod autodiff;
pub mod banded_stack_wfa;
pub mod baseline_stacks;
pub mod controller;
pub mod error;
pub mod scalar;
pub mod stack_wfa;
pub mod tasks;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Params64 = autodiff::ParamStore<f64>;
