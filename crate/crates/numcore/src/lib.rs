//! Dense row-major tensors with a tape-based reverse-mode differentiation engine.
//!
//! Values are recorded on a [`Tape`] as operations execute. Calling
//! [`Tape::backward`] on a scalar output replays the tape in reverse and
//! returns [`Gradients`] for every leaf that requires them. Trainable
//! parameters live in a [`ParamStore`]; gradients are accumulated into the
//! store's tensors so several backward passes add up until cleared.
//!
//! Only the broadcasting needed by transformer blocks is supported: a bias
//! vector added across the last dimension.

pub mod error;
pub mod float;
pub mod gradcheck;
mod kernels;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{NumError, Result};
pub use float::{DType, Float};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{AttentionLayout, CeTargets, Gradients, Tape, Var};
pub use tensor::Tensor;
