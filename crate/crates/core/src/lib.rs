//! Desk-scale vision-language knowledge distillation.
//!
//! A frozen toy contrastive teacher (patch encoder plus text encoder) is
//! distilled into a toy encoder-decoder student through three objectives:
//! text-text distance minimization, image-text contrastive learning and
//! image-conditioned text infilling. The distilled student then answers
//! questions and writes captions zero-shot by infilling mask prompts.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod inference;
pub mod nn;
pub mod optim;
pub mod selftest;
pub mod student;
pub mod teacher;
pub mod textdata;
pub mod trainloop;
pub mod vlkd;

pub use error::{Result, VlkdError};
