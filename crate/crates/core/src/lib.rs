//! Pretrain a small causal transformer on bytes of text, then finetune it as a
//! return-conditioned policy on offline trajectories.

// `!(x > 0.0)` is how config checks reject NaN along with non-positives.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod aux;
pub mod checkpoint;
pub mod envlab;
pub mod evalkit;
pub mod error;
pub mod gradsuite;
pub mod lm;
pub mod optim;
pub mod tensor;
pub mod traj;
pub mod transformer;

pub use error::{Error, Result};
pub use optim::{AdamW, AdamWConfig, Module};
pub use tensor::{Graph, Tensor, Var};
