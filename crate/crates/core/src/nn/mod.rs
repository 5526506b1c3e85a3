//! Minimal reverse-mode automatic differentiation plus the layers, losses
//! and optimizers the rest of the stack builds on.

pub mod adapter;
pub mod checkpoint;
pub mod gradcheck;
pub mod mlp;
pub mod optim;
pub mod param;
pub mod seq;
pub mod tape;

pub use adapter::LowRankAdapter;
pub use checkpoint::Checkpoint;
pub use mlp::{Activation, Mlp3};
pub use optim::{Adam, AdamConfig};
pub use param::{Param, ParamSet};
pub use seq::{EncoderKind, SeqEncoderDecoder};
pub use tape::{GradMap, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {context}: {left} vs {right}")]
    Shape {
        context: String,
        left: usize,
        right: usize,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("index out of range: {what} {index} >= {bound}")]
    Index {
        what: String,
        index: usize,
        bound: usize,
    },
    #[error("non-finite gradient for parameter '{0}'; optimizer step aborted")]
    NonFiniteGrad(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}
