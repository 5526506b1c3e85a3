//! Core library for the divrec experiment stack: a small tape-based autodiff
//! engine, interaction-log preprocessing with leave-one-out splitting, prompt
//! templating, attribute augmentation, diversity measures, adversarial
//! training of a sequence autoencoder, a matrix-factorization collaborative
//! model, two-stage recommendation fine-tuning, and ranking metrics.

pub mod attrs;
pub mod collab;
pub mod data;
pub mod diversity;
pub mod gan;
pub mod metrics;
pub mod nn;
pub mod prompt;
pub mod rec;
pub mod synth;
pub mod util;
