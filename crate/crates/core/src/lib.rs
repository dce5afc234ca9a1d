//! Long-tailed classification with a prompt-tuned, adapter-augmented vision
//! transformer: autodiff, model, losses, samplers, training, ensembling and
//! evaluation.

pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod moe;
pub mod params;
pub mod pipeline;
pub mod prompts;
pub mod rng;
pub mod train;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, Result};
