//! Continual adaptation and generalization over a sequence of unlabeled
//! target domains.
//!
//! A domain-adaptation model fits each new target domain and labels it; a
//! domain-generalization model learns from those labels plus a replay buffer
//! and seeds the next adaptation.

// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod augment;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod generalize;
pub mod nnmodel;
pub mod objective;
pub mod orchestrate;
pub mod replay;
pub mod rng;
pub mod train;

pub use config::{ExperimentConfig, Variant};
pub use error::{CodagError, Result};
pub use orchestrate::{run_experiment, Experiment, ExperimentResults, RunState};
