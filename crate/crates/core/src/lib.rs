//! Sequential policy gradient training on a desk-sized substrate.
//!
//! A base network is extended with a chain of temporary replica modules that
//! share its output head. One forward pass yields a prediction per replica,
//! which is read as a padded episode: the running product of per-depth
//! correctness masks which units keep contributing log-likelihood to a
//! REINFORCE-style surrogate loss. After training the chain is stripped and
//! the base architecture is restored unchanged in size.
//!
//! Modules:
//! - [`autodiff`]: tensors, tape, random streams, optimizers.
//! - [`trp`]: replica chains (dropout and depth variants), parameter budgets, stripping.
//! - [`trajectory`]: observed-state dynamics, rewards, returns, masks and exhaustive oracles.
//! - [`trainer`]: surrogate loss, cold start, retraining, evaluation, checkpoints, metrics.
//! - [`tasks`]: synthetic classification, segmentation and language-modelling tasks.
//! - [`cli`]: configuration grammar, verification suites, run orchestration and reports.

pub mod autodiff;
pub mod cli;
mod error;
mod io;
pub mod tasks;
pub mod trainer;
pub mod trajectory;
pub mod trp;

pub use error::{Result, SpgError};
