//! Offline-to-online reinforcement learning toolkit.
//!
//! Agents are pre-trained offline as an ensemble of conservative (CQL)
//! actor-critics and then fine-tuned online with SAC updates, drawing
//! minibatches from a priority buffer whose priorities are learned
//! online/offline density ratios ("balanced replay").
//!
//! Module map:
//! - [`nn`]: MLPs with manual gradients and Adam.
//! - [`envs`]: point-mass environments, datasets and their file format.
//! - [`agents`]: SAC, CQL and FQE losses and the pessimistic Q-ensemble.
//! - [`replay`]: sum-tree priority buffer and density-ratio estimator.
//! - [`pipeline`]: offline training, online fine-tuning, evaluation, analyses.
//! - [`cli`]: configuration and the `off2on` command line.

pub mod agents;
pub mod checkpoint;
pub mod cli;
pub mod envs;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod replay;

pub use error::{Error, Result};
