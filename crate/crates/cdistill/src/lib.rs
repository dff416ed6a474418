//! Contrastive self-distillation for tabular autoregressive models.
//!
//! A strong "expert" model is fine-tuned on soft labels manufactured from its
//! own trajectories. For every generated step the expert's next-token
//! distribution is compared against a weaker "amateur" model; steps are kept
//! where the two diverge (KL filter), and the retained label is a softmax over
//! expert/amateur log-probability ratios restricted to the expert's
//! high-confidence support. Training minimizes the forward KL from that label
//! to the expert's current prediction, with exact analytic gradients on the
//! tabular parameterization.
//!
//! The crate ships the sampling and training machinery ([`sampler`],
//! [`trainer`]), two toy model families ([`models`]), a synthetic
//! modular-arithmetic task with controllable corpus corruption ([`tasks`]),
//! diagnostic reports ([`analysis`]), and a CLI (`cdistill`) that chains the
//! stages end to end.

pub mod analysis;
pub mod config;
pub mod dist;
pub mod fsutil;
pub mod models;
pub mod sampler;
pub mod tasks;
pub mod trainer;

mod error;

pub use error::{Error, Result};
