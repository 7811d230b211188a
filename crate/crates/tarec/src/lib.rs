//! Two-stage diffusion recommender with one-step generation.
//!
//! Stage one pretrains an MLP denoiser (guided by a Transformer encoding of
//! the interaction history) with a reconstruction loss plus a temporal
//! consistency penalty that forces denoising outputs at adjacent timesteps to
//! agree, so a single denoiser call can map pure noise to the oracle item
//! embedding. Stage two fine-tunes the denoiser on preference pairs with an
//! alignment strength that adapts to the timestep and to how similar the
//! positive and negative items are.
//!
//! The crate is organized around the pipeline:
//!
//! - [`corpus`]: log ingestion, filtering, windowing, chronological splits
//! - [`schedule`]: the discrete noise schedule and forward/reverse kernels
//! - [`tape`] / [`nets`]: reverse-mode autodiff and the two networks
//! - [`pretrain`] / [`align`]: the two training stages
//! - [`generate`]: one-step and multi-step generation plus top-K ranking
//! - [`eval`]: ranking metrics, timing harness, and theory probes
//! - [`cli`]: the `tarec` experiment runner
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod align;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod generate;
pub mod nets;
pub mod optim;
pub mod pretrain;
pub mod schedule;
pub mod seeding;
pub mod synth;
pub mod tape;

pub use error::{Error, Result};
