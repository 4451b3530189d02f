//! Streaming recommendation with stratified time-aware sampling and
//! adaptive ensemble fusion.
//!
//! The crate is organized bottom-up:
//!
//! - [`domain`]: interactions, the FIFO reservoir, the seen-pair index and
//!   the simulated stream schedule.
//! - [`ingest`]: rating-file parsing, sparse-user filtering and the
//!   chronological split.
//! - [`sampling`]: the stratified time-aware sampler, the NDO/RR/SW
//!   baselines and negative sampling.
//! - [`models`]: GMF, MLP and NeuMF trained with Adam on binary
//!   cross-entropy.
//! - [`ensemble`]: accuracy memories, neighbor confidence, odds-based
//!   fusion weights and the AVG/AdaW baselines.
//! - [`harness`]: the prequential test-then-train loop and HR/NDCG.
//! - [`experiment`]: run orchestration, on-disk artifacts and reports.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the scalar for common use.

pub mod config;
pub mod domain;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod harness;
pub mod ingest;
pub mod models;
pub mod rng;
pub mod sampling;
pub mod scalar;
pub mod synthetic;

pub use config::{ExperimentConfig, FuserKind, ModelKind, RunSpec, SamplerKind};
pub use domain::{Interaction, ItemId, Reservoir, SeenIndex, StreamSchedule, UserId};
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Model64 = models::Model<f64>;
pub type Model32 = models::Model<f32>;
pub type Adam64 = models::AdamState<f64>;
pub type Adam32 = models::AdamState<f32>;
pub type AccuracyMemory64 = ensemble::AccuracyMemory<f64>;
pub type AccuracyMemory32 = ensemble::AccuracyMemory<f32>;
pub type System64 = harness::System<f64>;
pub type System32 = harness::System<f32>;
