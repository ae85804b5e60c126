//! Multimodal sequence classification with hierarchical attention.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`] — dense f64 tensors, a seeded RNG, and a reverse-mode
//!   autodiff tape that every layer composes.
//! - [`params`] / [`layers`] — named parameter storage and the basic
//!   trainable building blocks (linear, conv, batch norm, dropout).
//! - [`encoders`] — per-modality pipelines: segmentation, spatial
//!   encoding, temporal pooling, and a stacked LSTM.
//! - [`attention`] — multi-head self-attention, used once per modality
//!   over segments (UAT) and once over the set of modality embeddings
//!   (MAT), with attention-map recording.
//! - [`model`] — the HAMLET assembly plus NSA / USA / keyless baselines,
//!   the classifier head, the loss, and binary checkpoints.
//! - [`training`] — AdamW, cosine warm-restart schedule, the train loop,
//!   metrics, and leave-one-actor-out cross-validation.
//! - [`data`] — manifest-based dataset loading and a deterministic
//!   synthetic multimodal generator.
//! - [`config`] — the TOML run configuration shared with the CLI.

pub mod attention;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod params;
pub mod training;

pub use error::{Error, Result};
