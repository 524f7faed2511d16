//! Domain-adaptive random forests for body-part pixel labelling.
//!
//! Trains a random forest on two domains at once: a synthetic set with
//! per-pixel part labels and a real-style set with only bounding boxes.
//! Each split is chosen to reduce label entropy on the synthetic pixels
//! while keeping the spatial-bin distributions of the two domains aligned,
//! so the learned features transfer across the domain gap. The workspace
//! also ships a procedural two-domain figure generator, a classifier and a
//! joint-localization evaluation, wired together by the `dawood` binary.

pub mod config;
pub mod counters;
pub mod data_model;
pub mod error;
pub mod eval;
pub mod features;
pub mod forest;
pub mod infer;
pub mod plot;
pub mod rng;
pub mod stats;
pub mod synthgen;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
