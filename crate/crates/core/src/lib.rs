//! Frame-plus-event point tracking.
//!
//! Frames anchor appearance; the events recorded since each frame describe
//! how that appearance evolved. Both are encoded, fused, and searched with
//! multi-scale correlation, and a windowed transformer refines all point
//! trajectories jointly at the event slice rate.

pub mod config;
pub mod dataset;
pub mod encoder;
pub mod encoding;
pub mod error;
pub mod events;
pub mod fusion;
pub mod image;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod plot;
pub mod query;
pub mod refine;
pub mod sbt;
pub mod schedule;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
