//! Dual-stream language-image pre-training at desk scale.
//!
//! The crate trains a small vision backbone against triplet-structured
//! report text: findings are split into a pathology stream and an anatomy
//! stream, each matched to its own query set through cross-attention, and
//! optimized with prototypical contrastive, inter-stream correlation, and
//! existence losses. Everything runs on the CPU in f64 with deterministic
//! seeding so results reproduce bit for bit.

pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod params;
pub mod report;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod train;
pub mod text;

pub use error::{Error, Result};
