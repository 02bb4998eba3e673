//! Temporal cross-modal attention analysis and sharpening on a toy
//! video-language transformer.
//!
//! The crate extracts cross-modal attention heads, measures how well their
//! attention separates the queried event from the rest of the video, pushes
//! that attention toward the ground truth at inference time, and trains with
//! an auxiliary loss that sharpens it.

pub mod attn;
pub mod error;
pub mod experiment;
pub mod intervention;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tcas;

pub use error::{LabError, Result};
