//! Reference-conditioned flow-matching face restoration at toy scale.
//!
//! Identity evidence from clean references enters as additive deltas on the
//! per-block modulation of image tokens; structure evidence from the degraded
//! input enters as a low-rank input residual plus a pooled memory read by
//! gated cross-attention.

pub mod backbone;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod degrade;
pub mod error;
pub mod flow;
pub mod grid;
pub mod harness;
pub mod identity;
pub mod numerics;
pub mod objective;
pub mod parallel;
pub mod structure;
pub mod tokens;

pub use error::{Error, Result};
