//! Data generation, training, restoration and evaluation.

pub mod eval;
pub mod image_io;
pub mod synth;
pub mod train;
