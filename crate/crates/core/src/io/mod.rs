//! File formats and synthetic data.

pub mod annotations;
pub mod archive;
pub mod bundle;
pub mod detections;
pub mod synth;
