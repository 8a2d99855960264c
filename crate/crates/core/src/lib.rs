//! Deterministic multi-cue visual anomaly detection on synthetic textures:
//! a small convolutional model trained from a self-supervised pseudo-anomaly
//! dataset under label contamination, with divergence-based sample
//! reweighting, calibrated cue fusion and gradient-based localization.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod fusion;
pub mod localization;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod perlin;
pub mod pipeline;
pub mod pnm;
pub mod reweight;
pub mod tape;
pub mod tensor;
pub mod texture;
pub mod train;
