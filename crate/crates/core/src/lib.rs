//! Detection of discrete polysomnography events (arousals, leg movements)
//! with a single-shot, anchor-based 1D detector.
//!
//! The pipeline runs in five stages, each usable on its own:
//!
//! 1. [`edf`] — EDF ingestion, montage derivation, annotation CSV loading.
//! 2. [`dsp`] — resampling to 128 Hz, zero-phase Butterworth filtering,
//!    per-channel z-normalization.
//! 3. [`model`] — the detection network (channel mixer, conv pyramid,
//!    optional bidirectional GRU, per-scale classification/localization
//!    heads), default event grids, target encoding and the training loss.
//! 4. [`train`] / [`sampling`] — balanced minibatch sampling and SGD
//!    training with eval-loss early stopping.
//! 5. [`eval`] — whole-night inference (thresholding, NMS, segment
//!    stitching) and IoU-matched precision/recall/F1 reporting.
//!
//! [`synth`] generates labeled synthetic recordings so the entire chain can
//! be exercised without access-restricted clinical data, and [`runner`]
//! binds the stages into the reproducible commands exposed by the CLI.

pub mod autodiff;
pub mod cache;
pub mod dsp;
pub mod edf;
pub mod eval;
pub mod manifest;
pub mod model;
pub mod runner;
pub mod sampling;
pub mod synth;
pub mod train;

pub use edf::ScoredEvent;
pub use model::{Detector, ModelConfig};
