//! Polysomnography signal-to-image pipeline.
//!
//! EDF ingestion, rational-rate resampling, epoching and scaling, waveform
//! rendering, channel-failure corruption, dataset manifests, classifier
//! access, patch attribution, evaluation metrics and LoRA/schedule kernels.

// Comparisons written as `!(a > b)` reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attribution;
pub mod config;
pub mod corrupt;
pub mod dataset;
pub mod edf;
pub mod epoch;
pub mod gate;
pub mod metrics;
pub mod raster;
pub mod record;
pub mod render;
pub mod resample;
pub mod stage;
pub mod synth;
pub mod tune;
pub mod workflow;
