//! Measurement instruments for sharing-mode experiments: embedding
//! cosine-similarity statistics, gradient-interference probes on the shared
//! table, and smoothed loss-curve capture (CSV + SVG).
//!
//! Everything here reads parameter values or gradient buffers and writes
//! plain files; nothing mutates model state beyond scratch gradient buffers,
//! which are zeroed again before returning.

mod cosine;
mod curves;
mod probe;

pub use cosine::{avg_cosine_similarity, cosine_report, CosineReport};
pub use curves::{curve_capture, moving_average, CurveSeries};
pub use probe::{interference_probe, shared_table_task_grads, InterferenceProbe};
