//! Dual-veto selective classification.
//!
//! Calibrates a probabilistic gate (Mondrian conformal prediction sets over
//! temperature-scaled, ensemble-averaged probabilities) and a geometric gate
//! (minimum Mahalanobis distance to per-class centroids under a shared
//! OAS-shrunk precision matrix), combines them into a trinary triage
//! decision, and evaluates the result with risk-aware metrics and bootstrap
//! intervals.

pub mod conformal;
pub mod dataset;
pub mod geometry;
pub mod metrics;
pub mod pipeline;
pub mod policy;
pub mod stats;
pub mod synth;
pub mod temperature;
