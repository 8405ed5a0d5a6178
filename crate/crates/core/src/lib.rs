//! Weakly-supervised video anomaly detection with a multiple-instance
//! ranking loss.
//!
//! Videos are bags of temporal segments labeled only at the video level. A
//! small fully-connected network scores each segment; training pushes the
//! top-scored segment of an anomalous video above the top-scored segment of
//! a normal one, with smoothness and sparsity penalties on the anomalous
//! video's scores. Evaluation is frame-level ROC/AUC plus the false-alarm
//! rate on normal videos.

pub mod baseline;
pub mod cli;
pub mod error;
pub mod eval;
pub mod features;
pub mod loss;
pub mod net;
pub mod optim;
pub mod rng;
pub mod synthetic;

pub use error::{Error, Result};
