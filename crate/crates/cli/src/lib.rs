//! Experiment harness around `esa-core`: a seeded toy model, calibration
//! dumps, projection training, recall evaluation, end-to-end runs, planted
//! needle sweeps and cost-model reports.

pub mod commands;
pub mod config;
pub mod toy;

pub use config::{ExperimentConfig, Preset, RunMode};

use esa_core::EsaError;

/// Process exit code for an error chain: 2 for configuration problems,
/// 3 for malformed files, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.chain().find_map(|e| e.downcast_ref::<EsaError>()) {
        Some(EsaError::Format { .. }) => 3,
        Some(
            EsaError::Config(_)
            | EsaError::Dimension(_)
            | EsaError::Shape(_)
            | EsaError::Index { .. },
        ) => 2,
        _ => 1,
    }
}
