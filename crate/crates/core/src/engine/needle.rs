//! Planted-key retrieval probe.
//!
//! A random stream is prefilled, with a few keys rewritten so that their dot
//! product with a probe query beats every other key by a fixed margin. The
//! probe is then decoded and we count how many planted keys were selected.

use serde::{Deserialize, Serialize};

use super::{EsaConfig, EsaEngine, ScoringMode};
use crate::compression::ProjectionPair;
use crate::error::{EsaError, Result};
use crate::tensor::{dot, seeded_rng, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleSpec {
    /// Tokens before the probe.
    pub stream_len: usize,
    /// Stream positions of the planted keys.
    pub planted: Vec<usize>,
    /// Score gap between the planted keys and the best background key.
    pub margin: f32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleOutcome {
    pub recall: f64,
    pub found: usize,
    pub n_planted: usize,
    /// Full-dimension check that every planted key outscores every other key.
    pub margin_ok: bool,
    /// Stream positions selected from the middle segment at the probe.
    pub selected_positions: Vec<usize>,
}

/// Builds the stream, runs the engine over it and decodes the probe.
pub fn planted_needle_recall(
    cfg: &EsaConfig,
    spec: &NeedleSpec,
    pair: ProjectionPair,
    scoring: ScoringMode,
) -> Result<NeedleOutcome> {
    cfg.validate()?;
    let n = spec.stream_len;
    let middle_end = n.saturating_sub(cfg.local_len);
    if spec.planted.is_empty() {
        return Err(EsaError::config("no planted positions"));
    }
    for &p in &spec.planted {
        if p < cfg.initial_len || p >= middle_end {
            return Err(EsaError::config(format!(
                "planted position {p} is outside the middle segment {}..{middle_end} at probe time",
                cfg.initial_len
            )));
        }
    }
    let d = cfg.d_model();
    let mut rng = seeded_rng(spec.seed);
    let queries = Matrix::random_normal(n + 1, d, 1.0, &mut rng);
    let mut keys = Matrix::random_normal(n + 1, d, 1.0, &mut rng);
    let values = Matrix::random_normal(n + 1, d, 1.0, &mut rng);

    let mut probe = Matrix::random_normal(1, d, 1.0, &mut rng).into_data();
    let norm = dot(&probe, &probe).sqrt();
    probe.iter_mut().for_each(|x| *x /= norm);

    let is_planted = |j: usize| spec.planted.contains(&j);
    let background = (0..n)
        .filter(|&j| !is_planted(j))
        .map(|j| dot(&probe, keys.row(j)))
        .fold(f32::NEG_INFINITY, f32::max);
    let target = background + spec.margin;
    for &p in &spec.planted {
        let row = keys.row_mut(p);
        let along = dot(&probe, row);
        for (x, u) in row.iter_mut().zip(&probe) {
            *x += (target - along) * u;
        }
    }
    let planted_min = spec
        .planted
        .iter()
        .map(|&p| dot(&probe, keys.row(p)))
        .fold(f32::INFINITY, f32::min);
    let margin_ok = planted_min > background;

    let mut engine = EsaEngine::new(*cfg, pair, scoring)?;
    let mut start = 0;
    while start < n {
        let end = (start + cfg.chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        engine.prefill(
            &queries.select_rows(&idx)?,
            &keys.select_rows(&idx)?,
            &values.select_rows(&idx)?,
        )?;
        start = end;
    }
    let probe_q = Matrix::from_vec(1, d, probe)?;
    let trace = engine.decode_step(
        &probe_q,
        &keys.select_rows(&[n])?,
        &values.select_rows(&[n])?,
    )?;

    let selected_positions: Vec<usize> = trace
        .selection
        .indices
        .iter()
        .map(|&j| engine.cache().middle_position(j))
        .collect();
    let found = spec
        .planted
        .iter()
        .filter(|p| selected_positions.binary_search(p).is_ok())
        .count();
    Ok(NeedleOutcome {
        recall: found as f64 / spec.planted.len() as f64,
        found,
        n_planted: spec.planted.len(),
        margin_ok,
        selected_positions,
    })
}
