//! Fixtures shared by the criterion benches.

use esa_core::tensor::seeded_rng;
use esa_core::{EsaConfig, EsaEngine, Matrix, ProjectionPair, ScoringMode};

/// Query, key and value rows drawn from one seed.
pub struct Stream {
    pub queries: Matrix,
    pub keys: Matrix,
    pub values: Matrix,
}

pub fn stream(rows: usize, d_model: usize, seed: u64) -> Stream {
    let mut rng = seeded_rng(seed);
    Stream {
        queries: Matrix::random_normal(rows, d_model, 1.0, &mut rng),
        keys: Matrix::random_normal(rows, d_model, 1.0, &mut rng),
        values: Matrix::random_normal(rows, d_model, 1.0, &mut rng),
    }
}

/// Scores spread over `[-10, 0]`, as normalized importance scores are.
pub fn scores(len: usize, seed: u64) -> Vec<f32> {
    let mut rng = seeded_rng(seed);
    Matrix::random_normal(1, len, 3.0, &mut rng)
        .into_data()
        .into_iter()
        .map(|x| -x.abs())
        .collect()
}

/// Desk-sized engine whose cache already holds `history` tokens.
pub fn warmed_engine(history: usize, scoring: ScoringMode) -> EsaEngine {
    let cfg = EsaConfig::desk();
    let pair = ProjectionPair::random(0, cfg.d_model(), cfg.d_reduced, 5);
    let mut engine = EsaEngine::new(cfg, pair, scoring).expect("desk config is valid");
    let s = stream(history, cfg.d_model(), 3);
    engine.ingest(&s.keys, &s.values).expect("shapes match");
    engine
}
