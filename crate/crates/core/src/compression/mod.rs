//! Low-dimensional query/key surrogates for importance scoring.
//!
//! A [`ProjectionPair`] maps concatenated-head queries and keys from `d_H`
//! down to `d'` dimensions so that `q'·k'` tracks `q·k`. The maps are fitted
//! by [`train_projections`]; [`pca_projections`] is the unsupervised baseline
//! and [`recall_at_k`] measures how well either preserves the top-k set.

pub(crate) mod io;
mod pca;
mod train;

pub use io::{
    read_calibration, read_projection, write_calibration, write_projection, CALIBRATION_MAGIC,
    PROJECTION_MAGIC,
};
pub use pca::{pca_projections, PcaMode, PcaReport};
pub use train::{score_loss, train_projections, train_projections_from, TrainHyper, TrainReport};

use crate::error::{EsaError, Result};
use crate::selection::top_k_indices;
use crate::tensor::{dot, seeded_rng, FlopCounter, Matrix};

/// Affine map `x ↦ W·x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    pub weight: Matrix,
    pub bias: Vec<f32>,
}

impl LinearMap {
    pub fn new(weight: Matrix, bias: Vec<f32>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(EsaError::dim(format!(
                "bias of length {} for {} output rows",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(LinearMap { weight, bias })
    }

    pub fn identity(n: usize) -> Self {
        LinearMap {
            weight: Matrix::identity(n),
            bias: vec![0.0; n],
        }
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        LinearMap {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// Cost of compressing one vector: a matvec plus the bias add.
    pub fn flops_per_vector(&self) -> u64 {
        (2 * self.in_dim() * self.out_dim() + self.out_dim()) as u64
    }

    /// Applies the map to every row of `rows`.
    pub fn apply_rows(&self, rows: &Matrix, flops: &mut FlopCounter) -> Result<Matrix> {
        if rows.cols() != self.in_dim() {
            return Err(EsaError::dim(format!(
                "compressing {}-dim rows with a map expecting {}",
                rows.cols(),
                self.in_dim()
            )));
        }
        let mut out = Matrix::zeros(rows.rows(), self.out_dim());
        for r in 0..rows.rows() {
            let x = rows.row(r);
            for (o, (w, b)) in out
                .row_mut(r)
                .iter_mut()
                .zip(self.weight.row_iter().zip(&self.bias))
            {
                *o = dot(w, x) + b;
            }
        }
        flops.add(rows.rows() as u64 * self.flops_per_vector());
        Ok(out)
    }

    fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.iter().all(|b| b.is_finite())
    }
}

/// Per-layer query and key compression maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPair {
    pub layer_index: usize,
    pub query: LinearMap,
    pub key: LinearMap,
}

impl ProjectionPair {
    pub fn new(layer_index: usize, query: LinearMap, key: LinearMap) -> Result<Self> {
        let pair = ProjectionPair {
            layer_index,
            query,
            key,
        };
        pair.validate()?;
        Ok(pair)
    }

    /// Lossless pair with `d' = d_H`.
    pub fn identity(layer_index: usize, d_model: usize) -> Self {
        ProjectionPair {
            layer_index,
            query: LinearMap::identity(d_model),
            key: LinearMap::identity(d_model),
        }
    }

    /// Gaussian weights with standard deviation `sqrt(1/d_H)` and zero biases.
    pub fn random(layer_index: usize, d_model: usize, d_reduced: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let std = (1.0 / d_model as f32).sqrt();
        let wq = Matrix::random_normal(d_reduced, d_model, std, &mut rng);
        let wk = Matrix::random_normal(d_reduced, d_model, std, &mut rng);
        ProjectionPair {
            layer_index,
            query: LinearMap {
                weight: wq,
                bias: vec![0.0; d_reduced],
            },
            key: LinearMap {
                weight: wk,
                bias: vec![0.0; d_reduced],
            },
        }
    }

    pub fn d_model(&self) -> usize {
        self.query.in_dim()
    }

    pub fn d_reduced(&self) -> usize {
        self.query.out_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let (dq, dk) = (self.query.weight.rows(), self.key.weight.rows());
        if dq != dk || self.query.in_dim() != self.key.in_dim() {
            return Err(EsaError::dim(format!(
                "query map {}x{} and key map {}x{} disagree",
                dq,
                self.query.in_dim(),
                dk,
                self.key.in_dim()
            )));
        }
        if dq == 0 || dq > self.query.in_dim() {
            return Err(EsaError::dim(format!(
                "reduced dimension {dq} must be in 1..={}",
                self.query.in_dim()
            )));
        }
        if self.query.bias.len() != dq || self.key.bias.len() != dk {
            return Err(EsaError::dim("bias length differs from reduced dimension"));
        }
        if !self.query.is_finite() || !self.key.is_finite() {
            return Err(EsaError::config("projection contains non-finite values"));
        }
        Ok(())
    }
}

/// Queries and keys captured from one layer for fitting the projections.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub layer_index: usize,
    pub queries: Matrix,
    pub keys: Matrix,
    pub source: String,
}

impl CalibrationSet {
    pub fn new(
        layer_index: usize,
        queries: Matrix,
        keys: Matrix,
        source: impl Into<String>,
    ) -> Result<Self> {
        if queries.rows() != keys.rows() || queries.cols() != keys.cols() {
            return Err(EsaError::dim(format!(
                "calibration queries {}x{} vs keys {}x{}",
                queries.rows(),
                queries.cols(),
                keys.rows(),
                keys.cols()
            )));
        }
        if queries.rows() < 2 {
            return Err(EsaError::config("calibration set needs at least 2 tokens"));
        }
        Ok(CalibrationSet {
            layer_index,
            queries,
            keys,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.queries.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.rows() == 0
    }

    pub fn d_model(&self) -> usize {
        self.queries.cols()
    }
}

/// `W·x + b` for one vector.
pub fn compress(vector: &[f32], map: &LinearMap) -> Result<Vec<f32>> {
    if vector.len() != map.in_dim() {
        return Err(EsaError::dim(format!(
            "compressing a {}-vector with a map expecting {}",
            vector.len(),
            map.in_dim()
        )));
    }
    Ok(map
        .weight
        .row_iter()
        .zip(&map.bias)
        .map(|(w, b)| dot(w, vector) + b)
        .collect())
}

/// `q' · k'`.
pub fn approx_score(q_compressed: &[f32], k_compressed: &[f32]) -> Result<f32> {
    if q_compressed.len() != k_compressed.len() {
        return Err(EsaError::dim(format!(
            "compressed query has {} dims, key has {}",
            q_compressed.len(),
            k_compressed.len()
        )));
    }
    Ok(dot(q_compressed, k_compressed))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallReport {
    pub per_query: Vec<f64>,
    pub mean: f64,
}

/// Overlap between the compressed-score and full-score top-k sets, per query.
pub fn recall_at_k(
    queries: &Matrix,
    keys: &Matrix,
    pair: &ProjectionPair,
    k: usize,
) -> Result<RecallReport> {
    if k == 0 || k > keys.rows() {
        return Err(EsaError::config(format!(
            "recall@k needs 1 <= k <= {} keys, got k = {k}",
            keys.rows()
        )));
    }
    if queries.cols() != pair.d_model() || keys.cols() != pair.d_model() {
        return Err(EsaError::dim("recall inputs do not match projection width"));
    }
    let mut scratch = FlopCounter::new();
    let kc = pair.key.apply_rows(keys, &mut scratch)?;
    let qc = pair.query.apply_rows(queries, &mut scratch)?;
    let mut full = vec![0.0f32; keys.rows()];
    let mut approx = vec![0.0f32; keys.rows()];
    let mut per_query = Vec::with_capacity(queries.rows());
    for i in 0..queries.rows() {
        for j in 0..keys.rows() {
            full[j] = dot(queries.row(i), keys.row(j));
            approx[j] = dot(qc.row(i), kc.row(j));
        }
        let truth = top_k_indices(&full, k).indices;
        let guess = top_k_indices(&approx, k).indices;
        per_query.push(sorted_intersection(&truth, &guess) as f64 / k as f64);
    }
    let mean = if per_query.is_empty() {
        0.0
    } else {
        per_query.iter().sum::<f64>() / per_query.len() as f64
    };
    Ok(RecallReport { per_query, mean })
}

fn sorted_intersection(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selection::head_sum_score;

    #[test]
    fn compress_null_and_identity() {
        let x = [1.0, -2.0, 3.0, 0.5];
        assert_eq!(
            compress(&x, &LinearMap::zeros(2, 4)).unwrap(),
            vec![0.0, 0.0]
        );
        assert_eq!(compress(&x, &LinearMap::identity(4)).unwrap(), x.to_vec());
        assert!(compress(&x[..3], &LinearMap::identity(4)).is_err());
    }

    #[test]
    fn compress_matches_naive_matvec() {
        let mut rng = seeded_rng(21);
        let w = Matrix::random_normal(5, 12, 1.0, &mut rng);
        let b: Vec<f32> = Matrix::random_normal(1, 5, 1.0, &mut rng).into_data();
        let x = Matrix::random_normal(1, 12, 1.0, &mut rng).into_data();
        let map = LinearMap::new(w.clone(), b.clone()).unwrap();
        let got = compress(&x, &map).unwrap();
        for r in 0..5 {
            let mut s = b[r] as f64;
            for (c, xc) in x.iter().enumerate() {
                s += w.get(r, c) as f64 * *xc as f64;
            }
            assert!((got[r] as f64 - s).abs() < 1e-6 * s.abs().max(1.0));
        }
    }

    #[test]
    fn approx_score_identity_is_exact() {
        let mut rng = seeded_rng(2);
        let q = Matrix::random_normal(1, 16, 1.0, &mut rng).into_data();
        let k = Matrix::random_normal(1, 16, 1.0, &mut rng).into_data();
        let pair = ProjectionPair::identity(0, 16);
        let qc = compress(&q, &pair.query).unwrap();
        let kc = compress(&k, &pair.key).unwrap();
        assert_eq!(
            approx_score(&qc, &kc).unwrap(),
            head_sum_score(&q, &k).unwrap()
        );
        assert_eq!(approx_score(&[0.0; 3], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!(approx_score(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn approx_score_extended_precision() {
        let mut rng = seeded_rng(31);
        let q = Matrix::random_normal(1, 128, 3.0, &mut rng).into_data();
        let k = Matrix::random_normal(1, 128, 3.0, &mut rng).into_data();
        let exact: f64 = q.iter().zip(&k).map(|(a, b)| *a as f64 * *b as f64).sum();
        let got = approx_score(&q, &k).unwrap() as f64;
        assert!((got - exact).abs() < 1e-5 * exact.abs().max(1.0));
    }

    #[test]
    fn recall_trivial_cases() {
        let mut rng = seeded_rng(8);
        let q = Matrix::random_normal(10, 8, 1.0, &mut rng);
        let k = Matrix::random_normal(40, 8, 1.0, &mut rng);
        let id = ProjectionPair::identity(0, 8);
        assert_eq!(recall_at_k(&q, &k, &id, 5).unwrap().mean, 1.0);
        let rand = ProjectionPair::random(0, 8, 2, 1);
        assert_eq!(recall_at_k(&q, &k, &rand, 40).unwrap().mean, 1.0);
        assert!(matches!(
            recall_at_k(&q, &k, &id, 41),
            Err(EsaError::Config(_))
        ));
    }

    #[test]
    fn recall_invariant_to_query_rescaling() {
        let mut rng = seeded_rng(18);
        let q = Matrix::random_normal(12, 8, 1.0, &mut rng);
        let k = Matrix::random_normal(60, 8, 1.0, &mut rng);
        let pair = ProjectionPair::random(0, 8, 3, 4);
        let base = recall_at_k(&q, &k, &pair, 10).unwrap();
        let mut scaled = q.clone();
        scaled.data_mut().iter_mut().for_each(|v| *v *= 4.0);
        assert_eq!(recall_at_k(&scaled, &k, &pair, 10).unwrap(), base);
    }

    #[test]
    fn pair_validation() {
        let bad = ProjectionPair::new(0, LinearMap::zeros(2, 4), LinearMap::zeros(3, 4));
        assert!(bad.is_err());
        assert!(ProjectionPair::new(0, LinearMap::zeros(5, 4), LinearMap::zeros(5, 4)).is_err());
        assert!(CalibrationSet::new(0, Matrix::zeros(1, 4), Matrix::zeros(1, 4), "x").is_err());
    }
}
