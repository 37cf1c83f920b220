//! Principal-component baseline for the compression maps.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{CalibrationSet, LinearMap, ProjectionPair};
use crate::error::{EsaError, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaMode {
    /// Queries and keys each get their own principal directions.
    #[default]
    PerSide,
    /// One basis fitted on the stacked queries and keys, shared by both maps.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaReport {
    pub mode: PcaMode,
    /// Retained eigenvalues, descending.
    pub query_eigenvalues: Vec<f64>,
    pub key_eigenvalues: Vec<f64>,
    /// Fewer than `d'` nonzero eigenvalues; the tail rows are an arbitrary
    /// orthonormal completion.
    pub query_rank_deficient: bool,
    pub key_rank_deficient: bool,
}

struct Basis {
    map: LinearMap,
    eigenvalues: Vec<f64>,
    deficient: bool,
}

fn principal_basis(samples: &[&Matrix], d_reduced: usize) -> Basis {
    let d = samples[0].cols();
    let n: usize = samples.iter().map(|m| m.rows()).sum();
    let mut mean = vec![0.0f64; d];
    for m in samples {
        for row in m.row_iter() {
            for (acc, &v) in mean.iter_mut().zip(row) {
                *acc += v as f64;
            }
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);

    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centered = vec![0.0f64; d];
    for m in samples {
        for row in m.row_iter() {
            for (c, (&v, mu)) in centered.iter_mut().zip(row.iter().zip(&mean)) {
                *c = v as f64 - mu;
            }
            for i in 0..d {
                let ci = centered[i];
                for j in i..d {
                    cov[(i, j)] += ci * centered[j];
                }
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].abs().max(f64::MIN_POSITIVE);
    let nonzero = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] > top * 1e-9)
        .count();

    let mut weight = Matrix::zeros(d_reduced, d);
    let mut eigenvalues = Vec::with_capacity(d_reduced);
    for (r, &i) in order.iter().take(d_reduced).enumerate() {
        let v = eig.eigenvectors.column(i);
        for c in 0..d {
            weight.set(r, c, v[c] as f32);
        }
        eigenvalues.push(eig.eigenvalues[i]);
    }
    // Centering moves into the bias: W·(x - μ) = W·x - W·μ.
    let bias = (0..d_reduced)
        .map(|r| {
            -(0..d)
                .map(|c| weight.get(r, c) as f64 * mean[c])
                .sum::<f64>() as f32
        })
        .collect();
    Basis {
        map: LinearMap { weight, bias },
        eigenvalues,
        deficient: nonzero < d_reduced,
    }
}

/// Top-`d'` principal directions of the query and key distributions.
pub fn pca_projections(
    calib: &CalibrationSet,
    d_reduced: usize,
    mode: PcaMode,
) -> Result<(ProjectionPair, PcaReport)> {
    if d_reduced == 0 || d_reduced > calib.d_model() {
        return Err(EsaError::config(format!(
            "reduced dimension {d_reduced} must be in 1..={}",
            calib.d_model()
        )));
    }
    if calib.len() <= d_reduced {
        return Err(EsaError::config(format!(
            "PCA needs more samples ({}) than output dimensions ({d_reduced})",
            calib.len()
        )));
    }
    let (q, k) = match mode {
        PcaMode::PerSide => (
            principal_basis(&[&calib.queries], d_reduced),
            principal_basis(&[&calib.keys], d_reduced),
        ),
        PcaMode::Joint => {
            let shared = principal_basis(&[&calib.queries, &calib.keys], d_reduced);
            let copy = Basis {
                map: shared.map.clone(),
                eigenvalues: shared.eigenvalues.clone(),
                deficient: shared.deficient,
            };
            (shared, copy)
        }
    };
    let report = PcaReport {
        mode,
        query_eigenvalues: q.eigenvalues,
        key_eigenvalues: k.eigenvalues,
        query_rank_deficient: q.deficient,
        key_rank_deficient: k.deficient,
    };
    let pair = ProjectionPair::new(calib.layer_index, q.map, k.map)?;
    Ok((pair, report))
}
