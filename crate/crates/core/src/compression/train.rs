//! Minibatch SGD on the bilinear score-matching loss.
//!
//! Each step draws an independent query minibatch `Q` and key minibatch `K`
//! and minimizes `mean((Q'K'ᵀ - QKᵀ)²)` over the full `batch × batch` cross
//! product, where `Q' = Q·W_qᵀ + b_q` and `K' = K·W_kᵀ + b_k`. All sums run
//! sequentially in a fixed order so a seed pins the result bit for bit.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{CalibrationSet, LinearMap, ProjectionPair};
use crate::error::{EsaError, Result};
use crate::tensor::{seeded_rng, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f32,
    pub batch: usize,
    pub epochs: usize,
    pub momentum: f32,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lr: 0.0005,
            batch: 128,
            epochs: 10,
            momentum: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss of the very first minibatch, before any update.
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
    /// Mean loss over the last epoch.
    pub final_loss: f64,
    pub steps: usize,
}

/// Fits a pair from a Gaussian initialization seeded by `hyper.seed`.
pub fn train_projections(
    calib: &CalibrationSet,
    d_reduced: usize,
    hyper: &TrainHyper,
) -> Result<(ProjectionPair, TrainReport)> {
    if d_reduced == 0 || d_reduced > calib.d_model() {
        return Err(EsaError::config(format!(
            "reduced dimension {d_reduced} must be in 1..={}",
            calib.d_model()
        )));
    }
    let init = ProjectionPair::random(calib.layer_index, calib.d_model(), d_reduced, hyper.seed);
    train_projections_from(calib, init, hyper)
}

struct Velocity {
    w: Matrix,
    b: Vec<f32>,
}

impl Velocity {
    fn like(map: &LinearMap) -> Self {
        Velocity {
            w: Matrix::zeros(map.weight.rows(), map.weight.cols()),
            b: vec![0.0; map.bias.len()],
        }
    }
}

/// Continues training from an explicit starting pair.
pub fn train_projections_from(
    calib: &CalibrationSet,
    mut pair: ProjectionPair,
    hyper: &TrainHyper,
) -> Result<(ProjectionPair, TrainReport)> {
    pair.validate()?;
    let n = calib.len();
    if hyper.batch == 0 || hyper.batch > n {
        return Err(EsaError::config(format!(
            "batch size {} must be in 1..={n}",
            hyper.batch
        )));
    }
    if pair.d_model() != calib.d_model() {
        return Err(EsaError::dim(format!(
            "projection expects {} dims, calibration has {}",
            pair.d_model(),
            calib.d_model()
        )));
    }
    if !hyper.lr.is_finite() || hyper.lr <= 0.0 || !(0.0..1.0).contains(&hyper.momentum) {
        return Err(EsaError::config(
            "learning rate must be positive and momentum in [0, 1)",
        ));
    }

    // Separate stream from the initialization seed.
    let mut rng = seeded_rng(hyper.seed ^ 0x5eed_ba7c_0000_0001);
    let steps_per_epoch = n / hyper.batch;
    let mut vq = Velocity::like(&pair.query);
    let mut vk = Velocity::like(&pair.key);
    let mut q_order: Vec<usize> = (0..n).collect();
    let mut k_order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);
    let mut initial_loss = None;
    let mut step = 0usize;

    for _ in 0..hyper.epochs {
        q_order.shuffle(&mut rng);
        k_order.shuffle(&mut rng);
        let mut sum = 0.0f64;
        for s in 0..steps_per_epoch {
            let range = s * hyper.batch..(s + 1) * hyper.batch;
            let qb = calib.queries.select_rows(&q_order[range.clone()])?;
            let kb = calib.keys.select_rows(&k_order[range])?;
            let loss = sgd_step(&mut pair, &mut vq, &mut vk, &qb, &kb, hyper)?;
            if !loss.is_finite() {
                return Err(EsaError::Training { step, loss });
            }
            initial_loss.get_or_insert(loss);
            sum += loss;
            step += 1;
        }
        epoch_losses.push(sum / steps_per_epoch.max(1) as f64);
    }

    if !pair.query.is_finite() || !pair.key.is_finite() {
        return Err(EsaError::Training {
            step,
            loss: f64::NAN,
        });
    }
    let final_loss = epoch_losses.last().copied().unwrap_or(f64::NAN);
    Ok((
        pair,
        TrainReport {
            initial_loss: initial_loss.unwrap_or(f64::NAN),
            epoch_losses,
            final_loss,
            steps: step,
        },
    ))
}

fn project(map: &LinearMap, x: &Matrix) -> Result<Matrix> {
    let mut out = x.matmul_t(&map.weight)?;
    for r in 0..out.rows() {
        for (o, b) in out.row_mut(r).iter_mut().zip(&map.bias) {
            *o += b;
        }
    }
    Ok(out)
}

/// Mean squared score error of `pair` on one cross-product batch.
pub fn score_loss(pair: &ProjectionPair, qb: &Matrix, kb: &Matrix) -> Result<f64> {
    let truth = qb.matmul_t(kb)?;
    let approx = project(&pair.query, qb)?.matmul_t(&project(&pair.key, kb)?)?;
    let sq: f64 = truth
        .data()
        .iter()
        .zip(approx.data())
        .map(|(t, a)| {
            let e = (*a - *t) as f64;
            e * e
        })
        .sum();
    Ok(sq / truth.data().len() as f64)
}

/// One momentum-SGD update; returns the loss before the update.
fn sgd_step(
    pair: &mut ProjectionPair,
    vq: &mut Velocity,
    vk: &mut Velocity,
    qb: &Matrix,
    kb: &Matrix,
    hyper: &TrainHyper,
) -> Result<f64> {
    let b = qb.rows();
    let qp = project(&pair.query, qb)?;
    let kp = project(&pair.key, kb)?;
    let truth = qb.matmul_t(kb)?;
    let mut grad_s = qp.matmul_t(&kp)?;

    let scale = 2.0 / (b * kb.rows()) as f32;
    let mut sq = 0.0f64;
    for (g, t) in grad_s.data_mut().iter_mut().zip(truth.data()) {
        let e = *g - *t;
        sq += e as f64 * e as f64;
        *g = e * scale;
    }
    let loss = sq / (b * kb.rows()) as f64;

    // dL/dQ' = G·K', dL/dK' = Gᵀ·Q'
    let grad_qp = grad_s.matmul(&kp)?;
    let grad_kp = grad_s.transpose().matmul(&qp)?;
    apply_update(&mut pair.query, vq, &grad_qp, qb, hyper)?;
    apply_update(&mut pair.key, vk, &grad_kp, kb, hyper)?;
    Ok(loss)
}

fn apply_update(
    map: &mut LinearMap,
    vel: &mut Velocity,
    grad_out: &Matrix,
    input: &Matrix,
    hyper: &TrainHyper,
) -> Result<()> {
    // dW = grad_outᵀ · input, db = column sums of grad_out
    let grad_w = grad_out.transpose().matmul(input)?;
    let mut grad_b = vec![0.0f32; map.bias.len()];
    for row in grad_out.row_iter() {
        for (g, v) in grad_b.iter_mut().zip(row) {
            *g += v;
        }
    }
    for ((w, v), g) in map
        .weight
        .data_mut()
        .iter_mut()
        .zip(vel.w.data_mut())
        .zip(grad_w.data())
    {
        *v = hyper.momentum * *v + g;
        *w -= hyper.lr * *v;
    }
    for ((w, v), g) in map.bias.iter_mut().zip(&mut vel.b).zip(&grad_b) {
        *v = hyper.momentum * *v + g;
        *w -= hyper.lr * *v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_calib(n: usize, d: usize, seed: u64) -> CalibrationSet {
        let mut rng = seeded_rng(seed);
        let q = Matrix::random_normal(n, d, 1.0, &mut rng);
        let k = Matrix::random_normal(n, d, 1.0, &mut rng);
        CalibrationSet::new(0, q, k, "test").unwrap()
    }

    #[test]
    fn default_hyper_is_reference_setting() {
        let h = TrainHyper::default();
        assert_eq!((h.lr, h.batch, h.epochs), (0.0005, 128, 10));
    }

    #[test]
    fn identity_start_has_zero_loss() {
        let calib = random_calib(256, 8, 1);
        let hyper = TrainHyper {
            epochs: 1,
            batch: 64,
            ..TrainHyper::default()
        };
        let (_, report) =
            train_projections_from(&calib, ProjectionPair::identity(0, 8), &hyper).unwrap();
        assert_eq!(report.initial_loss, 0.0);
        assert_eq!(report.final_loss, 0.0);
    }

    #[test]
    fn batch_larger_than_set_is_config_error() {
        let calib = random_calib(32, 4, 2);
        let err = train_projections(&calib, 2, &TrainHyper::default()).unwrap_err();
        assert!(matches!(err, EsaError::Config(_)));
    }

    #[test]
    fn divergence_reports_step() {
        let calib = random_calib(64, 16, 3);
        let hyper = TrainHyper {
            lr: 1.0e6,
            batch: 16,
            epochs: 5,
            ..TrainHyper::default()
        };
        match train_projections(&calib, 4, &hyper) {
            Err(EsaError::Training { step, .. }) => assert!(step < 20),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // Compare one SGD step (lr tiny, no momentum) with a central difference
        // on a single weight.
        let calib = random_calib(8, 6, 5);
        let pair = ProjectionPair::random(0, 6, 3, 9);
        let qb = calib.queries.clone();
        let kb = calib.keys.clone();
        let lr = 1.0e-3f32;
        let hyper = TrainHyper {
            lr,
            momentum: 0.0,
            ..TrainHyper::default()
        };
        let mut stepped = pair.clone();
        let mut vq = Velocity::like(&pair.query);
        let mut vk = Velocity::like(&pair.key);
        sgd_step(&mut stepped, &mut vq, &mut vk, &qb, &kb, &hyper).unwrap();

        for (r, c) in [(0, 0), (1, 4), (2, 5)] {
            let analytic = (pair.query.weight.get(r, c) - stepped.query.weight.get(r, c)) / lr;
            let h = 1.0e-2f32;
            let mut plus = pair.clone();
            plus.query.weight.set(r, c, pair.query.weight.get(r, c) + h);
            let mut minus = pair.clone();
            minus
                .query
                .weight
                .set(r, c, pair.query.weight.get(r, c) - h);
            let fd = (score_loss(&plus, &qb, &kb).unwrap() - score_loss(&minus, &qb, &kb).unwrap())
                / (2.0 * h as f64);
            assert!(
                (analytic as f64 - fd).abs() < 2e-2 * fd.abs().max(1.0),
                "w[{r},{c}]: analytic {analytic} vs fd {fd}"
            );
        }
        let analytic_b = (pair.key.bias[1] - stepped.key.bias[1]) / lr;
        let h = 1.0e-2f32;
        let mut plus = pair.clone();
        plus.key.bias[1] += h;
        let mut minus = pair.clone();
        minus.key.bias[1] -= h;
        let fd = (score_loss(&plus, &qb, &kb).unwrap() - score_loss(&minus, &qb, &kb).unwrap())
            / (2.0 * h as f64);
        assert!((analytic_b as f64 - fd).abs() < 2e-2 * fd.abs().max(1.0));
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let calib = random_calib(512, 16, 6);
        let hyper = TrainHyper {
            batch: 64,
            epochs: 2,
            seed: 77,
            ..TrainHyper::default()
        };
        let a = train_projections(&calib, 4, &hyper).unwrap();
        let b = train_projections(&calib, 4, &hyper).unwrap();
        assert_eq!(a, b);
    }
}
