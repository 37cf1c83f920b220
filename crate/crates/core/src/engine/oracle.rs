//! Reference attention with one softmax over every visible key.
//!
//! Positions follow the same two-category assignment as the engine, but the
//! logits of both categories are normalized together in `f64`. Slow; meant
//! for tests and for the `oracle` run mode.

use super::{EsaConfig, KvRows};
use crate::error::{EsaError, Result};
use crate::kv_cache::SegmentedKvCache;
use crate::tensor::{apply_rope, Matrix};

fn rotate_heads(row: &[f32], position: usize, cfg: &EsaConfig) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(row.len());
    for head in row.chunks_exact(cfg.head_dim) {
        out.extend(apply_rope(head, position, &cfg.rope)?);
    }
    Ok(out)
}

/// Single softmax over the union of global keys (position 0, query at `w`)
/// and causal local keys (positions `0..`, queries trailing).
pub fn monolithic_attention(
    q: &Matrix,
    global: KvRows<'_>,
    local: KvRows<'_>,
    cfg: &EsaConfig,
) -> Result<Matrix> {
    cfg.validate()?;
    if local.keys.rows() < q.rows() {
        return Err(EsaError::Shape(
            "local rows must include the current tokens".into(),
        ));
    }
    let d = cfg.head_dim;
    let scale = 1.0 / (d as f64).sqrt();
    let prior = local.keys.rows() - q.rows();
    let local_keys: Vec<Vec<f32>> = (0..local.keys.rows())
        .map(|j| rotate_heads(local.keys.row(j), j, cfg))
        .collect::<Result<_>>()?;
    let dv = global.values.cols().max(local.values.cols()) / cfg.heads;
    let mut out = Matrix::zeros(q.rows(), dv * cfg.heads);

    for i in 0..q.rows() {
        let qg = rotate_heads(q.row(i), cfg.global_position, cfg)?;
        let ql = rotate_heads(q.row(i), prior + i, cfg)?;
        for h in 0..cfg.heads {
            let hs = h * d..(h + 1) * d;
            let mut logits: Vec<(f64, &[f32])> = Vec::new();
            for j in 0..global.keys.rows() {
                let s: f64 = qg[hs.clone()]
                    .iter()
                    .zip(&global.keys.row(j)[hs.clone()])
                    .map(|(a, b)| *a as f64 * *b as f64)
                    .sum();
                logits.push((s * scale, &global.values.row(j)[h * dv..(h + 1) * dv]));
            }
            for (j, key) in local_keys.iter().enumerate().take(prior + i + 1) {
                let s: f64 = ql[hs.clone()]
                    .iter()
                    .zip(&key[hs.clone()])
                    .map(|(a, b)| *a as f64 * *b as f64)
                    .sum();
                logits.push((s * scale, &local.values.row(j)[h * dv..(h + 1) * dv]));
            }
            let max = logits
                .iter()
                .map(|(l, _)| *l)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut acc = vec![0.0f64; dv];
            let mut z = 0.0f64;
            for (l, v) in &logits {
                let w = (l - max).exp();
                z += w;
                for (a, x) in acc.iter_mut().zip(v.iter()) {
                    *a += w * *x as f64;
                }
            }
            for (c, a) in acc.iter().enumerate() {
                out.set(i, h * dv + c, (a / z) as f32);
            }
        }
    }
    Ok(out)
}

/// Attention of the current tokens over every cached token (all of the
/// middle segment selected) plus themselves.
pub fn full_attention_oracle(
    cache: &SegmentedKvCache,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    cfg: &EsaConfig,
) -> Result<Matrix> {
    let mut gk = cache.initial_keys().clone();
    let mut gv = cache.initial_values().clone();
    gk.append(cache.middle_keys())?;
    gv.append(cache.middle_values())?;
    let mut lk = cache.local_keys().clone();
    let mut lv = cache.local_values().clone();
    lk.append(k)?;
    lv.append(v)?;
    monolithic_attention(
        q,
        KvRows {
            keys: &gk,
            values: &gv,
        },
        KvRows {
            keys: &lk,
            values: &lv,
        },
        cfg,
    )
}
