//! Closed-form FLOP model for one attention step.
//!
//! Full attention over `l = l_I + l_M + l_L + l_C` keys costs
//! `(4·d_H + 3·H)·l_C·l`: `2·d_H` per query-key pair for the dot product,
//! the same for weighting the values, and 3 softmax operations per logit per
//! head. The selective step pays for compressing the current queries and the
//! migrating keys, scoring `l_M` compressed keys, and attending to
//! `l_I + l_L + l_C + k` keys. Max and comparison work is left out.

use serde::{Deserialize, Serialize};

use crate::engine::EsaConfig;
use crate::error::{EsaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub d_model: u64,
    pub heads: u64,
    pub d_reduced: u64,
    pub l_i: u64,
    pub l_m: u64,
    pub l_l: u64,
    pub l_c: u64,
    pub k: u64,
    pub epsilon: u64,
    /// KV heads under grouped-query attention.
    pub kv_heads: Option<u64>,
    pub head_dim: u64,
}

impl CostModel {
    /// Model for a step with the given middle and current lengths; the other
    /// lengths are taken from `cfg` at capacity.
    pub fn from_config(cfg: &EsaConfig, l_m: usize, l_c: usize) -> Self {
        CostModel {
            d_model: cfg.d_model() as u64,
            heads: cfg.heads as u64,
            d_reduced: cfg.d_reduced as u64,
            l_i: cfg.initial_len as u64,
            l_m: l_m as u64,
            l_l: cfg.local_len as u64,
            l_c: l_c as u64,
            k: cfg.top_k as u64,
            epsilon: cfg.epsilon as u64,
            kv_heads: Some(cfg.heads as u64),
            head_dim: cfg.head_dim as u64,
        }
    }

    /// `32 × 128` heads, `d' = 128`, 8 KV heads, reference segment lengths.
    pub fn paper(l_m: u64, l_c: u64) -> Self {
        CostModel {
            d_model: 4096,
            heads: 32,
            d_reduced: 128,
            l_i: 128,
            l_m,
            l_l: 4096,
            l_c,
            k: 2048,
            epsilon: 1,
            kv_heads: Some(8),
            head_dim: 128,
        }
    }

    fn per_pair(&self) -> u64 {
        4 * self.d_model + 3 * self.heads
    }

    fn total_len(&self) -> u64 {
        self.l_i + self.l_m + self.l_l + self.l_c
    }
}

/// The three summands of the selective step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EsaFlops {
    pub projection: u64,
    pub selection: u64,
    pub attention: u64,
}

impl EsaFlops {
    pub fn total(&self) -> u64 {
        self.projection + self.selection + self.attention
    }
}

pub fn full_attention_flops(m: &CostModel) -> u64 {
    m.per_pair() * m.l_c * m.total_len()
}

pub fn esa_flops_breakdown(m: &CostModel) -> EsaFlops {
    EsaFlops {
        projection: 4 * m.l_c * m.d_model * m.d_reduced + 2 * m.l_c * m.d_reduced,
        selection: 2 * m.l_m * m.l_c * m.d_reduced + m.l_m * m.l_c,
        attention: m.per_pair() * m.l_c * (m.l_i + m.l_l + m.l_c + m.k),
    }
}

pub fn esa_flops(m: &CostModel) -> u64 {
    esa_flops_breakdown(m).total()
}

/// Exact ratio, written as the sum of the attention share and the selection
/// overhead share.
pub fn reduction_ratio_exact(m: &CostModel) -> f64 {
    let l = m.total_len() as f64;
    let (dh, dr, lm) = (m.d_model as f64, m.d_reduced as f64, m.l_m as f64);
    let attention = (m.l_i + m.k + m.l_l + m.l_c) as f64 / l;
    let overhead = (4.0 * dh * dr + 2.0 * dr + 2.0 * dr * lm + lm) / (m.per_pair() as f64 * l);
    attention + overhead
}

/// Limit of the exact ratio as `l_M → ∞`: `(2d' + 1) / (4d_H + 3H)`.
pub fn reduction_ratio_asymptotic(m: &CostModel) -> f64 {
    (2 * m.d_reduced + 1) as f64 / m.per_pair() as f64
}

/// Extra memory of the compressed middle keys relative to full keys and
/// values: `d' / (2·d_G)` with `d_G = H_G·d`.
pub fn cache_overhead_ratio(m: &CostModel) -> Result<f64> {
    let kv_heads = m
        .kv_heads
        .ok_or_else(|| EsaError::config("cache overhead needs the KV head count"))?;
    let d_g = kv_heads * m.head_dim;
    if d_g == 0 {
        return Err(EsaError::config("KV width must be positive"));
    }
    Ok(m.d_reduced as f64 / (2 * d_g) as f64)
}
