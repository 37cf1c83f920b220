//! Importance scoring and top-k selection over the middle segment.
//!
//! Raw scores `f(m; c)` form a `current × middle` matrix. Each row is shifted
//! by its own maximum and the column-wise max over current tokens gives the
//! aggregated score, so every aggregated score is `<= 0`. A max-filter of
//! radius `epsilon` then lets a salient token lift its neighbours before the
//! `k` best middle tokens are picked.

use std::cmp::Ordering;
use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{EsaError, Result};
use crate::tensor::{dot, FlopCounter, Matrix};

/// Which vectors produced a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreBasis {
    FullDim,
    Compressed,
}

/// How per-head dot products are combined into one token score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Sum over heads, i.e. one dot product of the concatenated vectors.
    #[default]
    UniformSum,
    /// Each head votes; the token keeps its best head.
    IndividualMax,
}

/// One score per middle token.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    pub values: Vec<f32>,
    pub basis: ScoreBasis,
    pub head_mode: HeadMode,
}

impl ImportanceScores {
    pub fn new(values: Vec<f32>, basis: ScoreBasis, head_mode: HeadMode) -> Self {
        ImportanceScores {
            values,
            basis,
            head_mode,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Chosen middle-token indices, ascending.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub indices: Vec<usize>,
    pub k_effective: usize,
}

impl SelectionResult {
    /// Every index in `0..len`.
    pub fn all(len: usize) -> Self {
        SelectionResult {
            indices: (0..len).collect(),
            k_effective: len,
        }
    }

    pub fn none() -> Self {
        SelectionResult::default()
    }
}

/// `Σ_h q_h · k_h`, computed as a single dot product of the concatenated heads.
pub fn head_sum_score(query_concat: &[f32], key_concat: &[f32]) -> Result<f32> {
    if query_concat.len() != key_concat.len() {
        return Err(EsaError::dim(format!(
            "query has {} dims, key has {}",
            query_concat.len(),
            key_concat.len()
        )));
    }
    Ok(dot(query_concat, key_concat))
}

/// `max_h q_h · k_h` over per-head slices.
pub fn head_max_score(query: &[&[f32]], key: &[&[f32]]) -> Result<f32> {
    if query.len() != key.len() || query.is_empty() {
        return Err(EsaError::dim(format!(
            "query has {} heads, key has {}",
            query.len(),
            key.len()
        )));
    }
    let mut best = f32::NEG_INFINITY;
    for (q, k) in query.iter().zip(key) {
        if q.len() != k.len() {
            return Err(EsaError::dim("per-head lengths differ"));
        }
        best = best.max(dot(q, k));
    }
    Ok(best)
}

/// Raw score matrix `queries · keysᵀ` (rows = current tokens, cols = middle tokens).
pub fn score_matrix(queries: &Matrix, keys: &Matrix, flops: &mut FlopCounter) -> Result<Matrix> {
    if queries.cols() != keys.cols() {
        return Err(EsaError::dim(format!(
            "scoring {}-dim queries against {}-dim keys",
            queries.cols(),
            keys.cols()
        )));
    }
    let mut out = Matrix::zeros(queries.rows(), keys.rows());
    for i in 0..queries.rows() {
        let q = queries.row(i);
        let row = out.row_mut(i);
        for (j, s) in row.iter_mut().enumerate() {
            *s = dot(q, keys.row(j));
        }
    }
    flops.add(2 * (queries.rows() * keys.rows() * queries.cols()) as u64);
    Ok(out)
}

/// Per-head-max score matrix over full-dimension concatenated vectors.
pub fn head_max_score_matrix(queries: &Matrix, keys: &Matrix, heads: usize) -> Result<Matrix> {
    if queries.cols() != keys.cols() || heads == 0 || !queries.cols().is_multiple_of(heads) {
        return Err(EsaError::dim(format!(
            "cannot split {} / {} columns into {heads} heads",
            queries.cols(),
            keys.cols()
        )));
    }
    let d = queries.cols() / heads;
    let mut out = Matrix::zeros(queries.rows(), keys.rows());
    for i in 0..queries.rows() {
        let q = queries.row(i);
        for j in 0..keys.rows() {
            let k = keys.row(j);
            let best = (0..heads)
                .map(|h| dot(&q[h * d..(h + 1) * d], &k[h * d..(h + 1) * d]))
                .fold(f32::NEG_INFINITY, f32::max);
            out.set(i, j, best);
        }
    }
    Ok(out)
}

/// `F(m; C) = max_c ( f(m; c) - max_m' f(m'; c) )`.
pub fn normalize_scores(
    raw: &Matrix,
    basis: ScoreBasis,
    head_mode: HeadMode,
    flops: &mut FlopCounter,
) -> Result<ImportanceScores> {
    if raw.rows() == 0 || raw.cols() == 0 {
        return Err(EsaError::dim("normalizing an empty score matrix"));
    }
    let mut out = vec![f32::NEG_INFINITY; raw.cols()];
    for row in raw.row_iter() {
        let row_max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        for (o, &s) in out.iter_mut().zip(row) {
            *o = o.max(s - row_max);
        }
    }
    // One subtraction per (current, middle) pair; the maxima are comparisons.
    flops.add((raw.rows() * raw.cols()) as u64);
    Ok(ImportanceScores::new(out, basis, head_mode))
}

/// `s'_j = max { s_w : |w - j| <= epsilon }`, clamped to the segment.
pub fn proximity_smooth(scores: &ImportanceScores, epsilon: usize) -> ImportanceScores {
    let s = &scores.values;
    let n = s.len();
    if epsilon == 0 || n <= 1 {
        return scores.clone();
    }
    let mut out = Vec::with_capacity(n);
    // Monotone deque of candidate indices with decreasing scores.
    let mut window: VecDeque<usize> = VecDeque::new();
    let mut next = 0usize;
    for j in 0..n {
        let hi = j.saturating_add(epsilon).min(n - 1);
        while next <= hi {
            while window.back().is_some_and(|&b| s[b] <= s[next]) {
                window.pop_back();
            }
            window.push_back(next);
            next += 1;
        }
        let lo = j.saturating_sub(epsilon);
        while window.front().is_some_and(|&f| f < lo) {
            window.pop_front();
        }
        out.push(s[*window.front().expect("window holds j")]);
    }
    ImportanceScores::new(out, scores.basis, scores.head_mode)
}

/// Higher score first; ties go to the earlier position.
#[inline]
fn rank_order(scores: &[f32], a: usize, b: usize) -> Ordering {
    scores[b]
        .partial_cmp(&scores[a])
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

/// Indices of the `min(k, len)` highest scores, returned in ascending order.
pub fn select_top_k(scores: &ImportanceScores, k: usize) -> SelectionResult {
    top_k_indices(&scores.values, k)
}

pub fn top_k_indices(scores: &[f32], k: usize) -> SelectionResult {
    let n = scores.len();
    if k >= n {
        return SelectionResult::all(n);
    }
    if k == 0 {
        return SelectionResult::none();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(scores, a, b));
    idx.truncate(k);
    idx.sort_unstable();
    SelectionResult {
        indices: idx,
        k_effective: k,
    }
}
