//! Dense numeric kernel used by every other module.
//!
//! Row-major `f32` matrices, seeded random generation, rotary position
//! embedding and a scaled-dot-product attention branch that reports its
//! log-sum-exp normalizer alongside the output. Exponent sums are accumulated
//! in `f64`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{EsaError, Result};

/// Deterministic generator used throughout the crate.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Row-major matrix of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// An empty matrix with a fixed column count, ready for `push_row`.
    pub fn empty(cols: usize) -> Self {
        Self::zeros(0, cols)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(EsaError::dim(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut m = Matrix::empty(cols);
        for r in rows {
            m.push_row(r.as_ref())?;
        }
        Ok(m)
    }

    /// Entries drawn i.i.d. from `N(0, std^2)`.
    pub fn random_normal(rows: usize, cols: usize, std: f32, rng: &mut SeededRng) -> Self {
        let normal = Normal::new(0.0f32, std).expect("standard deviation must be finite");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f32]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.cols {
            return Err(EsaError::dim(format!(
                "row of length {} pushed into matrix with {} columns",
                row.len(),
                self.cols
            )));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Appends all rows of `other` below `self`.
    pub fn append(&mut self, other: &Matrix) -> Result<()> {
        if other.cols != self.cols {
            return Err(EsaError::dim(format!(
                "cannot stack {} columns onto {}",
                other.cols, self.cols
            )));
        }
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
        Ok(())
    }

    /// Removes the first `n` rows and returns them as a new matrix.
    pub fn drain_front(&mut self, n: usize) -> Matrix {
        let n = n.min(self.rows);
        let data: Vec<f32> = self.data.drain(..n * self.cols).collect();
        self.rows -= n;
        Matrix {
            rows: n,
            cols: self.cols,
            data,
        }
    }

    /// Copies the rows at `indices`, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Matrix> {
        let mut out = Matrix {
            rows: 0,
            cols: self.cols,
            data: Vec::with_capacity(indices.len() * self.cols),
        };
        for &i in indices {
            if i >= self.rows {
                return Err(EsaError::Index {
                    index: i,
                    len: self.rows,
                });
            }
            out.data.extend_from_slice(self.row(i));
            out.rows += 1;
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// `self · x` for a column vector `x`.
    pub fn matvec(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.cols {
            return Err(EsaError::dim(format!(
                "matvec: matrix has {} columns, vector has {}",
                self.cols,
                x.len()
            )));
        }
        Ok(self.row_iter().map(|r| dot(r, x)).collect())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(EsaError::dim(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (t, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in orow.iter_mut().zip(other.row(t)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`, i.e. all pairwise row dot products.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(EsaError::dim(format!(
                "matmul_t {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    // Four independent accumulators let the compiler vectorize the loop.
    let mut acc = [0.0f32; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}

/// Running count of floating-point operations.
///
/// A multiply-add counts as 2, an exponential or a division as 1. Comparisons
/// (max, top-k) are not counted.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct FlopCounter(u64);

impl FlopCounter {
    pub fn new() -> Self {
        FlopCounter(0)
    }

    #[inline]
    pub fn add(&mut self, n: u64) {
        self.0 += n;
    }

    pub fn total(&self) -> u64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeParams {
    pub head_dim: usize,
    pub base: f64,
}

impl RopeParams {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        let p = RopeParams { head_dim, base };
        p.validate()?;
        Ok(p)
    }

    pub fn with_default_base(head_dim: usize) -> Result<Self> {
        Self::new(head_dim, 10_000.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return Err(EsaError::dim(format!(
                "rotary head_dim must be even and positive, got {}",
                self.head_dim
            )));
        }
        if !self.base.is_finite() || self.base <= 1.0 {
            return Err(EsaError::config(format!(
                "rotary base must exceed 1, got {}",
                self.base
            )));
        }
        Ok(())
    }

    /// Rotation angle of pair `i` at `position`.
    #[inline]
    pub fn angle(&self, position: usize, pair: usize) -> f64 {
        let exponent = -2.0 * pair as f64 / self.head_dim as f64;
        position as f64 * self.base.powf(exponent)
    }
}

/// Rotates consecutive pairs `(x[2i], x[2i+1])` by `position * base^(-2i/d)`.
pub fn apply_rope(vector: &[f32], position: usize, params: &RopeParams) -> Result<Vec<f32>> {
    if vector.len() != params.head_dim {
        return Err(EsaError::dim(format!(
            "rope expects {} values, got {}",
            params.head_dim,
            vector.len()
        )));
    }
    params.validate()?;
    let mut out = vector.to_vec();
    rotate_in_place(&mut out, position, params);
    Ok(out)
}

fn rotate_in_place(v: &mut [f32], position: usize, params: &RopeParams) {
    if position == 0 {
        return;
    }
    for i in 0..params.head_dim / 2 {
        let (s, c) = params.angle(position, i).sin_cos();
        let (x0, x1) = (v[2 * i] as f64, v[2 * i + 1] as f64);
        v[2 * i] = (x0 * c - x1 * s) as f32;
        v[2 * i + 1] = (x0 * s + x1 * c) as f32;
    }
}

/// Cached cos/sin values for positions `0..len`, grown on demand.
#[derive(Debug, Clone)]
pub struct RopeTable {
    params: RopeParams,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl RopeTable {
    pub fn new(params: RopeParams) -> Result<Self> {
        params.validate()?;
        Ok(RopeTable {
            params,
            cos: Vec::new(),
            sin: Vec::new(),
        })
    }

    pub fn params(&self) -> &RopeParams {
        &self.params
    }

    fn ensure(&mut self, max_position: usize) {
        let half = self.params.head_dim / 2;
        let have = self.cos.len() / half;
        for pos in have..=max_position {
            for i in 0..half {
                let (s, c) = self.params.angle(pos, i).sin_cos();
                self.cos.push(c as f32);
                self.sin.push(s as f32);
            }
        }
    }

    /// Rotates every head of a concatenated `[h0 | h1 | ...]` row in place.
    pub fn rotate_heads(&mut self, row: &mut [f32], position: usize) {
        if position == 0 {
            return;
        }
        self.ensure(position);
        let d = self.params.head_dim;
        let half = d / 2;
        let cos = &self.cos[position * half..(position + 1) * half];
        let sin = &self.sin[position * half..(position + 1) * half];
        for head in row.chunks_exact_mut(d) {
            for i in 0..half {
                let (x0, x1) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = x0 * cos[i] - x1 * sin[i];
                head[2 * i + 1] = x0 * sin[i] + x1 * cos[i];
            }
        }
    }

    /// Copy of `m` with row `r` rotated to position `positions(r)`.
    pub fn encode_rows(&mut self, m: &Matrix, positions: impl Fn(usize) -> usize) -> Matrix {
        let mut out = m.clone();
        for r in 0..m.rows() {
            self.rotate_heads(out.row_mut(r), positions(r));
        }
        out
    }
}

/// Max-shifted softmax. Returns the probabilities and `log Σ exp(logits)`.
///
/// `-inf` entries are treated as masked and receive probability 0.
pub fn softmax_lse(logits: &[f32]) -> Result<(Vec<f32>, f64)> {
    if logits.is_empty() {
        return Err(EsaError::dim("softmax over an empty vector"));
    }
    if logits.iter().any(|v| v.is_nan() || *v == f32::INFINITY) {
        return Err(EsaError::dim("softmax logits must be finite or -inf"));
    }
    let mut probs = vec![0.0f32; logits.len()];
    let lse = softmax_into(logits, &mut probs);
    Ok((probs, lse))
}

/// Writes probabilities into `out` and returns the log-sum-exp.
/// Returns `-inf` (and all-zero probabilities) when every logit is masked.
fn softmax_into(logits: &[f32], out: &mut [f32]) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|p| *p = 0.0);
        return f64::NEG_INFINITY;
    }
    let mut sum = 0.0f64;
    for (p, &l) in out.iter_mut().zip(logits) {
        let e = (l as f64 - max).exp();
        *p = e as f32;
        sum += e;
    }
    let inv = 1.0 / sum;
    for p in out.iter_mut() {
        *p = (*p as f64 * inv) as f32;
    }
    max + sum.ln()
}

/// Output of one attention branch and its per-(row, head) normalizer.
#[derive(Debug, Clone)]
pub struct AttentionBranchOutput {
    pub output: Matrix,
    /// Row-major `[query_row][head]`. `-inf` when the branch saw no keys.
    pub lse: Vec<f64>,
    pub heads: usize,
    /// Work performed to produce this output.
    pub flops: u64,
}

impl AttentionBranchOutput {
    #[inline]
    pub fn lse_at(&self, row: usize, head: usize) -> f64 {
        self.lse[row * self.heads + head]
    }
}

/// Multi-head scaled-dot-product attention over concatenated-head rows.
///
/// With `causal` set the queries are aligned with the trailing rows of
/// `keys`: query `i` may see keys `0..=keys.rows() - queries.rows() + i`.
pub fn attention_branch(
    queries: &Matrix,
    keys: &Matrix,
    values: &Matrix,
    heads: usize,
    causal: bool,
    scale: f32,
) -> Result<AttentionBranchOutput> {
    if heads == 0 {
        return Err(EsaError::dim("attention needs at least one head"));
    }
    if queries.cols() != keys.cols() {
        return Err(EsaError::dim(format!(
            "queries have {} columns, keys have {}",
            queries.cols(),
            keys.cols()
        )));
    }
    if keys.rows() != values.rows() {
        return Err(EsaError::dim(format!(
            "{} keys but {} values",
            keys.rows(),
            values.rows()
        )));
    }
    if !queries.cols().is_multiple_of(heads) || !values.cols().is_multiple_of(heads) {
        return Err(EsaError::dim(format!(
            "{} / {} columns not divisible by {heads} heads",
            queries.cols(),
            values.cols()
        )));
    }
    if causal && queries.rows() > keys.rows() {
        return Err(EsaError::Shape(format!(
            "causal attention with {} queries over {} keys",
            queries.rows(),
            keys.rows()
        )));
    }

    let (nq, nk) = (queries.rows(), keys.rows());
    let d = queries.cols() / heads;
    let dv = values.cols() / heads;
    let offset = nk - nq.min(nk);
    let mut output = Matrix::zeros(nq, values.cols());
    let mut lse = vec![f64::NEG_INFINITY; nq * heads];
    let mut logits = vec![0.0f32; nk];
    let mut probs = vec![0.0f32; nk];
    let mut acc = vec![0.0f32; dv];

    if nk > 0 {
        for i in 0..nq {
            let q = queries.row(i);
            let visible = if causal { offset + i + 1 } else { nk };
            for h in 0..heads {
                let qh = &q[h * d..(h + 1) * d];
                for (j, l) in logits.iter_mut().enumerate() {
                    let kh = &keys.row(j)[h * d..(h + 1) * d];
                    *l = if j < visible {
                        dot(qh, kh) * scale
                    } else {
                        f32::NEG_INFINITY
                    };
                }
                lse[i * heads + h] = softmax_into(&logits, &mut probs);
                acc.iter_mut().for_each(|a| *a = 0.0);
                for (j, &p) in probs.iter().enumerate().take(visible) {
                    let vh = &values.row(j)[h * dv..(h + 1) * dv];
                    for (a, &v) in acc.iter_mut().zip(vh) {
                        *a += p * v;
                    }
                }
                output.row_mut(i)[h * dv..(h + 1) * dv].copy_from_slice(&acc);
            }
        }
    }

    // Dense accounting: every (query, key) pair is scored, including masked
    // ones, with 2d FLOPs for QK, 3 per head for softmax and 2dv for AV.
    let pairs = (nq * nk) as u64;
    let flops = pairs * (2 * queries.cols() as u64 + 3 * heads as u64 + 2 * values.cols() as u64);
    Ok(AttentionBranchOutput {
        output,
        lse,
        heads,
        flops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn rope_position_zero_is_identity() {
        let p = RopeParams::with_default_base(8).unwrap();
        let v = vec![0.3, -1.0, 2.0, 0.5, 1.5, -0.25, 0.0, 4.0];
        assert_eq!(apply_rope(&v, 0, &p).unwrap(), v);
    }

    #[test]
    fn rope_quarter_turn() {
        // Pair 1 of a 4-dim head turns by position * base^(-1/2); with
        // base = (4/pi)^2 that is pi/2 at position 2.
        let base = (4.0 / std::f64::consts::PI).powi(2);
        let p = RopeParams::new(4, base).unwrap();
        let out = apply_rope(&[0.0, 0.0, 1.0, 0.0], 2, &p).unwrap();
        assert!(out[2].abs() < 1e-6, "{out:?}");
        assert!((out[3] - 1.0).abs() < 1e-6, "{out:?}");
    }

    #[test]
    fn rope_rejects_odd_or_mismatched_length() {
        assert!(RopeParams::new(3, 10_000.0).is_err());
        let p = RopeParams::with_default_base(4).unwrap();
        assert!(matches!(
            apply_rope(&[1.0, 2.0], 1, &p),
            Err(EsaError::Dimension(_))
        ));
    }

    #[test]
    fn rope_preserves_pair_norms() {
        let mut rng = seeded_rng(7);
        let p = RopeParams::with_default_base(64).unwrap();
        for _ in 0..100 {
            let v: Vec<f32> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
            let pos = rng.random_range(0..100_000);
            let out = apply_rope(&v, pos, &p).unwrap();
            for i in 0..32 {
                let a = (v[2 * i] as f64).hypot(v[2 * i + 1] as f64);
                let b = (out[2 * i] as f64).hypot(out[2 * i + 1] as f64);
                assert!((a - b).abs() < 1e-6 * a.max(1.0), "pair {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn rope_table_matches_direct_rotation() {
        let p = RopeParams::with_default_base(8).unwrap();
        let mut table = RopeTable::new(p).unwrap();
        let mut rng = seeded_rng(3);
        let v: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut rotated = v.clone();
        table.rotate_heads(&mut rotated, 37);
        for h in 0..2 {
            let direct = apply_rope(&v[h * 8..(h + 1) * 8], 37, &p).unwrap();
            for i in 0..8 {
                assert!((direct[i] - rotated[h * 8 + i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_symmetric_and_large_logits() {
        let (p, lse) = softmax_lse(&[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        assert!((lse - 2f64.ln()).abs() < 1e-12);

        let (p, lse) = softmax_lse(&[1000.0, 1000.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        assert!((lse - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn softmax_empty_is_error() {
        assert!(matches!(softmax_lse(&[]), Err(EsaError::Dimension(_))));
    }

    #[test]
    fn softmax_matches_extended_precision() {
        let mut rng = seeded_rng(11);
        let logits: Vec<f32> = (0..64).map(|_| rng.random_range(-20.0..20.0)).collect();
        let (p, lse) = softmax_lse(&logits).unwrap();
        // Oracle: plain exponentials in f64 without any shift.
        let exps: Vec<f64> = logits.iter().map(|&l| (l as f64).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (pi, e) in p.iter().zip(&exps) {
            assert!((*pi as f64 - e / z).abs() < 1e-6);
        }
        assert!((lse - z.ln()).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn softmax_lse_reconstructs_probabilities(
            logits in prop::collection::vec(-1.0e4f32..1.0e4, 1..48)
        ) {
            let (p, lse) = softmax_lse(&logits).unwrap();
            let sum: f64 = p.iter().map(|&x| x as f64).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            for (pi, &l) in p.iter().zip(&logits) {
                let r = (l as f64 - lse).exp();
                prop_assert!((r - *pi as f64).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_key_attention_returns_value() {
        let q = Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let k = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let v = Matrix::from_vec(1, 2, vec![3.0, -4.0]).unwrap();
        let out = attention_branch(&q, &k, &v, 1, false, 1.0).unwrap();
        assert_eq!(out.output.row(0), &[3.0, -4.0]);
        assert_eq!(out.lse[0], 0.0);
    }

    #[test]
    fn equal_logits_average_values() {
        let q = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let k = Matrix::from_vec(2, 2, vec![0.0, 1.0, 0.0, -1.0]).unwrap();
        let v = Matrix::from_vec(2, 2, vec![2.0, 4.0, 6.0, 0.0]).unwrap();
        let out = attention_branch(&q, &k, &v, 1, false, 1.0).unwrap();
        assert_eq!(out.output.row(0), &[4.0, 2.0]);
    }

    #[test]
    fn causal_rejects_more_queries_than_keys() {
        let q = Matrix::zeros(3, 4);
        let k = Matrix::zeros(2, 4);
        let v = Matrix::zeros(2, 4);
        assert!(matches!(
            attention_branch(&q, &k, &v, 1, true, 1.0),
            Err(EsaError::Shape(_))
        ));
    }

    /// Dense masked-softmax reference, one head at a time, all in f64.
    fn dense_reference(
        q: &Matrix,
        k: &Matrix,
        v: &Matrix,
        heads: usize,
        causal: bool,
        scale: f64,
    ) -> Matrix {
        let d = q.cols() / heads;
        let dv = v.cols() / heads;
        let offset = k.rows() - q.rows();
        let mut out = Matrix::zeros(q.rows(), v.cols());
        for i in 0..q.rows() {
            for h in 0..heads {
                let mut w = Vec::new();
                for j in 0..k.rows() {
                    if causal && j > offset + i {
                        w.push(0.0);
                        continue;
                    }
                    let s: f64 = (0..d)
                        .map(|t| q.get(i, h * d + t) as f64 * k.get(j, h * d + t) as f64)
                        .sum();
                    w.push((s * scale).exp());
                }
                let z: f64 = w.iter().sum();
                for c in 0..dv {
                    let o: f64 = (0..k.rows())
                        .map(|j| w[j] * v.get(j, h * dv + c) as f64)
                        .sum();
                    out.set(i, h * dv + c, (o / z) as f32);
                }
            }
        }
        out
    }

    #[test]
    fn causal_self_attention_matches_dense_reference() {
        let mut rng = seeded_rng(42);
        for heads in [1, 2] {
            let q = Matrix::random_normal(3, 4 * heads, 1.0, &mut rng);
            let k = Matrix::random_normal(3, 4 * heads, 1.0, &mut rng);
            let v = Matrix::random_normal(3, 4 * heads, 1.0, &mut rng);
            let out = attention_branch(&q, &k, &v, heads, true, 0.5).unwrap();
            let reference = dense_reference(&q, &k, &v, heads, true, 0.5);
            assert!(out.output.max_abs_diff(&reference) < 1e-6);
        }
        // Trailing alignment with more keys than queries.
        let q = Matrix::random_normal(2, 8, 1.0, &mut rng);
        let k = Matrix::random_normal(5, 8, 1.0, &mut rng);
        let v = Matrix::random_normal(5, 8, 1.0, &mut rng);
        let out = attention_branch(&q, &k, &v, 2, true, 0.5).unwrap();
        assert!(
            out.output
                .max_abs_diff(&dense_reference(&q, &k, &v, 2, true, 0.5))
                < 1e-6
        );
    }

    #[test]
    fn empty_key_set_has_neg_inf_lse() {
        let q = Matrix::zeros(2, 4);
        let out =
            attention_branch(&q, &Matrix::empty(4), &Matrix::empty(4), 2, false, 1.0).unwrap();
        assert!(out.lse.iter().all(|l| *l == f64::NEG_INFINITY));
        assert!(out.output.data().iter().all(|v| *v == 0.0));
        assert_eq!(out.flops, 0);
    }

    #[test]
    fn flop_accounting_is_dense() {
        let q = Matrix::zeros(3, 8);
        let k = Matrix::zeros(5, 8);
        let out = attention_branch(&q, &k, &k, 2, true, 1.0).unwrap();
        // (4 * d_H + 3 * H) per pair
        assert_eq!(out.flops, 15 * (4 * 8 + 3 * 2));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn non_causal_attention_is_permutation_invariant(seed in any::<u64>(), n in 2usize..12) {
            let mut rng = seeded_rng(seed);
            let q = Matrix::random_normal(2, 8, 1.0, &mut rng);
            let k = Matrix::random_normal(n, 8, 1.0, &mut rng);
            let v = Matrix::random_normal(n, 8, 1.0, &mut rng);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.reverse();
            perm.rotate_left(seed as usize % n);
            let kp = k.select_rows(&perm).unwrap();
            let vp = v.select_rows(&perm).unwrap();
            let a = attention_branch(&q, &k, &v, 2, false, 0.35).unwrap();
            let b = attention_branch(&q, &kp, &vp, 2, false, 0.35).unwrap();
            prop_assert!(a.output.max_abs_diff(&b.output) < 1e-6);
        }
    }
}
