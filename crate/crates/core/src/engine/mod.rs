//! Chunked prefill and decode over a segmented cache.
//!
//! Each step scores the middle segment against the current queries, keeps the
//! top-k middle tokens, and attends in two branches:
//!
//! * **global**: initial tokens plus the selected middle tokens. Every key sits
//!   at position 0 and every query at the fixed position `w`, so the relative
//!   distance is always `w`.
//! * **local**: the local window followed by the current chunk, positions
//!   `0..l_L + l_C`, causal.
//!
//! The branches are merged exactly through their log-sum-exp normalizers.

mod needle;
mod oracle;

pub use needle::{planted_needle_recall, NeedleOutcome, NeedleSpec};
pub use oracle::{full_attention_oracle, monolithic_attention};

use serde::{Deserialize, Serialize};

use crate::compression::ProjectionPair;
use crate::error::{EsaError, Result};
use crate::kv_cache::{MigrationEvent, SegmentedKvCache};
use crate::selection::{
    head_max_score_matrix, normalize_scores, proximity_smooth, score_matrix, select_top_k,
    HeadMode, ScoreBasis, SelectionResult,
};
use crate::tensor::{
    attention_branch, AttentionBranchOutput, FlopCounter, Matrix, RopeParams, RopeTable,
};

/// Structural parameters of the selective attention step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EsaConfig {
    pub heads: usize,
    pub head_dim: usize,
    /// Width of the compressed queries and keys (`d'`).
    pub d_reduced: usize,
    /// `l_I`
    pub initial_len: usize,
    /// `l_L`
    pub local_len: usize,
    /// Middle tokens kept per step.
    pub top_k: usize,
    /// Proximity radius of the score max-filter.
    pub epsilon: usize,
    /// Largest prefill chunk.
    pub chunk: usize,
    /// Query position used by the global branch (`w`).
    pub global_position: usize,
    pub rope: RopeParams,
    #[serde(default)]
    pub head_mode: HeadMode,
}

impl EsaConfig {
    /// 32 heads of 128, `d' = 128`, `l_I = 128`, `k = 2048`, `l_L = 4096`.
    pub fn paper() -> Self {
        EsaConfig {
            heads: 32,
            head_dim: 128,
            d_reduced: 128,
            initial_len: 128,
            local_len: 4096,
            top_k: 2048,
            epsilon: 1,
            chunk: 512,
            global_position: 4096,
            rope: RopeParams {
                head_dim: 128,
                base: 10_000.0,
            },
            head_mode: HeadMode::UniformSum,
        }
    }

    /// Small configuration that runs in seconds on a laptop.
    pub fn desk() -> Self {
        EsaConfig {
            heads: 4,
            head_dim: 32,
            d_reduced: 16,
            initial_len: 16,
            local_len: 256,
            top_k: 256,
            epsilon: 1,
            chunk: 512,
            global_position: 256,
            rope: RopeParams {
                head_dim: 32,
                base: 10_000.0,
            },
            head_mode: HeadMode::UniformSum,
        }
    }

    /// `d_H = H·d`
    pub fn d_model(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn scale(&self) -> f32 {
        1.0 / (self.head_dim as f32).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 {
            return Err(EsaError::config("heads and head_dim must be positive"));
        }
        if self.rope.head_dim != self.head_dim {
            return Err(EsaError::config(format!(
                "rope head_dim {} differs from head_dim {}",
                self.rope.head_dim, self.head_dim
            )));
        }
        self.rope.validate()?;
        if self.d_reduced == 0 || self.d_reduced > self.d_model() {
            return Err(EsaError::config(format!(
                "d' = {} must be in 1..={}",
                self.d_reduced,
                self.d_model()
            )));
        }
        if self.chunk == 0 {
            return Err(EsaError::config("chunk must be at least 1"));
        }
        Ok(())
    }
}

/// How the middle segment is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    /// Compressed queries against the cached compressed keys.
    Compressed,
    /// Full-dimension queries and keys, combined per `EsaConfig::head_mode`.
    FullDim,
}

/// Borrowed keys and values of one branch.
#[derive(Debug, Clone, Copy)]
pub struct KvRows<'a> {
    pub keys: &'a Matrix,
    pub values: &'a Matrix,
}

/// Both branches and their merge.
#[derive(Debug, Clone)]
pub struct FusedAttention {
    pub fused: AttentionBranchOutput,
    pub local: AttentionBranchOutput,
    pub global: AttentionBranchOutput,
}

/// Two-branch attention for the current queries, merged by log-sum-exp.
///
/// `local` must end with the current chunk's own keys and values.
pub fn fused_attention(
    q_current: &Matrix,
    global: KvRows<'_>,
    local: KvRows<'_>,
    cfg: &EsaConfig,
) -> Result<FusedAttention> {
    cfg.validate()?;
    let mut table = RopeTable::new(cfg.rope)?;
    fused_attention_with(q_current, global, local, cfg, &mut table)
}

fn fused_attention_with(
    q: &Matrix,
    global: KvRows<'_>,
    local: KvRows<'_>,
    cfg: &EsaConfig,
    rope: &mut RopeTable,
) -> Result<FusedAttention> {
    if global.keys.is_empty() && local.keys.is_empty() {
        return Err(EsaError::config("both attention branches are empty"));
    }
    if q.cols() != cfg.d_model() {
        return Err(EsaError::dim(format!(
            "queries have {} columns, expected {}",
            q.cols(),
            cfg.d_model()
        )));
    }
    if local.keys.rows() < q.rows() {
        return Err(EsaError::Shape(format!(
            "local branch holds {} rows but {} current tokens",
            local.keys.rows(),
            q.rows()
        )));
    }
    let heads = cfg.heads;
    let scale = cfg.scale();
    let prior = local.keys.rows() - q.rows();

    let q_local = rope.encode_rows(q, |i| prior + i);
    let k_local = rope.encode_rows(local.keys, |j| j);
    let local_out = attention_branch(&q_local, &k_local, local.values, heads, true, scale)?;

    let q_global = rope.encode_rows(q, |_| cfg.global_position);
    let global_out = attention_branch(&q_global, global.keys, global.values, heads, false, scale)?;

    let fused = merge_branches(&local_out, &global_out)?;
    Ok(FusedAttention {
        fused,
        local: local_out,
        global: global_out,
    })
}

/// Weights each branch by `exp(lse_b) / Σ exp(lse)` per row and head.
fn merge_branches(
    a: &AttentionBranchOutput,
    b: &AttentionBranchOutput,
) -> Result<AttentionBranchOutput> {
    if a.output.rows() != b.output.rows()
        || a.output.cols() != b.output.cols()
        || a.heads != b.heads
    {
        return Err(EsaError::dim("branch outputs disagree in shape"));
    }
    let heads = a.heads;
    let rows = a.output.rows();
    let dv = a.output.cols() / heads;
    let mut output = Matrix::zeros(rows, a.output.cols());
    let mut lse = vec![f64::NEG_INFINITY; rows * heads];
    for i in 0..rows {
        for h in 0..heads {
            let (la, lb) = (a.lse_at(i, h), b.lse_at(i, h));
            let m = la.max(lb);
            if m == f64::NEG_INFINITY {
                continue;
            }
            let (wa, wb) = ((la - m).exp(), (lb - m).exp());
            let total = wa + wb;
            let (fa, fb) = ((wa / total) as f32, (wb / total) as f32);
            let span = h * dv..(h + 1) * dv;
            let (ra, rb) = (
                &a.output.row(i)[span.clone()],
                &b.output.row(i)[span.clone()],
            );
            for ((o, &x), &y) in output.row_mut(i)[span].iter_mut().zip(ra).zip(rb) {
                *o = fa * x + fb * y;
            }
            lse[i * heads + h] = m + total.ln();
        }
    }
    // Two exps, a sum, two divisions per (row, head) and 3 FLOPs per blended value.
    let flops = a.flops + b.flops + (rows * heads * 5 + rows * a.output.cols() * 3) as u64;
    Ok(AttentionBranchOutput {
        output,
        lse,
        heads,
        flops,
    })
}

/// Everything observable about one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub step: usize,
    /// Stream position of the first current token.
    pub position: usize,
    pub l_c: usize,
    /// Middle length seen by this step's selection.
    pub l_m: usize,
    pub selection: SelectionResult,
    /// Per `[row][head]`.
    pub local_lse: Vec<f64>,
    pub global_lse: Vec<f64>,
    pub output: Matrix,
    pub flop_count: u64,
    pub migration: MigrationEvent,
}

/// One layer of one sequence.
#[derive(Debug, Clone)]
pub struct EsaEngine {
    cfg: EsaConfig,
    pair: ProjectionPair,
    scoring: ScoringMode,
    cache: SegmentedKvCache,
    rope: RopeTable,
    steps: usize,
}

impl EsaEngine {
    pub fn new(cfg: EsaConfig, pair: ProjectionPair, scoring: ScoringMode) -> Result<Self> {
        cfg.validate()?;
        pair.validate()?;
        if pair.d_model() != cfg.d_model() || pair.d_reduced() != cfg.d_reduced {
            return Err(EsaError::dim(format!(
                "projection {}→{} does not match config {}→{}",
                pair.d_model(),
                pair.d_reduced(),
                cfg.d_model(),
                cfg.d_reduced
            )));
        }
        if scoring == ScoringMode::Compressed && cfg.head_mode == HeadMode::IndividualMax {
            return Err(EsaError::config(
                "per-head max voting needs full-dimension scoring; compressed scores are concatenated",
            ));
        }
        let cache = SegmentedKvCache::new(
            pair.layer_index,
            cfg.d_model(),
            cfg.d_reduced,
            cfg.initial_len,
            cfg.local_len,
        );
        Ok(EsaEngine {
            cfg,
            rope: RopeTable::new(cfg.rope)?,
            pair,
            scoring,
            cache,
            steps: 0,
        })
    }

    pub fn config(&self) -> &EsaConfig {
        &self.cfg
    }

    pub fn cache(&self) -> &SegmentedKvCache {
        &self.cache
    }

    pub fn projection(&self) -> &ProjectionPair {
        &self.pair
    }

    /// Appends rows to the cache without attending, e.g. to restore a prefix.
    pub fn ingest(&mut self, keys: &Matrix, values: &Matrix) -> Result<MigrationEvent> {
        self.cache
            .append_chunk(keys, values, &self.pair, &mut FlopCounter::new())
    }

    /// Processes up to `chunk` prompt tokens.
    pub fn prefill(
        &mut self,
        queries: &Matrix,
        keys: &Matrix,
        values: &Matrix,
    ) -> Result<StepTrace> {
        if queries.rows() == 0 || queries.rows() > self.cfg.chunk {
            return Err(EsaError::config(format!(
                "prefill chunk of {} rows, limit {}",
                queries.rows(),
                self.cfg.chunk
            )));
        }
        self.step(queries, keys, values)
    }

    /// Processes a single generated token.
    pub fn decode_step(
        &mut self,
        query: &Matrix,
        key: &Matrix,
        value: &Matrix,
    ) -> Result<StepTrace> {
        if query.rows() != 1 {
            return Err(EsaError::Shape(format!(
                "decode step takes one token, got {}",
                query.rows()
            )));
        }
        self.step(query, key, value)
    }

    /// Middle tokens chosen for `queries` against the current cache.
    pub fn select(&self, queries: &Matrix, flops: &mut FlopCounter) -> Result<SelectionResult> {
        let l_m = self.cache.middle_len();
        if self.cfg.top_k >= l_m {
            return Ok(SelectionResult::all(l_m));
        }
        if self.cfg.top_k == 0 {
            return Ok(SelectionResult::none());
        }
        let (raw, basis) = match (self.scoring, self.cfg.head_mode) {
            (ScoringMode::Compressed, _) => {
                let qc = self.pair.query.apply_rows(queries, flops)?;
                (
                    score_matrix(&qc, self.cache.middle_compressed(), flops)?,
                    ScoreBasis::Compressed,
                )
            }
            (ScoringMode::FullDim, HeadMode::UniformSum) => (
                score_matrix(queries, self.cache.middle_keys(), flops)?,
                ScoreBasis::FullDim,
            ),
            (ScoringMode::FullDim, HeadMode::IndividualMax) => {
                let m = head_max_score_matrix(queries, self.cache.middle_keys(), self.cfg.heads)?;
                flops.add(2 * (queries.rows() * l_m * queries.cols()) as u64);
                (m, ScoreBasis::FullDim)
            }
        };
        let scores = normalize_scores(&raw, basis, self.cfg.head_mode, flops)?;
        let smoothed = proximity_smooth(&scores, self.cfg.epsilon);
        Ok(select_top_k(&smoothed, self.cfg.top_k))
    }

    fn step(&mut self, q: &Matrix, k: &Matrix, v: &Matrix) -> Result<StepTrace> {
        let d = self.cfg.d_model();
        if q.cols() != d || k.cols() != d || v.cols() != d {
            return Err(EsaError::dim(format!(
                "step rows must be {d} wide, got {}/{}/{}",
                q.cols(),
                k.cols(),
                v.cols()
            )));
        }
        if q.rows() != k.rows() || q.rows() != v.rows() {
            return Err(EsaError::dim(
                "queries, keys and values differ in row count",
            ));
        }
        let mut flops = FlopCounter::new();
        let l_m = self.cache.middle_len();
        let position = self.cache.total_appended();
        let selection = self.select(q, &mut flops)?;

        let gathered = self.cache.gather_selected(&selection)?;
        let mut local_keys = gathered.local_keys;
        let mut local_values = gathered.local_values;
        local_keys.append(k)?;
        local_values.append(v)?;

        let attn = fused_attention_with(
            q,
            KvRows {
                keys: &gathered.global_keys,
                values: &gathered.global_values,
            },
            KvRows {
                keys: &local_keys,
                values: &local_values,
            },
            &self.cfg,
            &mut self.rope,
        )?;
        flops.add(attn.fused.flops);

        let migration = self.cache.append_chunk(k, v, &self.pair, &mut flops)?;
        let trace = StepTrace {
            step: self.steps,
            position,
            l_c: q.rows(),
            l_m,
            selection,
            local_lse: attn.local.lse,
            global_lse: attn.global.lse,
            output: attn.fused.output,
            flop_count: flops.total(),
            migration,
        };
        self.steps += 1;
        Ok(trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    fn tiny_cfg() -> EsaConfig {
        EsaConfig {
            heads: 2,
            head_dim: 4,
            d_reduced: 8,
            initial_len: 2,
            local_len: 4,
            top_k: 3,
            epsilon: 0,
            chunk: 4,
            global_position: 4,
            rope: RopeParams::with_default_base(4).unwrap(),
            head_mode: HeadMode::UniformSum,
        }
    }

    #[test]
    fn two_element_fusion_identity() {
        // One head of width 2, one key per branch; rope at positions 0 is the
        // identity for local (query pos 0, key pos 0) so logits are plain dots.
        let cfg = EsaConfig {
            heads: 1,
            head_dim: 2,
            d_reduced: 1,
            global_position: 0,
            rope: RopeParams::with_default_base(2).unwrap(),
            ..tiny_cfg()
        };
        let q = Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let gk = Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let gv = Matrix::from_vec(1, 2, vec![2.0, 0.0]).unwrap();
        let lk = Matrix::from_vec(1, 2, vec![3.0, -1.0]).unwrap();
        let lv = Matrix::from_vec(1, 2, vec![0.0, 4.0]).unwrap();
        let out = fused_attention(
            &q,
            KvRows {
                keys: &gk,
                values: &gv,
            },
            KvRows {
                keys: &lk,
                values: &lv,
            },
            &cfg,
        )
        .unwrap();
        assert_eq!(out.fused.output.row(0), &[1.0, 2.0]);
        assert!((out.fused.lse[0] - 2f64.ln()).abs() < 1e-12);

        // Unequal logits a, b: fused = (e^a v_l + e^b v_g) / (e^a + e^b).
        let q = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let out = fused_attention(
            &q,
            KvRows {
                keys: &gk,
                values: &gv,
            },
            KvRows {
                keys: &lk,
                values: &lv,
            },
            &cfg,
        )
        .unwrap();
        let s = cfg.scale() as f64;
        let (a, b) = ((3.0 * s).exp(), (1.0 * s).exp());
        let want = [(b * 2.0) / (a + b), (a * 4.0) / (a + b)];
        for (g, w) in out.fused.output.row(0).iter().zip(want) {
            assert!((*g as f64 - w).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_global_passes_local_through() {
        let cfg = tiny_cfg();
        let mut rng = seeded_rng(1);
        let q = Matrix::random_normal(2, 8, 1.0, &mut rng);
        let lk = Matrix::random_normal(5, 8, 1.0, &mut rng);
        let lv = Matrix::random_normal(5, 8, 1.0, &mut rng);
        let empty = Matrix::empty(8);
        let out = fused_attention(
            &q,
            KvRows {
                keys: &empty,
                values: &empty,
            },
            KvRows {
                keys: &lk,
                values: &lv,
            },
            &cfg,
        )
        .unwrap();
        assert_eq!(out.fused.output, out.local.output);
    }

    #[test]
    fn both_branches_empty_is_config_error() {
        let cfg = tiny_cfg();
        let empty = Matrix::empty(8);
        let q = Matrix::zeros(0, 8);
        let err = fused_attention(
            &q,
            KvRows {
                keys: &empty,
                values: &empty,
            },
            KvRows {
                keys: &empty,
                values: &empty,
            },
            &cfg,
        );
        assert!(matches!(err, Err(EsaError::Config(_))));
    }

    #[test]
    fn compressed_individual_max_is_rejected() {
        let cfg = EsaConfig {
            head_mode: HeadMode::IndividualMax,
            ..tiny_cfg()
        };
        let pair = ProjectionPair::identity(0, 8);
        assert!(EsaEngine::new(cfg, pair.clone(), ScoringMode::Compressed).is_err());
        assert!(EsaEngine::new(cfg, pair, ScoringMode::FullDim).is_ok());
    }

    #[test]
    fn prefill_rejects_oversized_chunk() {
        let mut e = EsaEngine::new(
            tiny_cfg(),
            ProjectionPair::identity(0, 8),
            ScoringMode::Compressed,
        )
        .unwrap();
        let m = Matrix::zeros(5, 8);
        assert!(matches!(e.prefill(&m, &m, &m), Err(EsaError::Config(_))));
    }

    #[test]
    fn first_chunk_sees_no_middle() {
        let mut e = EsaEngine::new(
            tiny_cfg(),
            ProjectionPair::identity(0, 8),
            ScoringMode::Compressed,
        )
        .unwrap();
        let mut rng = seeded_rng(2);
        let q = Matrix::random_normal(3, 8, 1.0, &mut rng);
        let k = Matrix::random_normal(3, 8, 1.0, &mut rng);
        let v = Matrix::random_normal(3, 8, 1.0, &mut rng);
        let t = e.prefill(&q, &k, &v).unwrap();
        assert!(t.selection.indices.is_empty());
        assert_eq!(t.l_m, 0);
        // Causal self-attention over the chunk only.
        let mut table = RopeTable::new(tiny_cfg().rope).unwrap();
        let qr = table.encode_rows(&q, |i| i);
        let kr = table.encode_rows(&k, |j| j);
        let want = attention_branch(&qr, &kr, &v, 2, true, tiny_cfg().scale()).unwrap();
        assert!(t.output.max_abs_diff(&want.output) < 1e-6);
        assert!(t.flop_count > 0);
    }
}
