//! The six subcommands as library functions. Each writes its artifacts under
//! an output directory and also returns them for callers that want the
//! numbers directly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use esa_core::analysis::{
    cache_overhead_ratio, esa_flops, full_attention_flops, reduction_ratio_asymptotic,
    reduction_ratio_exact, CostModel,
};
use esa_core::compression::{
    pca_projections, read_calibration, read_projection, recall_at_k, train_projections,
    write_calibration, write_projection,
};
use esa_core::engine::{full_attention_oracle, planted_needle_recall, NeedleSpec};
use esa_core::{EsaConfig, EsaEngine, EsaError, Matrix, ProjectionPair, ScoringMode, TrainReport};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, RunMode};
use crate::toy::ToyModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RecallMode {
    Learned,
    Pca,
}

impl RecallMode {
    pub fn name(self) -> &'static str {
        match self {
            RecallMode::Learned => "learned",
            RecallMode::Pca => "pca",
        }
    }
}

pub fn calibration_path(dir: &Path, layer: usize) -> PathBuf {
    dir.join(format!("layer_{layer}.cal"))
}

pub fn evaluation_path(dir: &Path, layer: usize) -> PathBuf {
    dir.join(format!("layer_{layer}.eval.cal"))
}

pub fn projection_path(dir: &Path, layer: usize) -> PathBuf {
    dir.join(format!("layer_{layer}.proj"))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_csv(path: &Path, hash: &str, header: &str, rows: &[String]) -> anyhow::Result<()> {
    let mut out = format!("# config_hash={hash}\n{header}\n");
    for r in rows {
        out.push_str(r);
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// Runs `f` once per layer on scoped threads, keeping layer order.
fn per_layer<T: Send>(
    layers: usize,
    f: impl Fn(usize) -> anyhow::Result<T> + Sync,
) -> anyhow::Result<Vec<T>> {
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..layers)
            .map(|l| {
                let f = &f;
                s.spawn(move || f(l))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("layer worker panicked"))
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub layer: usize,
    pub calibration: String,
    pub evaluation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub model_seed: u64,
    pub corpus_seed: u64,
    pub calib_tokens: usize,
    pub d_model: usize,
    /// Rows of each evaluation dump and where its queries start.
    pub eval_rows: usize,
    pub eval_query_offset: usize,
    pub corpus: String,
    pub files: Vec<ManifestEntry>,
}

/// Writes per-layer calibration dumps (positions `0..N`) and evaluation
/// dumps (the recall key range) plus a manifest.
pub fn calibrate(cfg: &ExperimentConfig, dir: &Path) -> anyhow::Result<Manifest> {
    cfg.validate()?;
    let r = &cfg.recall;
    if r.eval_start < r.key_start {
        return Err(
            EsaError::Config("evaluation queries start before the candidate keys".into()).into(),
        );
    }
    create_dir(dir)?;
    let model = ToyModel::new(&cfg.model);
    let eval_rows = r.eval_start + r.eval_len - r.key_start;
    let files = per_layer(cfg.model.layers, |layer| {
        let calib = model.calibration(layer, &cfg.corpus, 0, cfg.calib_tokens)?;
        write_calibration(&calibration_path(dir, layer), &calib)?;
        let eval = model.calibration(layer, &cfg.corpus, r.key_start, eval_rows)?;
        write_calibration(&evaluation_path(dir, layer), &eval)?;
        Ok(ManifestEntry {
            layer,
            calibration: format!("layer_{layer}.cal"),
            evaluation: format!("layer_{layer}.eval.cal"),
        })
    })?;
    let manifest = Manifest {
        config_hash: cfg.hash(),
        model_seed: cfg.model.seed,
        corpus_seed: cfg.corpus.seed,
        calib_tokens: cfg.calib_tokens,
        d_model: cfg.model.d_model(),
        eval_rows,
        eval_query_offset: r.eval_start - r.key_start,
        corpus: format!(
            "seeded synthetic stream: vocabulary {}, {} motifs of {} tokens at rate {}, jitter {}",
            cfg.model.vocabulary,
            cfg.corpus.motifs,
            cfg.corpus.motif_len,
            cfg.corpus.motif_rate,
            cfg.corpus.jitter
        ),
        files,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrainReport {
    pub layer: usize,
    #[serde(flatten)]
    pub report: TrainReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub d_reduced: usize,
    pub layers: Vec<LayerTrainReport>,
}

/// Trains one projection pair per calibration dump.
pub fn train(cfg: &ExperimentConfig, dir: &Path) -> anyhow::Result<TrainSummary> {
    cfg.validate()?;
    let layers = per_layer(cfg.model.layers, |layer| {
        let calib = read_calibration(&calibration_path(dir, layer))?;
        if calib.d_model() != cfg.esa.d_model() {
            return Err(EsaError::Format {
                path: calibration_path(dir, layer).display().to_string(),
                reason: format!(
                    "dump width {} but config expects {}",
                    calib.d_model(),
                    cfg.esa.d_model()
                ),
            }
            .into());
        }
        let hyper = esa_core::TrainHyper {
            seed: cfg.train.seed.wrapping_add(layer as u64),
            ..cfg.train
        };
        let (pair, report) = train_projections(&calib, cfg.esa.d_reduced, &hyper)?;
        write_projection(&projection_path(dir, layer), &pair)?;
        Ok(LayerTrainReport { layer, report })
    })?;
    let summary = TrainSummary {
        config_hash: cfg.hash(),
        d_reduced: cfg.esa.d_reduced,
        layers,
    };
    write_json(&dir.join("train_report.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub layer: usize,
    pub mode: RecallMode,
    pub k: usize,
    pub recall: f64,
}

/// Recall@k of compressed scoring on every layer's evaluation slice.
pub fn eval_recall(
    cfg: &ExperimentConfig,
    dir: &Path,
    mode: RecallMode,
    k: usize,
) -> anyhow::Result<Vec<RecallRow>> {
    cfg.validate()?;
    let offset = cfg.recall.eval_start - cfg.recall.key_start;
    let rows = per_layer(cfg.model.layers, |layer| {
        let eval = read_calibration(&evaluation_path(dir, layer))?;
        if k == 0 || k > eval.len() {
            return Err(EsaError::Config(format!(
                "k = {k} but the evaluation slice holds {} keys",
                eval.len()
            ))
            .into());
        }
        if offset >= eval.len() {
            return Err(EsaError::Config("evaluation slice has no queries".into()).into());
        }
        let pair = match mode {
            RecallMode::Learned => read_projection(&projection_path(dir, layer), layer)?,
            RecallMode::Pca => {
                let calib = read_calibration(&calibration_path(dir, layer))?;
                pca_projections(&calib, cfg.esa.d_reduced, cfg.recall.pca_mode)?.0
            }
        };
        let query_rows: Vec<usize> = (offset..eval.len()).collect();
        let queries = eval.queries.select_rows(&query_rows)?;
        let report = recall_at_k(&queries, &eval.keys, &pair, k)?;
        Ok(RecallRow {
            layer,
            mode,
            k,
            recall: report.mean,
        })
    })?;
    let lines: Vec<String> = rows
        .iter()
        .map(|r| format!("{},{},{},{:.6}", r.layer, r.mode.name(), r.k, r.recall))
        .collect();
    write_csv(
        &dir.join(format!("recall_{}_k{k}.csv", mode.name())),
        &cfg.hash(),
        "layer,mode,k,recall",
        &lines,
    )?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: usize,
    pub position: usize,
    pub l_c: usize,
    pub l_m: usize,
    pub d_reduced: usize,
    pub selection: Vec<usize>,
    /// First 16 hex digits of SHA-256 over the output's little-endian bytes.
    pub output_digest: String,
    pub output_sum: f64,
    pub flop_count: u64,
    /// Cost-model prediction for this step.
    pub model_flops: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_deviation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub mode: RunMode,
    pub layer: usize,
    pub projection_source: String,
    pub steps: usize,
    pub warm_tokens: usize,
    pub final_l_m: usize,
    pub total_flops: u64,
    pub total_model_flops: u64,
    /// Largest per-step |counted - model| / model.
    pub max_flop_rel_error: f64,
    /// Mean absolute elementwise output difference from the oracle.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_abs_oracle_deviation: Option<f64>,
}

fn digest(m: &Matrix) -> String {
    let mut h = Sha256::new();
    for x in m.data() {
        h.update(x.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

fn mean_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    let n = a.data().len().max(1);
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .sum::<f64>()
        / n as f64
}

/// Engine configuration, projection and its provenance for a run mode.
fn engine_setup(
    cfg: &ExperimentConfig,
    mode: RunMode,
    dir: &Path,
) -> anyhow::Result<(EsaConfig, ProjectionPair, ScoringMode, String)> {
    let layer = cfg.run.layer;
    let d = cfg.esa.d_model();
    match mode {
        RunMode::IdentityEsa | RunMode::Oracle => {
            let esa = EsaConfig {
                d_reduced: d,
                ..cfg.esa
            };
            let scoring = if mode == RunMode::Oracle {
                ScoringMode::FullDim
            } else {
                ScoringMode::Compressed
            };
            Ok((
                esa,
                ProjectionPair::identity(layer, d),
                scoring,
                "identity".into(),
            ))
        }
        RunMode::Esa | RunMode::FullDim => {
            let path = projection_path(dir, layer);
            let (pair, source) = if path.exists() {
                (read_projection(&path, layer)?, path.display().to_string())
            } else {
                (
                    ProjectionPair::random(
                        layer,
                        d,
                        cfg.esa.d_reduced,
                        cfg.train.seed.wrapping_add(layer as u64),
                    ),
                    "untrained initialization".to_string(),
                )
            };
            let scoring = if mode == RunMode::Esa {
                ScoringMode::Compressed
            } else {
                ScoringMode::FullDim
            };
            Ok((cfg.esa, pair, scoring, source))
        }
    }
}

/// Streams one toy layer through the engine: warm-up ingestion, chunked
/// prefill, then single-token decode.
pub fn run(
    cfg: &ExperimentConfig,
    mode: RunMode,
    dir: &Path,
) -> anyhow::Result<(Vec<RunRecord>, RunSummary)> {
    cfg.validate()?;
    let opts = &cfg.run;
    let attended = opts.prefill_tokens + opts.decode_tokens;
    if attended == 0 {
        return Err(
            EsaError::Config("run needs at least one prefill or decode token".into()).into(),
        );
    }
    create_dir(dir)?;
    let (esa, pair, scoring, projection_source) = engine_setup(cfg, mode, dir)?;
    let model = ToyModel::new(&cfg.model);
    let total = opts.warm_tokens + attended;
    let s = model.layer_stream(opts.layer, &cfg.corpus, 0, total);
    let rows = |m: &Matrix, a: usize, b: usize| m.select_rows(&(a..b).collect::<Vec<_>>());

    let mut engine = EsaEngine::new(esa, pair, scoring)?;
    if opts.warm_tokens > 0 {
        engine.ingest(
            &rows(&s.keys, 0, opts.warm_tokens)?,
            &rows(&s.values, 0, opts.warm_tokens)?,
        )?;
    }
    let compare = opts.compare_oracle || mode == RunMode::Oracle;
    let mut records = Vec::new();
    let mut deviation_sum = 0.0;
    let mut start = opts.warm_tokens;
    let prefill_end = opts.warm_tokens + opts.prefill_tokens;
    while start < total {
        let end = if start < prefill_end {
            (start + esa.chunk).min(prefill_end)
        } else {
            start + 1
        };
        let (q, k, v) = (
            rows(&s.queries, start, end)?,
            rows(&s.keys, start, end)?,
            rows(&s.values, start, end)?,
        );
        let oracle = if compare {
            Some(full_attention_oracle(engine.cache(), &q, &k, &v, &esa)?)
        } else {
            None
        };
        let trace = if end - start == 1 && start >= prefill_end {
            engine.decode_step(&q, &k, &v)?
        } else {
            engine.prefill(&q, &k, &v)?
        };
        let cost = CostModel::from_config(&esa, trace.l_m, trace.l_c);
        let (output, flop_count, model_flops) = match (mode, oracle.as_ref()) {
            (RunMode::Oracle, Some(o)) => (
                o.clone(),
                full_attention_flops(&cost),
                full_attention_flops(&cost),
            ),
            _ => (trace.output.clone(), trace.flop_count, esa_flops(&cost)),
        };
        let oracle_deviation = match (mode, &oracle) {
            (RunMode::Oracle, _) | (_, None) => None,
            (_, Some(o)) => Some(mean_abs_diff(&trace.output, o)),
        };
        deviation_sum += oracle_deviation.unwrap_or(0.0);
        records.push(RunRecord {
            step: trace.step,
            position: trace.position,
            l_c: trace.l_c,
            l_m: trace.l_m,
            d_reduced: esa.d_reduced,
            selection: trace.selection.indices.clone(),
            output_digest: digest(&output),
            output_sum: output.data().iter().map(|x| *x as f64).sum(),
            flop_count,
            model_flops,
            oracle_deviation,
        });
        start = end;
    }

    let name = mode_name(mode);
    let trace_path = dir.join(format!("run_{name}.trace.jsonl"));
    let mut f = fs::File::create(&trace_path)
        .with_context(|| format!("writing {}", trace_path.display()))?;
    writeln!(f, "{{\"config_hash\":\"{}\"}}", cfg.hash())?;
    for r in &records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }

    let summary = RunSummary {
        config_hash: cfg.hash(),
        mode,
        layer: opts.layer,
        projection_source,
        steps: records.len(),
        warm_tokens: opts.warm_tokens,
        final_l_m: engine.cache().middle_len(),
        total_flops: records.iter().map(|r| r.flop_count).sum(),
        total_model_flops: records.iter().map(|r| r.model_flops).sum(),
        max_flop_rel_error: records
            .iter()
            .map(|r| rel_error(r.flop_count, r.model_flops))
            .fold(0.0, f64::max),
        mean_abs_oracle_deviation: (compare && mode != RunMode::Oracle)
            .then(|| deviation_sum / records.len() as f64),
    };
    write_json(&dir.join(format!("run_{name}.summary.json")), &summary)?;
    Ok((records, summary))
}

pub fn mode_name(mode: RunMode) -> &'static str {
    match mode {
        RunMode::Esa => "esa",
        RunMode::Oracle => "oracle",
        RunMode::IdentityEsa => "identity-esa",
        RunMode::FullDim => "full-dim",
    }
}

fn rel_error(counted: u64, model: u64) -> f64 {
    if model == 0 {
        return if counted == 0 { 0.0 } else { f64::INFINITY };
    }
    (counted as f64 - model as f64).abs() / model as f64
}

/// Reads a trace written by [`run`], skipping the header line.
pub fn read_trace(path: &Path) -> anyhow::Result<Vec<RunRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                EsaError::Format {
                    path: path.display().to_string(),
                    reason: format!("trace line {}: {e}", i + 2),
                }
                .into()
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleRow {
    pub epsilon: usize,
    pub k: usize,
    pub recall: f64,
}

/// Planted positions spread evenly over the middle segment at probe time.
pub fn default_needle_positions(esa: &EsaConfig, stream_len: usize, n: usize) -> Vec<usize> {
    let lo = esa.initial_len;
    let hi = stream_len.saturating_sub(esa.local_len);
    if hi <= lo {
        return Vec::new();
    }
    (0..n)
        .map(|i| lo + (i * 2 + 1) * (hi - lo) / (2 * n))
        .collect()
}

/// Sweeps radius and budget over the same planted stream, scoring with the
/// full-dimension queries and keys.
pub fn needle(cfg: &ExperimentConfig, dir: &Path) -> anyhow::Result<Vec<NeedleRow>> {
    cfg.validate()?;
    let opts = &cfg.needle;
    if opts.stream_len == 0 {
        return Err(EsaError::Config("needle stream is empty".into()).into());
    }
    create_dir(dir)?;
    let positions = if opts.positions.is_empty() {
        default_needle_positions(&cfg.esa, opts.stream_len, opts.n_planted)
    } else {
        opts.positions.clone()
    };
    let d = cfg.esa.d_model();
    let spec = NeedleSpec {
        stream_len: opts.stream_len,
        planted: positions,
        margin: opts.margin,
        seed: cfg.corpus.seed,
    };
    let mut rows = Vec::new();
    for &epsilon in &opts.epsilons {
        for &k in &opts.ks {
            let esa = EsaConfig {
                epsilon,
                top_k: k,
                d_reduced: d,
                ..cfg.esa
            };
            let out = planted_needle_recall(
                &esa,
                &spec,
                ProjectionPair::identity(0, d),
                ScoringMode::FullDim,
            )?;
            rows.push(NeedleRow {
                epsilon,
                k,
                recall: out.recall,
            });
        }
    }
    let lines: Vec<String> = rows
        .iter()
        .map(|r| format!("{},{},{:.6}", r.epsilon, r.k, r.recall))
        .collect();
    write_csv(
        &dir.join("needle.csv"),
        &cfg.hash(),
        "epsilon,k,recall",
        &lines,
    )?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub l_m: u64,
    pub full_flops: u64,
    pub esa_flops: u64,
    pub exact_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconciliation {
    pub steps: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub config_hash: String,
    pub asymptotic_ratio: f64,
    pub cache_overhead: f64,
    pub sweep: Vec<SweepPoint>,
    pub monotone: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reconciliation: Option<Reconciliation>,
}

/// Cost-model figures for the configured attention, optionally reconciled
/// against the FLOPs counted in a run trace.
pub fn analyze(
    cfg: &ExperimentConfig,
    trace: Option<&Path>,
    dir: &Path,
) -> anyhow::Result<AnalysisReport> {
    cfg.validate()?;
    create_dir(dir)?;
    let sweep: Vec<SweepPoint> = [10_000u64, 100_000, 1_000_000, 10_000_000]
        .iter()
        .map(|&l_m| {
            let m = CostModel {
                l_m,
                ..CostModel::from_config(&cfg.esa, 0, 1)
            };
            SweepPoint {
                l_m,
                full_flops: full_attention_flops(&m),
                esa_flops: esa_flops(&m),
                exact_ratio: reduction_ratio_exact(&m),
            }
        })
        .collect();
    let base = CostModel::from_config(&cfg.esa, 0, 1);
    let asymptotic = reduction_ratio_asymptotic(&base);
    let monotone = sweep
        .windows(2)
        .all(|w| w[1].exact_ratio < w[0].exact_ratio && w[1].exact_ratio > asymptotic);
    let reconciliation = match trace {
        None => None,
        Some(path) => {
            let records = read_trace(path)?;
            let errors: Vec<f64> = records
                .iter()
                .map(|r| {
                    let esa = EsaConfig {
                        d_reduced: r.d_reduced,
                        ..cfg.esa
                    };
                    rel_error(
                        r.flop_count,
                        esa_flops(&CostModel::from_config(&esa, r.l_m, r.l_c)),
                    )
                })
                .collect();
            Some(Reconciliation {
                steps: errors.len(),
                max_rel_error: errors.iter().cloned().fold(0.0, f64::max),
                mean_rel_error: errors.iter().sum::<f64>() / errors.len().max(1) as f64,
            })
        }
    };
    let report = AnalysisReport {
        config_hash: cfg.hash(),
        asymptotic_ratio: asymptotic,
        cache_overhead: cache_overhead_ratio(&base)?,
        sweep,
        monotone,
        reconciliation,
    };
    write_json(&dir.join("analysis.json"), &report)?;
    Ok(report)
}
