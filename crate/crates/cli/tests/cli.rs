use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use esa_cli::commands::{self, RecallMode};
use esa_cli::{ExperimentConfig, RunMode};

/// Desk preset cut down to run in a second or two.
fn small() -> ExperimentConfig {
    let mut c = ExperimentConfig::desk();
    c.model.layers = 2;
    c.calib_tokens = 1024;
    c.train.epochs = 2;
    c.recall.key_start = 1024;
    c.recall.eval_start = 1024;
    c.recall.eval_len = 400;
    c.recall.k = 40;
    c.esa.local_len = 64;
    c.esa.global_position = 64;
    c.esa.top_k = 32;
    c.esa.chunk = 64;
    c.run.prefill_tokens = 512;
    c.run.decode_tokens = 8;
    c.needle.stream_len = 600;
    c.needle.ks = vec![16, 64];
    c
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

/// Compares against the pinned file; `UPDATE_GOLDEN=1` rewrites it.
fn check_golden(name: &str, actual: &str) {
    let path = golden(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, actual).unwrap();
        return;
    }
    let want = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, want, "{name} drifted from its golden copy");
}

#[test]
fn calibration_dumps_replay_byte_for_byte() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = small();
    let ma = commands::calibrate(&cfg, a.path()).unwrap();
    let mb = commands::calibrate(&cfg, b.path()).unwrap();
    assert_eq!(ma, mb);
    for e in &ma.files {
        for f in [&e.calibration, &e.evaluation] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap()
            );
        }
    }
    let first = fs::read(a.path().join("layer_0.cal")).unwrap();
    assert_eq!(&first[..8], b"ESACAL1\0");
    assert_eq!(first.len(), 8 + 12 + 2 * 1024 * 128 * 4);
}

#[test]
fn pipeline_outputs_match_golden_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    commands::calibrate(&cfg, dir.path()).unwrap();
    commands::train(&cfg, dir.path()).unwrap();
    commands::eval_recall(&cfg, dir.path(), RecallMode::Learned, cfg.recall.k).unwrap();
    commands::eval_recall(&cfg, dir.path(), RecallMode::Pca, cfg.recall.k).unwrap();
    commands::needle(&cfg, dir.path()).unwrap();
    commands::analyze(&cfg, None, dir.path()).unwrap();
    for name in [
        "recall_learned_k40.csv",
        "recall_pca_k40.csv",
        "needle.csv",
        "analysis.json",
    ] {
        let text = fs::read_to_string(dir.path().join(name)).unwrap();
        assert!(text.contains(&cfg.hash()), "{name} lacks the config hash");
        check_golden(name, &text);
    }
}

#[test]
fn runs_are_deterministic_and_reconcile() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = small();
    let (ra, sa) = commands::run(&cfg, RunMode::Esa, a.path()).unwrap();
    let (rb, sb) = commands::run(&cfg, RunMode::Esa, b.path()).unwrap();
    assert_eq!((ra.clone(), sa.clone()), (rb, sb));
    assert_eq!(ra.len(), 8 + 8);
    let trace = a.path().join("run_esa.trace.jsonl");
    assert_eq!(
        fs::read(&trace).unwrap(),
        fs::read(b.path().join("run_esa.trace.jsonl")).unwrap()
    );
    assert_eq!(commands::read_trace(&trace).unwrap(), ra);

    // once the local window is full the counter follows the cost model
    let report = commands::analyze(&cfg, Some(&trace), a.path()).unwrap();
    let rec = report.reconciliation.unwrap();
    assert_eq!(rec.steps, ra.len());
    for r in ra
        .iter()
        .filter(|r| r.position >= cfg.esa.initial_len + cfg.esa.local_len)
    {
        let rel = (r.flop_count as f64 - r.model_flops as f64).abs() / r.model_flops as f64;
        assert!(rel < 0.05, "step {}: {rel}", r.step);
    }
}

#[test]
fn identity_run_selects_like_full_dimension_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let (a, _) = commands::run(&cfg, RunMode::IdentityEsa, dir.path()).unwrap();
    let (b, _) = commands::run(&cfg, RunMode::FullDim, dir.path()).unwrap();
    assert!(a.iter().any(|r| r.l_m > cfg.esa.top_k));
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.selection, y.selection);
    }
}

#[test]
fn saturated_run_matches_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.esa.top_k = 100_000;
    cfg.run.prefill_tokens = 256;
    cfg.run.compare_oracle = true;
    let (records, summary) = commands::run(&cfg, RunMode::FullDim, dir.path()).unwrap();
    assert!(summary.mean_abs_oracle_deviation.unwrap() < 1e-5);
    assert!(records.iter().all(|r| r.oracle_deviation.unwrap() < 1e-5));
    let (oracle, _) = commands::run(&cfg, RunMode::Oracle, dir.path()).unwrap();
    assert_eq!(oracle.len(), records.len());
}

fn esa(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_esa"))
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();

    let cfg_path = dir.path().join("small.json");
    fs::write(&cfg_path, serde_json::to_string(&small()).unwrap()).unwrap();
    let c = cfg_path.to_str().unwrap();
    assert_eq!(esa(&["--config", c, "--out-dir", d, "calibrate"]).0, 0);

    let (code, _) = esa(&["--config", c, "--out-dir", d, "--dprime", "0", "train"]);
    assert_eq!(code, 2);
    let (code, _) = esa(&[
        "--config",
        c,
        "--out-dir",
        d,
        "--k",
        "5000",
        "eval-recall",
        "--mode",
        "pca",
    ]);
    assert_eq!(code, 2);

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"esa\": 3}").unwrap();
    assert_eq!(
        esa(&["--config", bad.to_str().unwrap(), "show-config"]).0,
        2
    );

    let dump = dir.path().join("layer_1.cal");
    let mut bytes = fs::read(&dump).unwrap();
    bytes[0] = b'X';
    fs::write(&dump, bytes).unwrap();
    let (code, stderr) = esa(&["--config", c, "--out-dir", d, "train"]);
    assert_eq!(code, 3);
    assert!(stderr.contains("layer_1.cal"), "{stderr}");
}
