use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use esa_cli::commands::{self, RecallMode};
use esa_cli::{exit_code, ExperimentConfig, Preset, RunMode};

#[derive(Parser)]
#[command(
    name = "esa",
    version,
    about = "Selective attention experiments on a seeded toy model"
)]
struct Cli {
    /// JSON experiment config; overrides --preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "desk")]
    preset: Preset,
    /// Reseeds the toy model, corpus and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "esa-out")]
    out_dir: PathBuf,
    /// Selection budget (also the recall k and the needle sweep budget).
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Proximity radius (also the needle sweep radius).
    #[arg(long, global = true)]
    epsilon: Option<usize>,
    /// Compressed width d'.
    #[arg(long, global = true)]
    dprime: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write per-layer calibration and evaluation dumps.
    Calibrate,
    /// Train projections from the calibration dumps.
    Train,
    /// Per-layer recall@k of compressed scoring.
    EvalRecall {
        #[arg(long, value_enum, default_value = "learned")]
        mode: RecallMode,
    },
    /// Stream one layer through the engine.
    Run {
        #[arg(long, value_enum, default_value = "esa")]
        mode: RunMode,
        #[arg(long)]
        warm_tokens: Option<usize>,
        #[arg(long)]
        prefill_tokens: Option<usize>,
        #[arg(long)]
        decode_tokens: Option<usize>,
        /// Evaluate the full-attention oracle alongside every step.
        #[arg(long)]
        compare_oracle: bool,
    },
    /// Planted-needle recall over the radius and budget sweep.
    Needle,
    /// Cost-model report, optionally reconciled against a run trace.
    Analyze {
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Print the resolved config as JSON.
    ShowConfig,
}

fn resolve(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::preset(cli.preset),
    };
    if let Some(seed) = cli.seed {
        cfg.model.seed = seed;
        cfg.corpus.seed = seed.wrapping_add(1);
        cfg.train.seed = seed;
    }
    if let Some(k) = cli.k {
        cfg.esa.top_k = k;
        cfg.recall.k = k;
        cfg.needle.ks = vec![k];
    }
    if let Some(e) = cli.epsilon {
        cfg.esa.epsilon = e;
        cfg.needle.epsilons = vec![e];
    }
    if let Some(d) = cli.dprime {
        cfg.esa.d_reduced = d;
    }
    if let Command::Run {
        warm_tokens,
        prefill_tokens,
        decode_tokens,
        compare_oracle,
        ..
    } = &cli.command
    {
        cfg.run.warm_tokens = warm_tokens.unwrap_or(cfg.run.warm_tokens);
        cfg.run.prefill_tokens = prefill_tokens.unwrap_or(cfg.run.prefill_tokens);
        cfg.run.decode_tokens = decode_tokens.unwrap_or(cfg.run.decode_tokens);
        cfg.run.compare_oracle |= compare_oracle;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> anyhow::Result<()> {
    let cfg = resolve(cli)?;
    let dir = &cli.out_dir;
    match &cli.command {
        Command::Calibrate => {
            let m = commands::calibrate(&cfg, dir)?;
            println!(
                "wrote {} layers of {} tokens to {}",
                m.files.len(),
                m.calib_tokens,
                dir.display()
            );
        }
        Command::Train => {
            for l in commands::train(&cfg, dir)?.layers {
                println!(
                    "layer {}: loss {:.4e} -> {:.4e} over {} steps",
                    l.layer, l.report.initial_loss, l.report.final_loss, l.report.steps
                );
            }
        }
        Command::EvalRecall { mode } => {
            println!("layer,mode,k,recall");
            for r in commands::eval_recall(&cfg, dir, *mode, cfg.recall.k)? {
                println!("{},{},{},{:.4}", r.layer, r.mode.name(), r.k, r.recall);
            }
        }
        Command::Run { mode, .. } => {
            let (_, s) = commands::run(&cfg, *mode, dir)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Needle => {
            println!("epsilon,k,recall");
            for r in commands::needle(&cfg, dir)? {
                println!("{},{},{:.4}", r.epsilon, r.k, r.recall);
            }
        }
        Command::Analyze { trace } => {
            let r = commands::analyze(&cfg, trace.as_deref(), dir)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::ShowConfig => println!("{}", serde_json::to_string_pretty(&cfg)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
