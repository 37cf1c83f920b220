use std::path::Path;

use anyhow::Context;
use esa_core::compression::PcaMode;
use esa_core::{EsaConfig, EsaError, TrainHyper};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::toy::{CorpusSpec, ToyModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Paper,
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
#[value(rename_all = "kebab-case")]
pub enum RunMode {
    /// Compressed scoring with the layer's projection.
    Esa,
    /// Single softmax over every cached token.
    Oracle,
    /// Compressed scoring through identity maps (`d' = d_H`).
    IdentityEsa,
    /// Scoring with the full-dimension queries and keys.
    FullDim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallOptions {
    /// First position of the candidate keys; keys run to the end of the
    /// evaluation slice.
    pub key_start: usize,
    /// First position of the evaluation queries.
    pub eval_start: usize,
    pub eval_len: usize,
    pub k: usize,
    pub pca_mode: PcaMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub layer: usize,
    /// Tokens appended to the cache before the first attended step.
    pub warm_tokens: usize,
    /// Tokens processed by prefill steps after warm-up.
    pub prefill_tokens: usize,
    /// Single-token steps after prefill.
    pub decode_tokens: usize,
    /// Also evaluate the oracle each step and report the deviation.
    pub compare_oracle: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleOptions {
    pub n_planted: usize,
    /// Explicit planted positions; spread evenly over the middle when empty.
    pub positions: Vec<usize>,
    pub stream_len: usize,
    pub margin: f32,
    pub epsilons: Vec<usize>,
    pub ks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub esa: EsaConfig,
    pub model: ToyModelSpec,
    pub corpus: CorpusSpec,
    /// Calibration tokens per layer.
    pub calib_tokens: usize,
    pub train: TrainHyper,
    pub recall: RecallOptions,
    pub run: RunOptions,
    pub needle: NeedleOptions,
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    /// Four layers of `4 × 32`, `d' = 16`, 5000 calibration tokens.
    pub fn desk() -> Self {
        let esa = EsaConfig::desk();
        ExperimentConfig {
            esa,
            model: ToyModelSpec {
                layers: 4,
                heads: esa.heads,
                head_dim: esa.head_dim,
                vocabulary: 512,
                shared_rank: 8,
                shared_scale: 2.5,
                shared_decay: 0.9,
                nuisance_rank: 16,
                nuisance_std: 4.0,
                seed: 7,
            },
            corpus: CorpusSpec {
                motifs: 16,
                motif_len: 12,
                motif_rate: 0.05,
                jitter: 0.1,
                seed: 11,
            },
            calib_tokens: 5000,
            train: TrainHyper::default(),
            recall: RecallOptions {
                key_start: 5000,
                eval_start: 5000,
                eval_len: 2000,
                k: 200,
                pca_mode: PcaMode::PerSide,
            },
            run: RunOptions {
                layer: 0,
                warm_tokens: 0,
                prefill_tokens: 4096,
                decode_tokens: 64,
                compare_oracle: false,
            },
            needle: NeedleOptions {
                n_planted: 8,
                positions: Vec::new(),
                stream_len: 4096,
                margin: 4.0,
                epsilons: vec![0, 1, 3, 5],
                ks: vec![64],
            },
        }
    }

    /// 32 layers of `32 × 128`, `d' = 128`, 50k calibration tokens and the
    /// full-size segment lengths. Far too large to run on a desk.
    pub fn paper() -> Self {
        let esa = EsaConfig::paper();
        let desk = Self::desk();
        ExperimentConfig {
            esa,
            model: ToyModelSpec {
                layers: 32,
                heads: esa.heads,
                head_dim: esa.head_dim,
                vocabulary: 32_000,
                shared_rank: 64,
                nuisance_rank: 128,
                ..desk.model
            },
            calib_tokens: 50_000,
            recall: RecallOptions {
                key_start: 0,
                eval_start: 23_000,
                eval_len: 2_000,
                k: 2_000,
                ..desk.recall
            },
            run: RunOptions {
                prefill_tokens: 32_768,
                ..desk.run
            },
            needle: NeedleOptions {
                stream_len: 65_536,
                ks: vec![2_048],
                ..desk.needle
            },
            ..desk
        }
    }

    pub fn validate(&self) -> Result<(), EsaError> {
        self.esa.validate()?;
        if self.model.d_model() != self.esa.d_model() {
            return Err(EsaError::Config(format!(
                "toy model width {} differs from attention width {}",
                self.model.d_model(),
                self.esa.d_model()
            )));
        }
        if self.model.shared_rank + 2 * self.model.nuisance_rank > self.model.d_model() {
            return Err(EsaError::Config("toy subspaces do not fit in d_H".into()));
        }
        if self.model.vocabulary == 0 || self.model.layers == 0 {
            return Err(EsaError::Config(
                "toy model needs layers and a vocabulary".into(),
            ));
        }
        if self.run.layer >= self.model.layers {
            return Err(EsaError::Config(format!(
                "run layer {} out of {} layers",
                self.run.layer, self.model.layers
            )));
        }
        Ok(())
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| EsaError::Config(format!("{}: {e}", path.display())))
            .map_err(Into::into)
    }
}
