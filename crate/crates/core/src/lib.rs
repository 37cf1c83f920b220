//! Token-level selective attention for long-context inference.
//!
//! The preceding tokens of a sequence are split into an initial segment, a
//! growing middle segment and a local window. Each step scores the middle
//! tokens with low-dimensional query/key surrogates, widens salient tokens to
//! their neighbours, keeps the top-k, and attends to initial + selected +
//! local tokens in two position-encoded branches that are merged exactly.

pub mod analysis;
pub mod compression;
pub mod engine;
pub mod error;
pub mod kv_cache;
pub mod selection;
pub mod tensor;

pub use analysis::CostModel;
pub use compression::{CalibrationSet, LinearMap, ProjectionPair, TrainHyper, TrainReport};
pub use engine::{EsaConfig, EsaEngine, ScoringMode, StepTrace};
pub use error::{EsaError, Result};
pub use kv_cache::{MigrationEvent, SegmentedKvCache};
pub use selection::{HeadMode, ImportanceScores, SelectionResult};
pub use tensor::{AttentionBranchOutput, FlopCounter, Matrix, RopeParams};
