//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // -- embedding --
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    // -- evidence store --
    #[error("malformed item `{item_id}`: {reason}")]
    MalformedItem { item_id: String, reason: String },
    #[error("item `{item_id}` violates the partition of shard `{shard_id}`")]
    CrossScopeRejected { item_id: String, shard_id: String },
    #[error("duplicate item id `{0}`")]
    DuplicateId(String),
    #[error("unknown shard `{0}`")]
    UnknownShard(String),

    // -- routing --
    #[error("eligible shard set is empty")]
    EmptyEligibleSet,
    #[error("gold shard `{0}` is outside the eligible set")]
    GoldOutsideEligible(String),
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("training diverged at epoch {epoch}: {detail}")]
    TrainingDiverged { epoch: usize, detail: String },

    // -- working memory --
    #[error("unknown working entry `{0}`")]
    UnknownEntry(String),
    #[error("all {capacity} entries are pinned; cannot evict")]
    AllPinnedAtCapacity { capacity: usize },

    // -- skill library --
    #[error("cannot induce a skill from an empty trace")]
    EmptyTrace,
    #[error("trace cannot be canonicalized: {0}")]
    NonCanonicalizable(String),
    #[error("skill `{0}` has no validation tests")]
    NoTests(String),
    #[error("skill `{skill_id}` requires {requirement}, absent from the tool snapshot")]
    SnapshotMismatch { skill_id: String, requirement: String },
    #[error("missing slot binding `{0}`")]
    MissingSlot(String),
    #[error("tool `{0}` unavailable")]
    ToolUnavailable(String),
    #[error("skill step {step} failed: {reason}")]
    StepFailed { step: usize, reason: String },
    #[error("step counts must be >= 1")]
    ZeroSteps,
    #[error("unknown skill `{0}`")]
    UnknownSkill(String),

    // -- metrics & bench --
    #[error("no samples recorded")]
    NoSamples,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid budgets: {0}")]
    InvalidBudgets(String),

    // -- io --
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("config parse error: {0}")]
    TomlParse(#[from] toml::de::Error),
}
