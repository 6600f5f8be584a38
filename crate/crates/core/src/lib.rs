//! Budgeted tiered memory for agentic workloads.
//!
//! Three tiers sit behind one read path:
//!
//! - **Tier A** — bounded per-agent/session working memory with explicit
//!   promotion into Tier B.
//! - **Tier B** — evidence memory partitioned into family-typed shards
//!   (profile / observation / session), each with its own vector index.
//!   Reads enforce scope-before-routing: structured eligibility constraints
//!   mask ineligible shards before any scoring, then a learned router probes
//!   at most `b_probe` shards and merges shard-local results into a global
//!   top-K with an item-level scope post-filter.
//! - **Tier C** — a versioned skill library whose artifacts activate only
//!   after their deterministic tests pass; retrieval is budgeted and failed
//!   executions fall back to Tier B.
//!
//! Every read is governed by explicit budgets `(m_context, b_probe,
//! k_evidence, r_skills)` and reports a cost trace (probed shards, vectors
//! scanned, latency). The crate also ships the trainer for the shard router
//! and tier gate, a synthetic workload generator, and a benchmark harness
//! for recall-versus-scan sweeps.

pub mod bench;
pub mod config;
pub mod embed;
pub mod error;
pub mod gate;
pub mod index;
pub mod metrics;
pub mod router;
pub mod service;
pub mod skills;
pub mod store;
pub mod types;
pub mod working;
pub mod workload;

pub use config::{IndexKind, ServiceConfig};
pub use embed::{Embedder, Embedding, Featurizer, HashEmbedder, StructuredFeatures};
pub use error::{Error, Result};
pub use gate::{gate_decide, train_gate, GateModel};
pub use metrics::{MetricsCollector, RunLabels, RunStats};
pub use router::{
    baseline_route, masked_softmax, route_loss, score_shards, select_probes, train_router,
    BaselineKind, GoldShardSet, RouterModel, TrainConfig,
};
pub use service::{
    build_gate_dataset, build_router_dataset, ModelFile, ReadResult, RoutingStrategy,
    ShardMemoService,
};
pub use skills::{SkillArtifact, SkillLibrary, ToolSnapshot, ToolTrace};
pub use store::{EvidenceStore, IngestRecord, MemoryItem, ShardMap, ShardSummary};
pub use types::{
    scope_eval, Budgets, CostTrace, Family, FamilyFilter, GateDecision, IdFilter, ProbeMode,
    Request, ScopeKey, ScopePredicate,
};
pub use working::{WorkingEntry, WorkingMemory};
pub use workload::{generate_workload, WorkloadBundle, WorkloadConfig};
