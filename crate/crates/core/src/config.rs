//! Service configuration: feature dimensions, router defaults, budgets,
//! seeds, and index selection. Loadable from a TOML file with sections
//! matching the struct layout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Budgets;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Dims {
    /// Embedding dimension D.
    pub d: usize,
    /// Structured feature dimension F.
    pub f: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims { d: 64, f: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterDefaults {
    /// Cost-bias weight applied as `score - alpha * cost`.
    pub alpha: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub gamma: f64,
}

impl Default for RouterDefaults {
    fn default() -> Self {
        RouterDefaults {
            alpha: 0.5,
            p_min: 0.5,
            p_max: 0.95,
            gamma: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexKind {
    ExactFlat,
    GraphApprox,
}

/// How many candidates each probed shard is asked for before the global
/// Top-K merge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerShardCandidates {
    /// K candidates per probed shard; guarantees centralized equivalence
    /// for exact indexes.
    K,
    /// K divided by the number of probes (at least 1).
    KOverProbes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub dims: Dims,
    pub router: RouterDefaults,
    pub budgets: Budgets,
    /// Seed for the token-hashing embedder. Fixed so embeddings are
    /// reproducible across runs and machines.
    pub embedder_seed: u64,
    /// Seed for training and workload generation.
    pub run_seed: u64,
    pub index: IndexKind,
    pub per_shard_candidates: PerShardCandidates,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            dims: Dims::default(),
            router: RouterDefaults::default(),
            budgets: Budgets::default(),
            embedder_seed: 0x5113_97d0_31c6_02aa,
            run_seed: 7,
            index: IndexKind::ExactFlat,
            per_shard_candidates: PerShardCandidates::K,
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ServiceConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.d == 0 || self.dims.f == 0 {
            return Err(Error::InvalidConfig("dimensions must be positive".into()));
        }
        let r = &self.router;
        if !(r.p_min > 0.0 && r.p_min <= r.p_max && r.p_max <= 1.0) {
            return Err(Error::InvalidConfig(
                "require 0 < p_min <= p_max <= 1".into(),
            ));
        }
        if r.alpha < 0.0 {
            return Err(Error::InvalidConfig("alpha must be non-negative".into()));
        }
        Ok(())
    }

    /// Stable hash of the canonical serialized config; recorded in snapshot
    /// manifests and model files so mismatched artifacts are detectable.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(canonical.as_bytes()))
    }
}

/// FNV-1a 64-bit. Used wherever a stable, seedable content hash is needed;
/// std's default hasher is randomly keyed per process and unusable for
/// reproducible artifacts.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    fnv1a64_seeded(0xcbf2_9ce4_8422_2325, bytes)
}

pub fn fnv1a64_seeded(seed: u64, bytes: &[u8]) -> u64 {
    let mut hash = seed;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Token hash for embedding buckets: FNV-1a plus an avalanche finalizer.
/// Raw FNV's low bits depend only on the low bits of its state (the final
/// step is one multiply), so `h % dim` correlates across tokens that share
/// suffix structure; the finalizer removes that.
pub fn token_hash(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = fnv1a64_seeded(seed, bytes);
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^= h >> 33;
    h
}
