//! Text embedding and structured query features.
//!
//! The embedder interface is pluggable; the shipped [`HashEmbedder`] hashes
//! whitespace tokens into D signed buckets and L2-normalizes, so every
//! experiment is reproducible without an external model. Structured features
//! encode query length, temporal keywords, entity count, and family hints;
//! the concrete feature layout is this crate's choice and is documented on
//! [`StructuredFeatures::LAYOUT`].

use serde::{Deserialize, Serialize};

use crate::config::{token_hash, Dims};
use crate::error::{Error, Result};
use crate::types::Request;

/// A fixed-length real vector with its Euclidean norm cached. Serialized as
/// the bare value array; the norm is derived state and recomputed on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding {
    values: Vec<f64>,
    norm: f64,
}

impl From<Vec<f64>> for Embedding {
    fn from(values: Vec<f64>) -> Self {
        Embedding::new(values)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(embedding: Embedding) -> Self {
        embedding.values
    }
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        Embedding { values, norm }
    }

    pub fn zeros(dim: usize) -> Self {
        Embedding {
            values: vec![0.0; dim],
            norm: 0.0,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    /// Cosine similarity; zero when either vector has zero norm.
    pub fn cosine(&self, other: &Embedding) -> f64 {
        if self.norm == 0.0 || other.norm == 0.0 {
            return 0.0;
        }
        self.dot(other) / (self.norm * other.norm)
    }
}

/// Structured query features φ(q), fixed dimension F.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredFeatures {
    pub values: Vec<f64>,
}

impl StructuredFeatures {
    /// Feature layout, groups of four:
    /// `[0..4)`  query length bucket one-hot (<=3, 4-7, 8-15, >=16 tokens)
    /// `[4..8)`  temporal flags (any temporal keyword, ordering keyword,
    ///           digit token, recency keyword)
    /// `[8..12)` capitalized-token count bucket one-hot (0, 1, 2-3, >=4)
    /// `[12..16)` family hints (profile, observation, session, skill)
    pub const LAYOUT: usize = 16;
}

/// Pluggable text-to-vector embedder. Implementations must be deterministic
/// and stateless; the service calls them concurrently.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Embedding>;
}

/// Deterministic test embedder: each whitespace token is hashed into one of
/// D buckets with a sign bit, counts are accumulated, and the result is
/// L2-normalized. The hash seed is part of the service config.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        HashEmbedder { dim, seed }
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        let mut values = vec![0.0f64; self.dim];
        let mut any = false;
        for token in text.split_whitespace() {
            any = true;
            let h = token_hash(self.seed, token.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
            values[bucket] += sign;
        }
        if !any {
            return Err(Error::EmptyText);
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut values {
                *v /= norm;
            }
        }
        Ok(Embedding::new(values))
    }
}

const TEMPORAL_KEYWORDS: &[&str] = &[
    "when", "before", "after", "during", "since", "until", "yesterday", "today", "tomorrow",
    "first", "last", "ago",
];
const ORDERING_KEYWORDS: &[&str] = &["before", "after", "first", "last", "earlier", "later"];
const RECENCY_KEYWORDS: &[&str] = &["recent", "recently", "latest", "newest", "last"];
const PROFILE_HINTS: &[&str] = &["profile", "preference", "preferences", "who", "name", "about"];
const OBSERVATION_HINTS: &[&str] = &["said", "saw", "mentioned", "observed", "happened", "event"];
const SESSION_HINTS: &[&str] = &["session", "conversation", "chat", "earlier", "discussed"];
const SKILL_HINTS: &[&str] = &["how", "tool", "call", "api", "workflow", "steps", "run", "use"];

/// Computes φ(q) and the concatenated request feature vector. Holds the
/// configured dimensions so callers get dimension errors instead of silent
/// length drift.
pub struct Featurizer {
    dims: Dims,
}

impl Featurizer {
    pub fn new(dims: Dims) -> Self {
        Featurizer { dims }
    }

    pub fn feature_dim(&self) -> usize {
        self.dims.f
    }

    /// φ(q): deterministic fixed-dimension structured features.
    pub fn features(&self, request: &Request) -> StructuredFeatures {
        let tokens: Vec<String> = request
            .query_text
            .split_whitespace()
            .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric() && c != '_').to_string())
            .collect();
        let lowered: Vec<String> = tokens.iter().map(|t| t.to_lowercase()).collect();

        let mut values = vec![0.0f64; StructuredFeatures::LAYOUT];

        let length_bucket = match tokens.len() {
            0..=3 => 0,
            4..=7 => 1,
            8..=15 => 2,
            _ => 3,
        };
        values[length_bucket] = 1.0;

        let has = |set: &[&str]| lowered.iter().any(|t| set.contains(&t.as_str()));
        values[4] = f64::from(has(TEMPORAL_KEYWORDS));
        values[5] = f64::from(has(ORDERING_KEYWORDS));
        values[6] = f64::from(tokens.iter().any(|t| t.chars().any(|c| c.is_ascii_digit())));
        values[7] = f64::from(has(RECENCY_KEYWORDS));

        let entity_count = tokens
            .iter()
            .filter(|t| t.chars().next().is_some_and(char::is_uppercase))
            .count();
        let entity_bucket = match entity_count {
            0 => 0,
            1 => 1,
            2..=3 => 2,
            _ => 3,
        };
        values[8 + entity_bucket] = 1.0;

        values[12] = f64::from(has(PROFILE_HINTS));
        values[13] = f64::from(has(OBSERVATION_HINTS));
        values[14] = f64::from(has(SESSION_HINTS));
        values[15] = f64::from(has(SKILL_HINTS));

        // Project onto the configured F; default F equals LAYOUT.
        values.resize(self.dims.f, 0.0);
        StructuredFeatures { values }
    }

    /// r = [z; φ], length D + F, order preserved.
    pub fn request_features(
        &self,
        z: &Embedding,
        phi: &StructuredFeatures,
    ) -> Result<Vec<f64>> {
        if z.dim() != self.dims.d {
            return Err(Error::DimensionMismatch {
                expected: self.dims.d,
                got: z.dim(),
            });
        }
        if phi.values.len() != self.dims.f {
            return Err(Error::DimensionMismatch {
                expected: self.dims.f,
                got: phi.values.len(),
            });
        }
        let mut out = Vec::with_capacity(self.dims.d + self.dims.f);
        out.extend_from_slice(z.values());
        out.extend_from_slice(&phi.values);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Budgets, ProbeMode, ScopePredicate};

    fn request(text: &str) -> Request {
        Request {
            request_id: "q".into(),
            query_text: text.into(),
            scope_a: ScopePredicate::tenant_wide("t0"),
            scope_b: ScopePredicate::tenant_wide("t0"),
            scope_c: ScopePredicate::tenant_wide("t0"),
            budgets: Budgets::default(),
            probe_mode: ProbeMode::TopB,
            forced_gate: None,
        }
    }

    #[test]
    fn embedding_is_deterministic() {
        let e = HashEmbedder::new(64, 1);
        assert_eq!(e.embed("a b").unwrap(), e.embed("a b").unwrap());
    }

    #[test]
    fn empty_text_rejected() {
        let e = HashEmbedder::new(64, 1);
        assert!(matches!(e.embed(""), Err(Error::EmptyText)));
        assert!(matches!(e.embed("   "), Err(Error::EmptyText)));
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let e = HashEmbedder::new(64, 1);
        for text in ["a", "a b c", "the quick brown fox", "x y z w v u t s r q"] {
            let norm = e.embed(text).unwrap().norm();
            assert!((norm - 1.0).abs() < 1e-9, "norm {norm} for {text:?}");
        }
    }

    #[test]
    fn token_collision_rate_is_low() {
        // Single-token embeddings collide only on (bucket, sign); over a
        // 1000-token corpus the pairwise collision rate stays under 5%.
        let e = HashEmbedder::new(64, crate::config::ServiceConfig::default().embedder_seed);
        let mut signatures: std::collections::HashMap<(usize, bool), usize> =
            std::collections::HashMap::new();
        for i in 0..1000 {
            let emb = e.embed(&format!("tok{i}")).unwrap();
            let bucket = emb
                .values()
                .iter()
                .position(|v| v.abs() > 0.5)
                .expect("one hot bucket");
            let positive = emb.values()[bucket] > 0.0;
            *signatures.entry((bucket, positive)).or_default() += 1;
        }
        let colliding_pairs: usize = signatures.values().map(|&c| c * (c - 1) / 2).sum();
        let total_pairs = 1000 * 999 / 2;
        let rate = colliding_pairs as f64 / total_pairs as f64;
        assert!(rate < 0.05, "collision rate {rate}");
    }

    #[test]
    fn short_query_hits_length_bucket_zero() {
        let f = Featurizer::new(Dims { d: 64, f: 16 });
        let phi = f.features(&request("one two three"));
        assert_eq!(phi.values[0], 1.0);
        assert_eq!(phi.values[1], 0.0);
    }

    #[test]
    fn temporal_keywords_set_flag() {
        let f = Featurizer::new(Dims { d: 64, f: 16 });
        for text in ["when was it", "before the storm", "after lunch"] {
            let phi = f.features(&request(text));
            assert_eq!(phi.values[4], 1.0, "temporal flag for {text:?}");
        }
        let phi = f.features(&request("tell me a story"));
        assert_eq!(phi.values[4], 0.0);
    }

    #[test]
    fn features_are_deterministic() {
        let f = Featurizer::new(Dims { d: 64, f: 16 });
        let q = request("When did Melanie mention her pets");
        assert_eq!(f.features(&q), f.features(&q));
    }

    #[test]
    fn request_features_concatenate_in_order() {
        let f = Featurizer::new(Dims { d: 2, f: 1 });
        let z = Embedding::new(vec![1.0, 0.0]);
        let phi = StructuredFeatures {
            values: vec![5.0],
        };
        let r = f.request_features(&z, &phi).unwrap();
        assert_eq!(r, vec![1.0, 0.0, 5.0]);
    }

    #[test]
    fn request_features_check_dimensions() {
        let f = Featurizer::new(Dims { d: 2, f: 1 });
        let z = Embedding::new(vec![1.0, 0.0, 0.0]);
        let phi = StructuredFeatures { values: vec![5.0] };
        assert!(matches!(
            f.request_features(&z, &phi),
            Err(Error::DimensionMismatch { expected: 2, got: 3 })
        ));
    }
}
