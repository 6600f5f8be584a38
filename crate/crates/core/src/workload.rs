//! Synthetic workload generator.
//!
//! Plants one topic cluster per shard: every cluster owns a disjoint token
//! vocabulary, items sample tokens from their cluster, and each request is
//! built from one (or two) gold items plus configurable noise. Topic
//! vocabularies are shared across tenants, so every shard has a same-topic
//! twin in the other tenant — which is exactly what makes eligibility
//! masking measurable: without it, probes leak to twin shards whose items
//! the post-filter then discards.
//!
//! The tool side emits, per task family, several real skill traces plus two
//! distractors: a "broken" variant whose procedure calls a failing tool
//! (it can never pass validation) and a "stale" variant recorded under an
//! older tool snapshot (it activates there but is incompatible with the
//! current one). Both are visible to a similarity-only retriever and
//! invisible to scoped Tier C retrieval.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::token_hash;
use crate::error::{Error, Result};
use crate::router::GoldShardSet;
use crate::skills::{canonicalize, StubBehavior, ToolCallStep, ToolSnapshot, ToolSpec, ToolTrace, DEFAULT_ARG_DEPTH_LIMIT};
use crate::store::IngestRecord;
use crate::types::{
    Budgets, Family, GateDecision, ProbeMode, Request, ScopeKey, ScopePredicate,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    pub tenants: usize,
    /// Topic clusters per tenant; one shard each.
    pub clusters_per_tenant: usize,
    pub profile_clusters: usize,
    pub observation_clusters: usize,
    /// Base item count; profile shards get a third, session shards double.
    pub items_per_cluster: usize,
    pub vocab_per_cluster: usize,
    /// Cluster-anchor tokens per item (routing signal).
    pub anchors_per_item: usize,
    /// Unique detail tokens per item (item-level identity).
    pub details_per_item: usize,
    /// Gold-item detail tokens kept verbatim in each query.
    pub query_details: usize,
    /// Anchor tokens in each query; only these are subject to noise.
    pub query_anchors: usize,
    pub num_requests: usize,
    /// Probability that a query token is replaced by an off-cluster or
    /// filler token.
    pub cluster_noise: f64,
    pub filler_tokens: usize,
    /// Fraction of evidence requests with a two-shard gold set.
    pub multi_gold_fraction: f64,
    /// Fractions of requests labeled C and B+C; the rest are B.
    pub skill_fraction: f64,
    pub both_fraction: f64,
    pub task_families: usize,
    pub skills_per_family: usize,
    pub traces_per_skill: usize,
    pub budgets: Budgets,
    pub probe_mode: ProbeMode,
    /// Embedder dimension and seed the workload is planted against; cluster
    /// vocabularies are chosen so that clusters occupy disjoint embedding
    /// buckets, which is what makes the zero-noise routing ceiling exact.
    pub embed_dim: usize,
    pub embedder_seed: u64,
    pub seed: u64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            tenants: 2,
            clusters_per_tenant: 20,
            profile_clusters: 2,
            observation_clusters: 8,
            items_per_cluster: 40,
            vocab_per_cluster: 24,
            anchors_per_item: 5,
            details_per_item: 14,
            query_details: 14,
            query_anchors: 5,
            num_requests: 1200,
            cluster_noise: 0.6,
            filler_tokens: 12,
            multi_gold_fraction: 0.0,
            skill_fraction: 0.15,
            both_fraction: 0.1,
            task_families: 4,
            skills_per_family: 3,
            traces_per_skill: 2,
            budgets: Budgets::default(),
            probe_mode: ProbeMode::AdaptiveTopP,
            embed_dim: 64,
            embedder_seed: crate::config::ServiceConfig::default().embedder_seed,
            seed: 7,
        }
    }
}

impl WorkloadConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: WorkloadConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tenants == 0 || self.clusters_per_tenant == 0 || self.num_requests == 0 {
            return Err(Error::InvalidConfig(
                "tenants, clusters, and requests must be positive".into(),
            ));
        }
        if self.profile_clusters + self.observation_clusters > self.clusters_per_tenant {
            return Err(Error::InvalidConfig(
                "profile + observation clusters exceed clusters_per_tenant".into(),
            ));
        }
        if self.anchors_per_item == 0 || self.details_per_item == 0 {
            return Err(Error::InvalidConfig("items need anchors and details".into()));
        }
        if self.query_details > self.details_per_item || self.query_anchors > self.anchors_per_item
        {
            return Err(Error::InvalidConfig(
                "query token counts exceed item token counts".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.cluster_noise)
            || !(0.0..=1.0).contains(&self.multi_gold_fraction)
            || self.skill_fraction + self.both_fraction > 1.0
        {
            return Err(Error::InvalidConfig("bad fractions".into()));
        }
        if self.embed_dim < self.clusters_per_tenant * CLUSTER_SPAN + MIN_RESERVE {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} too small to give {} clusters disjoint buckets plus a reserve block",
                self.embed_dim, self.clusters_per_tenant
            )));
        }
        Ok(())
    }
}

/// Embedding buckets owned by each topic cluster.
const CLUSTER_SPAN: usize = 2;
/// Minimum buckets left for the shared reserve block (fillers, item
/// details, skill vocabulary). Item identity needs room: detail-token
/// signatures live in (bucket, sign) slots of this block.
const MIN_RESERVE: usize = 8;

/// Per-cluster token vocabularies plus shared filler tokens.
///
/// Tokens are rejection-sampled so each cluster's tokens hash into that
/// cluster's own bucket block with positive sign, and filler tokens into a
/// reserved block. Cluster embeddings are therefore orthogonal to each
/// other by construction (up to filler/query-prefix mass), which pins the
/// zero-noise routing ceiling at exactly 1.0.
struct TokenPlan {
    /// cluster -> bucket -> tokens.
    cluster_vocab: Vec<Vec<Vec<String>>>,
    filler: Vec<String>,
    reserve_low: usize,
    dim: usize,
    embedder_seed: u64,
}

impl TokenPlan {
    fn build(config: &WorkloadConfig) -> Result<TokenPlan> {
        let dim = config.embed_dim;
        let span = CLUSTER_SPAN;
        let bucket_of = |token: &str| {
            let h = token_hash(config.embedder_seed, token.as_bytes());
            ((h % dim as u64) as usize, (h >> 63) == 0)
        };
        let sample = |prefix: &str, accept: &dyn Fn(usize) -> bool, count: usize| -> Result<Vec<String>> {
            let mut out = Vec::with_capacity(count);
            for k in 0..200_000 {
                let token = format!("{prefix}{k}");
                let (bucket, positive) = bucket_of(&token);
                if positive && accept(bucket) {
                    out.push(token);
                    if out.len() == count {
                        return Ok(out);
                    }
                }
            }
            Err(Error::InvalidConfig(format!(
                "could not sample {count} tokens for prefix {prefix}"
            )))
        };

        // Each cluster's vocabulary is balanced across the buckets of its
        // block so no item concentrates its anchor mass on one coordinate.
        let mut cluster_vocab = Vec::with_capacity(config.clusters_per_tenant);
        for cluster in 0..config.clusters_per_tenant {
            let low = cluster * span;
            let mut per_bucket = Vec::with_capacity(span);
            for offset in 0..span {
                per_bucket.push(sample(
                    &format!("topic{cluster}_"),
                    &|b| b == low + offset,
                    config.vocab_per_cluster.div_ceil(span),
                )?);
            }
            cluster_vocab.push(per_bucket);
        }
        let filler_low = config.clusters_per_tenant * span;
        let filler = sample("common", &|b| b >= filler_low, config.filler_tokens)?;
        Ok(TokenPlan {
            cluster_vocab,
            filler,
            reserve_low: filler_low,
            dim,
            embedder_seed: config.embedder_seed,
        })
    }

    /// Item-detail tokens, rejection-sampled into the shared reserve block
    /// (any sign). They identify items by exact token overlap without
    /// adding cross-cluster mass to routing centroids.
    fn detail_tokens(&self, prefix: &str, count: usize) -> Vec<String> {
        let mut out = Vec::with_capacity(count);
        for k in 0.. {
            let token = format!("{prefix}_d{k}");
            let h = token_hash(self.embedder_seed, token.as_bytes());
            if (h % self.dim as u64) as usize >= self.reserve_low {
                out.push(token);
                if out.len() == count {
                    break;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldEvidence {
    pub request_id: String,
    pub items: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateLabel {
    pub request_id: String,
    pub label: GateDecision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldSkills {
    pub request_id: String,
    pub skills: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSteps {
    pub request_id: String,
    pub steps_without: usize,
}

/// Everything a reproducible run needs: items, requests, supervision, and
/// the tool snapshots.
#[derive(Debug, Clone)]
pub struct WorkloadBundle {
    pub config: WorkloadConfig,
    pub items: Vec<IngestRecord>,
    pub requests: Vec<Request>,
    pub gold_shards: Vec<GoldShardSet>,
    pub gold_evidence: Vec<GoldEvidence>,
    pub gate_labels: Vec<GateLabel>,
    /// Traces recorded under the current snapshot.
    pub traces: Vec<ToolTrace>,
    /// Traces recorded under the legacy snapshot (stale-schema distractors).
    pub legacy_traces: Vec<ToolTrace>,
    pub gold_skills: Vec<GoldSkills>,
    pub baseline_steps: Vec<BaselineSteps>,
    pub tool_snapshot: ToolSnapshot,
    pub legacy_snapshot: ToolSnapshot,
}

struct ClusterSpec {
    tenant: usize,
    cluster: usize,
    family: Family,
    shard_id: String,
    scope: ScopeKey,
    size: usize,
}

fn cluster_family(config: &WorkloadConfig, cluster: usize) -> Family {
    if cluster < config.profile_clusters {
        Family::Profile
    } else if cluster < config.profile_clusters + config.observation_clusters {
        Family::Observation
    } else {
        Family::Session
    }
}

/// Three deterministic confuser clusters for a gold cluster, drawn from the
/// other families with the largest shards first. Query noise concentrates
/// on these, which gives raw cosine routing a real failure mode (the family
/// signal in the structured features stays informative) and makes its
/// misrouted probes land on expensive shards.
fn confusers(config: &WorkloadConfig, cluster: usize) -> Vec<usize> {
    let family = cluster_family(config, cluster);
    let mut others: Vec<usize> = (0..config.clusters_per_tenant)
        .filter(|&c| cluster_family(config, c) != family)
        .collect();
    let weight = |c: &usize| match cluster_family(config, *c) {
        Family::Session => 0,
        Family::Observation => 1,
        Family::Profile => 2,
    };
    others.sort_by_key(|c| (weight(c), *c));
    let pool = others.len().min(8);
    (0..3)
        .map(|k| others[(cluster * 3 + k) % pool])
        .collect()
}

/// Query prefix carrying the gold family's hint keywords.
fn family_prefix(family: Family) -> &'static [&'static str] {
    match family {
        Family::Profile => &["who", "preference", "about"],
        Family::Observation => &["when", "did", "said"],
        Family::Session => &["earlier", "chat", "discussed"],
    }
}

fn cluster_spec(config: &WorkloadConfig, tenant: usize, cluster: usize) -> ClusterSpec {
    let tenant_id = format!("t{tenant}");
    let (family, scope, shard_id) = if cluster < config.profile_clusters {
        let agent = format!("a{cluster}");
        (
            Family::Profile,
            ScopeKey {
                tenant: tenant_id.clone(),
                agent: agent.clone(),
                session: None,
                domain: None,
                permission_tags: BTreeSet::new(),
            },
            format!("profile:{tenant_id}:{agent}"),
        )
    } else if cluster < config.profile_clusters + config.observation_clusters {
        let domain = format!("D{cluster}");
        (
            Family::Observation,
            ScopeKey {
                tenant: tenant_id.clone(),
                agent: "a0".into(),
                session: None,
                domain: Some(domain.clone()),
                permission_tags: BTreeSet::new(),
            },
            format!("obs:{tenant_id}:{domain}"),
        )
    } else {
        let session = format!("s{cluster}");
        (
            Family::Session,
            ScopeKey {
                tenant: tenant_id.clone(),
                agent: "a0".into(),
                session: Some(session.clone()),
                domain: None,
                permission_tags: BTreeSet::new(),
            },
            format!("session:{tenant_id}:{session}"),
        )
    };
    let size = match family {
        Family::Profile => (config.items_per_cluster / 3).max(3),
        Family::Observation => config.items_per_cluster,
        Family::Session => config.items_per_cluster * 3,
    };
    ClusterSpec {
        tenant,
        cluster,
        family,
        shard_id,
        scope,
        size,
    }
}

/// Anchor tokens for one item: buckets are visited round-robin so the
/// item's anchor mass stays flat across its cluster block.
fn sample_anchors(rng: &mut ChaCha8Rng, vocab: &[Vec<String>], count: usize) -> Vec<String> {
    let mut picks: Vec<Vec<&String>> = vocab
        .iter()
        .map(|bucket| {
            let mut tokens: Vec<&String> = bucket.iter().collect();
            tokens.shuffle(rng);
            tokens
        })
        .collect();
    let buckets = picks.len();
    let mut out = Vec::with_capacity(count);
    let mut bucket = 0;
    while out.len() < count {
        if let Some(token) = picks[bucket % buckets].pop() {
            out.push(token.clone());
        }
        bucket += 1;
        if bucket > count * buckets + buckets {
            break;
        }
    }
    out
}

fn random_cluster_token(rng: &mut ChaCha8Rng, vocab: &[Vec<String>]) -> String {
    let bucket = &vocab[rng.random_range(0..vocab.len())];
    bucket[rng.random_range(0..bucket.len())].clone()
}

const TOOL_NAMES: [&str; 5] = ["fetch", "parse", "format", "compute", "store"];

fn current_snapshot() -> ToolSnapshot {
    let behaviors: [(&str, StubBehavior); 6] = [
        ("fetch", StubBehavior::Echo),
        ("parse", StubBehavior::Upper),
        (
            "format",
            StubBehavior::Concat {
                separator: " ".into(),
            },
        ),
        ("compute", StubBehavior::Sum),
        (
            "store",
            StubBehavior::Constant {
                value: json!("stored"),
            },
        ),
        (
            "legacy_probe",
            StubBehavior::AlwaysFail {
                message: "legacy probe endpoint removed".into(),
            },
        ),
    ];
    ToolSnapshot {
        schema_version: 1,
        tools: behaviors
            .into_iter()
            .map(|(name, behavior)| (name.to_string(), ToolSpec { version: 1, behavior }))
            .collect(),
    }
}

fn legacy_snapshot() -> ToolSnapshot {
    let mut snapshot = current_snapshot();
    snapshot.schema_version = 0;
    for spec in snapshot.tools.values_mut() {
        spec.version = 0;
    }
    snapshot
}

/// Tool sequence for one (family, variant) template. Sequences differ per
/// variant so each induces a distinct skill id; lengths match within a
/// family so StepRed labels stay consistent whichever variant is adopted.
fn family_tools(family: usize, variant: usize, task_families: usize) -> Vec<&'static str> {
    let len = 2 + family % 2;
    (0..len)
        .map(|step| TOOL_NAMES[(family + variant * task_families + step) % TOOL_NAMES.len()])
        .collect()
}

fn family_desc(sigs: &[String], extra: &str) -> String {
    format!("how to run {} {} pipeline {extra}", sigs[0], sigs[1])
}

fn make_trace(
    trace_id: String,
    desc: String,
    tools: &[&str],
    constant_tag: &str,
    struct_tag: &str,
) -> ToolTrace {
    // The argument name carries the pipeline identity: two skills that call
    // the same tools in the same order still canonicalize to different
    // templates when their parameters differ.
    let steps = tools
        .iter()
        .enumerate()
        .map(|(i, tool)| ToolCallStep {
            tool: tool.to_string(),
            args: BTreeMap::from([
                (format!("input_{struct_tag}"), json!(format!("{constant_tag}_s{i}"))),
                ("limit".to_string(), json!((i + 1) as i64 * 10)),
            ]),
        })
        .collect();
    ToolTrace {
        trace_id,
        desc,
        steps,
        success: true,
        domain: Some("tools".into()),
        permissions: BTreeSet::new(),
    }
}

pub fn generate_workload(config: &WorkloadConfig) -> Result<WorkloadBundle> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let plan = TokenPlan::build(config)?;
    let tool_snapshot = current_snapshot();
    let legacy = legacy_snapshot();

    // ---- skills: real variants plus broken and stale distractors ----
    // Family signature tokens live in the reserve embedding block so skill
    // vocabulary never bleeds into topic-cluster routing space.
    let family_sigs: Vec<Vec<String>> = (0..config.task_families)
        .map(|f| plan.detail_tokens(&format!("task{f}_sig"), 2))
        .collect();
    let mut traces = Vec::new();
    let mut legacy_traces = Vec::new();
    let mut family_gold: Vec<BTreeSet<String>> = vec![BTreeSet::new(); config.task_families];
    let mut family_steps: Vec<usize> = vec![0; config.task_families];

    for family in 0..config.task_families {
        for variant in 0..config.skills_per_family {
            let tools = family_tools(family, variant, config.task_families);
            family_steps[family] = tools.len();
            let desc = family_desc(&family_sigs[family], &format!("variant v{variant}"));
            for t in 0..config.traces_per_skill.max(1) {
                let trace = make_trace(
                    format!("tr_f{family}_v{variant}_{t}"),
                    desc.clone(),
                    &tools,
                    &format!("val_f{family}_v{variant}_t{t}"),
                    &format!("f{family}v{variant}"),
                );
                if t == 0 {
                    let template = canonicalize(&trace, DEFAULT_ARG_DEPTH_LIMIT)?;
                    family_gold[family].insert(template.skill_id);
                }
                traces.push(trace);
            }
        }
        // Broken distractor: calls a tool whose stub always fails, so its
        // validation tests can never pass.
        let mut broken_tools = family_tools(family, 0, config.task_families);
        broken_tools.push("legacy_probe");
        traces.push(make_trace(
            format!("tr_f{family}_broken"),
            family_desc(&family_sigs[family], "tool variant legacy probe"),
            &broken_tools,
            &format!("val_f{family}_broken"),
            &format!("f{family}broken"),
        ));
        // Stale distractor: recorded under the legacy snapshot; activates
        // there but is incompatible with the current one. Its variant index
        // sits past the real ones so its template (and skill id) is its own.
        let stale_tools = family_tools(family, config.skills_per_family, config.task_families);
        legacy_traces.push(make_trace(
            format!("tr_f{family}_stale"),
            family_desc(&family_sigs[family], "tool variant old schema"),
            &stale_tools,
            &format!("val_f{family}_stale"),
            &format!("f{family}stale"),
        ));
    }

    // ---- items: one planted cluster per shard ----
    // Each item carries cluster-anchor tokens (the routing signal, confined
    // to the cluster's embedding block) and unique detail tokens (the
    // item-level identity that makes gold items retrievable within their
    // shard and dominant over cross-shard imposters).
    struct PlantedItem {
        item_id: String,
        anchors: Vec<String>,
        details: Vec<String>,
    }
    let mut items = Vec::new();
    let mut cluster_items: BTreeMap<(usize, usize), Vec<PlantedItem>> = BTreeMap::new();
    let mut created_at = 0u64;
    for tenant in 0..config.tenants {
        for cluster in 0..config.clusters_per_tenant {
            let spec = cluster_spec(config, tenant, cluster);
            let mut local = Vec::with_capacity(spec.size);
            for idx in 0..spec.size {
                let item_id = format!("it_t{tenant}_c{cluster}_{idx}");
                let anchors =
                    sample_anchors(&mut rng, &plan.cluster_vocab[cluster], config.anchors_per_item);
                let details = plan.detail_tokens(&item_id, config.details_per_item);
                let mut tokens: Vec<String> =
                    anchors.iter().chain(details.iter()).cloned().collect();
                if rng.random_bool(0.3) {
                    tokens.push(plan.filler[rng.random_range(0..plan.filler.len())].clone());
                }
                created_at += 1;
                items.push(IngestRecord {
                    item_id: item_id.clone(),
                    text: tokens.join(" "),
                    embedding: None,
                    scope: spec.scope.clone(),
                    family: spec.family,
                    provenance: format!("gen:t{tenant}:c{cluster}:{idx}"),
                    created_at,
                });
                local.push(PlantedItem {
                    item_id,
                    anchors,
                    details,
                });
            }
            cluster_items.insert((tenant, cluster), local);
        }
    }

    // ---- requests ----
    let mut requests = Vec::new();
    let mut gold_shards = Vec::new();
    let mut gold_evidence = Vec::new();
    let mut gate_labels = Vec::new();
    let mut gold_skills = Vec::new();
    let mut baseline_steps = Vec::new();

    for i in 0..config.num_requests {
        let request_id = format!("q{i:05}");
        let tenant = i % config.tenants;
        let tenant_id = format!("t{tenant}");
        let roll: f64 = rng.random();
        let label = if roll < config.skill_fraction {
            GateDecision::C
        } else if roll < config.skill_fraction + config.both_fraction {
            GateDecision::BplusC
        } else {
            GateDecision::B
        };

        let mut tokens: Vec<String> = Vec::new();
        match label {
            GateDecision::C => tokens.extend(["how".into(), "to".into(), "run".into(), "tool".into()]),
            GateDecision::BplusC => {
                tokens.extend(["how".into(), "to".into(), "tool".into(), "after".into()])
            }
            GateDecision::B => {}
        }

        if label != GateDecision::C {
            // Evidence side: draw the query from gold items of one or two
            // clusters of this tenant, then corrupt a fraction of the tokens
            // with the gold cluster's designated confusers.
            let multi = label == GateDecision::B
                && config.multi_gold_fraction > 0.0
                && rng.random_bool(config.multi_gold_fraction);
            let first = rng.random_range(0..config.clusters_per_tenant);
            let mut clusters = vec![first];
            if multi {
                // The second gold comes from the same family so the learned
                // family signal never suppresses one of the two shards.
                let same_family: Vec<usize> = (0..config.clusters_per_tenant)
                    .filter(|&c| c != first && cluster_family(config, c) == cluster_family(config, first))
                    .collect();
                if !same_family.is_empty() {
                    clusters.push(same_family[rng.random_range(0..same_family.len())]);
                }
            }
            if label == GateDecision::B {
                let prefix = family_prefix(cluster_family(config, first));
                tokens.extend(prefix.iter().map(|t| t.to_string()));
            }
            let mut shard_set = BTreeSet::new();
            let mut evidence = BTreeSet::new();
            let mut details: Vec<String> = Vec::new();
            let mut anchors: Vec<String> = Vec::new();
            // Every gold item gets the full identity budget; a two-shard
            // question is simply longer, not vaguer.
            let per_gold_details = config.query_details;
            let per_gold_anchors = config.query_anchors;
            for &cluster in &clusters {
                let spec = cluster_spec(config, tenant, cluster);
                shard_set.insert(spec.shard_id);
                let bucket = &cluster_items[&(tenant, cluster)];
                let gold_item = &bucket[rng.random_range(0..bucket.len())];
                evidence.insert(gold_item.item_id.clone());
                let mut ds = gold_item.details.clone();
                ds.shuffle(&mut rng);
                details.extend(ds.into_iter().take(per_gold_details));
                let mut ans = gold_item.anchors.clone();
                ans.shuffle(&mut rng);
                anchors.extend(ans.into_iter().take(per_gold_anchors));
            }
            // Only the anchor portion is subject to noise: the asker still
            // remembers the specifics but may misattribute the topic. Noise
            // rotates over the confusers so no single wrong shard ever
            // collects more off-topic mass than a couple of tokens.
            let confuser_set = confusers(config, first);
            let mut noised = 0usize;
            for token in &mut anchors {
                if rng.random_bool(config.cluster_noise) {
                    *token = if rng.random_bool(0.25) {
                        plan.filler[rng.random_range(0..plan.filler.len())].clone()
                    } else {
                        let other = confuser_set[noised % confuser_set.len()];
                        noised += 1;
                        random_cluster_token(&mut rng, &plan.cluster_vocab[other])
                    };
                }
            }
            tokens.extend(details);
            tokens.extend(anchors);
            gold_shards.push(GoldShardSet {
                request_id: request_id.clone(),
                gold: shard_set,
            });
            gold_evidence.push(GoldEvidence {
                request_id: request_id.clone(),
                items: evidence,
            });
        }

        if label != GateDecision::B {
            let family = rng.random_range(0..config.task_families);
            tokens.extend(family_sigs[family].iter().cloned());
            tokens.push("pipeline".into());
            gold_skills.push(GoldSkills {
                request_id: request_id.clone(),
                skills: family_gold[family].clone(),
            });
            // Solving without the skill costs roughly twice the procedure,
            // varying by one exploratory step.
            let without = family_steps[family] * 2 - (i % 2);
            baseline_steps.push(BaselineSteps {
                request_id: request_id.clone(),
                steps_without: without.max(family_steps[family] + 1),
            });
        }

        let scope = ScopePredicate::tenant_wide(&tenant_id);
        requests.push(Request {
            request_id: request_id.clone(),
            query_text: tokens.join(" "),
            scope_a: scope.clone(),
            scope_b: scope.clone(),
            scope_c: scope,
            budgets: config.budgets.clone(),
            probe_mode: config.probe_mode,
            forced_gate: None,
        });
        gate_labels.push(GateLabel { request_id, label });
    }

    Ok(WorkloadBundle {
        config: config.clone(),
        items,
        requests,
        gold_shards,
        gold_evidence,
        gate_labels,
        traces,
        legacy_traces,
        gold_skills,
        baseline_steps,
        tool_snapshot,
        legacy_snapshot: legacy,
    })
}

impl WorkloadBundle {
    pub fn gold_shard_map(&self) -> BTreeMap<String, BTreeSet<String>> {
        self.gold_shards
            .iter()
            .map(|g| (g.request_id.clone(), g.gold.clone()))
            .collect()
    }

    pub fn gold_evidence_map(&self) -> BTreeMap<String, BTreeSet<String>> {
        self.gold_evidence
            .iter()
            .map(|g| (g.request_id.clone(), g.items.clone()))
            .collect()
    }

    pub fn gold_skill_map(&self) -> BTreeMap<String, BTreeSet<String>> {
        self.gold_skills
            .iter()
            .map(|g| (g.request_id.clone(), g.skills.clone()))
            .collect()
    }

    pub fn baseline_step_map(&self) -> BTreeMap<String, usize> {
        self.baseline_steps
            .iter()
            .map(|b| (b.request_id.clone(), b.steps_without))
            .collect()
    }

    pub fn gate_label_map(&self) -> BTreeMap<String, GateDecision> {
        self.gate_labels
            .iter()
            .map(|g| (g.request_id.clone(), g.label))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("workload.toml"),
            toml::to_string_pretty(&self.config).expect("config serializes"),
        )?;
        std::fs::write(dir.join("items.jsonl"), crate::types::to_json_lines(&self.items)?)?;
        std::fs::write(
            dir.join("requests.jsonl"),
            crate::types::to_json_lines(&self.requests)?,
        )?;
        std::fs::write(
            dir.join("gold_shards.jsonl"),
            crate::types::to_json_lines(&self.gold_shards)?,
        )?;
        std::fs::write(
            dir.join("gold_evidence.jsonl"),
            crate::types::to_json_lines(&self.gold_evidence)?,
        )?;
        std::fs::write(
            dir.join("gate_labels.jsonl"),
            crate::types::to_json_lines(&self.gate_labels)?,
        )?;
        std::fs::write(dir.join("traces.jsonl"), crate::types::to_json_lines(&self.traces)?)?;
        std::fs::write(
            dir.join("legacy_traces.jsonl"),
            crate::types::to_json_lines(&self.legacy_traces)?,
        )?;
        std::fs::write(
            dir.join("gold_skills.jsonl"),
            crate::types::to_json_lines(&self.gold_skills)?,
        )?;
        std::fs::write(
            dir.join("baseline_steps.jsonl"),
            crate::types::to_json_lines(&self.baseline_steps)?,
        )?;
        self.tool_snapshot.save(&dir.join("tools.json"))?;
        self.legacy_snapshot.save(&dir.join("tools_legacy.json"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = WorkloadConfig::from_toml(&std::fs::read_to_string(dir.join("workload.toml"))?)?;
        let read = |name: &str| std::fs::read_to_string(dir.join(name));
        Ok(WorkloadBundle {
            config,
            items: crate::types::from_json_lines(&read("items.jsonl")?)?,
            requests: crate::types::from_json_lines(&read("requests.jsonl")?)?,
            gold_shards: crate::types::from_json_lines(&read("gold_shards.jsonl")?)?,
            gold_evidence: crate::types::from_json_lines(&read("gold_evidence.jsonl")?)?,
            gate_labels: crate::types::from_json_lines(&read("gate_labels.jsonl")?)?,
            traces: crate::types::from_json_lines(&read("traces.jsonl")?)?,
            legacy_traces: crate::types::from_json_lines(&read("legacy_traces.jsonl")?)?,
            gold_skills: crate::types::from_json_lines(&read("gold_skills.jsonl")?)?,
            baseline_steps: crate::types::from_json_lines(&read("baseline_steps.jsonl")?)?,
            tool_snapshot: ToolSnapshot::load(&dir.join("tools.json"))?,
            legacy_snapshot: ToolSnapshot::load(&dir.join("tools_legacy.json"))?,
        })
    }
}
