//! The end-to-end read path.
//!
//! One read runs: Tier A working-memory lookup, query embedding and
//! features, the tier gate (or its forced override), then Tier B evidence
//! retrieval and/or Tier C skill retrieval under the request budgets. A C
//! decision whose skill is inapplicable or fails execution triggers exactly
//! one Tier B fallback read under the same budgets, flagged in the cost
//! trace.
//!
//! Tier B reads are scope-before-routing: the eligible shard set is
//! computed from shard partitions, only eligible shards are scored and
//! probed (bounded by `b_probe`, fanned out in parallel), and merged
//! candidates pass an item-level scope post-filter before the global Top-K.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{PerShardCandidates, ServiceConfig};
use crate::embed::{Embedder, Embedding, Featurizer, HashEmbedder};
use crate::error::{Error, Result};
use crate::gate::{gate_decide, GateModel};
use crate::metrics::{MetricsCollector, ReadSample};
use crate::router::{
    baseline_route, masked_softmax, score_shards, select_probes, BaselineKind, RouterModel,
    ShardInput,
};
use crate::skills::{SkillArtifact, SkillLibrary, SnapshotRunner, ToolRunner, ToolSnapshot};
use crate::store::{EvidenceStore, MemoryItem};
use crate::types::{scope_eval, CostTrace, GateDecision, ProbeMode, Request, ScopePredicate};
use crate::working::{WorkingEntry, WorkingMemory};

/// How Tier B selects its probe set. The learned strategy is the default
/// read path; `masked: false` and the baselines exist for controlled
/// comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoutingStrategy {
    Learned { mode: ProbeMode, masked: bool },
    Baseline(BaselineKind),
}

/// Output of one Tier B read.
#[derive(Debug, Clone)]
pub struct TierBOutput {
    pub evidence: Vec<(MemoryItem, f64)>,
    pub probes: Vec<String>,
    pub vec_scan: u64,
    pub per_shard_ms: BTreeMap<String, f64>,
}

impl TierBOutput {
    fn empty() -> Self {
        TierBOutput {
            evidence: Vec::new(),
            probes: Vec::new(),
            vec_scan: 0,
            per_shard_ms: BTreeMap::new(),
        }
    }
}

/// Fills slot bindings when the read path tries to execute a retrieved
/// skill. Returning `None` marks the skill inapplicable for the request.
pub trait SkillApplier: Send + Sync {
    fn bindings(&self, request: &Request, skill: &SkillArtifact)
        -> Option<BTreeMap<String, Value>>;
}

/// Binds slots from the skill's first stored test. Deterministic, and
/// sufficient for the synthetic harness where test bindings are always
/// executable.
pub struct TestBindingsApplier;

impl SkillApplier for TestBindingsApplier {
    fn bindings(
        &self,
        _request: &Request,
        skill: &SkillArtifact,
    ) -> Option<BTreeMap<String, Value>> {
        skill.tests.first().map(|t| t.bindings.clone())
    }
}

#[derive(Debug, Clone)]
pub struct ReadResult {
    pub request_id: String,
    pub working_context: Vec<WorkingEntry>,
    pub evidence: Vec<(MemoryItem, f64)>,
    pub skills: Vec<SkillArtifact>,
    pub cost: CostTrace,
    pub adopted: bool,
    pub adopted_steps: Option<usize>,
}

impl ReadResult {
    pub fn to_sample(&self) -> ReadSample {
        ReadSample {
            request_id: self.request_id.clone(),
            probed_shards: self.cost.probed_shards.clone(),
            vec_scan: self.cost.vec_scan,
            wall_ms: self.cost.wall_latency,
            evidence_ids: self.evidence.iter().map(|(m, _)| m.item_id.clone()).collect(),
            skill_ids: self.skills.iter().map(|s| s.skill_id.clone()).collect(),
            gate_decision: self.cost.gate_decision,
            fallback_taken: self.cost.fallback_taken,
            adopted: self.adopted,
            adopted_steps: self.adopted_steps,
        }
    }

    pub fn to_response(&self) -> ReadResponse {
        ReadResponse {
            request_id: self.request_id.clone(),
            working: self
                .working_context
                .iter()
                .map(|e| (e.entry_id.clone(), e.text.clone()))
                .collect(),
            evidence: self
                .evidence
                .iter()
                .map(|(item, score)| EvidenceHit {
                    item_id: item.item_id.clone(),
                    score: *score,
                    text: item.text.clone(),
                    shard_family: item.family,
                })
                .collect(),
            skills: self
                .skills
                .iter()
                .map(|s| SkillRef {
                    skill_id: s.skill_id.clone(),
                    version: s.version,
                    desc: s.desc.clone(),
                })
                .collect(),
            cost: self.cost.clone(),
        }
    }
}

/// Wire response for the newline-delimited JSON protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReadResponse {
    pub request_id: String,
    pub working: Vec<(String, String)>,
    pub evidence: Vec<EvidenceHit>,
    pub skills: Vec<SkillRef>,
    pub cost: CostTrace,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvidenceHit {
    pub item_id: String,
    pub score: f64,
    pub text: String,
    pub shard_family: crate::types::Family,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkillRef {
    pub skill_id: String,
    pub version: u32,
    pub desc: String,
}

/// Persisted model bundle: router and gate weights plus the config hash
/// they were trained under.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub config_hash: String,
    pub router: RouterModel,
    pub gate: GateModel,
}

impl ModelFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path, expected_hash: Option<&str>) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if let Some(expected) = expected_hash {
            if file.config_hash != expected {
                return Err(Error::InvalidConfig(format!(
                    "model config hash {} does not match expected {expected}",
                    file.config_hash
                )));
            }
        }
        Ok(file)
    }
}

/// The service façade: all three tiers plus the models and metrics.
pub struct ShardMemoService {
    pub config: ServiceConfig,
    embedder: Arc<dyn Embedder>,
    featurizer: Featurizer,
    pub store: EvidenceStore,
    working: RwLock<BTreeMap<String, Arc<WorkingMemory>>>,
    working_capacity: usize,
    pub skills: SkillLibrary,
    pub tool_snapshot: RwLock<ToolSnapshot>,
    router: RwLock<RouterModel>,
    gate: RwLock<GateModel>,
    pub metrics: MetricsCollector,
    applier: Option<Box<dyn SkillApplier>>,
    runner: Option<Arc<dyn ToolRunner>>,
    tier_b_reads: AtomicU64,
}

impl ShardMemoService {
    pub fn new(config: ServiceConfig) -> Self {
        let embedder: Arc<dyn Embedder> =
            Arc::new(HashEmbedder::new(config.dims.d, config.embedder_seed));
        Self::with_embedder(config, embedder)
    }

    pub fn with_embedder(config: ServiceConfig, embedder: Arc<dyn Embedder>) -> Self {
        let featurizer = Featurizer::new(config.dims.clone());
        let feature_dim = config.dims.d + config.dims.f;
        let summary_dim = config.dims.d + 4;
        let store = EvidenceStore::new(config.dims.d, config.index);
        let router = RouterModel::untrained(feature_dim, summary_dim, &config.router);
        let gate = GateModel::zeros(feature_dim);
        ShardMemoService {
            config,
            embedder,
            featurizer,
            store,
            working: RwLock::new(BTreeMap::new()),
            working_capacity: 32,
            skills: SkillLibrary::new(),
            tool_snapshot: RwLock::new(ToolSnapshot {
                schema_version: 1,
                tools: BTreeMap::new(),
            }),
            router: RwLock::new(router),
            gate: RwLock::new(gate),
            metrics: MetricsCollector::new(),
            applier: Some(Box::new(TestBindingsApplier)),
            runner: None,
            tier_b_reads: AtomicU64::new(0),
        }
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }

    pub fn featurizer(&self) -> &Featurizer {
        &self.featurizer
    }

    pub fn set_router(&self, model: RouterModel) {
        *self.router.write().unwrap() = model;
    }

    pub fn router_model(&self) -> RouterModel {
        self.router.read().unwrap().clone()
    }

    pub fn set_gate(&self, model: GateModel) {
        *self.gate.write().unwrap() = model;
    }

    pub fn gate_model(&self) -> GateModel {
        self.gate.read().unwrap().clone()
    }

    pub fn set_tool_snapshot(&self, snapshot: ToolSnapshot) {
        *self.tool_snapshot.write().unwrap() = snapshot;
    }

    /// Disable or replace the execution step of the C path. With no
    /// applier, Tier C is retrieval-only and "a skill applies" just means
    /// the retrieved list is non-empty.
    pub fn set_skill_applier(&mut self, applier: Option<Box<dyn SkillApplier>>) {
        self.applier = applier;
    }

    /// Override the tool runner (the default executes the stub behaviors of
    /// the current snapshot).
    pub fn set_tool_runner(&mut self, runner: Option<Arc<dyn ToolRunner>>) {
        self.runner = runner;
    }

    pub fn working_memory(&self, tenant: &str) -> Arc<WorkingMemory> {
        let mut map = self.working.write().unwrap();
        map.entry(tenant.to_string())
            .or_insert_with(|| Arc::new(WorkingMemory::new(tenant, self.working_capacity)))
            .clone()
    }

    /// Total Tier B reads executed so far; lets tests pin down fallback
    /// exactness.
    pub fn tier_b_read_count(&self) -> u64 {
        self.tier_b_reads.load(Ordering::Relaxed)
    }

    /// The learned masked read used by the normal read path.
    pub fn tier_b_read(
        &self,
        query: &Embedding,
        features: &[f64],
        scope_b: &ScopePredicate,
        mode: ProbeMode,
        b_probe: usize,
        k_evidence: usize,
    ) -> Result<TierBOutput> {
        self.tier_b_read_with(
            RoutingStrategy::Learned { mode, masked: true },
            query,
            features,
            scope_b,
            b_probe,
            k_evidence,
        )
    }

    /// Tier B read under an explicit routing strategy.
    ///
    /// An empty eligible set is not an error: it yields empty evidence with
    /// an honest (empty) probe list.
    pub fn tier_b_read_with(
        &self,
        strategy: RoutingStrategy,
        query: &Embedding,
        features: &[f64],
        scope_b: &ScopePredicate,
        b_probe: usize,
        k_evidence: usize,
    ) -> Result<TierBOutput> {
        self.tier_b_reads.fetch_add(1, Ordering::Relaxed);
        let candidate_shards = match strategy {
            RoutingStrategy::Learned { masked: false, .. } => self.store.shard_ids(),
            _ => self.store.eligible_shards(scope_b),
        };
        if candidate_shards.is_empty() {
            return Ok(TierBOutput::empty());
        }
        let view = self.store.routing_view(&candidate_shards)?;

        let probes: Vec<String> = match strategy {
            RoutingStrategy::Learned { mode, .. } => {
                let router = self.router.read().unwrap();
                let inputs: Vec<ShardInput> = view.iter().map(ShardInput::from).collect();
                let scores = score_shards(&router, features, &inputs)?;
                let probs = masked_softmax(&scores)?;
                select_probes(&scores, &probs, mode, b_probe, &router.topp_params)?
            }
            RoutingStrategy::Baseline(kind) => baseline_route(kind, query, &view, b_probe)?,
        };

        if k_evidence == 0 {
            return Ok(TierBOutput {
                evidence: Vec::new(),
                probes,
                vec_scan: 0,
                per_shard_ms: BTreeMap::new(),
            });
        }

        let per_shard_n = match self.config.per_shard_candidates {
            PerShardCandidates::K => k_evidence,
            PerShardCandidates::KOverProbes => (k_evidence / probes.len().max(1)).max(1),
        };

        // Parallel probe fan-out, bounded by the probe list itself.
        let search_results: Vec<(String, Result<(Vec<crate::index::Hit>, u64)>, f64)> =
            std::thread::scope(|scope| {
                let handles: Vec<_> = probes
                    .iter()
                    .map(|shard_id| {
                        let store = &self.store;
                        let shard_id = shard_id.clone();
                        scope.spawn(move || {
                            let start = Instant::now();
                            let out = store.shard_search(&shard_id, query, per_shard_n);
                            let ms = start.elapsed().as_secs_f64() * 1e3;
                            (shard_id, out, ms)
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().unwrap()).collect()
            });

        let mut vec_scan = 0u64;
        let mut per_shard_ms = BTreeMap::new();
        let mut seen: BTreeSet<String> = BTreeSet::new();
        let mut merged: Vec<(MemoryItem, f64)> = Vec::new();
        for (shard_id, outcome, ms) in search_results {
            let (hits, scanned) = outcome?;
            vec_scan += scanned;
            per_shard_ms.insert(shard_id, ms);
            for hit in hits {
                if !seen.insert(hit.item_id.clone()) {
                    continue;
                }
                if let Some(item) = self.store.get_item(&hit.item_id) {
                    // Item-level post-filter: hard scope correctness no
                    // matter how the probes were chosen.
                    if scope_eval(scope_b, &item.scope, item.family) {
                        merged.push((item, hit.score));
                    }
                }
            }
        }
        merged.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| a.0.item_id.cmp(&b.0.item_id))
        });
        merged.truncate(k_evidence);

        Ok(TierBOutput {
            evidence: merged,
            probes,
            vec_scan,
            per_shard_ms,
        })
    }

    /// The end-to-end read path.
    pub fn read(&self, request: &Request) -> Result<ReadResult> {
        request.budgets.validate()?;
        let start = Instant::now();

        let working_context = self
            .working
            .read()
            .unwrap()
            .get(&request.scope_a.required_tenant)
            .map(|wm| wm.read_a(request))
            .unwrap_or_default();

        let query = self.embedder.embed(&request.query_text)?;
        let phi = self.featurizer.features(request);
        let features = self.featurizer.request_features(&query, &phi)?;

        let (decision, _gate_probs) = {
            let gate = self.gate.read().unwrap();
            gate_decide(&gate, &features, request.forced_gate)?
        };

        let mut tier_b = TierBOutput::empty();
        let mut skills: Vec<SkillArtifact> = Vec::new();
        let mut fallback_taken = false;
        let mut adopted = false;
        let mut adopted_steps = None;

        if decision.includes_b() {
            tier_b = self.tier_b_read(
                &query,
                &features,
                &request.scope_b,
                request.probe_mode,
                request.budgets.b_probe,
                request.budgets.k_evidence,
            )?;
        }

        if decision.includes_c() {
            let snapshot = self.tool_snapshot.read().unwrap().clone();
            skills = self.skills.retrieve_skills(
                &query,
                &request.scope_c,
                &snapshot,
                request.budgets.r_skills,
            );
            let mut skill_ok = !skills.is_empty();
            if let (Some(applier), Some(top)) = (self.applier.as_ref(), skills.first()) {
                match applier.bindings(request, top) {
                    Some(bindings) => {
                        let report = match &self.runner {
                            Some(runner) => self.skills.execute_skill(
                                &top.skill_id,
                                top.version,
                                &bindings,
                                runner.as_ref(),
                            ),
                            None => self.skills.execute_skill(
                                &top.skill_id,
                                top.version,
                                &bindings,
                                &SnapshotRunner::new(&snapshot),
                            ),
                        };
                        match report {
                            Ok(report) => {
                                adopted = true;
                                adopted_steps = Some(top.proc.len());
                                skill_ok = report.success;
                            }
                            Err(_) => skill_ok = false,
                        }
                    }
                    None => skill_ok = false,
                }
            }
            if !skill_ok && decision == GateDecision::C {
                // C -> B fallback under the same budgets.
                tier_b = self.tier_b_read(
                    &query,
                    &features,
                    &request.scope_b,
                    request.probe_mode,
                    request.budgets.b_probe,
                    request.budgets.k_evidence,
                )?;
                fallback_taken = true;
            }
        }

        let cost = CostTrace {
            probed_shards: tier_b.probes.clone(),
            vec_scan: tier_b.vec_scan,
            wall_latency: start.elapsed().as_secs_f64() * 1e3,
            per_shard_latency: tier_b.per_shard_ms.clone(),
            gate_decision: decision,
            fallback_taken,
        };

        Ok(ReadResult {
            request_id: request.request_id.clone(),
            working_context,
            evidence: tier_b.evidence,
            skills,
            cost,
            adopted,
            adopted_steps,
        })
    }

    /// Record a finished read into the metrics collector.
    pub fn record_metrics(&self, result: &ReadResult) {
        self.metrics.record(result.to_sample());
    }

    /// Handle one line of the newline-delimited JSON protocol.
    pub fn handle_line(&self, line: &str) -> String {
        let respond = |value: serde_json::Value| value.to_string();
        match serde_json::from_str::<Request>(line) {
            Ok(request) => match self.read(&request) {
                Ok(result) => {
                    self.record_metrics(&result);
                    serde_json::to_string(&result.to_response())
                        .unwrap_or_else(|e| respond(serde_json::json!({"error": e.to_string()})))
                }
                Err(e) => respond(serde_json::json!({
                    "request_id": request.request_id,
                    "error": e.to_string(),
                })),
            },
            Err(e) => respond(serde_json::json!({"error": format!("bad request: {e}")})),
        }
    }
}

/// Build router training examples from labeled requests against the current
/// store state. Requests without labels or with gold outside their eligible
/// set are skipped.
pub fn build_router_dataset(
    service: &ShardMemoService,
    requests: &[Request],
    gold: &BTreeMap<String, BTreeSet<String>>,
) -> Result<Vec<crate::router::TrainExample>> {
    let mut dataset = Vec::new();
    for request in requests {
        let Some(gold_set) = gold.get(&request.request_id) else {
            continue;
        };
        let eligible = service.store.eligible_shards(&request.scope_b);
        if gold_set.is_empty() || !gold_set.iter().all(|g| eligible.contains(g)) {
            continue;
        }
        let view = service.store.routing_view(&eligible)?;
        let query = service.embedder.embed(&request.query_text)?;
        let phi = service.featurizer.features(request);
        let features = service.featurizer.request_features(&query, &phi)?;
        dataset.push(crate::router::TrainExample {
            features,
            shards: view.iter().map(ShardInput::from).collect(),
            gold: gold_set.clone(),
        });
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(dataset)
}

/// Build gate training examples from labeled requests.
pub fn build_gate_dataset(
    service: &ShardMemoService,
    requests: &[Request],
    labels: &BTreeMap<String, GateDecision>,
) -> Result<Vec<crate::gate::GateExample>> {
    let mut dataset = Vec::new();
    for request in requests {
        let Some(&label) = labels.get(&request.request_id) else {
            continue;
        };
        let query = service.embedder.embed(&request.query_text)?;
        let phi = service.featurizer.features(request);
        let features = service.featurizer.request_features(&query, &phi)?;
        dataset.push(crate::gate::GateExample { features, label });
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::Embedder;
    use crate::store::IngestRecord;
    use crate::types::{Budgets, Family, ScopeKey};

    fn service_with_items() -> ShardMemoService {
        let config = ServiceConfig {
            dims: crate::config::Dims { d: 16, f: 16 },
            ..ServiceConfig::default()
        };
        let service = ShardMemoService::new(config.clone());
        // Identity projection over the embedding block: shard scores become
        // query-centroid dot products, so probing is semantic in tests.
        let mut router = RouterModel::untrained(
            config.dims.d + config.dims.f,
            config.dims.d + 4,
            &config.router,
        );
        for i in 0..config.dims.d {
            router.projection[i][i] = 1.0;
        }
        router.alpha = 0.0;
        service.set_router(router);
        for cluster in 0..4 {
            for idx in 0..5 {
                let record = IngestRecord {
                    item_id: format!("it{cluster}_{idx}"),
                    text: format!("tok{cluster}a tok{cluster}b tok{cluster}c item{idx}"),
                    embedding: None,
                    scope: ScopeKey {
                        tenant: "t0".into(),
                        agent: "a0".into(),
                        session: Some(format!("s{cluster}")),
                        domain: None,
                        permission_tags: Default::default(),
                    },
                    family: Family::Session,
                    provenance: "test".into(),
                    created_at: (cluster * 10 + idx) as u64,
                };
                let item = record.into_item(service.embedder()).unwrap();
                service.store.write_item(item).unwrap();
            }
        }
        service.store.flush();
        service
    }

    fn request(text: &str, forced: Option<GateDecision>) -> Request {
        Request {
            request_id: "q1".into(),
            query_text: text.into(),
            scope_a: ScopePredicate::tenant_wide("t0"),
            scope_b: ScopePredicate::tenant_wide("t0"),
            scope_c: ScopePredicate::tenant_wide("t0"),
            budgets: Budgets {
                m_context: 2,
                b_probe: 2,
                k_evidence: 5,
                r_skills: 2,
            },
            probe_mode: ProbeMode::TopB,
            forced_gate: forced,
        }
    }

    #[test]
    fn forced_b_populates_evidence_only() {
        let service = service_with_items();
        let result = service.read(&request("tok2a tok2b", Some(GateDecision::B))).unwrap();
        assert!(!result.evidence.is_empty());
        assert!(result.skills.is_empty());
        assert!(!result.cost.fallback_taken);
        assert!(result.cost.probed_shards.len() <= 2);
        // Top hit comes from the matching cluster.
        assert!(result.evidence[0].0.item_id.starts_with("it2"));
    }

    #[test]
    fn forced_c_with_empty_library_falls_back() {
        let service = service_with_items();
        let before = service.tier_b_read_count();
        let result = service.read(&request("tok1a tok1b", Some(GateDecision::C))).unwrap();
        assert!(result.cost.fallback_taken);
        assert!(!result.evidence.is_empty());
        assert!(result.skills.is_empty());
        assert_eq!(service.tier_b_read_count() - before, 1);
    }

    #[test]
    fn forced_both_runs_both_tiers() {
        let service = service_with_items();
        let result = service
            .read(&request("tok1a tok1b", Some(GateDecision::BplusC)))
            .unwrap();
        assert!(!result.evidence.is_empty());
        // Empty library: no skills, but no C->B fallback either (B already ran).
        assert!(result.skills.is_empty());
        assert!(!result.cost.fallback_taken);
    }

    #[test]
    fn k_zero_keeps_probes_but_no_evidence() {
        let service = service_with_items();
        let mut req = request("tok1a tok1b", Some(GateDecision::B));
        req.budgets.k_evidence = 0;
        let result = service.read(&req).unwrap();
        assert!(result.evidence.is_empty());
        assert!(!result.cost.probed_shards.is_empty());
        assert_eq!(result.cost.vec_scan, 0);
    }

    #[test]
    fn empty_eligible_set_is_not_an_error() {
        let service = service_with_items();
        let mut req = request("tok1a", Some(GateDecision::B));
        req.scope_b = ScopePredicate::tenant_wide("nobody");
        let result = service.read(&req).unwrap();
        assert!(result.evidence.is_empty());
        assert!(result.cost.probed_shards.is_empty());
    }

    #[test]
    fn full_probe_budget_matches_centralized_oracle() {
        let service = service_with_items();
        let query = service.embedder().embed("tok3a tok3b item2").unwrap();
        let req = request("tok3a tok3b item2", None);
        let phi = service.featurizer().features(&req);
        let features = service.featurizer().request_features(&query, &phi).unwrap();
        let scope = ScopePredicate::tenant_wide("t0");

        let out = service
            .tier_b_read(&query, &features, &scope, ProbeMode::TopB, 64, 5)
            .unwrap();

        // Oracle: score every item in every eligible shard directly.
        let mut all: Vec<(String, f64)> = Vec::new();
        for shard in service.store.eligible_shards(&scope) {
            for item in service.store.items_of(&shard).unwrap() {
                all.push((item.item_id.clone(), query.cosine(&item.embedding)));
            }
        }
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        all.truncate(5);
        let got: Vec<&str> = out.evidence.iter().map(|(m, _)| m.item_id.as_str()).collect();
        let expected: Vec<&str> = all.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(got, expected);
        assert_eq!(out.vec_scan, 20);
    }

    #[test]
    fn vec_scan_sums_per_probe_counts() {
        let service = service_with_items();
        let query = service.embedder().embed("tok0a").unwrap();
        let req = request("tok0a", None);
        let phi = service.featurizer().features(&req);
        let features = service.featurizer().request_features(&query, &phi).unwrap();
        let out = service
            .tier_b_read(
                &query,
                &features,
                &ScopePredicate::tenant_wide("t0"),
                ProbeMode::TopB,
                2,
                5,
            )
            .unwrap();
        assert_eq!(out.probes.len(), 2);
        // ExactFlat scans the whole shard: 5 items per probed shard.
        assert_eq!(out.vec_scan, 10);
    }

    #[test]
    fn reads_handle_concurrent_callers() {
        let service = std::sync::Arc::new(service_with_items());
        std::thread::scope(|scope| {
            for t in 0..4 {
                let service = service.clone();
                scope.spawn(move || {
                    for i in 0..10 {
                        let mut req = request("tok1a tok1b", Some(GateDecision::B));
                        req.request_id = format!("q{t}-{i}");
                        let result = service.read(&req).unwrap();
                        assert!(result.evidence.len() <= 5);
                        service.record_metrics(&result);
                    }
                });
            }
        });
        assert_eq!(service.metrics.len(), 40);
    }

    #[test]
    fn handle_line_round_trips_json() {
        let service = service_with_items();
        let req = request("tok2a tok2b", Some(GateDecision::B));
        let line = serde_json::to_string(&req).unwrap();
        let response = service.handle_line(&line);
        let parsed: ReadResponse = serde_json::from_str(&response).unwrap();
        assert_eq!(parsed.request_id, "q1");
        assert!(!parsed.evidence.is_empty());

        let error = service.handle_line("{not json");
        assert!(error.contains("error"));
    }

    #[test]
    fn model_file_round_trips_with_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let config = ServiceConfig::default();
        let file = ModelFile {
            config_hash: config.config_hash(),
            router: RouterModel::untrained(80, 68, &config.router),
            gate: GateModel::zeros(80),
        };
        file.save(&path).unwrap();
        let loaded = ModelFile::load(&path, Some(&config.config_hash())).unwrap();
        assert_eq!(loaded.router, file.router);
        assert!(ModelFile::load(&path, Some("wrong")).is_err());
    }
}
