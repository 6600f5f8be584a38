//! Domain types shared by all tiers: budgets, scope keys and predicates,
//! requests, and per-request cost traces.
//!
//! Everything here is immutable after construction and safe to share across
//! threads. Scope predicates are conjunctions of equality/membership
//! constraints; wildcards are explicit variants rather than sentinel strings.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shard family: the heterogeneity axis that determines shard size and
/// access cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Profile,
    Observation,
    Session,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Profile, Family::Observation, Family::Session];

    /// Index used for the summary one-hot encoding.
    pub fn index(self) -> usize {
        match self {
            Family::Profile => 0,
            Family::Observation => 1,
            Family::Session => 2,
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Family::Profile => write!(f, "profile"),
            Family::Observation => write!(f, "observation"),
            Family::Session => write!(f, "session"),
        }
    }
}

/// Per-request budgets: Tier A context size, Tier B probe cap and retrieval
/// size, and Tier C skill budget.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budgets {
    pub m_context: usize,
    pub b_probe: usize,
    pub k_evidence: usize,
    pub r_skills: usize,
}

impl Budgets {
    /// Tier B can always be reached (the gate may fall back to it), so the
    /// probe cap must be at least 1.
    pub fn validate(&self) -> Result<()> {
        if self.b_probe == 0 {
            return Err(Error::InvalidBudgets(
                "b_probe must be >= 1 when Tier B is enabled".into(),
            ));
        }
        Ok(())
    }
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets {
            m_context: 4,
            b_probe: 3,
            k_evidence: 10,
            r_skills: 3,
        }
    }
}

/// Immutable scope key attached to every stored item. Shard assignment is a
/// pure function of this key, so it must never change after a write.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScopeKey {
    pub tenant: String,
    pub agent: String,
    #[serde(default)]
    pub session: Option<String>,
    #[serde(default)]
    pub domain: Option<String>,
    #[serde(default)]
    pub permission_tags: BTreeSet<String>,
}

impl ScopeKey {
    pub fn validate(&self) -> Result<()> {
        if self.tenant.is_empty() || self.agent.is_empty() {
            return Err(Error::MalformedItem {
                item_id: String::new(),
                reason: "tenant and agent must be non-empty".into(),
            });
        }
        Ok(())
    }
}

/// Membership constraint over a set of identifiers. `Any` is the explicit
/// wildcard variant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdFilter {
    Any,
    Only(BTreeSet<String>),
}

impl IdFilter {
    pub fn only<I: IntoIterator<Item = S>, S: Into<String>>(ids: I) -> Self {
        IdFilter::Only(ids.into_iter().map(Into::into).collect())
    }

    pub fn allows(&self, id: &str) -> bool {
        match self {
            IdFilter::Any => true,
            IdFilter::Only(set) => set.contains(id),
        }
    }

    /// An optional identifier passes a concrete set only when present and
    /// listed; an absent identifier passes only the wildcard.
    pub fn allows_opt(&self, id: Option<&str>) -> bool {
        match self {
            IdFilter::Any => true,
            IdFilter::Only(set) => id.is_some_and(|v| set.contains(v)),
        }
    }
}

/// Family constraint, mirroring [`IdFilter`] for shard families.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyFilter {
    Any,
    Only(BTreeSet<Family>),
}

impl FamilyFilter {
    pub fn only<I: IntoIterator<Item = Family>>(families: I) -> Self {
        FamilyFilter::Only(families.into_iter().collect())
    }

    pub fn allows(&self, family: Family) -> bool {
        match self {
            FamilyFilter::Any => true,
            FamilyFilter::Only(set) => set.contains(&family),
        }
    }
}

/// Conjunction of equality/membership constraints evaluated against a
/// (scope key, family) pair. Evaluation is pure: same inputs, same output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScopePredicate {
    pub required_tenant: String,
    pub allowed_agents: IdFilter,
    pub allowed_sessions: IdFilter,
    pub required_permissions: BTreeSet<String>,
    pub allowed_families: FamilyFilter,
}

impl ScopePredicate {
    /// Wildcard predicate for a single tenant.
    pub fn tenant_wide(tenant: impl Into<String>) -> Self {
        ScopePredicate {
            required_tenant: tenant.into(),
            allowed_agents: IdFilter::Any,
            allowed_sessions: IdFilter::Any,
            required_permissions: BTreeSet::new(),
            allowed_families: FamilyFilter::Any,
        }
    }
}

/// Evaluate a scope predicate against an item's key and family.
///
/// Total and side-effect free: every constraint is a pure conjunct, so the
/// result is independent of evaluation order.
pub fn scope_eval(pred: &ScopePredicate, key: &ScopeKey, family: Family) -> bool {
    pred.required_tenant == key.tenant
        && pred.allowed_agents.allows(&key.agent)
        && pred.allowed_sessions.allows_opt(key.session.as_deref())
        && pred.required_permissions.is_subset(&key.permission_tags)
        && pred.allowed_families.allows(family)
}

/// Probe selection mode for Tier B shard routing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    TopB,
    AdaptiveTopP,
}

/// Tier gate decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateDecision {
    B,
    C,
    BplusC,
}

impl GateDecision {
    /// Fixed label order used for argmax tie-breaking.
    pub const LABELS: [GateDecision; 3] = [GateDecision::B, GateDecision::C, GateDecision::BplusC];

    pub fn includes_b(self) -> bool {
        matches!(self, GateDecision::B | GateDecision::BplusC)
    }

    pub fn includes_c(self) -> bool {
        matches!(self, GateDecision::C | GateDecision::BplusC)
    }
}

impl std::fmt::Display for GateDecision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GateDecision::B => write!(f, "b"),
            GateDecision::C => write!(f, "c"),
            GateDecision::BplusC => write!(f, "b_plus_c"),
        }
    }
}

/// A read request: query text plus per-tier scope predicates and budgets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Request {
    pub request_id: String,
    pub query_text: String,
    pub scope_a: ScopePredicate,
    pub scope_b: ScopePredicate,
    pub scope_c: ScopePredicate,
    pub budgets: Budgets,
    pub probe_mode: ProbeMode,
    /// Overrides the learned gate; used for controlled experiments.
    #[serde(default)]
    pub forced_gate: Option<GateDecision>,
}

/// Per-request cost accounting: which shards were probed, how many vectors
/// were scored, and where the time went.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostTrace {
    pub probed_shards: Vec<String>,
    pub vec_scan: u64,
    /// Wall-clock latency of the whole read, in milliseconds.
    pub wall_latency: f64,
    /// Per-probe shard search latency, in milliseconds.
    pub per_shard_latency: BTreeMap<String, f64>,
    pub gate_decision: GateDecision,
    pub fallback_taken: bool,
}

impl CostTrace {
    pub fn empty(gate_decision: GateDecision) -> Self {
        CostTrace {
            probed_shards: Vec::new(),
            vec_scan: 0,
            wall_latency: 0.0,
            per_shard_latency: BTreeMap::new(),
            gate_decision,
            fallback_taken: false,
        }
    }
}

/// Parse one JSON-lines document per line, rejecting unknown fields.
pub fn from_json_lines<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Serialize a sequence as JSON lines, one object per line.
pub fn to_json_lines<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(tenant: &str) -> ScopeKey {
        ScopeKey {
            tenant: tenant.into(),
            agent: "a0".into(),
            session: None,
            domain: None,
            permission_tags: BTreeSet::new(),
        }
    }

    #[test]
    fn matching_tenant_with_wildcards_passes() {
        let pred = ScopePredicate::tenant_wide("T1");
        assert!(scope_eval(&pred, &key("T1"), Family::Observation));
    }

    #[test]
    fn tenant_mismatch_fails() {
        let pred = ScopePredicate::tenant_wide("T1");
        assert!(!scope_eval(&pred, &key("T2"), Family::Observation));
    }

    #[test]
    fn missing_permission_fails() {
        let mut pred = ScopePredicate::tenant_wide("T1");
        pred.required_permissions = ["p1".to_string(), "p2".to_string()].into_iter().collect();
        let mut k = key("T1");
        k.permission_tags = ["p1".to_string()].into_iter().collect();
        assert!(!scope_eval(&pred, &k, Family::Profile));
        k.permission_tags.insert("p2".into());
        assert!(scope_eval(&pred, &k, Family::Profile));
    }

    #[test]
    fn session_set_rejects_absent_session() {
        let mut pred = ScopePredicate::tenant_wide("T1");
        pred.allowed_sessions = IdFilter::only(["s1"]);
        assert!(!scope_eval(&pred, &key("T1"), Family::Session));
        let mut k = key("T1");
        k.session = Some("s1".into());
        assert!(scope_eval(&pred, &k, Family::Session));
    }

    #[test]
    fn family_filter_applies() {
        let mut pred = ScopePredicate::tenant_wide("T1");
        pred.allowed_families = FamilyFilter::only([Family::Profile]);
        assert!(scope_eval(&pred, &key("T1"), Family::Profile));
        assert!(!scope_eval(&pred, &key("T1"), Family::Session));
    }

    #[test]
    fn request_round_trips_and_rejects_unknown_fields() {
        let req = Request {
            request_id: "q1".into(),
            query_text: "when did it happen".into(),
            scope_a: ScopePredicate::tenant_wide("t0"),
            scope_b: ScopePredicate::tenant_wide("t0"),
            scope_c: ScopePredicate::tenant_wide("t0"),
            budgets: Budgets::default(),
            probe_mode: ProbeMode::TopB,
            forced_gate: Some(GateDecision::BplusC),
        };
        let line = serde_json::to_string(&req).unwrap();
        let back: Request = serde_json::from_str(&line).unwrap();
        assert_eq!(req, back);

        let with_extra = line.replace("\"request_id\"", "\"bogus\":1,\"request_id\"");
        assert!(serde_json::from_str::<Request>(&with_extra).is_err());
    }

    #[test]
    fn cost_trace_rejects_unknown_fields() {
        let trace = CostTrace::empty(GateDecision::B);
        let line = serde_json::to_string(&trace).unwrap();
        assert!(serde_json::from_str::<CostTrace>(&line).is_ok());
        let with_extra = line.replace("\"vec_scan\"", "\"extra\":0,\"vec_scan\"");
        assert!(serde_json::from_str::<CostTrace>(&with_extra).is_err());
    }

    #[test]
    fn zero_probe_budget_rejected() {
        let b = Budgets {
            b_probe: 0,
            ..Budgets::default()
        };
        assert!(b.validate().is_err());
        assert!(Budgets::default().validate().is_ok());
    }
}
