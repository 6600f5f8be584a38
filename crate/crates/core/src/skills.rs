//! Tier C: versioned skill artifacts with deterministic validation tests.
//!
//! Skills are induced from successful tool-call traces: constants in the
//! arguments are abstracted into typed slots and identical templates
//! deduplicate to one skill id (a content hash of the canonical procedure).
//! A version activates only after all of its tests pass against the current
//! tool snapshot; retrieval returns only active, scope- and
//! snapshot-compatible versions, ranked by description similarity with
//! reliability as the tie-breaker.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::fnv1a64;
use crate::embed::{Embedder, Embedding};
use crate::error::{Error, Result};
use crate::types::ScopePredicate;

// ---- tools ----

/// Deterministic stub behavior for a tool; the whole snapshot is a pure
/// function, which is what makes skill validation repeatable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StubBehavior {
    /// Returns the first argument (by name order).
    Echo,
    /// Joins string-ified arguments (by name order) with a separator.
    Concat { separator: String },
    /// Sums numeric arguments.
    Sum,
    /// Uppercases the concatenation of string arguments.
    Upper,
    /// Looks up the `key` argument in a fixed table; misses fail the step.
    Lookup { table: BTreeMap<String, Value> },
    /// Returns a constant.
    Constant { value: Value },
    /// Always fails; used to exercise failure and fallback paths.
    AlwaysFail { message: String },
}

impl StubBehavior {
    fn call(&self, args: &BTreeMap<String, Value>) -> std::result::Result<Value, String> {
        match self {
            StubBehavior::Echo => args
                .values()
                .next()
                .cloned()
                .ok_or_else(|| "echo requires at least one argument".to_string()),
            StubBehavior::Concat { separator } => Ok(Value::String(
                args.values()
                    .map(render)
                    .collect::<Vec<_>>()
                    .join(separator),
            )),
            StubBehavior::Sum => Ok(Value::from(
                args.values().filter_map(Value::as_f64).sum::<f64>(),
            )),
            StubBehavior::Upper => Ok(Value::String(
                args.values()
                    .filter_map(Value::as_str)
                    .collect::<Vec<_>>()
                    .join(" ")
                    .to_uppercase(),
            )),
            StubBehavior::Lookup { table } => {
                let key = args
                    .get("key")
                    .map(render)
                    .ok_or_else(|| "lookup requires a `key` argument".to_string())?;
                table
                    .get(&key)
                    .cloned()
                    .ok_or_else(|| format!("lookup miss for key `{key}`"))
            }
            StubBehavior::Constant { value } => Ok(value.clone()),
            StubBehavior::AlwaysFail { message } => Err(message.clone()),
        }
    }
}

fn render(value: &Value) -> String {
    match value {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub version: u32,
    pub behavior: StubBehavior,
}

/// Immutable per-run view of the available tools and schema version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSnapshot {
    pub schema_version: u32,
    pub tools: BTreeMap<String, ToolSpec>,
}

impl ToolSnapshot {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Executes tool calls. The snapshot-backed stub registry is the
/// deterministic implementation used by validation and the test harness.
pub trait ToolRunner: Send + Sync {
    fn call(&self, tool: &str, args: &BTreeMap<String, Value>) -> Result<Value>;
}

pub struct SnapshotRunner<'a> {
    snapshot: &'a ToolSnapshot,
}

impl<'a> SnapshotRunner<'a> {
    pub fn new(snapshot: &'a ToolSnapshot) -> Self {
        SnapshotRunner { snapshot }
    }
}

impl ToolRunner for SnapshotRunner<'_> {
    fn call(&self, tool: &str, args: &BTreeMap<String, Value>) -> Result<Value> {
        let spec = self
            .snapshot
            .tools
            .get(tool)
            .ok_or_else(|| Error::ToolUnavailable(tool.to_string()))?;
        spec.behavior
            .call(args)
            .map_err(|reason| Error::StepFailed { step: 0, reason })
    }
}

// ---- traces ----

/// One concrete tool call as it appeared in a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCallStep {
    pub tool: String,
    pub args: BTreeMap<String, Value>,
}

/// A recorded tool-call sequence plus the context needed for induction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolTrace {
    pub trace_id: String,
    pub desc: String,
    pub steps: Vec<ToolCallStep>,
    pub success: bool,
    #[serde(default)]
    pub domain: Option<String>,
    #[serde(default)]
    pub permissions: BTreeSet<String>,
}

// ---- skill artifacts ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotType {
    Text,
    Number,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub name: String,
    pub slot_type: SlotType,
}

/// Argument template: constants replaced by slot references; booleans and
/// nulls stay literal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateValue {
    Slot(String),
    Literal(Value),
    Object(BTreeMap<String, TemplateValue>),
    Array(Vec<TemplateValue>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateStep {
    pub tool: String,
    pub args: BTreeMap<String, TemplateValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expectation {
    /// The resolved call sequence must equal this trace.
    Trace(Vec<ToolCallStep>),
    /// The final step's output must equal this value.
    Output(Value),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillTest {
    pub bindings: BTreeMap<String, Value>,
    pub expect: Expectation,
}

/// Eligibility metadata: tool/schema compatibility plus domain and
/// permission tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillMeta {
    pub required_tools: BTreeMap<String, u32>,
    pub schema_version: u32,
    #[serde(default)]
    pub domain: Option<String>,
    #[serde(default)]
    pub permissions: BTreeSet<String>,
}

impl SkillMeta {
    /// Tool/schema compatibility with a snapshot: every required tool must
    /// be present at the exact pinned version.
    pub fn compatible_with(&self, snapshot: &ToolSnapshot) -> bool {
        self.schema_version == snapshot.schema_version
            && self
                .required_tools
                .iter()
                .all(|(tool, version)| {
                    snapshot.tools.get(tool).map(|t| t.version) == Some(*version)
                })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillArtifact {
    /// Content hash of the canonical procedure.
    pub skill_id: String,
    pub version: u32,
    pub desc: String,
    pub in_schema: Vec<SlotSpec>,
    pub out_schema: Vec<String>,
    pub proc: Vec<TemplateStep>,
    pub tests: Vec<SkillTest>,
    pub prov: String,
    pub meta: SkillMeta,
    pub active: bool,
    pub attempts: u64,
    pub successes: u64,
    desc_embedding: Embedding,
}

impl SkillArtifact {
    /// Laplace-smoothed success rate in (0, 1).
    pub fn reliability(&self) -> f64 {
        (self.successes as f64 + 1.0) / (self.attempts as f64 + 2.0)
    }
}

// ---- canonicalization ----

struct Canonicalizer {
    slots: Vec<SlotSpec>,
    bindings: BTreeMap<String, Value>,
    by_constant: BTreeMap<String, String>,
    depth_limit: usize,
}

impl Canonicalizer {
    fn new(depth_limit: usize) -> Self {
        Canonicalizer {
            slots: Vec::new(),
            bindings: BTreeMap::new(),
            by_constant: BTreeMap::new(),
            depth_limit,
        }
    }

    fn slot_for(&mut self, value: &Value, slot_type: SlotType) -> String {
        // Repeated constants bind to the same slot, so a value threaded
        // through several calls stays linked in the template.
        let key = format!("{slot_type:?}:{value}");
        if let Some(name) = self.by_constant.get(&key) {
            return name.clone();
        }
        let name = format!("slot{}", self.slots.len());
        self.slots.push(SlotSpec {
            name: name.clone(),
            slot_type,
        });
        self.bindings.insert(name.clone(), value.clone());
        self.by_constant.insert(key, name.clone());
        name
    }

    fn walk(&mut self, value: &Value, depth: usize) -> Result<TemplateValue> {
        if depth > self.depth_limit {
            return Err(Error::NonCanonicalizable(format!(
                "argument nesting exceeds depth limit {}",
                self.depth_limit
            )));
        }
        Ok(match value {
            Value::String(_) => TemplateValue::Slot(self.slot_for(value, SlotType::Text)),
            Value::Number(_) => TemplateValue::Slot(self.slot_for(value, SlotType::Number)),
            Value::Bool(_) | Value::Null => TemplateValue::Literal(value.clone()),
            Value::Object(map) => {
                let mut out = BTreeMap::new();
                for (k, v) in map {
                    out.insert(k.clone(), self.walk(v, depth + 1)?);
                }
                TemplateValue::Object(out)
            }
            Value::Array(items) => TemplateValue::Array(
                items
                    .iter()
                    .map(|v| self.walk(v, depth + 1))
                    .collect::<Result<_>>()?,
            ),
        })
    }
}

/// Output of canonicalizing one trace: the slot-abstracted procedure, the
/// slot schema, and the bindings that reproduce the original trace.
pub struct CanonicalTemplate {
    pub skill_id: String,
    pub proc: Vec<TemplateStep>,
    pub in_schema: Vec<SlotSpec>,
    pub original_bindings: BTreeMap<String, Value>,
}

pub const DEFAULT_ARG_DEPTH_LIMIT: usize = 3;

pub fn canonicalize(trace: &ToolTrace, depth_limit: usize) -> Result<CanonicalTemplate> {
    if trace.steps.is_empty() {
        return Err(Error::EmptyTrace);
    }
    if !trace.success {
        return Err(Error::NonCanonicalizable(
            "only successful traces induce skills".into(),
        ));
    }
    let mut canon = Canonicalizer::new(depth_limit);
    let mut proc = Vec::with_capacity(trace.steps.len());
    for step in &trace.steps {
        let mut args = BTreeMap::new();
        for (name, value) in &step.args {
            args.insert(name.clone(), canon.walk(value, 1)?);
        }
        proc.push(TemplateStep {
            tool: step.tool.clone(),
            args,
        });
    }
    let serialized = serde_json::to_string(&proc)?;
    let skill_id = format!("sk_{:016x}", fnv1a64(serialized.as_bytes()));
    Ok(CanonicalTemplate {
        skill_id,
        proc,
        in_schema: canon.slots,
        original_bindings: canon.bindings,
    })
}

fn resolve(
    template: &TemplateValue,
    bindings: &BTreeMap<String, Value>,
) -> Result<Value> {
    Ok(match template {
        TemplateValue::Slot(name) => bindings
            .get(name)
            .cloned()
            .ok_or_else(|| Error::MissingSlot(name.clone()))?,
        TemplateValue::Literal(value) => value.clone(),
        TemplateValue::Object(map) => Value::Object(
            map.iter()
                .map(|(k, v)| Ok((k.clone(), resolve(v, bindings)?)))
                .collect::<Result<_>>()?,
        ),
        TemplateValue::Array(items) => Value::Array(
            items
                .iter()
                .map(|v| resolve(v, bindings))
                .collect::<Result<_>>()?,
        ),
    })
}

/// Materialize the procedure into concrete calls for the given bindings.
pub fn resolve_steps(
    proc: &[TemplateStep],
    bindings: &BTreeMap<String, Value>,
) -> Result<Vec<ToolCallStep>> {
    proc.iter()
        .map(|step| {
            Ok(ToolCallStep {
                tool: step.tool.clone(),
                args: step
                    .args
                    .iter()
                    .map(|(k, v)| Ok((k.clone(), resolve(v, bindings)?)))
                    .collect::<Result<_>>()?,
            })
        })
        .collect()
}

// ---- validation & execution ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub skill_id: String,
    pub version: u32,
    pub results: Vec<TestResult>,
    pub passed: bool,
}

/// Result of an attempted execution. Reaching this type at all means the
/// skill was adopted (Adopt = 1); pre-flight errors such as a missing slot
/// surface as `Err` and count as no adoption.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionReport {
    pub success: bool,
    pub output: Option<Value>,
    pub failed_step: Option<usize>,
    pub failure: Option<String>,
    pub reliability_after: f64,
}

fn run_steps(
    steps: &[ToolCallStep],
    runner: &dyn ToolRunner,
) -> std::result::Result<Vec<Value>, (usize, String)> {
    let mut outputs = Vec::with_capacity(steps.len());
    for (i, step) in steps.iter().enumerate() {
        match runner.call(&step.tool, &step.args) {
            Ok(value) => outputs.push(value),
            Err(e) => return Err((i, e.to_string())),
        }
    }
    Ok(outputs)
}

/// The Tier C library: versioned skills keyed by content hash. Retrieval is
/// read-only; induction, validation, and execution stats serialize behind
/// the library lock.
pub struct SkillLibrary {
    skills: RwLock<BTreeMap<String, Vec<SkillArtifact>>>,
}

impl Default for SkillLibrary {
    fn default() -> Self {
        Self::new()
    }
}

impl SkillLibrary {
    pub fn new() -> Self {
        SkillLibrary {
            skills: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn skill_count(&self) -> usize {
        self.skills.read().unwrap().len()
    }

    pub fn versions_of(&self, skill_id: &str) -> Vec<SkillArtifact> {
        self.skills
            .read()
            .unwrap()
            .get(skill_id)
            .cloned()
            .unwrap_or_default()
    }

    pub fn all_skill_ids(&self) -> Vec<String> {
        self.skills.read().unwrap().keys().cloned().collect()
    }

    /// Induce a skill from a successful trace under the given snapshot.
    ///
    /// Identical templates deduplicate to the same skill id. Re-inducing
    /// under the same tool/schema snapshot is a no-op; a changed snapshot
    /// appends a new inactive version. Returns `(skill_id, version)`.
    pub fn induce_skill(
        &self,
        trace: &ToolTrace,
        snapshot: &ToolSnapshot,
        embedder: &dyn Embedder,
    ) -> Result<(String, u32)> {
        let template = canonicalize(trace, DEFAULT_ARG_DEPTH_LIMIT)?;
        let required_tools: BTreeMap<String, u32> = template
            .proc
            .iter()
            .map(|step| {
                let version = snapshot.tools.get(&step.tool).map_or(0, |t| t.version);
                (step.tool.clone(), version)
            })
            .collect();
        let meta = SkillMeta {
            required_tools,
            schema_version: snapshot.schema_version,
            domain: trace.domain.clone(),
            permissions: trace.permissions.clone(),
        };

        let mut skills = self.skills.write().unwrap();
        let versions = skills.entry(template.skill_id.clone()).or_default();
        if let Some(existing) = versions.iter().rev().find(|v| v.meta == meta) {
            return Ok((existing.skill_id.clone(), existing.version));
        }
        let version = versions.last().map_or(1, |v| v.version + 1);
        let test = SkillTest {
            bindings: template.original_bindings,
            expect: Expectation::Trace(trace.steps.clone()),
        };
        let artifact = SkillArtifact {
            skill_id: template.skill_id.clone(),
            version,
            desc: trace.desc.clone(),
            in_schema: template.in_schema,
            out_schema: vec!["result".to_string()],
            proc: template.proc,
            tests: vec![test],
            prov: format!("trace:{}", trace.trace_id),
            meta,
            active: false,
            attempts: 0,
            successes: 0,
            desc_embedding: embedder.embed(&trace.desc)?,
        };
        versions.push(artifact);
        Ok((template.skill_id, version))
    }

    /// Attach an extra validation test to a version (pre-activation only).
    pub fn add_test(&self, skill_id: &str, version: u32, test: SkillTest) -> Result<()> {
        let mut skills = self.skills.write().unwrap();
        let artifact = find_version_mut(&mut skills, skill_id, version)?;
        artifact.tests.push(test);
        Ok(())
    }

    /// Run every test of a version against the snapshot's stub tools and
    /// activate it iff all pass. A failing run leaves the version inactive
    /// and any previously active version untouched.
    pub fn validate(
        &self,
        skill_id: &str,
        version: u32,
        snapshot: &ToolSnapshot,
    ) -> Result<ValidationReport> {
        let artifact = {
            let skills = self.skills.read().unwrap();
            find_version(&skills, skill_id, version)?.clone()
        };
        if artifact.tests.is_empty() {
            return Err(Error::NoTests(skill_id.to_string()));
        }
        if !artifact.meta.compatible_with(snapshot) {
            return Err(Error::SnapshotMismatch {
                skill_id: skill_id.to_string(),
                requirement: format!(
                    "schema v{} and tools {:?}",
                    artifact.meta.schema_version, artifact.meta.required_tools
                ),
            });
        }

        let runner = SnapshotRunner::new(snapshot);
        let mut results = Vec::with_capacity(artifact.tests.len());
        for test in &artifact.tests {
            results.push(run_one_test(&artifact, test, &runner));
        }
        let passed = results.iter().all(|r| r.passed);
        if passed {
            let mut skills = self.skills.write().unwrap();
            find_version_mut(&mut skills, skill_id, version)?.active = true;
        }
        Ok(ValidationReport {
            skill_id: skill_id.to_string(),
            version,
            results,
            passed,
        })
    }

    /// Budgeted, scope-correct retrieval: active versions compatible with
    /// the snapshot whose permission tags satisfy the predicate, ranked by
    /// description similarity (reliability, then id, as tie-breaks).
    pub fn retrieve_skills(
        &self,
        query: &Embedding,
        pred: &ScopePredicate,
        snapshot: &ToolSnapshot,
        r_skills: usize,
    ) -> Vec<SkillArtifact> {
        if r_skills == 0 {
            return Vec::new();
        }
        let skills = self.skills.read().unwrap();
        let mut ranked: Vec<(f64, &SkillArtifact)> = skills
            .values()
            .filter_map(|versions| versions.iter().rev().find(|v| v.active))
            .filter(|artifact| {
                pred.required_permissions.is_subset(&artifact.meta.permissions)
                    && artifact.meta.compatible_with(snapshot)
            })
            .map(|artifact| (query.cosine(&artifact.desc_embedding), artifact))
            .collect();
        ranked.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| b.1.reliability().total_cmp(&a.1.reliability()))
                .then_with(|| a.1.skill_id.cmp(&b.1.skill_id))
        });
        ranked
            .into_iter()
            .take(r_skills)
            .map(|(_, artifact)| artifact.clone())
            .collect()
    }

    /// Similarity-only retrieval over every latest version, ignoring
    /// activation, scope, and snapshot compatibility. The flat-library
    /// reference arm for benchmarks.
    pub fn retrieve_by_similarity_only(&self, query: &Embedding, r_skills: usize) -> Vec<SkillArtifact> {
        let skills = self.skills.read().unwrap();
        let mut ranked: Vec<(f64, &SkillArtifact)> = skills
            .values()
            .filter_map(|versions| versions.last())
            .map(|artifact| (query.cosine(&artifact.desc_embedding), artifact))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.skill_id.cmp(&b.1.skill_id)));
        ranked
            .into_iter()
            .take(r_skills)
            .map(|(_, artifact)| artifact.clone())
            .collect()
    }

    /// Execute a skill with slot bindings against a tool runner.
    ///
    /// `Err(MissingSlot)` (or `UnknownSkill`) means execution was never
    /// attempted: Adopt = 0 and reliability is unchanged. An `Ok` report is
    /// an adoption; a failed report signals the caller to fall back to
    /// Tier B.
    pub fn execute_skill(
        &self,
        skill_id: &str,
        version: u32,
        bindings: &BTreeMap<String, Value>,
        runner: &dyn ToolRunner,
    ) -> Result<ExecutionReport> {
        let artifact = {
            let skills = self.skills.read().unwrap();
            find_version(&skills, skill_id, version)?.clone()
        };
        for slot in &artifact.in_schema {
            if !bindings.contains_key(&slot.name) {
                return Err(Error::MissingSlot(slot.name.clone()));
            }
        }
        let steps = resolve_steps(&artifact.proc, bindings)?;

        let outcome = run_steps(&steps, runner);
        let mut skills = self.skills.write().unwrap();
        let artifact = find_version_mut(&mut skills, skill_id, version)?;
        artifact.attempts += 1;
        let report = match outcome {
            Ok(outputs) => {
                artifact.successes += 1;
                ExecutionReport {
                    success: true,
                    output: outputs.last().cloned(),
                    failed_step: None,
                    failure: None,
                    reliability_after: artifact.reliability(),
                }
            }
            Err((step, reason)) => ExecutionReport {
                success: false,
                output: None,
                failed_step: Some(step),
                failure: Some(reason),
                reliability_after: artifact.reliability(),
            },
        };
        Ok(report)
    }

    // ---- persistence ----

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let skills = self.skills.read().unwrap();
        for (skill_id, versions) in skills.iter() {
            std::fs::write(
                dir.join(format!("{skill_id}.json")),
                serde_json::to_string_pretty(versions)?,
            )?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let library = SkillLibrary::new();
        if dir.exists() {
            let mut skills = library.skills.write().unwrap();
            let mut paths: Vec<_> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
                .collect();
            paths.sort();
            for path in paths {
                let versions: Vec<SkillArtifact> =
                    serde_json::from_str(&std::fs::read_to_string(&path)?)?;
                if let Some(first) = versions.first() {
                    skills.insert(first.skill_id.clone(), versions);
                }
            }
        }
        Ok(library)
    }
}

fn find_version<'a>(
    skills: &'a BTreeMap<String, Vec<SkillArtifact>>,
    skill_id: &str,
    version: u32,
) -> Result<&'a SkillArtifact> {
    skills
        .get(skill_id)
        .and_then(|versions| versions.iter().find(|v| v.version == version))
        .ok_or_else(|| Error::UnknownSkill(format!("{skill_id} v{version}")))
}

fn find_version_mut<'a>(
    skills: &'a mut BTreeMap<String, Vec<SkillArtifact>>,
    skill_id: &str,
    version: u32,
) -> Result<&'a mut SkillArtifact> {
    skills
        .get_mut(skill_id)
        .and_then(|versions| versions.iter_mut().find(|v| v.version == version))
        .ok_or_else(|| Error::UnknownSkill(format!("{skill_id} v{version}")))
}

fn run_one_test(artifact: &SkillArtifact, test: &SkillTest, runner: &dyn ToolRunner) -> TestResult {
    let steps = match resolve_steps(&artifact.proc, &test.bindings) {
        Ok(steps) => steps,
        Err(e) => {
            return TestResult {
                passed: false,
                detail: format!("binding error: {e}"),
            }
        }
    };
    let outputs = match run_steps(&steps, runner) {
        Ok(outputs) => outputs,
        Err((step, reason)) => {
            return TestResult {
                passed: false,
                detail: format!("step {step} failed: {reason}"),
            }
        }
    };
    match &test.expect {
        Expectation::Trace(expected) => {
            if &steps == expected {
                TestResult {
                    passed: true,
                    detail: "trace matched".into(),
                }
            } else {
                TestResult {
                    passed: false,
                    detail: "resolved trace differs from expected".into(),
                }
            }
        }
        Expectation::Output(expected) => {
            if outputs.last() == Some(expected) {
                TestResult {
                    passed: true,
                    detail: "output matched".into(),
                }
            } else {
                TestResult {
                    passed: false,
                    detail: format!("output {:?} != expected {expected:?}", outputs.last()),
                }
            }
        }
    }
}

/// Step-reduction statistic for an adopted skill. The default is the ratio
/// `without / with`; values above 1 mean the skill saved steps.
pub fn step_reduction(with_skill: usize, without_skill: usize) -> Result<f64> {
    step_reduction_with_mode(StepRedMode::Ratio, with_skill, without_skill)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRedMode {
    Ratio,
    Difference,
}

pub fn step_reduction_with_mode(
    mode: StepRedMode,
    with_skill: usize,
    without_skill: usize,
) -> Result<f64> {
    if with_skill == 0 || without_skill == 0 {
        return Err(Error::ZeroSteps);
    }
    Ok(match mode {
        StepRedMode::Ratio => without_skill as f64 / with_skill as f64,
        StepRedMode::Difference => without_skill as f64 - with_skill as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::HashEmbedder;
    use serde_json::json;

    fn snapshot_v1() -> ToolSnapshot {
        ToolSnapshot {
            schema_version: 1,
            tools: BTreeMap::from([
                (
                    "echo".to_string(),
                    ToolSpec {
                        version: 1,
                        behavior: StubBehavior::Echo,
                    },
                ),
                (
                    "join".to_string(),
                    ToolSpec {
                        version: 1,
                        behavior: StubBehavior::Concat {
                            separator: "-".into(),
                        },
                    },
                ),
                (
                    "boom".to_string(),
                    ToolSpec {
                        version: 1,
                        behavior: StubBehavior::AlwaysFail {
                            message: "stub exploded".into(),
                        },
                    },
                ),
            ]),
        }
    }

    fn embedder() -> HashEmbedder {
        HashEmbedder::new(32, 5)
    }

    fn trace(id: &str, constant: &str) -> ToolTrace {
        ToolTrace {
            trace_id: id.into(),
            desc: "echo then join a value".into(),
            steps: vec![
                ToolCallStep {
                    tool: "echo".into(),
                    args: BTreeMap::from([("value".to_string(), json!(constant))]),
                },
                ToolCallStep {
                    tool: "join".into(),
                    args: BTreeMap::from([
                        ("left".to_string(), json!(constant)),
                        ("right".to_string(), json!(42)),
                    ]),
                },
            ],
            success: true,
            domain: Some("demo".into()),
            permissions: BTreeSet::new(),
        }
    }

    #[test]
    fn constant_variation_dedups_to_one_skill() {
        let library = SkillLibrary::new();
        let snap = snapshot_v1();
        let e = embedder();
        let (id_a, v_a) = library.induce_skill(&trace("t1", "cats"), &snap, &e).unwrap();
        let (id_b, v_b) = library.induce_skill(&trace("t2", "dogs"), &snap, &e).unwrap();
        assert_eq!(id_a, id_b);
        assert_eq!(v_a, v_b);
        assert_eq!(library.skill_count(), 1);
        assert_eq!(library.versions_of(&id_a).len(), 1);
    }

    #[test]
    fn reinduction_is_a_no_op() {
        let library = SkillLibrary::new();
        let snap = snapshot_v1();
        let e = embedder();
        let first = library.induce_skill(&trace("t1", "cats"), &snap, &e).unwrap();
        let second = library.induce_skill(&trace("t1", "cats"), &snap, &e).unwrap();
        assert_eq!(first, second);
        assert_eq!(library.versions_of(&first.0).len(), 1);
    }

    #[test]
    fn different_tool_order_is_a_different_skill() {
        let library = SkillLibrary::new();
        let snap = snapshot_v1();
        let e = embedder();
        let mut reversed = trace("t1", "cats");
        reversed.steps.reverse();
        let (id_a, _) = library.induce_skill(&trace("t2", "cats"), &snap, &e).unwrap();
        let (id_b, _) = library.induce_skill(&reversed, &snap, &e).unwrap();
        assert_ne!(id_a, id_b);
    }

    #[test]
    fn changed_snapshot_appends_a_version() {
        let library = SkillLibrary::new();
        let e = embedder();
        let snap1 = snapshot_v1();
        let mut snap2 = snapshot_v1();
        snap2.tools.get_mut("echo").unwrap().version = 2;
        let (id, v1) = library.induce_skill(&trace("t1", "cats"), &snap1, &e).unwrap();
        let (id2, v2) = library.induce_skill(&trace("t1", "cats"), &snap2, &e).unwrap();
        assert_eq!(id, id2);
        assert_eq!(v1, 1);
        assert_eq!(v2, 2);
        let versions = library.versions_of(&id);
        assert_eq!(versions.len(), 2);
        assert!(versions.windows(2).all(|w| w[0].version < w[1].version));
    }

    #[test]
    fn empty_and_failed_traces_rejected() {
        let library = SkillLibrary::new();
        let snap = snapshot_v1();
        let e = embedder();
        let mut empty = trace("t1", "x");
        empty.steps.clear();
        assert!(matches!(
            library.induce_skill(&empty, &snap, &e),
            Err(Error::EmptyTrace)
        ));
        let mut failed = trace("t2", "x");
        failed.success = false;
        assert!(matches!(
            library.induce_skill(&failed, &snap, &e),
            Err(Error::NonCanonicalizable(_))
        ));
    }

    #[test]
    fn deep_nesting_rejected() {
        let library = SkillLibrary::new();
        let snap = snapshot_v1();
        let e = embedder();
        let mut deep = trace("t1", "x");
        deep.steps[0].args.insert(
            "nested".into(),
            json!({"a": {"b": {"c": {"d": "too deep"}}}}),
        );
        assert!(matches!(
            library.induce_skill(&deep, &snap, &e),
            Err(Error::NonCanonicalizable(_))
        ));
    }

    #[test]
    fn repeated_constant_shares_a_slot() {
        let template = canonicalize(&trace("t1", "cats"), DEFAULT_ARG_DEPTH_LIMIT).unwrap();
        // "cats" appears in two steps and must resolve to one slot.
        let text_slots: Vec<&SlotSpec> = template
            .in_schema
            .iter()
            .filter(|s| s.slot_type == SlotType::Text)
            .collect();
        assert_eq!(text_slots.len(), 1);
        assert_eq!(template.in_schema.len(), 2);
        // Every slot referenced in the procedure appears in the schema.
        let schema_names: BTreeSet<&str> =
            template.in_schema.iter().map(|s| s.name.as_str()).collect();
        for step in &template.proc {
            for value in step.args.values() {
                if let TemplateValue::Slot(name) = value {
                    assert!(schema_names.contains(name.as_str()));
                }
            }
        }
    }

    #[test]
    fn validation_gates_activation() {
        let library = SkillLibrary::new();
        let snap = snapshot_v1();
        let e = embedder();
        let (id, version) = library.induce_skill(&trace("t1", "cats"), &snap, &e).unwrap();
        assert!(!library.versions_of(&id)[0].active);

        let report = library.validate(&id, version, &snap).unwrap();
        assert!(report.passed);
        assert!(library.versions_of(&id)[0].active);
    }

    #[test]
    fn failing_test_blocks_activation_and_keeps_prior_active() {
        let library = SkillLibrary::new();
        let e = embedder();
        let snap1 = snapshot_v1();
        let (id, v1) = library.induce_skill(&trace("t1", "cats"), &snap1, &e).unwrap();
        library.validate(&id, v1, &snap1).unwrap();

        let mut snap2 = snapshot_v1();
        snap2.schema_version = 2;
        let (_, v2) = library.induce_skill(&trace("t1", "cats"), &snap2, &e).unwrap();
        library
            .add_test(
                &id,
                v2,
                SkillTest {
                    bindings: BTreeMap::from([
                        ("slot0".to_string(), json!("cats")),
                        ("slot1".to_string(), json!(42)),
                    ]),
                    expect: Expectation::Output(json!("definitely wrong")),
                },
            )
            .unwrap();
        let report = library.validate(&id, v2, &snap2).unwrap();
        assert!(!report.passed);
        let versions = library.versions_of(&id);
        assert!(versions[0].active, "prior version stays active");
        assert!(!versions[1].active, "failing version stays inactive");
    }

    #[test]
    fn validation_is_deterministic() {
        let library = SkillLibrary::new();
        let snap = snapshot_v1();
        let e = embedder();
        let (id, version) = library.induce_skill(&trace("t1", "cats"), &snap, &e).unwrap();
        let a = library.validate(&id, version, &snap).unwrap();
        let b = library.validate(&id, version, &snap).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn snapshot_mismatch_fails_without_activation() {
        let library = SkillLibrary::new();
        let snap = snapshot_v1();
        let e = embedder();
        let (id, version) = library.induce_skill(&trace("t1", "cats"), &snap, &e).unwrap();
        let mut other = snapshot_v1();
        other.tools.remove("join");
        assert!(matches!(
            library.validate(&id, version, &other),
            Err(Error::SnapshotMismatch { .. })
        ));
        assert!(!library.versions_of(&id)[0].active);
    }

    #[test]
    fn no_tests_is_an_error() {
        let library = SkillLibrary::new();
        let snap = snapshot_v1();
        let e = embedder();
        let (id, version) = library.induce_skill(&trace("t1", "cats"), &snap, &e).unwrap();
        {
            let mut skills = library.skills.write().unwrap();
            find_version_mut(&mut skills, &id, version).unwrap().tests.clear();
        }
        assert!(matches!(
            library.validate(&id, version, &snap),
            Err(Error::NoTests(_))
        ));
    }

    #[test]
    fn retrieval_excludes_inactive_and_incompatible() {
        let library = SkillLibrary::new();
        let snap = snapshot_v1();
        let e = embedder();
        let (id, version) = library.induce_skill(&trace("t1", "cats"), &snap, &e).unwrap();

        let query = e.embed("echo then join a value").unwrap();
        let pred = ScopePredicate::tenant_wide("t0");

        // Inactive: never returned even with perfect similarity.
        assert!(library.retrieve_skills(&query, &pred, &snap, 3).is_empty());

        library.validate(&id, version, &snap).unwrap();
        let got = library.retrieve_skills(&query, &pred, &snap, 3);
        assert_eq!(got.len(), 1);

        // R = 0 returns nothing.
        assert!(library.retrieve_skills(&query, &pred, &snap, 0).is_empty());

        // A skill pinned to tool v2 is excluded under a v1 snapshot.
        let mut snap_v2 = snapshot_v1();
        snap_v2.tools.get_mut("echo").unwrap().version = 2;
        let (_, v2) = library.induce_skill(&trace("t1", "cats"), &snap_v2, &e).unwrap();
        library.validate(&id, v2, &snap_v2).unwrap();
        let under_v1 = library.retrieve_skills(&query, &pred, &snap, 3);
        // The latest active version requires echo v2, so nothing matches v1.
        assert!(under_v1.is_empty());
        let under_v2 = library.retrieve_skills(&query, &pred, &snap_v2, 3);
        assert_eq!(under_v2.len(), 1);
        assert_eq!(under_v2[0].version, v2);
    }

    #[test]
    fn permission_scope_filters_retrieval() {
        let library = SkillLibrary::new();
        let snap = snapshot_v1();
        let e = embedder();
        let mut gated = trace("t1", "cats");
        gated.permissions = ["admin".to_string()].into();
        let (id, version) = library.induce_skill(&gated, &snap, &e).unwrap();
        library.validate(&id, version, &snap).unwrap();

        let query = e.embed("echo then join a value").unwrap();
        let mut pred = ScopePredicate::tenant_wide("t0");
        pred.required_permissions = ["admin".to_string(), "root".to_string()].into();
        assert!(library.retrieve_skills(&query, &pred, &snap, 3).is_empty());
        pred.required_permissions = ["admin".to_string()].into();
        assert_eq!(library.retrieve_skills(&query, &pred, &snap, 3).len(), 1);
    }

    #[test]
    fn execution_success_updates_reliability() {
        let library = SkillLibrary::new();
        let snap = snapshot_v1();
        let e = embedder();
        let (id, version) = library.induce_skill(&trace("t1", "cats"), &snap, &e).unwrap();
        library.validate(&id, version, &snap).unwrap();

        let runner = SnapshotRunner::new(&snap);
        let bindings = BTreeMap::from([
            ("slot0".to_string(), json!("birds")),
            ("slot1".to_string(), json!(42)),
        ]);
        let report = library.execute_skill(&id, version, &bindings, &runner).unwrap();
        assert!(report.success);
        assert_eq!(report.output, Some(json!("birds-42")));
        assert!(report.reliability_after > 0.5);
    }

    #[test]
    fn missing_slot_means_no_adoption() {
        let library = SkillLibrary::new();
        let snap = snapshot_v1();
        let e = embedder();
        let (id, version) = library.induce_skill(&trace("t1", "cats"), &snap, &e).unwrap();
        let runner = SnapshotRunner::new(&snap);
        let err = library.execute_skill(&id, version, &BTreeMap::new(), &runner);
        assert!(matches!(err, Err(Error::MissingSlot(_))));
        assert_eq!(library.versions_of(&id)[0].attempts, 0);
    }

    #[test]
    fn failing_step_reports_its_index() {
        let library = SkillLibrary::new();
        let snap = snapshot_v1();
        let e = embedder();
        let failing = ToolTrace {
            trace_id: "t9".into(),
            desc: "echo then explode".into(),
            steps: vec![
                ToolCallStep {
                    tool: "echo".into(),
                    args: BTreeMap::from([("value".to_string(), json!("ok"))]),
                },
                ToolCallStep {
                    tool: "boom".into(),
                    args: BTreeMap::from([("value".to_string(), json!("ok"))]),
                },
            ],
            success: true,
            domain: None,
            permissions: BTreeSet::new(),
        };
        let (id, version) = library.induce_skill(&failing, &snap, &e).unwrap();
        let runner = SnapshotRunner::new(&snap);
        let bindings = BTreeMap::from([("slot0".to_string(), json!("ok"))]);
        let report = library.execute_skill(&id, version, &bindings, &runner).unwrap();
        assert!(!report.success);
        assert_eq!(report.failed_step, Some(1));
        assert_eq!(library.versions_of(&id)[0].attempts, 1);
        assert_eq!(library.versions_of(&id)[0].successes, 0);
    }

    #[test]
    fn step_reduction_ratios() {
        assert_eq!(step_reduction(3, 6).unwrap(), 2.0);
        assert_eq!(step_reduction(4, 4).unwrap(), 1.0);
        assert!(matches!(step_reduction(0, 5), Err(Error::ZeroSteps)));
        assert_eq!(
            step_reduction_with_mode(StepRedMode::Difference, 3, 6).unwrap(),
            3.0
        );
    }

    #[test]
    fn library_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let library = SkillLibrary::new();
        let snap = snapshot_v1();
        let e = embedder();
        let (id, version) = library.induce_skill(&trace("t1", "cats"), &snap, &e).unwrap();
        library.validate(&id, version, &snap).unwrap();
        library.save(dir.path()).unwrap();

        let loaded = SkillLibrary::load(dir.path()).unwrap();
        assert_eq!(loaded.skill_count(), 1);
        assert_eq!(loaded.versions_of(&id), library.versions_of(&id));
    }
}
