//! Tier B evidence storage: a versioned shard map, family-typed shards with
//! shard-local vector indexes, routing summaries, and the write path.
//!
//! Shard assignment is a pure function of the immutable scope key, so the
//! same item always lands in the same shard for a given map version.
//! Eligibility is computed from shard partitions alone — no vector work —
//! which is what lets routing be masked before any semantic scoring.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::config::{fnv1a64, IndexKind};
use crate::embed::{Embedder, Embedding};
use crate::error::{Error, Result};
use crate::index::{restore_index, ExactFlatIndex, Hit, IndexSnapshot, NswIndex, VectorIndex};
use crate::types::{scope_eval, Family, ScopeKey, ScopePredicate};

/// A Tier B evidence object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryItem {
    pub item_id: String,
    pub text: String,
    pub embedding: Embedding,
    pub scope: ScopeKey,
    pub family: Family,
    /// Source reference, e.g. a dialog turn id or a Tier A entry id.
    pub provenance: String,
    pub created_at: u64,
}

/// Wire format for ingest files: one item per line, embedding optional
/// (computed from `text` when absent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestRecord {
    pub item_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    pub scope: ScopeKey,
    pub family: Family,
    pub provenance: String,
    pub created_at: u64,
}

impl IngestRecord {
    pub fn from_item(item: &MemoryItem) -> Self {
        IngestRecord {
            item_id: item.item_id.clone(),
            text: item.text.clone(),
            embedding: Some(item.embedding.values().to_vec()),
            scope: item.scope.clone(),
            family: item.family,
            provenance: item.provenance.clone(),
            created_at: item.created_at,
        }
    }

    pub fn into_item(self, embedder: &dyn Embedder) -> Result<MemoryItem> {
        let embedding = match self.embedding {
            Some(values) => Embedding::new(values),
            None => embedder.embed(&self.text)?,
        };
        Ok(MemoryItem {
            item_id: self.item_id,
            text: self.text,
            embedding,
            scope: self.scope,
            family: self.family,
            provenance: self.provenance,
            created_at: self.created_at,
        })
    }
}

/// The immutable key slice a shard owns. `agent`/`session` are `Some` only
/// when that dimension is pinned for the shard's family.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardPartition {
    pub tenant: String,
    pub family: Family,
    pub agent: Option<String>,
    pub session: Option<String>,
    pub domain_slice: Option<String>,
}

impl ShardPartition {
    /// Partition-level eligibility: only the pinned dimensions constrain the
    /// shard; item-level constraints (permissions, unpinned dims) are
    /// enforced by the post-filter.
    pub fn eligible(&self, pred: &ScopePredicate) -> bool {
        pred.allowed_families.allows(self.family)
            && pred.required_tenant == self.tenant
            && self
                .agent
                .as_deref()
                .is_none_or(|a| pred.allowed_agents.allows(a))
            && self
                .session
                .as_deref()
                .is_none_or(|s| pred.allowed_sessions.allows(s))
    }

    /// Internal invariant check: does this partition accept the item's key?
    pub fn accepts(&self, key: &ScopeKey, family: Family) -> bool {
        self.family == family
            && self.tenant == key.tenant
            && self.agent.as_deref().is_none_or(|a| a == key.agent)
            && self
                .session
                .as_deref()
                .is_none_or(|s| key.session.as_deref() == Some(s))
            && match self.family {
                Family::Observation => {
                    self.domain_slice.as_deref() == Some(domain_slice(key).as_str())
                }
                _ => true,
            }
    }
}

fn domain_slice(key: &ScopeKey) -> String {
    key.domain.clone().unwrap_or_else(|| "general".to_string())
}

/// Versioned, deterministic (scope key, family) -> shard id assignment.
///
/// Profile shards split by agent, observation shards by domain slice, and
/// session shards by session id. Split/merge would be a version bump; the
/// map behavior is fixed at version 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShardMap {
    pub version: u32,
}

impl ShardMap {
    pub fn v1() -> Self {
        ShardMap { version: 1 }
    }

    /// Stub for future split/merge support: bumps the version only.
    pub fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn assign(&self, key: &ScopeKey, family: Family) -> Result<(String, ShardPartition)> {
        let tenant = &key.tenant;
        match family {
            Family::Profile => Ok((
                format!("profile:{tenant}:{}", key.agent),
                ShardPartition {
                    tenant: tenant.clone(),
                    family,
                    agent: Some(key.agent.clone()),
                    session: None,
                    domain_slice: None,
                },
            )),
            Family::Observation => {
                let slice = domain_slice(key);
                Ok((
                    format!("obs:{tenant}:{slice}"),
                    ShardPartition {
                        tenant: tenant.clone(),
                        family,
                        agent: None,
                        session: None,
                        domain_slice: Some(slice),
                    },
                ))
            }
            Family::Session => {
                let session = key.session.clone().ok_or_else(|| Error::MalformedItem {
                    item_id: String::new(),
                    reason: "session-family items require a session id".into(),
                })?;
                Ok((
                    format!("session:{tenant}:{session}"),
                    ShardPartition {
                        tenant: tenant.clone(),
                        family,
                        agent: None,
                        session: Some(session),
                        domain_slice: None,
                    },
                ))
            }
        }
    }
}

/// Lightweight routing summary: centroid, family one-hot, and log size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardSummary {
    pub centroid: Vec<f64>,
    pub family_onehot: [f64; 3],
    pub log_size: f64,
}

impl ShardSummary {
    pub fn empty(dim: usize, family: Family) -> Self {
        let mut onehot = [0.0; 3];
        onehot[family.index()] = 1.0;
        ShardSummary {
            centroid: vec![0.0; dim],
            family_onehot: onehot,
            log_size: 0.0,
        }
    }

    /// Concatenated summary vector used by the router, dimension D + 3 + 1.
    pub fn vector(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.centroid.len() + 4);
        out.extend_from_slice(&self.centroid);
        out.extend_from_slice(&self.family_onehot);
        out.push(self.log_size);
        out
    }
}

struct Shard {
    shard_id: String,
    partition: ShardPartition,
    items: Vec<MemoryItem>,
    index: Box<dyn VectorIndex>,
    summary: ShardSummary,
    summary_dirty: bool,
    last_created_at: u64,
}

impl Shard {
    fn new(shard_id: String, partition: ShardPartition, dim: usize, kind: IndexKind) -> Self {
        let index: Box<dyn VectorIndex> = match kind {
            IndexKind::ExactFlat => Box::new(ExactFlatIndex::new()),
            IndexKind::GraphApprox => Box::new(NswIndex::with_defaults()),
        };
        let family = partition.family;
        Shard {
            shard_id,
            partition,
            items: Vec::new(),
            index,
            summary: ShardSummary::empty(dim, family),
            summary_dirty: false,
            last_created_at: 0,
        }
    }

    fn recompute_summary(&mut self, dim: usize) {
        let mut centroid = vec![0.0f64; dim];
        for item in &self.items {
            for (acc, v) in centroid.iter_mut().zip(item.embedding.values()) {
                *acc += v;
            }
        }
        if !self.items.is_empty() {
            let n = self.items.len() as f64;
            for v in &mut centroid {
                *v /= n;
            }
        }
        self.summary.centroid = centroid;
        self.summary.log_size = (1.0 + self.items.len() as f64).ln();
        self.summary_dirty = false;
    }
}

/// Per-shard routing inputs handed to the router: fresh summary vector,
/// cost estimate, and recency for the recency baseline.
#[derive(Debug, Clone)]
pub struct ShardRoutingInfo {
    pub shard_id: String,
    pub summary: Vec<f64>,
    pub centroid: Embedding,
    pub cost: f64,
    pub size: usize,
    pub last_created_at: u64,
}

/// The Tier B store. Shards live behind per-shard locks so probes fan out
/// concurrently and writes to different shards do not contend.
pub struct EvidenceStore {
    dim: usize,
    index_kind: IndexKind,
    map: ShardMap,
    shards: RwLock<BTreeMap<String, Arc<RwLock<Shard>>>>,
    /// item id -> shard id; also serves as the duplicate-id guard.
    item_locations: Mutex<HashMap<String, String>>,
}

impl EvidenceStore {
    pub fn new(dim: usize, index_kind: IndexKind) -> Self {
        EvidenceStore {
            dim,
            index_kind,
            map: ShardMap::v1(),
            shards: RwLock::new(BTreeMap::new()),
            item_locations: Mutex::new(HashMap::new()),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shard_map_version(&self) -> u32 {
        self.map.version
    }

    fn validate_item(&self, item: &MemoryItem) -> Result<()> {
        if item.item_id.is_empty() {
            return Err(Error::MalformedItem {
                item_id: item.item_id.clone(),
                reason: "item_id must be non-empty".into(),
            });
        }
        if let Err(Error::MalformedItem { reason, .. }) = item.scope.validate() {
            return Err(Error::MalformedItem {
                item_id: item.item_id.clone(),
                reason,
            });
        }
        if item.embedding.dim() != self.dim {
            return Err(Error::MalformedItem {
                item_id: item.item_id.clone(),
                reason: format!(
                    "embedding dimension {} != store dimension {}",
                    item.embedding.dim(),
                    self.dim
                ),
            });
        }
        Ok(())
    }

    /// Append an item to the shard the map assigns it to. Returns the shard
    /// id. The shard summary is marked dirty and refreshed on the next
    /// routing read or flush.
    pub fn write_item(&self, item: MemoryItem) -> Result<String> {
        self.validate_item(&item)?;
        let (shard_id, partition) = self.map.assign(&item.scope, item.family).map_err(|e| {
            match e {
                Error::MalformedItem { reason, .. } => Error::MalformedItem {
                    item_id: item.item_id.clone(),
                    reason,
                },
                other => other,
            }
        })?;
        if !partition.accepts(&item.scope, item.family) {
            // The map must assign items only to partitions that accept them.
            return Err(Error::CrossScopeRejected {
                item_id: item.item_id.clone(),
                shard_id,
            });
        }

        {
            let mut locations = self.item_locations.lock().unwrap();
            if locations.contains_key(&item.item_id) {
                return Err(Error::DuplicateId(item.item_id));
            }
            locations.insert(item.item_id.clone(), shard_id.clone());
        }

        let shard_arc = {
            let shards = self.shards.read().unwrap();
            shards.get(&shard_id).cloned()
        };
        let shard_arc = match shard_arc {
            Some(arc) => arc,
            None => {
                let mut shards = self.shards.write().unwrap();
                shards
                    .entry(shard_id.clone())
                    .or_insert_with(|| {
                        Arc::new(RwLock::new(Shard::new(
                            shard_id.clone(),
                            partition.clone(),
                            self.dim,
                            self.index_kind,
                        )))
                    })
                    .clone()
            }
        };

        let mut shard = shard_arc.write().unwrap();
        if !shard.partition.accepts(&item.scope, item.family) {
            return Err(Error::CrossScopeRejected {
                item_id: item.item_id.clone(),
                shard_id: shard.shard_id.clone(),
            });
        }
        shard
            .index
            .insert(item.item_id.clone(), item.embedding.clone())?;
        shard.last_created_at = shard.last_created_at.max(item.created_at);
        shard.items.push(item);
        shard.summary_dirty = true;
        Ok(shard_id)
    }

    /// Parse an ingest file (JSON lines) and write every item, computing
    /// embeddings for records that omit them.
    pub fn ingest_lines(&self, text: &str, embedder: &dyn Embedder) -> Result<usize> {
        let records: Vec<IngestRecord> = crate::types::from_json_lines(text)?;
        let mut written = 0;
        for record in records {
            self.write_item(record.into_item(embedder)?)?;
            written += 1;
        }
        Ok(written)
    }

    /// Exactly the shards whose partition satisfies the predicate. Metadata
    /// only: contributes nothing to VecScan.
    pub fn eligible_shards(&self, pred: &ScopePredicate) -> BTreeSet<String> {
        let shards = self.shards.read().unwrap();
        shards
            .iter()
            .filter(|(_, shard)| shard.read().unwrap().partition.eligible(pred))
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn shard_ids(&self) -> BTreeSet<String> {
        self.shards.read().unwrap().keys().cloned().collect()
    }

    pub fn shard_count(&self) -> usize {
        self.shards.read().unwrap().len()
    }

    pub fn total_items(&self) -> usize {
        self.item_locations.lock().unwrap().len()
    }

    pub fn shard_size(&self, shard_id: &str) -> Result<usize> {
        let arc = self.shard_arc(shard_id)?;
        let size = arc.read().unwrap().items.len();
        Ok(size)
    }

    pub fn shard_partition(&self, shard_id: &str) -> Result<ShardPartition> {
        let arc = self.shard_arc(shard_id)?;
        let partition = arc.read().unwrap().partition.clone();
        Ok(partition)
    }

    pub fn items_of(&self, shard_id: &str) -> Result<Vec<MemoryItem>> {
        let arc = self.shard_arc(shard_id)?;
        let items = arc.read().unwrap().items.clone();
        Ok(items)
    }

    pub fn get_item(&self, item_id: &str) -> Option<MemoryItem> {
        let shard_id = self.item_locations.lock().unwrap().get(item_id).cloned()?;
        let arc = self.shard_arc(&shard_id).ok()?;
        let shard = arc.read().unwrap();
        shard
            .items
            .iter()
            .find(|item| item.item_id == item_id)
            .cloned()
    }

    fn shard_arc(&self, shard_id: &str) -> Result<Arc<RwLock<Shard>>> {
        self.shards
            .read()
            .unwrap()
            .get(shard_id)
            .cloned()
            .ok_or_else(|| Error::UnknownShard(shard_id.to_string()))
    }

    /// Top-n within one shard, ties broken by ascending item id. Returns the
    /// hits and the number of vectors scored for the caller's cost trace.
    pub fn shard_search(
        &self,
        shard_id: &str,
        query: &Embedding,
        n: usize,
    ) -> Result<(Vec<Hit>, u64)> {
        let arc = self.shard_arc(shard_id)?;
        let shard = arc.read().unwrap();
        if n == 0 {
            return Ok((Vec::new(), 0));
        }
        let out = shard.index.search(query, n);
        Ok((out.hits, out.scanned))
    }

    /// Recompute one shard's summary from its current items.
    pub fn refresh_summary(&self, shard_id: &str) -> Result<ShardSummary> {
        let arc = self.shard_arc(shard_id)?;
        let mut shard = arc.write().unwrap();
        shard.recompute_summary(self.dim);
        Ok(shard.summary.clone())
    }

    /// Refresh every dirty summary; call after a batch of writes.
    pub fn flush(&self) {
        let arcs: Vec<Arc<RwLock<Shard>>> =
            self.shards.read().unwrap().values().cloned().collect();
        for arc in arcs {
            let mut shard = arc.write().unwrap();
            if shard.summary_dirty {
                shard.recompute_summary(self.dim);
            }
        }
    }

    /// Size-ratio cost estimate: shard size divided by the mean shard size,
    /// so compact profile shards are cheaper than large session shards.
    pub fn estimate_cost(&self, shard_id: &str) -> Result<f64> {
        let mean = self.mean_shard_size();
        let size = self.shard_size(shard_id)? as f64;
        if mean == 0.0 {
            return Ok(0.0);
        }
        Ok(size / mean)
    }

    fn mean_shard_size(&self) -> f64 {
        let shards = self.shards.read().unwrap();
        if shards.is_empty() {
            return 0.0;
        }
        let total: usize = shards
            .values()
            .map(|arc| arc.read().unwrap().items.len())
            .sum();
        total as f64 / shards.len() as f64
    }

    /// Fresh routing inputs for the given shards, sorted by shard id.
    /// Dirty summaries are recomputed here so the router never sees a stale
    /// centroid after a write batch.
    pub fn routing_view(&self, ids: &BTreeSet<String>) -> Result<Vec<ShardRoutingInfo>> {
        let mean = self.mean_shard_size();
        let mut out = Vec::with_capacity(ids.len());
        for shard_id in ids {
            let arc = self.shard_arc(shard_id)?;
            {
                let shard = arc.read().unwrap();
                if !shard.summary_dirty {
                    out.push(routing_info(&shard, mean));
                    continue;
                }
            }
            let mut shard = arc.write().unwrap();
            if shard.summary_dirty {
                shard.recompute_summary(self.dim);
            }
            out.push(routing_info(&shard, mean));
        }
        Ok(out)
    }

    /// Item-level post-filter used after the merge: full predicate over the
    /// item's own scope key and family.
    pub fn item_passes(&self, item: &MemoryItem, pred: &ScopePredicate) -> bool {
        scope_eval(pred, &item.scope, item.family)
    }

    // ---- snapshot ----

    pub fn save(&self, dir: &Path, config_hash: &str) -> Result<()> {
        std::fs::create_dir_all(dir.join("shards"))?;
        let shards = self.shards.read().unwrap();
        let mut manifest_shards = Vec::new();
        for (shard_id, arc) in shards.iter() {
            let shard = arc.read().unwrap();
            let dir_name = shard_dir_name(shard_id);
            let shard_dir = dir.join("shards").join(&dir_name);
            std::fs::create_dir_all(&shard_dir)?;
            let records: Vec<IngestRecord> =
                shard.items.iter().map(IngestRecord::from_item).collect();
            std::fs::write(
                shard_dir.join("items.jsonl"),
                crate::types::to_json_lines(&records)?,
            )?;
            std::fs::write(
                shard_dir.join("index.json"),
                serde_json::to_string_pretty(&shard.index.snapshot())?,
            )?;
            let summary_file = SummaryFile {
                partition: shard.partition.clone(),
                summary: shard.summary.clone(),
                summary_dirty: shard.summary_dirty,
                last_created_at: shard.last_created_at,
            };
            std::fs::write(
                shard_dir.join("summary.json"),
                serde_json::to_string_pretty(&summary_file)?,
            )?;
            manifest_shards.push(ManifestShard {
                shard_id: shard_id.clone(),
                dir_name,
            });
        }
        let manifest = Manifest {
            shard_map_version: self.map.version,
            config_hash: config_hash.to_string(),
            dim: self.dim,
            index_kind: self.index_kind,
            shards: manifest_shards,
        };
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path, expected_config_hash: Option<&str>) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        if let Some(expected) = expected_config_hash {
            if manifest.config_hash != expected {
                return Err(Error::InvalidConfig(format!(
                    "snapshot config hash {} does not match expected {}",
                    manifest.config_hash, expected
                )));
            }
        }
        let store = EvidenceStore {
            dim: manifest.dim,
            index_kind: manifest.index_kind,
            map: ShardMap {
                version: manifest.shard_map_version,
            },
            shards: RwLock::new(BTreeMap::new()),
            item_locations: Mutex::new(HashMap::new()),
        };
        let mut shards = store.shards.write().unwrap();
        let mut locations = store.item_locations.lock().unwrap();
        for entry in &manifest.shards {
            let shard_dir = dir.join("shards").join(&entry.dir_name);
            let records: Vec<IngestRecord> = crate::types::from_json_lines(
                &std::fs::read_to_string(shard_dir.join("items.jsonl"))?,
            )?;
            let summary_file: SummaryFile =
                serde_json::from_str(&std::fs::read_to_string(shard_dir.join("summary.json"))?)?;
            let index_snapshot: IndexSnapshot =
                serde_json::from_str(&std::fs::read_to_string(shard_dir.join("index.json"))?)?;

            let mut items = Vec::with_capacity(records.len());
            let mut vectors = BTreeMap::new();
            for record in records {
                let embedding = Embedding::new(record.embedding.clone().ok_or_else(|| {
                    Error::MalformedItem {
                        item_id: record.item_id.clone(),
                        reason: "snapshot items must carry embeddings".into(),
                    }
                })?);
                vectors.insert(record.item_id.clone(), embedding.clone());
                locations.insert(record.item_id.clone(), entry.shard_id.clone());
                items.push(MemoryItem {
                    item_id: record.item_id,
                    text: record.text,
                    embedding,
                    scope: record.scope,
                    family: record.family,
                    provenance: record.provenance,
                    created_at: record.created_at,
                });
            }
            let index = restore_index(&index_snapshot, &vectors)?;
            shards.insert(
                entry.shard_id.clone(),
                Arc::new(RwLock::new(Shard {
                    shard_id: entry.shard_id.clone(),
                    partition: summary_file.partition,
                    items,
                    index,
                    summary: summary_file.summary,
                    summary_dirty: summary_file.summary_dirty,
                    last_created_at: summary_file.last_created_at,
                })),
            );
        }
        drop(shards);
        drop(locations);
        Ok(store)
    }
}

fn routing_info(shard: &Shard, mean_size: f64) -> ShardRoutingInfo {
    let size = shard.items.len();
    let cost = if mean_size == 0.0 {
        0.0
    } else {
        size as f64 / mean_size
    };
    ShardRoutingInfo {
        shard_id: shard.shard_id.clone(),
        summary: shard.summary.vector(),
        centroid: Embedding::new(shard.summary.centroid.clone()),
        cost,
        size,
        last_created_at: shard.last_created_at,
    }
}

fn shard_dir_name(shard_id: &str) -> String {
    let sanitized: String = shard_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    format!("{sanitized}_{:08x}", fnv1a64(shard_id.as_bytes()) as u32)
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    shard_map_version: u32,
    config_hash: String,
    dim: usize,
    index_kind: IndexKind,
    shards: Vec<ManifestShard>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestShard {
    shard_id: String,
    dir_name: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct SummaryFile {
    partition: ShardPartition,
    summary: ShardSummary,
    summary_dirty: bool,
    last_created_at: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{FamilyFilter, IdFilter};

    fn key(tenant: &str, agent: &str, session: Option<&str>, domain: Option<&str>) -> ScopeKey {
        ScopeKey {
            tenant: tenant.into(),
            agent: agent.into(),
            session: session.map(Into::into),
            domain: domain.map(Into::into),
            permission_tags: BTreeSet::new(),
        }
    }

    fn item(id: &str, scope: ScopeKey, family: Family, values: Vec<f64>) -> MemoryItem {
        MemoryItem {
            item_id: id.into(),
            text: format!("text for {id}"),
            embedding: Embedding::new(values),
            scope,
            family,
            provenance: "test".into(),
            created_at: 1,
        }
    }

    fn store2() -> EvidenceStore {
        EvidenceStore::new(2, IndexKind::ExactFlat)
    }

    #[test]
    fn same_scope_and_family_land_in_same_shard() {
        let store = store2();
        let a = store
            .write_item(item("a", key("t1", "a0", Some("s1"), None), Family::Session, vec![1.0, 0.0]))
            .unwrap();
        let b = store
            .write_item(item("b", key("t1", "a0", Some("s1"), None), Family::Session, vec![0.0, 1.0]))
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(store.shard_count(), 1);
    }

    #[test]
    fn items_never_cross_tenants() {
        let store = store2();
        store
            .write_item(item("a", key("t1", "a0", None, Some("d1")), Family::Observation, vec![1.0, 0.0]))
            .unwrap();
        store
            .write_item(item("b", key("t2", "a0", None, Some("d1")), Family::Observation, vec![1.0, 0.0]))
            .unwrap();
        for shard_id in store.shard_ids() {
            let partition = store.shard_partition(&shard_id).unwrap();
            for it in store.items_of(&shard_id).unwrap() {
                assert_eq!(it.scope.tenant, partition.tenant);
            }
        }
        assert_eq!(store.shard_count(), 2);
    }

    #[test]
    fn forty_session_shards_from_forty_sessions() {
        let store = store2();
        for s in 0..40 {
            for turn in 0..3 {
                store
                    .write_item(item(
                        &format!("c{s}t{turn}"),
                        key("t1", "a0", Some(&format!("s{s}")), None),
                        Family::Session,
                        vec![1.0, 0.0],
                    ))
                    .unwrap();
            }
        }
        assert_eq!(store.shard_count(), 40);
        assert_eq!(store.total_items(), 120);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let store = store2();
        let k = key("t1", "a0", None, None);
        store
            .write_item(item("a", k.clone(), Family::Profile, vec![1.0, 0.0]))
            .unwrap();
        let err = store.write_item(item("a", k, Family::Profile, vec![1.0, 0.0]));
        assert!(matches!(err, Err(Error::DuplicateId(_))));
    }

    #[test]
    fn dimension_mismatch_is_malformed() {
        let store = store2();
        let err = store.write_item(item(
            "a",
            key("t1", "a0", None, None),
            Family::Profile,
            vec![1.0, 0.0, 0.0],
        ));
        assert!(matches!(err, Err(Error::MalformedItem { .. })));
    }

    #[test]
    fn session_items_require_session_id() {
        let store = store2();
        let err = store.write_item(item(
            "a",
            key("t1", "a0", None, None),
            Family::Session,
            vec![1.0, 0.0],
        ));
        assert!(matches!(err, Err(Error::MalformedItem { .. })));
    }

    #[test]
    fn eligible_shards_honor_family_and_tenant() {
        let store = store2();
        store
            .write_item(item("p", key("t1", "a0", None, None), Family::Profile, vec![1.0, 0.0]))
            .unwrap();
        store
            .write_item(item("o", key("t1", "a0", None, Some("d1")), Family::Observation, vec![1.0, 0.0]))
            .unwrap();
        store
            .write_item(item("s", key("t1", "a0", Some("s1"), None), Family::Session, vec![1.0, 0.0]))
            .unwrap();

        let all = store.eligible_shards(&ScopePredicate::tenant_wide("t1"));
        assert_eq!(all.len(), 3);

        let mut profile_only = ScopePredicate::tenant_wide("t1");
        profile_only.allowed_families = FamilyFilter::only([Family::Profile]);
        let eligible = store.eligible_shards(&profile_only);
        assert_eq!(eligible.len(), 1);
        assert!(eligible.iter().all(|id| id.starts_with("profile:")));

        let wrong_tenant = store.eligible_shards(&ScopePredicate::tenant_wide("t9"));
        assert!(wrong_tenant.is_empty());
    }

    #[test]
    fn eligible_shards_honor_pinned_session() {
        let store = store2();
        for s in ["s1", "s2"] {
            store
                .write_item(item(
                    &format!("i{s}"),
                    key("t1", "a0", Some(s), None),
                    Family::Session,
                    vec![1.0, 0.0],
                ))
                .unwrap();
        }
        let mut pred = ScopePredicate::tenant_wide("t1");
        pred.allowed_sessions = IdFilter::only(["s1"]);
        let eligible = store.eligible_shards(&pred);
        assert_eq!(eligible.len(), 1);
        assert!(eligible.contains("session:t1:s1"));
    }

    #[test]
    fn shard_search_orders_and_counts() {
        let store = store2();
        let k = key("t1", "a0", None, None);
        let shard = store
            .write_item(item("x1", k.clone(), Family::Profile, vec![1.0, 0.0]))
            .unwrap();
        store
            .write_item(item("x2", k, Family::Profile, vec![0.0, 1.0]))
            .unwrap();
        let query = Embedding::new(vec![0.9, 0.1]);
        let (hits, scanned) = store.shard_search(&shard, &query, 1).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].item_id, "x1");
        assert_eq!(scanned, 2);

        let (all, _) = store.shard_search(&shard, &query, 10).unwrap();
        assert_eq!(all.len(), 2);

        assert!(matches!(
            store.shard_search("missing", &query, 1),
            Err(Error::UnknownShard(_))
        ));
    }

    #[test]
    fn summary_refresh_matches_hand_arithmetic() {
        let store = store2();
        let k = key("t1", "a0", None, None);
        let shard = store
            .write_item(item("a", k.clone(), Family::Profile, vec![1.0, 0.0]))
            .unwrap();
        let summary = store.refresh_summary(&shard).unwrap();
        assert_eq!(summary.centroid, vec![1.0, 0.0]);

        store
            .write_item(item("b", k, Family::Profile, vec![0.0, 1.0]))
            .unwrap();
        let summary = store.refresh_summary(&shard).unwrap();
        assert_eq!(summary.centroid, vec![0.5, 0.5]);
        assert!((summary.log_size - 3.0f64.ln()).abs() < 1e-12);
        assert_eq!(summary.family_onehot, [1.0, 0.0, 0.0]);
        assert_eq!(summary.vector().len(), 2 + 3 + 1);
    }

    #[test]
    fn cost_estimates_are_size_ratios() {
        let store = store2();
        // Two profile shards of equal size, one twice the size.
        for agent in ["a0", "a1"] {
            for i in 0..2 {
                store
                    .write_item(item(
                        &format!("{agent}-{i}"),
                        key("t1", agent, None, None),
                        Family::Profile,
                        vec![1.0, 0.0],
                    ))
                    .unwrap();
            }
        }
        for i in 0..4 {
            store
                .write_item(item(
                    &format!("a2-{i}"),
                    key("t1", "a2", None, None),
                    Family::Profile,
                    vec![1.0, 0.0],
                ))
                .unwrap();
        }
        // Sizes 2, 2, 4; mean 8/3.
        let mean = 8.0 / 3.0;
        let c0 = store.estimate_cost("profile:t1:a0").unwrap();
        let c2 = store.estimate_cost("profile:t1:a2").unwrap();
        assert!((c0 - 2.0 / mean).abs() < 1e-12);
        assert!((c2 - 4.0 / mean).abs() < 1e-12);
    }

    #[test]
    fn equal_sizes_give_unit_cost() {
        let store = store2();
        for agent in ["a0", "a1", "a2"] {
            store
                .write_item(item(
                    agent,
                    key("t1", agent, None, None),
                    Family::Profile,
                    vec![1.0, 0.0],
                ))
                .unwrap();
        }
        for agent in ["a0", "a1", "a2"] {
            let c = store.estimate_cost(&format!("profile:t1:{agent}")).unwrap();
            assert!((c - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn partition_sizes_sum_to_store_size() {
        let store = store2();
        let mut total = 0;
        for i in 0..30 {
            let family = Family::ALL[i % 3];
            let k = key(
                if i % 2 == 0 { "t1" } else { "t2" },
                &format!("a{}", i % 4),
                Some(&format!("s{}", i % 5)),
                Some(&format!("d{}", i % 3)),
            );
            store
                .write_item(item(&format!("i{i}"), k, family, vec![1.0, 0.0]))
                .unwrap();
            total += 1;
        }
        let sum: usize = store
            .shard_ids()
            .iter()
            .map(|id| store.shard_size(id).unwrap())
            .sum();
        assert_eq!(sum, total);
        assert_eq!(store.total_items(), total);
    }

    #[test]
    fn snapshot_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let store = store2();
        for i in 0..10 {
            store
                .write_item(item(
                    &format!("i{i}"),
                    key("t1", "a0", Some(&format!("s{}", i % 2)), None),
                    Family::Session,
                    vec![i as f64, 1.0],
                ))
                .unwrap();
        }
        store.flush();
        store.save(dir.path(), "hash123").unwrap();

        let loaded = EvidenceStore::load(dir.path(), Some("hash123")).unwrap();
        assert_eq!(loaded.shard_count(), store.shard_count());
        assert_eq!(loaded.total_items(), store.total_items());
        let query = Embedding::new(vec![3.0, 1.0]);
        for shard_id in store.shard_ids() {
            let (a, _) = store.shard_search(&shard_id, &query, 5).unwrap();
            let (b, _) = loaded.shard_search(&shard_id, &query, 5).unwrap();
            assert_eq!(a, b);
        }
        assert!(EvidenceStore::load(dir.path(), Some("other")).is_err());
    }
}
