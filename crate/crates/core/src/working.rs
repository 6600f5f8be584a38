//! Tier A: bounded, mutable per-agent/session working state.
//!
//! Each (agent, session) stream holds at most `capacity` entries; writes
//! evict the oldest unpinned entry under pressure. Reads return at most M
//! entries, pinned first, most recent first. Entries move to Tier B only
//! through an explicit [`WorkingMemory::promote`] call.

use std::collections::HashMap;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::store::{EvidenceStore, MemoryItem};
use crate::types::{Family, Request, ScopeKey, ScopePredicate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkingEntry {
    pub entry_id: String,
    pub agent: String,
    #[serde(default)]
    pub session: Option<String>,
    pub text: String,
    pub created_at: u64,
    pub pinned: bool,
}

type StreamKey = (String, Option<String>);

/// Tier A store for one tenant. Working entries carry no tenant or
/// permission metadata of their own, so the Tier A predicate is evaluated
/// over the store tenant and the entry's agent/session; a predicate with
/// non-empty required permissions matches nothing here.
pub struct WorkingMemory {
    tenant: String,
    capacity: usize,
    streams: RwLock<HashMap<StreamKey, Vec<WorkingEntry>>>,
}

impl WorkingMemory {
    pub fn new(tenant: impl Into<String>, capacity: usize) -> Self {
        WorkingMemory {
            tenant: tenant.into(),
            capacity,
            streams: RwLock::new(HashMap::new()),
        }
    }

    pub fn tenant(&self) -> &str {
        &self.tenant
    }

    fn entry_matches(&self, pred: &ScopePredicate, entry: &WorkingEntry) -> bool {
        pred.required_tenant == self.tenant
            && pred.allowed_agents.allows(&entry.agent)
            && pred.allowed_sessions.allows_opt(entry.session.as_deref())
            && pred.required_permissions.is_empty()
    }

    /// Write one entry; evicts the oldest unpinned entry of the stream when
    /// over capacity. Re-writing an existing entry id replaces it.
    pub fn write_a(&self, entry: WorkingEntry) -> Result<()> {
        let key = (entry.agent.clone(), entry.session.clone());
        let mut streams = self.streams.write().unwrap();
        let stream = streams.entry(key).or_default();
        stream.retain(|e| e.entry_id != entry.entry_id);
        stream.push(entry);
        while stream.len() > self.capacity {
            let victim = stream
                .iter()
                .enumerate()
                .filter(|(_, e)| !e.pinned)
                .min_by(|(_, a), (_, b)| {
                    a.created_at
                        .cmp(&b.created_at)
                        .then_with(|| a.entry_id.cmp(&b.entry_id))
                })
                .map(|(i, _)| i);
            match victim {
                Some(i) => {
                    stream.remove(i);
                }
                None => {
                    // Every entry is pinned, including the one just written:
                    // roll it back and report.
                    stream.pop();
                    return Err(Error::AllPinnedAtCapacity {
                        capacity: self.capacity,
                    });
                }
            }
        }
        Ok(())
    }

    /// Bounded read: entries matching the Tier A predicate, pinned first,
    /// most recent first, truncated to `m_context`.
    pub fn read_a(&self, request: &Request) -> Vec<WorkingEntry> {
        let limit = request.budgets.m_context;
        if limit == 0 {
            return Vec::new();
        }
        let streams = self.streams.read().unwrap();
        let mut entries: Vec<WorkingEntry> = streams
            .values()
            .flatten()
            .filter(|e| self.entry_matches(&request.scope_a, e))
            .cloned()
            .collect();
        entries.sort_by(|a, b| {
            b.pinned
                .cmp(&a.pinned)
                .then_with(|| b.created_at.cmp(&a.created_at))
                .then_with(|| a.entry_id.cmp(&b.entry_id))
        });
        entries.truncate(limit);
        entries
    }

    pub fn get(&self, entry_id: &str) -> Option<WorkingEntry> {
        let streams = self.streams.read().unwrap();
        streams
            .values()
            .flatten()
            .find(|e| e.entry_id == entry_id)
            .cloned()
    }

    /// Promote a working entry into Tier B under the given family. The
    /// entry stays in Tier A. Idempotent per (entry, family): the Tier B
    /// item id is derived from both, so a repeat call returns the same id.
    pub fn promote(
        &self,
        entry_id: &str,
        family: Family,
        store: &EvidenceStore,
        embedder: &dyn Embedder,
    ) -> Result<String> {
        let entry = self
            .get(entry_id)
            .ok_or_else(|| Error::UnknownEntry(entry_id.to_string()))?;
        let item_id = format!("wm:{entry_id}:{family}");
        if store.get_item(&item_id).is_some() {
            return Ok(item_id);
        }
        let item = MemoryItem {
            item_id: item_id.clone(),
            text: entry.text.clone(),
            embedding: embedder.embed(&entry.text)?,
            scope: ScopeKey {
                tenant: self.tenant.clone(),
                agent: entry.agent.clone(),
                session: entry.session.clone(),
                domain: None,
                permission_tags: Default::default(),
            },
            family,
            provenance: format!("tier_a:{entry_id}"),
            created_at: entry.created_at,
        };
        match store.write_item(item) {
            Ok(_) => Ok(item_id),
            // A concurrent promote won the race; same deterministic id.
            Err(Error::DuplicateId(_)) => Ok(item_id),
            Err(e) => Err(e),
        }
    }
}
