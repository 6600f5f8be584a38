//! Shard-local vector indexes with scan accounting.
//!
//! Two implementations sit behind [`VectorIndex`]: an exact flat scan that
//! always returns the true top-n, and a navigable-small-world graph that
//! trades exactness for fewer scored vectors. Every search reports how many
//! vectors it scored; that count feeds the per-request VecScan metric.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::embed::Embedding;
use crate::error::{Error, Result};

/// One scored hit. Ordering everywhere is descending score with ascending
/// item id as the tie-break.
#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub item_id: String,
    pub score: f64,
}

#[derive(Debug)]
pub struct SearchOutput {
    pub hits: Vec<Hit>,
    /// Vectors scored while answering this query.
    pub scanned: u64,
}

pub fn sort_hits(hits: &mut [Hit]) {
    hits.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.item_id.cmp(&b.item_id))
    });
}

pub trait VectorIndex: Send + Sync {
    fn insert(&mut self, item_id: String, vector: Embedding) -> Result<()>;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Top-n by cosine score. `n >= 1`.
    fn search(&self, query: &Embedding, n: usize) -> SearchOutput;
    /// Vectors scored by this index since construction, across all queries.
    fn total_scanned(&self) -> u64;
    fn snapshot(&self) -> IndexSnapshot;
}

/// Exhaustive index: scores every stored vector, so the per-query scan count
/// equals the shard size and the result is exact.
pub struct ExactFlatIndex {
    entries: Vec<(String, Embedding)>,
    scan_counter: AtomicU64,
}

impl ExactFlatIndex {
    pub fn new() -> Self {
        ExactFlatIndex {
            entries: Vec::new(),
            scan_counter: AtomicU64::new(0),
        }
    }
}

impl Default for ExactFlatIndex {
    fn default() -> Self {
        Self::new()
    }
}

impl VectorIndex for ExactFlatIndex {
    fn insert(&mut self, item_id: String, vector: Embedding) -> Result<()> {
        self.entries.push((item_id, vector));
        Ok(())
    }

    fn len(&self) -> usize {
        self.entries.len()
    }

    fn search(&self, query: &Embedding, n: usize) -> SearchOutput {
        let mut hits: Vec<Hit> = self
            .entries
            .iter()
            .map(|(id, vec)| Hit {
                item_id: id.clone(),
                score: query.cosine(vec),
            })
            .collect();
        sort_hits(&mut hits);
        hits.truncate(n);
        let scanned = self.entries.len() as u64;
        self.scan_counter.fetch_add(scanned, Ordering::Relaxed);
        SearchOutput { hits, scanned }
    }

    fn total_scanned(&self) -> u64 {
        self.scan_counter.load(Ordering::Relaxed)
    }

    fn snapshot(&self) -> IndexSnapshot {
        IndexSnapshot {
            kind: "exact_flat".into(),
            order: self.entries.iter().map(|(id, _)| id.clone()).collect(),
            adjacency: Vec::new(),
        }
    }
}

/// Navigable-small-world graph index. Greedy beam search from a fixed entry
/// point; each node links to its nearest predecessors at insert time.
/// Construction and search are deterministic for a fixed insertion order.
pub struct NswIndex {
    ids: Vec<String>,
    vectors: Vec<Embedding>,
    adjacency: Vec<Vec<u32>>,
    by_id: HashMap<String, u32>,
    max_links: usize,
    beam_width: usize,
    scan_counter: AtomicU64,
}

impl NswIndex {
    pub fn new(max_links: usize, beam_width: usize) -> Self {
        NswIndex {
            ids: Vec::new(),
            vectors: Vec::new(),
            adjacency: Vec::new(),
            by_id: HashMap::new(),
            max_links,
            beam_width,
            scan_counter: AtomicU64::new(0),
        }
    }

    pub fn with_defaults() -> Self {
        Self::new(16, 64)
    }

    /// Beam search; returns candidate node indexes ranked best-first and the
    /// number of vectors scored.
    fn beam_search(&self, query: &Embedding, beam: usize) -> (Vec<(f64, u32)>, u64) {
        if self.ids.is_empty() {
            return (Vec::new(), 0);
        }
        let mut scanned = 0u64;
        let score_of = |idx: u32, scanned: &mut u64| {
            *scanned += 1;
            query.cosine(&self.vectors[idx as usize])
        };

        let entry = 0u32;
        let entry_score = score_of(entry, &mut scanned);
        let mut visited: HashSet<u32> = HashSet::from([entry]);
        // Frontier: best-first by (score desc, idx asc).
        let mut frontier: Vec<(f64, u32)> = vec![(entry_score, entry)];
        let mut best: Vec<(f64, u32)> = vec![(entry_score, entry)];

        while let Some(pos) = frontier
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.0.total_cmp(&b.0).then_with(|| b.1.cmp(&a.1)))
            .map(|(i, _)| i)
        {
            let (score, node) = frontier.swap_remove(pos);
            let worst_kept = best
                .last()
                .map(|&(s, _)| s)
                .unwrap_or(f64::NEG_INFINITY);
            if best.len() >= beam && score < worst_kept {
                break;
            }
            let mut neighbors = self.adjacency[node as usize].clone();
            neighbors.sort_unstable();
            for next in neighbors {
                if !visited.insert(next) {
                    continue;
                }
                let next_score = score_of(next, &mut scanned);
                best.push((next_score, next));
                best.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
                best.truncate(beam);
                let floor = best.last().map(|&(s, _)| s).unwrap_or(f64::NEG_INFINITY);
                if best.len() < beam || next_score >= floor {
                    frontier.push((next_score, next));
                }
            }
        }
        (best, scanned)
    }
}

impl VectorIndex for NswIndex {
    fn insert(&mut self, item_id: String, vector: Embedding) -> Result<()> {
        let idx = self.ids.len() as u32;
        if self.by_id.contains_key(&item_id) {
            return Err(Error::DuplicateId(item_id));
        }
        let (nearest, _) = self.beam_search(&vector, self.max_links.max(self.beam_width / 2));
        self.by_id.insert(item_id.clone(), idx);
        self.ids.push(item_id);
        self.vectors.push(vector);
        self.adjacency.push(Vec::new());
        for &(_, neighbor) in nearest.iter().take(self.max_links) {
            self.adjacency[idx as usize].push(neighbor);
            let back = &mut self.adjacency[neighbor as usize];
            back.push(idx);
            if back.len() > self.max_links * 2 {
                // Trim to the strongest links to keep degree bounded.
                let anchor = self.vectors[neighbor as usize].clone();
                let mut scored: Vec<(f64, u32)> = self.adjacency[neighbor as usize]
                    .iter()
                    .map(|&n| (anchor.cosine(&self.vectors[n as usize]), n))
                    .collect();
                scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
                scored.truncate(self.max_links * 2);
                self.adjacency[neighbor as usize] = scored.into_iter().map(|(_, n)| n).collect();
            }
        }
        Ok(())
    }

    fn len(&self) -> usize {
        self.ids.len()
    }

    fn search(&self, query: &Embedding, n: usize) -> SearchOutput {
        let (best, scanned) = self.beam_search(query, self.beam_width.max(n));
        self.scan_counter.fetch_add(scanned, Ordering::Relaxed);
        let mut hits: Vec<Hit> = best
            .into_iter()
            .map(|(score, idx)| Hit {
                item_id: self.ids[idx as usize].clone(),
                score,
            })
            .collect();
        sort_hits(&mut hits);
        hits.truncate(n);
        SearchOutput { hits, scanned }
    }

    fn total_scanned(&self) -> u64 {
        self.scan_counter.load(Ordering::Relaxed)
    }

    fn snapshot(&self) -> IndexSnapshot {
        IndexSnapshot {
            kind: "graph_approx".into(),
            order: self.ids.clone(),
            adjacency: self.adjacency.clone(),
        }
    }
}

/// Persisted index state: insertion order plus (for the graph) adjacency.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexSnapshot {
    pub kind: String,
    pub order: Vec<String>,
    #[serde(default)]
    pub adjacency: Vec<Vec<u32>>,
}

/// Rebuild an index from a snapshot given the item vectors.
pub fn restore_index(
    snapshot: &IndexSnapshot,
    vectors: &BTreeMap<String, Embedding>,
) -> Result<Box<dyn VectorIndex>> {
    match snapshot.kind.as_str() {
        "exact_flat" => {
            let mut index = ExactFlatIndex::new();
            for id in &snapshot.order {
                let vec = vectors
                    .get(id)
                    .ok_or_else(|| Error::UnknownShard(format!("missing vector for {id}")))?;
                index.insert(id.clone(), vec.clone())?;
            }
            Ok(Box::new(index))
        }
        "graph_approx" => {
            let mut index = NswIndex::with_defaults();
            index.ids = snapshot.order.clone();
            index.adjacency = snapshot.adjacency.clone();
            for (pos, id) in snapshot.order.iter().enumerate() {
                let vec = vectors
                    .get(id)
                    .ok_or_else(|| Error::UnknownShard(format!("missing vector for {id}")))?;
                index.vectors.push(vec.clone());
                index.by_id.insert(id.clone(), pos as u32);
            }
            Ok(Box::new(index))
        }
        other => Err(Error::InvalidConfig(format!("unknown index kind {other}"))),
    }
}
