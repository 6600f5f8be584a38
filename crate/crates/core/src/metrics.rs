//! Read-path metrics: routing quality, retrieval work, tail latency, and
//! skill-reuse statistics.
//!
//! Percentiles use the nearest-rank definition on the sorted sample, so
//! p95 of the samples 1..=100 is exactly 95.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skills::step_reduction;
use crate::types::GateDecision;

/// Nearest-rank percentile of a sample; `p` in (0, 100].
pub fn percentile(samples: &[f64], p: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::NoSamples);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

pub fn mean(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::NoSamples);
    }
    Ok(samples.iter().sum::<f64>() / samples.len() as f64)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::NoSamples);
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let mean_a = ra.iter().sum::<f64>() / ra.len() as f64;
    let mean_b = rb.iter().sum::<f64>() / rb.len() as f64;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean_a) * (y - mean_b);
        var_a += (x - mean_a).powi(2);
        var_b += (y - mean_b).powi(2);
    }
    if var_a == 0.0 || var_b == 0.0 {
        // A constant sequence is trivially monotone alongside anything.
        return Ok(0.0);
    }
    Ok(cov / (var_a.sqrt() * var_b.sqrt()))
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut indexed: Vec<(usize, f64)> = values.iter().copied().enumerate().collect();
    indexed.sort_by(|x, y| x.1.total_cmp(&y.1));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < indexed.len() {
        let mut j = i;
        while j + 1 < indexed.len() && indexed[j + 1].1 == indexed[i].1 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for item in &indexed[i..=j] {
            ranks[item.0] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// One recorded read.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReadSample {
    pub request_id: String,
    pub probed_shards: Vec<String>,
    pub vec_scan: u64,
    pub wall_ms: f64,
    pub evidence_ids: Vec<String>,
    pub skill_ids: Vec<String>,
    pub gate_decision: GateDecision,
    pub fallback_taken: bool,
    pub adopted: bool,
    /// Procedure length of the adopted skill, when one was executed.
    pub adopted_steps: Option<usize>,
}

/// Labels needed to score a run: gold shards and skills per request, plus
/// the no-skill baseline step counts for StepRed.
#[derive(Debug, Clone, Default)]
pub struct RunLabels {
    pub gold_shards: BTreeMap<String, BTreeSet<String>>,
    pub gold_skills: BTreeMap<String, BTreeSet<String>>,
    pub baseline_steps: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunStats {
    /// Fraction of labeled requests whose probe set intersects the gold
    /// shard set.
    pub shard_hit_at_b: Option<f64>,
    pub mean_latency_ms: f64,
    pub p50_latency_ms: f64,
    pub p95_latency_ms: f64,
    pub p99_latency_ms: f64,
    pub mean_vec_scan: f64,
    /// Mean per-request fraction of retrieved skills that are gold.
    pub precision_at_r: Option<f64>,
    /// Mean step-reduction ratio over adopted, labeled requests.
    pub step_red: Option<f64>,
    pub adopt_rate: f64,
    pub samples: usize,
}

/// Collects read samples concurrently and aggregates on demand.
#[derive(Default)]
pub struct MetricsCollector {
    samples: Mutex<Vec<ReadSample>>,
}

impl MetricsCollector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, sample: ReadSample) {
        self.samples.lock().unwrap().push(sample);
    }

    pub fn len(&self) -> usize {
        self.samples.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snapshot(&self) -> Vec<ReadSample> {
        self.samples.lock().unwrap().clone()
    }

    pub fn clear(&self) {
        self.samples.lock().unwrap().clear();
    }

    pub fn aggregate(&self, labels: &RunLabels) -> Result<RunStats> {
        aggregate_samples(&self.snapshot(), labels)
    }
}

pub fn aggregate_samples(samples: &[ReadSample], labels: &RunLabels) -> Result<RunStats> {
    if samples.is_empty() {
        return Err(Error::NoSamples);
    }
    let latencies: Vec<f64> = samples.iter().map(|s| s.wall_ms).collect();
    let scans: Vec<f64> = samples.iter().map(|s| s.vec_scan as f64).collect();

    let mut hits = 0usize;
    let mut hit_labeled = 0usize;
    for sample in samples {
        if let Some(gold) = labels.gold_shards.get(&sample.request_id) {
            hit_labeled += 1;
            if sample.probed_shards.iter().any(|p| gold.contains(p)) {
                hits += 1;
            }
        }
    }

    let mut precisions = Vec::new();
    for sample in samples {
        if let Some(gold) = labels.gold_skills.get(&sample.request_id) {
            if sample.skill_ids.is_empty() {
                continue;
            }
            let correct = sample.skill_ids.iter().filter(|id| gold.contains(*id)).count();
            precisions.push(correct as f64 / sample.skill_ids.len() as f64);
        }
    }

    let mut reductions = Vec::new();
    for sample in samples {
        if let (true, Some(with_steps), Some(&without_steps)) = (
            sample.adopted,
            sample.adopted_steps,
            labels.baseline_steps.get(&sample.request_id),
        ) {
            if with_steps > 0 && without_steps > 0 {
                reductions.push(step_reduction(with_steps, without_steps)?);
            }
        }
    }

    let adopted = samples.iter().filter(|s| s.adopted).count();
    Ok(RunStats {
        shard_hit_at_b: (hit_labeled > 0).then(|| hits as f64 / hit_labeled as f64),
        mean_latency_ms: mean(&latencies)?,
        p50_latency_ms: percentile(&latencies, 50.0)?,
        p95_latency_ms: percentile(&latencies, 95.0)?,
        p99_latency_ms: percentile(&latencies, 99.0)?,
        mean_vec_scan: mean(&scans)?,
        precision_at_r: (!precisions.is_empty()).then(|| mean(&precisions).unwrap()),
        step_red: (!reductions.is_empty()).then(|| mean(&reductions).unwrap()),
        adopt_rate: adopted as f64 / samples.len() as f64,
        samples: samples.len(),
    })
}
