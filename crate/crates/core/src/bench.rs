//! Benchmark harness: gold-evidence recall versus scan cost across probe
//! budgets, and per-arm routing statistics for controlled comparisons.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{mean, percentile};
use crate::router::BaselineKind;
use crate::service::{RoutingStrategy, ShardMemoService};
use crate::types::{ProbeMode, Request};

/// Routing methods exercised by the sweep. Names are the CSV identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMethod {
    MoeTopB,
    MoeTopP,
    Cosine,
    Recency,
    Centralized,
}

impl SweepMethod {
    pub const ALL: [SweepMethod; 5] = [
        SweepMethod::MoeTopB,
        SweepMethod::MoeTopP,
        SweepMethod::Cosine,
        SweepMethod::Recency,
        SweepMethod::Centralized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepMethod::MoeTopB => "moe_top_b",
            SweepMethod::MoeTopP => "moe_top_p",
            SweepMethod::Cosine => "cosine",
            SweepMethod::Recency => "recency",
            SweepMethod::Centralized => "centralized",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown sweep method `{name}`")))
    }

    pub fn strategy(self) -> RoutingStrategy {
        match self {
            SweepMethod::MoeTopB => RoutingStrategy::Learned {
                mode: ProbeMode::TopB,
                masked: true,
            },
            SweepMethod::MoeTopP => RoutingStrategy::Learned {
                mode: ProbeMode::AdaptiveTopP,
                masked: true,
            },
            SweepMethod::Cosine => RoutingStrategy::Baseline(BaselineKind::CosinePrototype),
            SweepMethod::Recency => RoutingStrategy::Baseline(BaselineKind::Recency),
            SweepMethod::Centralized => RoutingStrategy::Baseline(BaselineKind::Centralized),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub b_probe: usize,
    pub method: String,
    pub recall: f64,
    pub vec_scan_mean: f64,
    pub p95_ms: f64,
}

pub const SWEEP_CSV_HEADER: &str = "b_probe,method,recall,vec_scan_mean,p95_ms";

pub fn rows_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&format!(
            "{},{},{:.4},{:.2},{:.3}\n",
            row.b_probe, row.method, row.recall, row.vec_scan_mean, row.p95_ms
        ));
    }
    out
}

/// Drop the latency column, which is the only nondeterministic one, so two
/// runs of the same seed can be compared byte for byte.
pub fn strip_latency_column(csv: &str) -> String {
    csv.lines()
        .map(|line| match line.rsplit_once(',') {
            Some((rest, _)) => rest.to_string(),
            None => line.to_string(),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Validate a sweep CSV against the declared schema.
pub fn validate_sweep_csv(csv: &str) -> Result<()> {
    let mut lines = csv.lines();
    let header = lines.next().unwrap_or_default();
    if header != SWEEP_CSV_HEADER {
        return Err(Error::InvalidConfig(format!(
            "bad sweep header: {header}"
        )));
    }
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::InvalidConfig(format!("row {i} has {} fields", fields.len())));
        }
        fields[0]
            .parse::<usize>()
            .map_err(|_| Error::InvalidConfig(format!("row {i}: bad b_probe")))?;
        SweepMethod::parse(fields[1])?;
        for field in &fields[2..] {
            field
                .parse::<f64>()
                .map_err(|_| Error::InvalidConfig(format!("row {i}: bad float {field}")))?;
        }
    }
    Ok(())
}

/// Run every method at every probe budget over the labeled requests and
/// emit plot-ready rows. Recall is the fraction of gold evidence items
/// present in the returned Top-K.
pub fn bench_sweep(
    service: &ShardMemoService,
    requests: &[Request],
    gold_evidence: &BTreeMap<String, BTreeSet<String>>,
    b_values: &[usize],
    k_evidence: usize,
    methods: &[SweepMethod],
) -> Result<Vec<SweepRow>> {
    let labeled: Vec<&Request> = requests
        .iter()
        .filter(|r| gold_evidence.contains_key(&r.request_id))
        .collect();
    if labeled.is_empty() {
        return Err(Error::NoSamples);
    }
    let mut rows = Vec::new();
    for &b_probe in b_values {
        for &method in methods {
            let mut recalls = Vec::with_capacity(labeled.len());
            let mut scans = Vec::with_capacity(labeled.len());
            let mut latencies = Vec::with_capacity(labeled.len());
            for request in &labeled {
                let gold = &gold_evidence[&request.request_id];
                let query = service.embedder().embed(&request.query_text)?;
                let phi = service.featurizer().features(request);
                let features = service.featurizer().request_features(&query, &phi)?;
                let start = Instant::now();
                let out = service.tier_b_read_with(
                    method.strategy(),
                    &query,
                    &features,
                    &request.scope_b,
                    b_probe,
                    k_evidence,
                )?;
                latencies.push(start.elapsed().as_secs_f64() * 1e3);
                scans.push(out.vec_scan as f64);
                let found = out
                    .evidence
                    .iter()
                    .filter(|(item, _)| gold.contains(&item.item_id))
                    .count();
                recalls.push(found as f64 / gold.len().max(1) as f64);
            }
            rows.push(SweepRow {
                b_probe,
                method: method.name().to_string(),
                recall: mean(&recalls)?,
                vec_scan_mean: mean(&scans)?,
                p95_ms: percentile(&latencies, 95.0)?,
            });
        }
    }
    Ok(rows)
}

/// Routing statistics for one arm of a controlled comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutingArmStats {
    pub shard_hit: f64,
    pub mean_vec_scan: f64,
    pub mean_probes: f64,
    pub p95_ms: f64,
    pub requests: usize,
}

/// Evaluate one routing strategy over the labeled requests: ShardHit@B,
/// mean VecScan, and tail latency.
pub fn evaluate_routing_arm(
    service: &ShardMemoService,
    requests: &[Request],
    gold_shards: &BTreeMap<String, BTreeSet<String>>,
    strategy: RoutingStrategy,
    b_probe: usize,
    k_evidence: usize,
) -> Result<RoutingArmStats> {
    let mut hits = 0usize;
    let mut scans = Vec::new();
    let mut probe_counts = Vec::new();
    let mut latencies = Vec::new();
    let mut labeled = 0usize;
    for request in requests {
        let Some(gold) = gold_shards.get(&request.request_id) else {
            continue;
        };
        labeled += 1;
        let query = service.embedder().embed(&request.query_text)?;
        let phi = service.featurizer().features(request);
        let features = service.featurizer().request_features(&query, &phi)?;
        let start = Instant::now();
        let out = service.tier_b_read_with(
            strategy,
            &query,
            &features,
            &request.scope_b,
            b_probe,
            k_evidence,
        )?;
        latencies.push(start.elapsed().as_secs_f64() * 1e3);
        scans.push(out.vec_scan as f64);
        probe_counts.push(out.probes.len() as f64);
        if out.probes.iter().any(|p| gold.contains(p)) {
            hits += 1;
        }
    }
    if labeled == 0 {
        return Err(Error::NoSamples);
    }
    Ok(RoutingArmStats {
        shard_hit: hits as f64 / labeled as f64,
        mean_vec_scan: mean(&scans)?,
        mean_probes: mean(&probe_counts)?,
        p95_ms: percentile(&latencies, 95.0)?,
        requests: labeled,
    })
}
