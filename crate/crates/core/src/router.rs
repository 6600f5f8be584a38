//! Masked shard routing.
//!
//! Each eligible shard is scored by a bilinear model over the request
//! features and the shard's summary vector, optionally biased against
//! expensive shards, and normalized with a masked softmax. Probe selection
//! is either Top-B by score or adaptive Top-P by probability mass, always
//! capped by `b_probe`. Ineligible shards never enter scoring: the caller
//! passes only the eligible set, so masking holds by construction.
//!
//! Training minimizes a set-likelihood objective, `-log` of the total
//! probability mass on the gold shard set, which reduces to cross-entropy
//! for a single gold shard.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RouterDefaults;
use crate::embed::Embedding;
use crate::error::{Error, Result};
use crate::store::ShardRoutingInfo;
use crate::types::ProbeMode;

/// Adaptive Top-P parameters: the mass threshold is
/// `clip(p_min + gamma * (1 - max_prob), p_min, p_max)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToppParams {
    pub p_min: f64,
    pub p_max: f64,
    pub gamma: f64,
}

impl From<&RouterDefaults> for ToppParams {
    fn from(r: &RouterDefaults) -> Self {
        ToppParams {
            p_min: r.p_min,
            p_max: r.p_max,
            gamma: r.gamma,
        }
    }
}

/// Learnable router parameters.
///
/// `projection` maps the request feature vector (length D+F) into summary
/// space (length D+4); a shard's score is the dot product of the projected
/// features with its summary vector, plus a per-shard bias, minus
/// `alpha * cost`. Shards without a trained bias entry score with bias 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterModel {
    pub projection: Vec<Vec<f64>>,
    pub per_shard_bias: BTreeMap<String, f64>,
    pub alpha: f64,
    pub topp_params: ToppParams,
}

impl RouterModel {
    /// Zero-initialized model: uniform probabilities over eligible shards
    /// (up to the cost bias), the untrained reference arm.
    pub fn untrained(feature_dim: usize, summary_dim: usize, defaults: &RouterDefaults) -> Self {
        RouterModel {
            projection: vec![vec![0.0; feature_dim]; summary_dim],
            per_shard_bias: BTreeMap::new(),
            alpha: defaults.alpha,
            topp_params: ToppParams::from(defaults),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.projection.first().map_or(0, Vec::len)
    }

    pub fn summary_dim(&self) -> usize {
        self.projection.len()
    }

    fn project(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.feature_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim(),
                got: features.len(),
            });
        }
        Ok(self
            .projection
            .iter()
            .map(|row| row.iter().zip(features).map(|(w, x)| w * x).sum())
            .collect())
    }
}

/// Scoring input for one eligible shard.
#[derive(Debug, Clone)]
pub struct ShardInput {
    pub shard_id: String,
    pub summary: Vec<f64>,
    pub cost: f64,
}

impl From<&ShardRoutingInfo> for ShardInput {
    fn from(info: &ShardRoutingInfo) -> Self {
        ShardInput {
            shard_id: info.shard_id.clone(),
            summary: info.summary.clone(),
            cost: info.cost,
        }
    }
}

/// Score the eligible shards. The caller enforces masking by passing only
/// eligible shards; nothing else can receive a score.
pub fn score_shards(
    model: &RouterModel,
    features: &[f64],
    shards: &[ShardInput],
) -> Result<BTreeMap<String, f64>> {
    let projected = model.project(features)?;
    let mut scores = BTreeMap::new();
    for shard in shards {
        if shard.summary.len() != model.summary_dim() {
            return Err(Error::DimensionMismatch {
                expected: model.summary_dim(),
                got: shard.summary.len(),
            });
        }
        let semantic: f64 = projected
            .iter()
            .zip(&shard.summary)
            .map(|(a, b)| a * b)
            .sum();
        let bias = model
            .per_shard_bias
            .get(&shard.shard_id)
            .copied()
            .unwrap_or(0.0);
        scores.insert(
            shard.shard_id.clone(),
            semantic + bias - model.alpha * shard.cost,
        );
    }
    Ok(scores)
}

/// Softmax over exactly the eligible ids, computed with max-subtraction.
pub fn masked_softmax(scores: &BTreeMap<String, f64>) -> Result<BTreeMap<String, f64>> {
    if scores.is_empty() {
        return Err(Error::EmptyEligibleSet);
    }
    let max = scores.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: BTreeMap<String, f64> = scores
        .iter()
        .map(|(id, s)| (id.clone(), (s - max).exp()))
        .collect();
    let total: f64 = exps.values().sum();
    Ok(exps
        .into_iter()
        .map(|(id, e)| (id, e / total))
        .collect())
}

/// Smallest prefix of a descending probability list whose cumulative mass
/// reaches `tau`; the whole list if the mass never does.
pub fn mass_prefix_len(sorted_probs: &[f64], tau: f64) -> usize {
    let mut cumulative = 0.0;
    for (i, p) in sorted_probs.iter().enumerate() {
        cumulative += p;
        if cumulative >= tau {
            return i + 1;
        }
    }
    sorted_probs.len()
}

/// Select the ordered probe list under the probe cap.
pub fn select_probes(
    scores: &BTreeMap<String, f64>,
    probs: &BTreeMap<String, f64>,
    mode: ProbeMode,
    b_probe: usize,
    topp: &ToppParams,
) -> Result<Vec<String>> {
    if scores.is_empty() || probs.is_empty() {
        return Err(Error::EmptyEligibleSet);
    }
    match mode {
        ProbeMode::TopB => {
            let mut ranked: Vec<(&String, f64)> =
                scores.iter().map(|(id, &s)| (id, s)).collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
            Ok(ranked
                .into_iter()
                .take(b_probe.min(scores.len()))
                .map(|(id, _)| id.clone())
                .collect())
        }
        ProbeMode::AdaptiveTopP => {
            let mut ranked: Vec<(&String, f64)> = probs.iter().map(|(id, &p)| (id, p)).collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
            let max_prob = ranked.first().map(|&(_, p)| p).unwrap_or(0.0);
            let tau = (topp.p_min + topp.gamma * (1.0 - max_prob)).clamp(topp.p_min, topp.p_max);
            let sorted: Vec<f64> = ranked.iter().map(|&(_, p)| p).collect();
            let take = mass_prefix_len(&sorted, tau).min(b_probe).max(1);
            Ok(ranked
                .into_iter()
                .take(take)
                .map(|(id, _)| id.clone())
                .collect())
        }
    }
}

/// Gold shard labels for one request: the shards holding its supporting
/// evidence, always a subset of the request's eligible set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldShardSet {
    pub request_id: String,
    pub gold: BTreeSet<String>,
}

/// Set-likelihood loss: `-log` of the probability mass on the gold set.
pub fn route_loss(probs: &BTreeMap<String, f64>, gold: &BTreeSet<String>) -> Result<f64> {
    let mut mass = 0.0;
    for id in gold {
        match probs.get(id) {
            Some(p) => mass += p,
            None => return Err(Error::GoldOutsideEligible(id.clone())),
        }
    }
    Ok(-mass.ln())
}

/// One supervised routing example.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub features: Vec<f64>,
    pub shards: Vec<ShardInput>,
    pub gold: BTreeSet<String>,
}

/// Analytic gradient of the set-likelihood loss for one example.
#[derive(Debug, Clone)]
pub struct RouteGradient {
    pub projection: Vec<Vec<f64>>,
    pub bias: BTreeMap<String, f64>,
}

/// Loss and gradient with respect to the projection and the per-shard
/// biases; `alpha` is configuration, not a trained parameter.
pub fn route_loss_grad(model: &RouterModel, example: &TrainExample) -> Result<(f64, RouteGradient)> {
    let scores = score_shards(model, &example.features, &example.shards)?;
    let probs = masked_softmax(&scores)?;
    let loss = route_loss(&probs, &example.gold)?;

    let gold_mass: f64 = example.gold.iter().map(|id| probs[id]).sum();
    let mut projection = vec![vec![0.0; model.feature_dim()]; model.summary_dim()];
    let mut bias = BTreeMap::new();
    for shard in &example.shards {
        let p = probs[&shard.shard_id];
        let in_gold = example.gold.contains(&shard.shard_id);
        // dL/ds_j for L = -log(sum_{g in G} p_g).
        let dscore = p - if in_gold { p / gold_mass } else { 0.0 };
        bias.insert(shard.shard_id.clone(), dscore);
        for (row, sigma) in projection.iter_mut().zip(&shard.summary) {
            let scale = dscore * sigma;
            for (cell, x) in row.iter_mut().zip(&example.features) {
                *cell += scale * x;
            }
        }
    }
    Ok((loss, RouteGradient { projection, bias }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub l2: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // The step size matters here: unit-norm embeddings give this
        // objective small gradients, and an undertrained router stays so
        // uncertain that adaptive Top-P always proves the full cap.
        TrainConfig {
            lr: 0.5,
            epochs: 50,
            seed: 7,
            l2: 1e-4,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: RouterModel,
    /// Mean full-dataset loss after each epoch.
    pub loss_curve: Vec<f64>,
}

/// Minibatch gradient descent on the mean set-likelihood loss with L2
/// regularization. Deterministic for a fixed seed.
pub fn train_router(
    model: &RouterModel,
    dataset: &[TrainExample],
    config: &TrainConfig,
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for example in dataset {
        if example.gold.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let eligible: BTreeSet<&str> =
            example.shards.iter().map(|s| s.shard_id.as_str()).collect();
        if let Some(bad) = example.gold.iter().find(|g| !eligible.contains(g.as_str())) {
            return Err(Error::GoldOutsideEligible(bad.clone()));
        }
    }

    let mut trained = model.clone();
    // Biases exist for every shard seen in training; unseen shards score
    // with bias 0 at read time.
    for example in dataset {
        for shard in &example.shards {
            trained
                .per_shard_bias
                .entry(shard.shard_id.clone())
                .or_insert(0.0);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut loss_curve = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size.max(1)) {
            let mut grad_projection =
                vec![vec![0.0; trained.feature_dim()]; trained.summary_dim()];
            let mut grad_bias: BTreeMap<String, f64> = BTreeMap::new();
            for &idx in batch {
                let (_, grad) = route_loss_grad(&trained, &dataset[idx])?;
                for (acc, row) in grad_projection.iter_mut().zip(&grad.projection) {
                    for (a, g) in acc.iter_mut().zip(row) {
                        *a += g;
                    }
                }
                for (id, g) in grad.bias {
                    *grad_bias.entry(id).or_insert(0.0) += g;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for (row, grad_row) in trained.projection.iter_mut().zip(&grad_projection) {
                for (w, g) in row.iter_mut().zip(grad_row) {
                    *w -= config.lr * (g * scale + config.l2 * *w);
                }
            }
            for (id, g) in &grad_bias {
                let b = trained.per_shard_bias.entry(id.clone()).or_insert(0.0);
                *b -= config.lr * (g * scale + config.l2 * *b);
            }
        }

        let mut total = 0.0;
        for example in dataset {
            let (loss, _) = route_loss_grad(&trained, example)?;
            total += loss;
        }
        let mean = total / dataset.len() as f64;
        if !mean.is_finite() {
            return Err(Error::TrainingDiverged {
                epoch,
                detail: format!("mean loss {mean}"),
            });
        }
        loss_curve.push(mean);
    }

    Ok(TrainReport {
        model: trained,
        loss_curve,
    })
}

/// Heuristic routing baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Rank eligible shards by cosine similarity to their centroid.
    CosinePrototype,
    /// Rank by most recent write.
    Recency,
    /// Probe every eligible shard; the upper-cost reference.
    Centralized,
}

/// Probe selection for the routing-only baselines. Centralized ignores the
/// probe cap by design and returns all eligible shards.
pub fn baseline_route(
    kind: BaselineKind,
    query: &Embedding,
    shards: &[ShardRoutingInfo],
    b_probe: usize,
) -> Result<Vec<String>> {
    if shards.is_empty() {
        return Err(Error::EmptyEligibleSet);
    }
    match kind {
        BaselineKind::CosinePrototype => {
            let mut ranked: Vec<(&ShardRoutingInfo, f64)> = shards
                .iter()
                .map(|info| (info, query.cosine(&info.centroid)))
                .collect();
            ranked.sort_by(|a, b| {
                b.1.total_cmp(&a.1)
                    .then_with(|| a.0.shard_id.cmp(&b.0.shard_id))
            });
            Ok(ranked
                .into_iter()
                .take(b_probe.min(shards.len()))
                .map(|(info, _)| info.shard_id.clone())
                .collect())
        }
        BaselineKind::Recency => {
            let mut ranked: Vec<&ShardRoutingInfo> = shards.iter().collect();
            ranked.sort_by(|a, b| {
                b.last_created_at
                    .cmp(&a.last_created_at)
                    .then_with(|| a.shard_id.cmp(&b.shard_id))
            });
            Ok(ranked
                .into_iter()
                .take(b_probe.min(shards.len()))
                .map(|info| info.shard_id.clone())
                .collect())
        }
        BaselineKind::Centralized => {
            let mut ids: Vec<String> = shards.iter().map(|s| s.shard_id.clone()).collect();
            ids.sort();
            Ok(ids)
        }
    }
}
