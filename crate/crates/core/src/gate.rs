//! Tier gate: a 3-way softmax classifier over concatenated query features
//! choosing evidence retrieval (B), skill retrieval (C), or both.
//!
//! The gate is advisory. A request's `forced_gate` overrides it, and a C
//! decision that produces no usable skill falls back to Tier B in the read
//! path regardless of what the gate said.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::GateDecision;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateModel {
    /// 3 x (D+F) weight matrix, rows in label order B, C, B+C.
    pub weights: Vec<Vec<f64>>,
    pub bias: [f64; 3],
}

impl GateModel {
    pub fn zeros(feature_dim: usize) -> Self {
        GateModel {
            weights: vec![vec![0.0; feature_dim]; 3],
            bias: [0.0; 3],
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    fn logits(&self, features: &[f64]) -> Result<[f64; 3]> {
        if features.len() != self.feature_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim(),
                got: features.len(),
            });
        }
        let mut logits = [0.0; 3];
        for (l, (row, b)) in logits.iter_mut().zip(self.weights.iter().zip(&self.bias)) {
            *l = row.iter().zip(features).map(|(w, x)| w * x).sum::<f64>() + b;
        }
        Ok(logits)
    }

    pub fn probabilities(&self, features: &[f64]) -> Result<[f64; 3]> {
        let logits = self.logits(features)?;
        Ok(softmax3(&logits))
    }
}

fn softmax3(logits: &[f64; 3]) -> [f64; 3] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps = [
        (logits[0] - max).exp(),
        (logits[1] - max).exp(),
        (logits[2] - max).exp(),
    ];
    let total: f64 = exps.iter().sum();
    [exps[0] / total, exps[1] / total, exps[2] / total]
}

/// Argmax of the 3-way softmax; ties resolve in the fixed label order
/// B < C < B+C. A forced gate on the request wins outright.
pub fn gate_decide(
    model: &GateModel,
    features: &[f64],
    forced: Option<GateDecision>,
) -> Result<(GateDecision, [f64; 3])> {
    let probs = model.probabilities(features)?;
    if let Some(decision) = forced {
        return Ok((decision, probs));
    }
    let mut best = 0;
    for i in 1..3 {
        if probs[i] > probs[best] {
            best = i;
        }
    }
    Ok((GateDecision::LABELS[best], probs))
}

#[derive(Debug, Clone)]
pub struct GateExample {
    pub features: Vec<f64>,
    pub label: GateDecision,
}

#[derive(Debug, Clone)]
pub struct GateTrainReport {
    pub model: GateModel,
    /// Full-dataset mean cross-entropy after each epoch.
    pub loss_curve: Vec<f64>,
    pub train_accuracy: f64,
}

/// Multinomial logistic regression via minibatch SGD, deterministic under
/// the seed.
pub fn train_gate(
    model: &GateModel,
    dataset: &[GateExample],
    config: &crate::router::TrainConfig,
) -> Result<GateTrainReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut trained = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut loss_curve = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size.max(1)) {
            let mut grad_w = vec![vec![0.0; trained.feature_dim()]; 3];
            let mut grad_b = [0.0; 3];
            for &idx in batch {
                let example = &dataset[idx];
                let probs = trained.probabilities(&example.features)?;
                let label = example.label as usize;
                for class in 0..3 {
                    let delta = probs[class] - f64::from(class == label);
                    grad_b[class] += delta;
                    for (g, x) in grad_w[class].iter_mut().zip(&example.features) {
                        *g += delta * x;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for class in 0..3 {
                for (w, g) in trained.weights[class].iter_mut().zip(&grad_w[class]) {
                    *w -= config.lr * (g * scale + config.l2 * *w);
                }
                trained.bias[class] -= config.lr * grad_b[class] * scale;
            }
        }

        let mut total = 0.0;
        for example in dataset {
            let probs = trained.probabilities(&example.features)?;
            total -= probs[example.label as usize].max(1e-300).ln();
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

    let mut correct = 0;
    for example in dataset {
        let (decision, _) = gate_decide(&trained, &example.features, None)?;
        if decision == example.label {
            correct += 1;
        }
    }
    Ok(GateTrainReport {
        model: trained,
        loss_curve,
        train_accuracy: correct as f64 / dataset.len() as f64,
    })
}
