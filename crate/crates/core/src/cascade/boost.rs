//! Discrete AdaBoost over binned trees and soft-cascade threshold calibration.

use serde::{Deserialize, Serialize};

use super::binned::BinnedFeatures;
use super::tree::{train_tree, DecisionTree};
use crate::error::{McfError, Result};

const EPS_CLAMP: f64 = 1e-6;

/// Result of boosting one stage.
#[derive(Clone, Debug)]
pub struct BoostedStage {
    pub trees: Vec<DecisionTree>,
    /// Per-sample score after adding this stage's trees to the carried score.
    pub scores: Vec<f64>,
    /// Exponential loss after each round, as `ln(sum_i exp(-y_i H_i))`.
    pub loss_trace: Vec<f64>,
    pub alphas: Vec<f64>,
    pub errors: Vec<f64>,
    /// Leaf sign each sample reached, per tree.
    pub outputs: Vec<Vec<i8>>,
}

impl BoostedStage {
    /// Output of tree `t` on sample `s`, equal to the tree's prediction.
    pub fn tree_output(&self, t: usize, s: usize) -> f64 {
        self.alphas[t] * self.outputs[t][s] as f64
    }
}

/// Weak-learner weight for weighted error `error`.
pub fn alpha_for(error: f64) -> f64 {
    let e = error.clamp(EPS_CLAMP, 1.0 - EPS_CLAMP);
    0.5 * ((1.0 - e) / e).ln()
}

/// Normalized AdaBoost weights `exp(-y H)`, computed with the max exponent
/// subtracted.
pub fn sample_weights(labels: &[i8], scores: &[f64]) -> Vec<f64> {
    let exps: Vec<f64> = labels
        .iter()
        .zip(scores)
        .map(|(&y, &h)| -(y as f64) * h)
        .collect();
    let max = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = exps.iter().map(|e| (e - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// `ln(sum_i exp(-y_i H_i))`.
pub fn log_loss(labels: &[i8], scores: &[f64]) -> f64 {
    let exps: Vec<f64> = labels
        .iter()
        .zip(scores)
        .map(|(&y, &h)| -(y as f64) * h)
        .collect();
    let max = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + exps.iter().map(|e| (e - max).exp()).sum::<f64>().ln()
}

/// Adds `rounds` trees on top of `initial` scores.
pub fn boost_stage(
    data: &BinnedFeatures,
    labels: &[i8],
    initial: &[f64],
    rounds: usize,
    depth: usize,
) -> Result<BoostedStage> {
    if initial.len() != data.n_samples() {
        return Err(McfError::InvalidInput("initial score length mismatch".into()));
    }
    if !labels.iter().any(|&y| y < 0) {
        return Err(McfError::Config(format!(
            "refusing to train layer {} on positives only",
            data.pool().layer_index()
        )));
    }
    let mut scores = initial.to_vec();
    let mut stage = BoostedStage {
        trees: Vec::with_capacity(rounds),
        scores: Vec::new(),
        loss_trace: Vec::with_capacity(rounds),
        alphas: Vec::with_capacity(rounds),
        errors: Vec::with_capacity(rounds),
        outputs: Vec::with_capacity(rounds),
    };
    for round in 0..rounds {
        let weights = sample_weights(labels, &scores);
        let fit = train_tree(data, labels, &weights, depth)?;
        if fit.error >= 0.5 {
            return Err(McfError::Training(format!(
                "weak learner at round {round} of layer {} has weighted error {:.4}",
                data.pool().layer_index(),
                fit.error
            )));
        }
        let alpha = alpha_for(fit.error);
        let mut tree = fit.tree;
        tree.scale_leaves(alpha);
        for (s, &o) in scores.iter_mut().zip(&fit.outputs) {
            *s += alpha * o as f64;
        }
        log::debug!(
            "layer {} round {round}: error {:.5} alpha {:.4}",
            data.pool().layer_index(),
            fit.error,
            alpha
        );
        stage.loss_trace.push(log_loss(labels, &scores));
        stage.alphas.push(alpha);
        stage.errors.push(fit.error);
        stage.trees.push(tree);
        stage.outputs.push(fit.outputs);
    }
    stage.scores = scores;
    Ok(stage)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Calibration {
    /// Threshold just below the lowest retained positive.
    MinPositive { margin: f64 },
    /// `q`-quantile of retained positive scores, minus `margin`.
    Quantile { q: f64, margin: f64 },
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration::MinPositive { margin: 1e-6 }
    }
}

impl Calibration {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Calibration::MinPositive { margin } | Calibration::Quantile { margin, .. }
                if !(margin >= 0.0 && margin.is_finite()) =>
            {
                Err(McfError::Config(format!("calibration margin {margin} must be >= 0")))
            }
            Calibration::Quantile { q, .. } if !(0.0..1.0).contains(&q) => {
                Err(McfError::Config(format!("calibration quantile {q} outside [0, 1)")))
            }
            _ => Ok(()),
        }
    }
}

/// Rejection threshold for one partial sum. `positives` are the cumulative
/// scores of the positives still retained.
pub fn calibrate_threshold(positives: &[f64], calibration: Calibration) -> f64 {
    if positives.is_empty() {
        return f64::NEG_INFINITY;
    }
    match calibration {
        Calibration::MinPositive { margin } => {
            positives.iter().copied().fold(f64::INFINITY, f64::min) - margin
        }
        Calibration::Quantile { q, margin } => {
            let mut sorted = positives.to_vec();
            sorted.sort_by(f64::total_cmp);
            let idx = ((q * sorted.len() as f64).ceil() as i64 - 1).max(0) as usize;
            sorted[idx.min(sorted.len() - 1)] - margin
        }
    }
}

/// Per-tree rejection thresholds for one stage from `tree_outputs[t][i]`,
/// tree `t`'s output on positive `i`. `carried[i]` is positive `i`'s
/// score before the stage and `retained[i]` whether it survived earlier
/// thresholds; both are updated in place. Positives falling below a threshold
/// stop counting for the later ones.
pub fn calibrate_stage(
    tree_outputs: &[Vec<f64>],
    carried: &mut [f64],
    retained: &mut [bool],
    calibration: Calibration,
) -> Vec<f64> {
    let mut thresholds = Vec::with_capacity(tree_outputs.len());
    for outputs in tree_outputs {
        for (s, o) in carried.iter_mut().zip(outputs) {
            *s += o;
        }
        let kept: Vec<f64> = carried
            .iter()
            .zip(retained.iter())
            .filter(|(_, &r)| r)
            .map(|(&s, _)| s)
            .collect();
        let t = calibrate_threshold(&kept, calibration);
        for (s, r) in carried.iter().zip(retained.iter_mut()) {
            if *r && *s < t {
                *r = false;
            }
        }
        thresholds.push(t);
    }
    thresholds
}
