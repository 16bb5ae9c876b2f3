//! Per-stage loss (cross-entropy plus truncated smoothing) and the
//! multi-stage sum over every combined output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Mat;
use crate::slowfast::StageOutputs;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the smoothing term.
    pub lambda: f64,
    /// Truncation threshold on per-frame log-probability jumps.
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.15,
            tau: 4.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

pub(crate) fn log_softmax(logits: &Mat) -> Mat {
    let mut out = logits.clone();
    for mut col in out.columns_mut() {
        let max = col.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + col.fold(0.0, |acc, &v| acc + (v - max).exp()).ln();
        col.mapv_inplace(|v| v - lse);
    }
    out
}

fn check_labels(logits: &Mat, labels: &[usize]) -> Result<()> {
    if logits.ncols() != labels.len() {
        return Err(Error::shape(format!(
            "logits span {} frames, labels {}",
            logits.ncols(),
            labels.len()
        )));
    }
    if logits.ncols() == 0 {
        return Err(Error::shape("empty sequence"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.nrows()) {
        return Err(Error::validation(format!(
            "label {bad} out of range for {} classes",
            logits.nrows()
        )));
    }
    Ok(())
}

/// Mean per-frame negative log-likelihood of the true class.
pub fn classification_loss(logits: &Mat, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let logp = log_softmax(logits);
    let total: f64 = labels.iter().enumerate().map(|(t, &c)| -logp[[c, t]]).sum();
    Ok(total / labels.len() as f64)
}

/// Mean over classes and adjacent frame pairs of `min(|Δ log p|, τ)²`.
pub fn smoothing_loss(logits: &Mat, config: &LossConfig) -> Result<f64> {
    config.validate()?;
    if logits.ncols() == 0 || logits.nrows() == 0 {
        return Err(Error::shape("empty logits"));
    }
    Ok(smoothing_terms(&log_softmax(logits), config.tau).0)
}

/// Returns the smoothing value and its gradient with respect to log-probabilities,
/// with the earlier frame of each pair treated as a constant.
fn smoothing_terms(logp: &Mat, tau: f64) -> (f64, Mat) {
    let (classes, frames) = logp.dim();
    let mut grad = Mat::zeros(logp.dim());
    if frames < 2 {
        return (0.0, grad);
    }
    let count = (classes * (frames - 1)) as f64;
    let cap = tau * tau;
    let mut total = 0.0;
    for c in 0..classes {
        for t in 1..frames {
            let delta = logp[[c, t]] - logp[[c, t - 1]];
            let sq = delta * delta;
            if sq < cap {
                total += sq;
                grad[[c, t]] = 2.0 * delta / count;
            } else {
                total += cap;
            }
        }
    }
    (total / count, grad)
}

/// Cross-entropy plus `λ ·` smoothing for one stage.
pub fn stage_loss(logits: &Mat, labels: &[usize], config: &LossConfig) -> Result<f64> {
    Ok(stage_loss_with_grad(logits, labels, config)?.0)
}

pub(crate) fn stage_loss_with_grad(
    logits: &Mat,
    labels: &[usize],
    config: &LossConfig,
) -> Result<(f64, Mat)> {
    config.validate()?;
    check_labels(logits, labels)?;
    let frames = labels.len() as f64;
    let logp = log_softmax(logits);
    let probs = logp.mapv(f64::exp);

    let mut ce = 0.0;
    let mut d_logp = Mat::zeros(logits.dim());
    for (t, &c) in labels.iter().enumerate() {
        ce -= logp[[c, t]];
        d_logp[[c, t]] -= 1.0 / frames;
    }
    ce /= frames;

    let (smooth, smooth_grad) = smoothing_terms(&logp, config.tau);
    d_logp.scaled_add(config.lambda, &smooth_grad);

    // Back through log-softmax: dz = g - p * sum(g) per frame.
    let mut d_logits = d_logp.clone();
    for (mut col, p) in d_logits.columns_mut().into_iter().zip(probs.columns()) {
        let sum = col.sum();
        col.scaled_add(-sum, &p);
    }
    Ok((ce + config.lambda * smooth, d_logits))
}

/// Sum of stage losses over every combined output.
pub fn total_loss(outputs: &StageOutputs, labels: &[usize], config: &LossConfig) -> Result<f64> {
    total_loss_over(&outputs.combined, labels, config)
}

pub fn total_loss_over(combined: &[Mat], labels: &[usize], config: &LossConfig) -> Result<f64> {
    if combined.is_empty() {
        return Err(Error::validation("no stage outputs to score"));
    }
    combined
        .iter()
        .map(|logits| stage_loss(logits, labels, config))
        .sum()
}
