//! Training objectives. Each loss returns its value together with the gradient
//! with respect to its prediction input, so it can be attached to a
//! [`Graph`](crate::autodiff::Graph) as a scalar node.
//!
//! All log-sigmoid terms go through [`stable_softplus`]:
//! `log σ(l) = -softplus(-l)` and `log(1 - σ(l)) = -softplus(l)`.

use serde::{Deserialize, Serialize};

use crate::encoder::TargetPair;
use crate::error::{Error, Result};

/// Lower clamp of duration predictions inside the IoU ratio.
pub const DURATION_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Class balance of the focal loss (`α_c`).
    pub alpha_c: f64,
    /// Focusing exponent on the prediction (`α`).
    pub alpha: f64,
    /// Exponent of the near-center penalty reduction (`β`).
    pub beta: f64,
    /// Weight of the duration loss (`λ_d`).
    pub lambda_d: f64,
    pub label_smoothing: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha_c: 0.1, alpha: 2.0, beta: 4.0, lambda_d: 5.0, label_smoothing: 0.1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha_c, self.alpha, self.beta, self.lambda_d].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("loss hyperparameters must be nonnegative".into()));
        }
        if !(0.0..0.5).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must lie in [0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Value and gradient of a scalar loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// `log(1 + e^x)` evaluated as `log(1 + e^-|x|) + max(x, 0)`.
pub fn stable_softplus(x: f64) -> f64 {
    (-x.abs()).exp().ln_1p() + x.max(0.0)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: lengths {a} and {b} differ")));
    }
    Ok(())
}

/// Focal loss on center logits against a Gaussian-bump target. Points with a
/// target of exactly 1 are positives; everywhere else the penalty is scaled
/// down by `(1 - c)^β` near true centers.
pub fn focal_center_loss(logits: &[f64], target: &[f64], n_events: usize, cfg: &LossConfig) -> Result<LossGrad> {
    check_len(logits.len(), target.len(), "focal_center_loss")?;
    let norm = 1.0 / n_events.max(1) as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&l, &c) in logits.iter().zip(target) {
        let p = sigmoid(l);
        let q = sigmoid(-l);
        if c == 1.0 {
            // -(1-α_c) q^α log p, with log p = -softplus(-l)
            let sp = stable_softplus(-l);
            let qa = q.powf(cfg.alpha);
            value += (1.0 - cfg.alpha_c) * qa * sp;
            grad.push(-(1.0 - cfg.alpha_c) * qa * (cfg.alpha * p * sp + q) * norm);
        } else {
            // -α_c (1-c)^β p^α log q, with log q = -softplus(l)
            let w = cfg.alpha_c * (1.0 - c).powf(cfg.beta);
            let sp = stable_softplus(l);
            let pa = p.powf(cfg.alpha);
            value += w * pa * sp;
            grad.push(w * pa * (cfg.alpha * q * sp + p) * norm);
        }
    }
    Ok(LossGrad { value: value * norm, grad })
}

/// `1 - mean IoU` of predicted vs. target durations at the target centers.
/// The gradient is zero off the center mask.
pub fn iou_duration_loss(duration_pred: &[f64], target: &TargetPair) -> Result<LossGrad> {
    check_len(duration_pred.len(), target.duration.len(), "iou_duration_loss")?;
    let mut grad = vec![0.0; duration_pred.len()];
    let n = target.center_mask.len();
    if n == 0 {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let inv_n = 1.0 / n as f64;
    let mut iou_sum = 0.0;
    for &i in &target.center_mask {
        let raw = duration_pred[i];
        let dp = raw.clamp(DURATION_EPS, 1.0);
        let dt = target.duration[i].max(DURATION_EPS);
        let clamped = raw != dp;
        if dp < dt {
            iou_sum += dp / dt;
            if !clamped {
                grad[i] = -inv_n / dt;
            }
        } else if dp > dt {
            iou_sum += dt / dp;
            if !clamped {
                grad[i] = inv_n * dt / (dp * dp);
            }
        } else {
            iou_sum += 1.0;
        }
    }
    Ok(LossGrad { value: 1.0 - iou_sum * inv_n, grad })
}

/// `L_c + λ_d·L_d`.
pub fn combine(center_loss: f64, duration_loss: f64, lambda_d: f64) -> f64 {
    center_loss + lambda_d * duration_loss
}

/// Both heads' losses for one window: gradients w.r.t. center logits and
/// w.r.t. (post-sigmoid) duration predictions, the latter already scaled by λ_d.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    pub value: f64,
    pub center: LossGrad,
    pub duration: LossGrad,
    pub center_grad: Vec<f64>,
    pub duration_grad: Vec<f64>,
}

pub fn combined_loss(
    center_logits: &[f64],
    duration_pred: &[f64],
    target: &TargetPair,
    cfg: &LossConfig,
) -> Result<CombinedLoss> {
    check_len(center_logits.len(), target.len(), "combined_loss")?;
    let center = focal_center_loss(center_logits, &target.center, target.n_events(), cfg)?;
    let duration = iou_duration_loss(duration_pred, target)?;
    let value = combine(center.value, duration.value, cfg.lambda_d);
    let center_grad = center.grad.clone();
    let duration_grad = duration.grad.iter().map(|g| g * cfg.lambda_d).collect();
    Ok(CombinedLoss { value, center, duration, center_grad, duration_grad })
}

/// Maps a {0, 1} label to its smoothed target in `{s, 1 - s}`.
pub fn smooth_label(label: f64, smoothing: f64) -> f64 {
    if label >= 0.5 {
        1.0 - smoothing
    } else {
        smoothing
    }
}

/// Mean binary cross-entropy on logits with label smoothing.
pub fn epoch_bce(logits: &[f64], labels: &[f64], smoothing: f64) -> Result<LossGrad> {
    check_len(logits.len(), labels.len(), "epoch_bce")?;
    if logits.is_empty() {
        return Ok(LossGrad { value: 0.0, grad: Vec::new() });
    }
    let inv = 1.0 / logits.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&l, &y) in logits.iter().zip(labels) {
        let t = smooth_label(y, smoothing);
        value += t * stable_softplus(-l) + (1.0 - t) * stable_softplus(l);
        grad.push((sigmoid(l) - t) * inv);
    }
    Ok(LossGrad { value: value * inv, grad })
}
