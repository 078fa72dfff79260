//! Classification, box-regression and reconstruction losses, and their weighted sum.
//!
//! Each loss comes in a value-only form and a `*_with_grad` form that also
//! returns the gradient with respect to its prediction input.

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorTag;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalParams {
    /// Weight of positive anchors; negatives get `1 - alpha`.
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidValue(format!("focal alpha {} not in (0,1]", self.alpha)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::InvalidValue(format!("focal gamma {} < 0", self.gamma)));
        }
        Ok(())
    }
}

/// The three loss terms and their weighted total for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_focal: f64,
    pub l_smooth: f64,
    pub l_sr: f64,
    pub phi: f64,
    pub l_ef: f64,
}

/// `-alpha_t (1 - p_t)^gamma ln(p_t)` for one anchor.
pub fn focal_term(p_t: f64, alpha_t: f64, gamma: f64) -> f64 {
    -alpha_t * (1.0 - p_t).powf(gamma) * p_t.ln()
}

fn focal_term_grad(p_t: f64, alpha_t: f64, gamma: f64) -> f64 {
    let q = 1.0 - p_t;
    let pow_grad = if gamma == 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0) * p_t.ln()
    };
    alpha_t * (pow_grad - q.powf(gamma) / p_t)
}

/// Focal loss over anchors, normalized by the positive count (at least 1).
pub fn focal_loss(probs: &[f64], assignment: &[AnchorTag], params: &FocalParams) -> Result<f64> {
    focal_loss_impl(probs, assignment, params, false).map(|(v, _)| v)
}

pub fn focal_loss_with_grad(
    probs: &[f64],
    assignment: &[AnchorTag],
    params: &FocalParams,
) -> Result<(f64, Vec<f64>)> {
    focal_loss_impl(probs, assignment, params, true)
}

fn focal_loss_impl(
    probs: &[f64],
    assignment: &[AnchorTag],
    params: &FocalParams,
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    if probs.len() != assignment.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} probabilities vs {} anchor tags",
            probs.len(),
            assignment.len()
        )));
    }
    if probs.iter().any(|p| p.is_nan()) {
        return Err(Error::NaN("focal loss probabilities".into()));
    }
    let num_pos = assignment.iter().filter(|t| t.is_positive()).count().max(1) as f64;
    let mut total = 0.0;
    let mut grad = if want_grad { vec![0.0; probs.len()] } else { Vec::new() };
    for (i, (&p, tag)) in probs.iter().zip(assignment).enumerate() {
        let (sign, alpha_t) = match tag {
            AnchorTag::Positive(_) => (1.0, params.alpha),
            AnchorTag::Negative => (-1.0, 1.0 - params.alpha),
            AnchorTag::Ignore => continue,
        };
        let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let p_t = if sign > 0.0 { pc } else { 1.0 - pc };
        total += focal_term(p_t, alpha_t, params.gamma);
        // Outside the clamp range the gradient is taken at the clamped value,
        // so saturated positives still get pushed back.
        if want_grad {
            grad[i] = sign * focal_term_grad(p_t, alpha_t, params.gamma) / num_pos;
        }
    }
    Ok((total / num_pos, grad))
}

fn smooth_l1_scalar(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

fn smooth_l1_scalar_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Smooth ℓ1 over positive-anchor box offsets, normalized by the row count (at least 1).
pub fn smooth_l1(pred: &[[f64; 4]], target: &[[f64; 4]]) -> Result<f64> {
    smooth_l1_with_grad(pred, target).map(|(v, _)| v)
}

pub fn smooth_l1_with_grad(pred: &[[f64; 4]], target: &[[f64; 4]]) -> Result<(f64, Vec<[f64; 4]>)> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted rows vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    let norm = pred.len().max(1) as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(target) {
        let mut g = [0.0; 4];
        for k in 0..4 {
            let x = p[k] - t[k];
            total += smooth_l1_scalar(x);
            g[k] = smooth_l1_scalar_grad(x) / norm;
        }
        grad.push(g);
    }
    Ok((total / norm, grad))
}

/// Mean absolute pixel difference over every position and channel.
pub fn sr_l1(recon: &Tensor, target: &Tensor) -> Result<f64> {
    sr_l1_with_grad(recon, target).map(|(v, _)| v)
}

pub fn sr_l1_with_grad(recon: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if recon.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "reconstruction {:?} vs target {:?}",
            recon.shape(),
            target.shape()
        )));
    }
    let n = recon.len().max(1) as f64;
    let mut total = 0.0;
    let mut grad = Tensor::zeros(recon.shape());
    for ((g, &y), &t) in grad.data_mut().iter_mut().zip(recon.data()).zip(target.data()) {
        let d = y - t;
        total += d.abs();
        *g = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((total / n, grad))
}

/// `l_focal + l_smooth + phi * l_sr`.
pub fn total_loss(l_focal: f64, l_smooth: f64, l_sr: f64, phi: f64) -> Result<LossReport> {
    if phi < 0.0 || phi.is_nan() {
        return Err(Error::InvalidValue(format!("phi must be non-negative, got {phi}")));
    }
    for (name, v) in [("l_focal", l_focal), ("l_smooth", l_smooth), ("l_sr", l_sr)] {
        if !v.is_finite() {
            return Err(Error::NaN(format!("{name} = {v}")));
        }
    }
    Ok(LossReport {
        l_focal,
        l_smooth,
        l_sr,
        phi,
        l_ef: l_focal + l_smooth + phi * l_sr,
    })
}
