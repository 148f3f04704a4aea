//! Sigmoid focal loss, smooth L1, and the composite two-step classification /
//! regression / total losses, with analytic gradients taken with respect to
//! the pre-sigmoid logits and the raw regression deltas.
//!
//! Summation order is fixed (anchor index order) so repeated evaluations are
//! bit-stable.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::{sigmoid, CascadeBatch};
use crate::geometry::BoxDelta;
use crate::matcher::AnchorLabel;
use crate::Real;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("non-finite logit")]
    NonFiniteLogit,
    #[error("positive anchor {0} has no regression target")]
    MissingTarget(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    /// RetinaNet-lineage defaults.
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub focal: FocalParams,
    /// Normalizes each STR term by its positive count (ablation flag; the
    /// default follows the unnormalized composite regression loss).
    pub normalize_str: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { focal: FocalParams::default(), normalize_str: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossReport<T> {
    pub stc_loss: T,
    pub str_loss: T,
    pub total: T,
    /// Positive anchors in the step-1 matching restricted to Ω.
    pub n_s1: usize,
    /// Positive anchors in the step-2 matching restricted to Φ.
    pub n_s2: usize,
}

/// Gradients of the total loss with respect to every per-anchor logit and
/// delta component, in batch order.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads<T> {
    pub d_p_logit: Vec<T>,
    pub d_q_logit: Vec<T>,
    pub d_x: Vec<[T; 4]>,
    pub d_t: Vec<[T; 4]>,
}

fn softplus<T: Real>(x: T) -> T {
    let hi = T::of(30.0);
    if x > hi {
        x
    } else if x < -hi {
        x.exp()
    } else {
        (T::one() + x.exp()).ln()
    }
}

/// Sigmoid focal loss for a single logit, with its derivative w.r.t. the
/// logit. `label` is 1 for face, 0 for background.
///
/// Label 1: `-α(1-p)^γ ln p`; label 0: `-(1-α)p^γ ln(1-p)` with `p = σ(z)`.
pub fn focal_loss<T: Real>(logit: T, label: u8, fp: &FocalParams) -> Result<(T, T), LossError> {
    if !logit.is_finite() {
        return Err(LossError::NonFiniteLogit);
    }
    let alpha = T::of(fp.alpha);
    let gamma = T::of(fp.gamma);
    let p = sigmoid(logit);
    let one_minus_p = sigmoid(-logit);
    let ln_p = -softplus(-logit);
    let ln_1mp = -softplus(logit);
    if label == 1 {
        let w = one_minus_p.powf(gamma);
        let loss = -alpha * w * ln_p;
        let grad = alpha * w * (gamma * p * ln_p - one_minus_p);
        Ok((loss, grad))
    } else {
        let w = p.powf(gamma);
        let loss = -(T::one() - alpha) * w * ln_1mp;
        let grad = (T::one() - alpha) * w * (p - gamma * one_minus_p * ln_1mp);
        Ok((loss, grad))
    }
}

/// Smooth L1 on a scalar residual, with derivative: `0.5x²` for `|x| < 1`,
/// `|x| - 0.5` otherwise.
pub fn smooth_l1<T: Real>(x: T) -> (T, T) {
    let half = T::of(0.5);
    if x.abs() < T::one() {
        (half * x * x, x)
    } else {
        (x.abs() - half, x.signum())
    }
}

/// Smooth L1 summed over the four delta components; gradient w.r.t. the
/// prediction.
pub fn smooth_l1_delta<T: Real>(pred: &BoxDelta<T>, target: &BoxDelta<T>) -> (T, [T; 4]) {
    let p = pred.as_array();
    let t = target.as_array();
    let mut loss = T::zero();
    let mut grad = [T::zero(); 4];
    for c in 0..4 {
        let (l, g) = smooth_l1(p[c] - t[c]);
        loss = loss + l;
        grad[c] = g;
    }
    (loss, grad)
}

fn clamp_n<T: Real>(n: usize) -> T {
    T::of(n.max(1) as f64)
}

struct StcTerms<T> {
    loss: T,
    n_s1: usize,
    n_s2: usize,
}

fn stc_terms<T: Real>(
    batch: &CascadeBatch<T>,
    fp: &FocalParams,
    mut grad: Option<&mut LossGrads<T>>,
) -> Result<StcTerms<T>, LossError> {
    let n_s1 = (0..batch.len())
        .filter(|&i| batch.omega[i] && batch.labels1[i] == AnchorLabel::Positive)
        .count();
    let n_s2 = (0..batch.len())
        .filter(|&i| batch.phi[i] && batch.labels2[i] == AnchorLabel::Positive)
        .count();
    let norm1 = clamp_n::<T>(n_s1);
    let norm2 = clamp_n::<T>(n_s2);

    let mut first = T::zero();
    for i in 0..batch.len() {
        if !batch.omega[i] || batch.labels1[i] == AnchorLabel::Ignored {
            continue;
        }
        let label = (batch.labels1[i] == AnchorLabel::Positive) as u8;
        let (l, g) = focal_loss(batch.p_logits[i], label, fp)?;
        first = first + l;
        if let Some(grads) = grad.as_deref_mut() {
            grads.d_p_logit[i] = grads.d_p_logit[i] + g / norm1;
        }
    }

    let mut second = T::zero();
    for i in 0..batch.len() {
        if !batch.phi[i] || batch.labels2[i] == AnchorLabel::Ignored {
            continue;
        }
        let label = (batch.labels2[i] == AnchorLabel::Positive) as u8;
        let (l, g) = focal_loss(batch.q_logits[i], label, fp)?;
        second = second + l;
        if let Some(grads) = grad.as_deref_mut() {
            grads.d_q_logit[i] = grads.d_q_logit[i] + g / norm2;
        }
    }

    Ok(StcTerms { loss: first / norm1 + second / norm2, n_s1, n_s2 })
}

fn str_terms<T: Real>(
    batch: &CascadeBatch<T>,
    normalize: bool,
    mut grad: Option<&mut LossGrads<T>>,
) -> Result<T, LossError> {
    let norm1 = if normalize {
        clamp_n::<T>(
            (0..batch.len())
                .filter(|&i| batch.psi[i] && batch.labels1[i] == AnchorLabel::Positive)
                .count(),
        )
    } else {
        T::one()
    };
    let norm2 = if normalize {
        clamp_n::<T>(
            (0..batch.len())
                .filter(|&i| batch.phi[i] && batch.labels2[i] == AnchorLabel::Positive)
                .count(),
        )
    } else {
        T::one()
    };

    let mut first = T::zero();
    for i in 0..batch.len() {
        if !batch.psi[i] || batch.labels1[i] != AnchorLabel::Positive {
            continue;
        }
        let target = batch.targets1[i].ok_or(LossError::MissingTarget(i))?;
        let (l, g) = smooth_l1_delta(&batch.x[i], &target);
        first = first + l;
        if let Some(grads) = grad.as_deref_mut() {
            for c in 0..4 {
                grads.d_x[i][c] = grads.d_x[i][c] + g[c] / norm1;
            }
        }
    }

    let mut second = T::zero();
    for i in 0..batch.len() {
        if !batch.phi[i] || batch.labels2[i] != AnchorLabel::Positive {
            continue;
        }
        let target = batch.targets2[i].ok_or(LossError::MissingTarget(i))?;
        let (l, g) = smooth_l1_delta(&batch.t[i], &target);
        second = second + l;
        if let Some(grads) = grad.as_deref_mut() {
            for c in 0..4 {
                grads.d_t[i][c] = grads.d_t[i][c] + g[c] / norm2;
            }
        }
    }

    Ok(first / norm1 + second / norm2)
}

/// Two-step classification loss (focal over Ω in step 1 and over Φ in
/// step 2, each normalized by its positive count, clamped to 1).
pub fn stc_loss<T: Real>(batch: &CascadeBatch<T>, fp: &FocalParams) -> Result<T, LossError> {
    Ok(stc_terms(batch, fp, None)?.loss)
}

/// Two-step regression loss: smooth L1 over positive anchors of Ψ (step 1)
/// and Φ (step 2), unnormalized.
pub fn str_loss<T: Real>(batch: &CascadeBatch<T>) -> Result<T, LossError> {
    str_terms(batch, false, None)
}

/// Total loss `L = L_STC + L_STR` with the positive counts used for
/// normalization.
pub fn total_loss<T: Real>(batch: &CascadeBatch<T>, cfg: &LossConfig) -> Result<LossReport<T>, LossError> {
    let stc = stc_terms(batch, &cfg.focal, None)?;
    let str_l = str_terms(batch, cfg.normalize_str, None)?;
    Ok(LossReport {
        stc_loss: stc.loss,
        str_loss: str_l,
        total: stc.loss + str_l,
        n_s1: stc.n_s1,
        n_s2: stc.n_s2,
    })
}

/// Total loss plus its gradient w.r.t. every logit and delta in the batch.
/// Selection sets, labels and targets are treated as constants.
pub fn total_loss_with_grads<T: Real>(
    batch: &CascadeBatch<T>,
    cfg: &LossConfig,
) -> Result<(LossReport<T>, LossGrads<T>), LossError> {
    let n = batch.len();
    let mut grads = LossGrads {
        d_p_logit: vec![T::zero(); n],
        d_q_logit: vec![T::zero(); n],
        d_x: vec![[T::zero(); 4]; n],
        d_t: vec![[T::zero(); 4]; n],
    };
    let stc = stc_terms(batch, &cfg.focal, Some(&mut grads))?;
    let str_l = str_terms(batch, cfg.normalize_str, Some(&mut grads))?;
    let report = LossReport {
        stc_loss: stc.loss,
        str_loss: str_l,
        total: stc.loss + str_l,
        n_s1: stc.n_s1,
        n_s2: stc.n_s2,
    };
    Ok((report, grads))
}
