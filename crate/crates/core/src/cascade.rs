//! Selective two-step cascade: level-based selection sets Ω (two-step
//! classification) and Ψ (two-step regression), the first-step negative
//! filter producing the surviving set Φ, and anchor refinement.
//!
//! Anchors on Ω levels survive into Φ iff their first-step negative
//! confidence `1 - p` stays at or below the threshold θ; anchors on non-Ω
//! levels always survive. Anchors on Ψ levels are moved by the first-step
//! regression deltas before second-step matching and decoding.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchors::{AnchorError, AnchorPyramid};
use crate::geometry::{decode, BBox, BoxDelta};
use crate::matcher::{match_anchors, AnchorLabel, MatchThresholds, MatchResult};
use crate::Real;

#[derive(Debug, Error, PartialEq)]
pub enum CascadeError {
    #[error(transparent)]
    Anchor(#[from] AnchorError),
    #[error("negative threshold must lie in (0, 1], got {0}")]
    BadThreshold(f64),
    #[error("non-finite regression delta at anchor {0}")]
    NonFiniteDelta(usize),
    #[error("model output length {got} does not match anchor count {expected}")]
    MisalignedOutputs { got: usize, expected: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CascadeConfig {
    /// Levels whose anchors form Ω (default: the three low levels).
    pub stc_levels: Vec<String>,
    /// Levels whose anchors form Ψ (default: the three high levels).
    pub str_levels: Vec<String>,
    /// First-step negative-confidence filter threshold θ.
    pub negative_threshold: f64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            stc_levels: vec!["P2".into(), "P3".into(), "P4".into()],
            str_levels: vec!["P5".into(), "P6".into(), "P7".into()],
            negative_threshold: 0.99,
        }
    }
}

impl CascadeConfig {
    /// One-step baseline: no selection, no filtering (θ keeps everything).
    pub fn one_step() -> Self {
        Self { stc_levels: vec![], str_levels: vec![], negative_threshold: 1.0 }
    }

    pub fn validate(&self) -> Result<(), CascadeError> {
        if !(self.negative_threshold > 0.0 && self.negative_threshold <= 1.0) {
            return Err(CascadeError::BadThreshold(self.negative_threshold));
        }
        Ok(())
    }
}

/// One prediction step over the whole anchor list: a classification logit and
/// a regression delta per anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutputs<T> {
    pub logits: Vec<T>,
    pub deltas: Vec<BoxDelta<T>>,
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Index masks for Ω and Ψ by level membership. Deterministic: masks follow
/// pyramid anchor order.
pub fn build_selection_sets<T: Real>(
    pyramid: &AnchorPyramid<T>,
    config: &CascadeConfig,
) -> Result<(Vec<bool>, Vec<bool>), CascadeError> {
    let mut stc_mask = vec![false; pyramid.config.levels.len()];
    for name in &config.stc_levels {
        stc_mask[pyramid.config.level_index(name)?] = true;
    }
    let mut str_mask = vec![false; pyramid.config.levels.len()];
    for name in &config.str_levels {
        str_mask[pyramid.config.level_index(name)?] = true;
    }
    let omega = pyramid.meta.iter().map(|m| stc_mask[m.level]).collect();
    let psi = pyramid.meta.iter().map(|m| str_mask[m.level]).collect();
    Ok((omega, psi))
}

/// Surviving set Φ: drops anchor `i ∈ Ω` iff `1 - p_i > θ`; anchors outside
/// Ω always pass.
pub fn stc_filter<T: Real>(first_step_probs: &[T], omega: &[bool], theta: f64) -> Vec<bool> {
    let theta = T::of(theta);
    first_step_probs
        .iter()
        .zip(omega)
        .map(|(&p, &in_omega)| !in_omega || (T::one() - p) <= theta)
        .collect()
}

/// Replaces anchors in Ψ by their first-step refined boxes; all other
/// anchors pass through unchanged.
pub fn str_refine<T: Real>(
    first_step_deltas: &[BoxDelta<T>],
    anchors: &[BBox<T>],
    psi: &[bool],
) -> Result<Vec<BBox<T>>, CascadeError> {
    anchors
        .iter()
        .zip(first_step_deltas)
        .zip(psi)
        .enumerate()
        .map(|(i, ((anchor, delta), &in_psi))| {
            if !in_psi {
                return Ok(*anchor);
            }
            if !delta.is_finite() {
                return Err(CascadeError::NonFiniteDelta(i));
            }
            Ok(decode(delta, anchor))
        })
        .collect()
}

/// Per-anchor cascade state binding model outputs, selection sets and both
/// matching steps for the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeBatch<T> {
    pub p_logits: Vec<T>,
    pub q_logits: Vec<T>,
    pub x: Vec<BoxDelta<T>>,
    pub t: Vec<BoxDelta<T>>,
    pub labels1: Vec<AnchorLabel>,
    pub labels2: Vec<AnchorLabel>,
    pub targets1: Vec<Option<BoxDelta<T>>>,
    pub targets2: Vec<Option<BoxDelta<T>>>,
    pub omega: Vec<bool>,
    pub psi: Vec<bool>,
    pub phi: Vec<bool>,
    pub refined_anchors: Vec<BBox<T>>,
}

impl<T: Real> CascadeBatch<T> {
    pub fn len(&self) -> usize {
        self.p_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_logits.is_empty()
    }

    /// First-step face probability.
    pub fn p(&self, i: usize) -> T {
        sigmoid(self.p_logits[i])
    }

    /// Second-step face probability.
    pub fn q(&self, i: usize) -> T {
        sigmoid(self.q_logits[i])
    }
}

/// Builds a [`CascadeBatch`]: Ω/Ψ from level membership, Φ from the
/// first-step scores, refined anchors from the first-step deltas, step-1
/// matching on the original anchors with step-1 thresholds and step-2
/// matching on the refined anchors with step-2 thresholds.
#[allow(clippy::too_many_arguments)]
pub fn assemble_batch<T: Real>(
    pyramid: &AnchorPyramid<T>,
    gts: &[BBox<T>],
    first: &StepOutputs<T>,
    second: &StepOutputs<T>,
    config: &CascadeConfig,
    th1: MatchThresholds,
    th2: MatchThresholds,
) -> Result<CascadeBatch<T>, CascadeError> {
    config.validate()?;
    let n = pyramid.len();
    for len in [first.logits.len(), first.deltas.len(), second.logits.len(), second.deltas.len()] {
        if len != n {
            return Err(CascadeError::MisalignedOutputs { got: len, expected: n });
        }
    }

    let (omega, psi) = build_selection_sets(pyramid, config)?;
    let probs: Vec<T> = first.logits.iter().map(|&z| sigmoid(z)).collect();
    let phi = stc_filter(&probs, &omega, config.negative_threshold);
    let refined = str_refine(&first.deltas, &pyramid.boxes, &psi)?;

    let m1: MatchResult<T> = match_anchors(&pyramid.boxes, gts, th1);
    let m2: MatchResult<T> = match_anchors(&refined, gts, th2);

    Ok(CascadeBatch {
        p_logits: first.logits.clone(),
        q_logits: second.logits.clone(),
        x: first.deltas.clone(),
        t: second.deltas.clone(),
        labels1: m1.labels,
        labels2: m2.labels,
        targets1: m1.targets,
        targets2: m2.targets,
        omega,
        psi,
        phi,
        refined_anchors: refined,
    })
}
