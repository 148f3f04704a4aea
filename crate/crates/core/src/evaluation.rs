//! Detection evaluation: greedy detection/ground-truth matching, PR curves,
//! average precision (all-points envelope integration, with an 11-point
//! option), false-positive counts at fixed recall levels, and AP sweeps over
//! IoU thresholds.
//!
//! Invalid-flagged ground truths act as ignore regions: detections matching
//! only them are neither true nor false positives.

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::inference::Detection;
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DetFlag {
    TruePositive,
    FalsePositive,
    /// Matched only an ignore region; excluded from the curve.
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub score: f64,
    pub tp: usize,
    pub fp: usize,
}

/// Operating points derived from prefixes of the score-sorted detections.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub n_gt: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Continuous integration of the precision envelope over recall.
    AllPoints,
    /// PASCAL-2007 style sampling at recalls 0, 0.1, …, 1.
    ElevenPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub interpolation: Interpolation,
    pub fp_recall_levels: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: vec![0.5, 0.6, 0.7, 0.8],
            interpolation: Interpolation::AllPoints,
            fp_recall_levels: vec![0.1, 0.3, 0.5, 0.8, 0.9, 0.95],
        }
    }
}

/// Greedy matching: walking detections in descending-score order, each is
/// matched to the unmatched ground truth of highest IoU ≥ threshold (TP);
/// failing that, a detection overlapping an ignore region at the threshold
/// is ignored; everything else is FP. Duplicates on an already-matched
/// ground truth fall through to FP.
pub fn match_detections<T: Real>(
    dets: &[Detection<T>],
    gts: &[BBox<T>],
    ignores: &[BBox<T>],
    iou_threshold: f64,
) -> Vec<DetFlag> {
    debug_assert!(
        dets.windows(2).all(|w| w[0].score >= w[1].score),
        "detections must be score-sorted descending"
    );
    let threshold = T::of(iou_threshold);
    let mut gt_used = vec![false; gts.len()];
    dets.iter()
        .map(|det| {
            let mut best = threshold;
            let mut best_gt = None;
            for (gi, gt) in gts.iter().enumerate() {
                if gt_used[gi] {
                    continue;
                }
                let v = det.bbox.iou(gt);
                if v >= best && (best_gt.is_none() || v > best) {
                    best = v;
                    best_gt = Some(gi);
                }
            }
            if let Some(gi) = best_gt {
                gt_used[gi] = true;
                return DetFlag::TruePositive;
            }
            if ignores.iter().any(|ig| det.bbox.iou(ig) >= threshold) {
                DetFlag::Ignored
            } else {
                DetFlag::FalsePositive
            }
        })
        .collect()
}

/// Builds the PR curve from score-sorted `(score, flag)` pairs; ignored
/// detections contribute no point.
pub fn pr_curve(flagged: &[(f64, DetFlag)], n_gt: usize) -> PrCurve {
    let mut points = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    for &(score, flag) in flagged {
        match flag {
            DetFlag::TruePositive => tp += 1,
            DetFlag::FalsePositive => fp += 1,
            DetFlag::Ignored => continue,
        }
        let recall = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
        let precision = tp as f64 / (tp + fp) as f64;
        points.push(PrPoint { recall, precision, score, tp, fp });
    }
    PrCurve { points, n_gt }
}

/// Matches and pools detections across images into one curve, globally
/// sorted by score. Each element of `images` is `(detections, ground truths,
/// ignore regions)`; detections need not be pre-sorted.
pub fn eval_images<T: Real>(
    images: &[(Vec<Detection<T>>, Vec<BBox<T>>, Vec<BBox<T>>)],
    iou_threshold: f64,
) -> PrCurve {
    let mut flagged: Vec<(f64, DetFlag)> = Vec::new();
    let mut n_gt = 0usize;
    for (dets, gts, ignores) in images {
        let mut sorted = dets.clone();
        sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
        let flags = match_detections(&sorted, gts, ignores, iou_threshold);
        flagged.extend(
            sorted
                .iter()
                .zip(flags)
                .map(|(d, f)| (d.score.to_f64().unwrap(), f)),
        );
        n_gt += gts.len();
    }
    flagged.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    pr_curve(&flagged, n_gt)
}

/// Area under the precision envelope over recall.
pub fn average_precision(curve: &PrCurve, interpolation: Interpolation) -> f64 {
    if curve.points.is_empty() || curve.n_gt == 0 {
        return 0.0;
    }
    match interpolation {
        Interpolation::AllPoints => {
            // envelope: max precision at recall >= r, via right-to-left max
            let n = curve.points.len();
            let mut envelope = vec![0.0; n];
            let mut running = 0.0f64;
            for i in (0..n).rev() {
                running = running.max(curve.points[i].precision);
                envelope[i] = running;
            }
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            for (point, env) in curve.points.iter().zip(&envelope) {
                ap += (point.recall - prev_recall) * env;
                prev_recall = point.recall;
            }
            ap
        }
        Interpolation::ElevenPoint => {
            let mut acc = 0.0;
            for k in 0..=10 {
                let r = k as f64 / 10.0;
                let best = curve
                    .points
                    .iter()
                    .filter(|p| p.recall >= r - 1e-12)
                    .map(|p| p.precision)
                    .fold(0.0f64, f64::max);
                acc += best;
            }
            acc / 11.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FpCount {
    Reached(usize),
    Unreached,
}

/// False-positive count in the shortest score-sorted prefix achieving each
/// recall level.
pub fn fp_at_recall(curve: &PrCurve, recall_levels: &[f64]) -> Vec<(f64, FpCount)> {
    recall_levels
        .iter()
        .map(|&level| {
            for point in &curve.points {
                if point.recall >= level {
                    return (level, FpCount::Reached(point.fp));
                }
            }
            (level, FpCount::Unreached)
        })
        .collect()
}

/// AP per IoU threshold.
pub fn ap_iou_sweep<T: Real>(
    images: &[(Vec<Detection<T>>, Vec<BBox<T>>, Vec<BBox<T>>)],
    config: &EvalConfig,
) -> Vec<(f64, f64)> {
    config
        .iou_thresholds
        .iter()
        .map(|&thr| {
            let curve = eval_images(images, thr);
            (thr, average_precision(&curve, config.interpolation))
        })
        .collect()
}
