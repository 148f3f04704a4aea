//! Anchor-to-ground-truth assignment with positive/ignore/negative IoU bands.
//!
//! An anchor is positive when its best IoU over all ground truths reaches
//! `theta_p`, negative when it stays below `theta_n`, ignored in between.
//! No force-matching of otherwise-unmatched ground truths. Argmax ties go to
//! the lowest ground-truth index.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{encode, BBox, BoxDelta};
use crate::Real;

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("invalid thresholds: require 0 <= theta_n <= theta_p <= 1")]
    BadThresholds,
    #[error("imbalance ratio undefined: no positive anchors")]
    NoPositives,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchThresholds {
    pub theta_n: f64,
    pub theta_p: f64,
}

impl MatchThresholds {
    pub fn new(theta_n: f64, theta_p: f64) -> Result<Self, MatchError> {
        if !(0.0..=1.0).contains(&theta_n) || !(0.0..=1.0).contains(&theta_p) || theta_n > theta_p {
            return Err(MatchError::BadThresholds);
        }
        Ok(Self { theta_n, theta_p })
    }

    /// First-step bands: θn=0.3, θp=0.7.
    pub fn step1() -> Self {
        Self { theta_n: 0.3, theta_p: 0.7 }
    }

    /// Second-step bands: θn=0.4, θp=0.5.
    pub fn step2() -> Self {
        Self { theta_n: 0.4, theta_p: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignored,
}

/// Per-anchor assignment for one matching step.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult<T> {
    pub labels: Vec<AnchorLabel>,
    /// Argmax ground-truth index; set for positives only.
    pub matched_gt: Vec<Option<usize>>,
    /// Regression target encoding the matched ground truth against the
    /// anchor; set for positives whose pair has strictly positive extents.
    pub targets: Vec<Option<BoxDelta<T>>>,
    /// Best IoU per anchor, kept for diagnostics.
    pub best_iou: Vec<T>,
}

impl<T: Real> MatchResult<T> {
    pub fn count(&self, label: AnchorLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn positives(&self) -> usize {
        self.count(AnchorLabel::Positive)
    }

    pub fn negatives(&self) -> usize {
        self.count(AnchorLabel::Negative)
    }

    pub fn ignored(&self) -> usize {
        self.count(AnchorLabel::Ignored)
    }
}

/// Assigns a band label to every anchor from its max IoU over `gts`.
/// Empty `gts` makes every anchor negative.
pub fn match_anchors<T: Real>(
    anchors: &[BBox<T>],
    gts: &[BBox<T>],
    th: MatchThresholds,
) -> MatchResult<T> {
    let theta_n = T::of(th.theta_n);
    let theta_p = T::of(th.theta_p);
    let n = anchors.len();
    let mut labels = Vec::with_capacity(n);
    let mut matched_gt = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    let mut best_iou = Vec::with_capacity(n);

    for anchor in anchors {
        let mut best = T::zero();
        let mut best_idx = None;
        for (gi, gt) in gts.iter().enumerate() {
            let v = anchor.iou(gt);
            if best_idx.is_none() || v > best {
                best = v;
                best_idx = Some(gi);
            }
        }
        let label = if best_idx.is_some() && best >= theta_p {
            AnchorLabel::Positive
        } else if best < theta_n {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignored
        };
        let (gt_index, target) = if label == AnchorLabel::Positive {
            let gi = best_idx.unwrap();
            (Some(gi), encode(&gts[gi], anchor).ok())
        } else {
            (None, None)
        };
        labels.push(label);
        matched_gt.push(gt_index);
        targets.push(target);
        best_iou.push(best);
    }

    MatchResult { labels, matched_gt, targets, best_iou }
}

/// Negatives per positive, ignoring ignored anchors.
pub fn imbalance_ratio<T: Real>(m: &MatchResult<T>) -> Result<f64, MatchError> {
    let positives = m.positives();
    if positives == 0 {
        return Err(MatchError::NoPositives);
    }
    Ok(m.negatives() as f64 / positives as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox<f64> {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    /// Shifts a unit-area setup so the anchor/gt pair hits a target IoU.
    fn pair_with_iou(iou: f64) -> (BBox<f64>, BBox<f64>) {
        // Two 1×w boxes, one at origin; overlap fraction f gives IoU f/(2-f).
        let f = 2.0 * iou / (1.0 + iou);
        let anchor = b(0.0, 0.0, 1.0, 1.0);
        let gt = b(1.0 - f, 0.0, 2.0 - f, 1.0);
        (anchor, gt)
    }

    #[test]
    fn band_thresholds_step1_step2() {
        let (anchor, gt) = pair_with_iou(0.75);
        let m = match_anchors(&[anchor], &[gt], MatchThresholds::step1());
        assert_eq!(m.labels[0], AnchorLabel::Positive);

        // gt nested in the anchor at exactly half its area: IoU = 0.5 exactly
        let anchor = b(0.0, 0.0, 1.0, 1.0);
        let gt = b(0.0, 0.0, 0.5, 1.0);
        assert_eq!(anchor.iou(&gt), 0.5);
        let m1 = match_anchors(&[anchor], &[gt], MatchThresholds::step1());
        assert_eq!(m1.labels[0], AnchorLabel::Ignored);
        let m2 = match_anchors(&[anchor], &[gt], MatchThresholds::step2());
        assert_eq!(m2.labels[0], AnchorLabel::Positive);
    }

    #[test]
    fn empty_gts_all_negative() {
        let anchors = vec![b(0.0, 0.0, 1.0, 1.0), b(5.0, 5.0, 6.0, 6.0)];
        let m = match_anchors(&anchors, &[], MatchThresholds::step1());
        assert!(m.labels.iter().all(|&l| l == AnchorLabel::Negative));
    }

    #[test]
    fn argmax_tie_takes_lowest_index() {
        let anchor = b(0.0, 0.0, 2.0, 2.0);
        let gt = b(0.0, 0.0, 2.0, 2.0);
        let m = match_anchors(&[anchor], &[gt, gt], MatchThresholds::step1());
        assert_eq!(m.matched_gt[0], Some(0));
    }

    #[test]
    fn positive_target_decodes_to_gt() {
        let anchor = b(0.0, 0.0, 4.0, 4.0);
        let gt = b(0.5, 0.5, 4.0, 4.0);
        let m = match_anchors(&[anchor], &[gt], MatchThresholds::new(0.0, 0.5).unwrap());
        assert_eq!(m.labels[0], AnchorLabel::Positive);
        let back = crate::geometry::decode(&m.targets[0].unwrap(), &anchor);
        assert!((back.x_min - gt.x_min).abs() < 1e-9);
        assert!((back.y_max - gt.y_max).abs() < 1e-9);
    }

    #[test]
    fn imbalance_ratio_values() {
        let mut labels = vec![AnchorLabel::Positive];
        labels.extend(std::iter::repeat(AnchorLabel::Negative).take(404));
        let n = labels.len();
        let m = MatchResult::<f64> {
            labels,
            matched_gt: vec![None; n],
            targets: vec![None; n],
            best_iou: vec![0.0; n],
        };
        assert_eq!(imbalance_ratio(&m).unwrap(), 404.0);

        let all_pos = MatchResult::<f64> {
            labels: vec![AnchorLabel::Positive; 3],
            matched_gt: vec![None; 3],
            targets: vec![None; 3],
            best_iou: vec![1.0; 3],
        };
        assert_eq!(imbalance_ratio(&all_pos).unwrap(), 0.0);

        let none = MatchResult::<f64> {
            labels: vec![AnchorLabel::Negative],
            matched_gt: vec![None],
            targets: vec![None],
            best_iou: vec![0.0],
        };
        assert_eq!(imbalance_ratio(&none), Err(MatchError::NoPositives));
    }

    fn random_boxes(rng: &mut ChaCha8Rng, n: usize) -> Vec<BBox<f64>> {
        (0..n)
            .map(|_| {
                let x = rng.gen_range(0.0..50.0);
                let y = rng.gen_range(0.0..50.0);
                let w = rng.gen_range(1.0..20.0);
                let h = rng.gen_range(1.0..20.0);
                b(x, y, x + w, y + h)
            })
            .collect()
    }

    /// Brute-force double loop over anchors × gts, written independently of
    /// the implementation path.
    fn oracle_match(
        anchors: &[BBox<f64>],
        gts: &[BBox<f64>],
        th: MatchThresholds,
    ) -> (Vec<AnchorLabel>, Vec<Option<usize>>) {
        let mut labels = Vec::new();
        let mut matched = Vec::new();
        for a in anchors {
            let mut best = 0.0f64;
            let mut best_i = usize::MAX;
            for (i, g) in gts.iter().enumerate() {
                let iou = a.iou(g);
                if iou > best {
                    best = iou;
                    best_i = i;
                }
            }
            if best >= th.theta_p && !gts.is_empty() {
                labels.push(AnchorLabel::Positive);
                // best==0 positives (theta_p==0) tie-break to index 0
                matched.push(Some(if best_i == usize::MAX { 0 } else { best_i }));
            } else if best < th.theta_n {
                labels.push(AnchorLabel::Negative);
                matched.push(None);
            } else {
                labels.push(AnchorLabel::Ignored);
                matched.push(None);
            }
        }
        (labels, matched)
    }

    #[test]
    fn matches_brute_force_oracle_across_seeds() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n_anchors = rng.gen_range(1..=50);
            let anchors = random_boxes(&mut rng, n_anchors);
            let n_gts = rng.gen_range(0..=5);
            let gts = random_boxes(&mut rng, n_gts);
            let th = MatchThresholds::new(0.3, 0.5).unwrap();
            let m = match_anchors(&anchors, &gts, th);
            let (labels, matched) = oracle_match(&anchors, &gts, th);
            assert_eq!(m.labels, labels, "seed {seed}");
            assert_eq!(m.matched_gt, matched, "seed {seed}");
        }
    }

    proptest! {
        #[test]
        fn band_partition_exhaustive(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let anchors = random_boxes(&mut rng, 20);
            let gts = random_boxes(&mut rng, 3);
            let m = match_anchors(&anchors, &gts, MatchThresholds::step1());
            prop_assert_eq!(m.positives() + m.negatives() + m.ignored(), anchors.len());
        }

        #[test]
        fn threshold_monotonicity(seed in 0u64..200, dn in 0.0f64..0.05, dp in 0.0f64..0.05) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let anchors = random_boxes(&mut rng, 30);
            let gts = random_boxes(&mut rng, 3);
            let base = MatchThresholds::new(0.3, 0.6).unwrap();
            let m = match_anchors(&anchors, &gts, base);
            // raising theta_p never adds positives
            let higher_p = MatchThresholds::new(0.3, 0.6 + dp).unwrap();
            let mp = match_anchors(&anchors, &gts, higher_p);
            prop_assert!(mp.positives() <= m.positives());
            // lowering theta_n never adds negatives
            let lower_n = MatchThresholds::new(0.3 - dn, 0.6).unwrap();
            let mn = match_anchors(&anchors, &gts, lower_n);
            prop_assert!(mn.negatives() <= m.negatives());
        }
    }
}
