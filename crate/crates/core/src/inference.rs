//! Inference pipeline: first-step filter, anchor refinement, second-step
//! scoring/decoding, clipping, top-K, greedy NMS, final top-K.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchors::AnchorPyramid;
use crate::cascade::{
    build_selection_sets, sigmoid, stc_filter, str_refine, CascadeConfig, CascadeError, StepOutputs,
};
use crate::geometry::{decode, BBox};
use crate::toy::ToyError;
use crate::Real;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Cascade(#[from] CascadeError),
    #[error(transparent)]
    Predictor(#[from] ToyError),
    #[error("invalid inference config: {0}")]
    BadConfig(String),
}

/// Scored, localized output box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection<T> {
    pub bbox: BBox<T>,
    pub score: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub pre_nms_top_k: usize,
    pub nms_iou: f64,
    pub final_top_k: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { pre_nms_top_k: 2000, nms_iou: 0.5, final_top_k: 750 }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<(), InferenceError> {
        if self.pre_nms_top_k == 0 || self.final_top_k == 0 {
            return Err(InferenceError::BadConfig("top-k values must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(InferenceError::BadConfig(format!("nms_iou {} outside [0,1]", self.nms_iou)));
        }
        Ok(())
    }
}

/// Anything that produces per-anchor scores and deltas for both cascade
/// steps. The second step is called with the refined anchors.
pub trait AnchorPredictor<T: Real> {
    fn first_step(&self, anchors: &[BBox<T>]) -> Result<StepOutputs<T>, ToyError>;
    fn second_step(&self, anchors: &[BBox<T>]) -> Result<StepOutputs<T>, ToyError>;
}

/// Sorts detection indices by descending score; ties keep input order.
fn score_order<T: Real>(dets: &[Detection<T>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap_or(std::cmp::Ordering::Equal));
    order
}

/// Greedy non-maximum suppression: repeatedly keep the highest-score
/// remaining detection and discard every remaining one with IoU strictly
/// above the threshold. Output sorted by descending score, ties by input
/// order.
pub fn nms<T: Real>(dets: &[Detection<T>], iou_threshold: f64) -> Vec<Detection<T>> {
    let threshold = T::of(iou_threshold);
    let order = score_order(dets);
    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(dets[i]);
        for &j in &order[rank + 1..] {
            if !suppressed[j] && dets[i].bbox.iou(&dets[j].bbox) > threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Full per-image pipeline: filter on first-step scores, refine anchors,
/// score and decode the survivors, clip, top-K, NMS, final top-K.
pub fn run_pipeline<T: Real, P: AnchorPredictor<T>>(
    pyramid: &AnchorPyramid<T>,
    predictor: &P,
    cascade: &CascadeConfig,
    config: &InferenceConfig,
    image_width: T,
    image_height: T,
) -> Result<Vec<Detection<T>>, InferenceError> {
    config.validate()?;
    cascade.validate()?;

    let (omega, psi) = build_selection_sets(pyramid, cascade)?;
    let first = predictor.first_step(&pyramid.boxes)?;
    let probs: Vec<T> = first.logits.iter().map(|&z| sigmoid(z)).collect();
    let phi = stc_filter(&probs, &omega, cascade.negative_threshold);
    let refined = str_refine(&first.deltas, &pyramid.boxes, &psi)?;
    let second = predictor.second_step(&refined)?;

    let mut dets: Vec<Detection<T>> = Vec::new();
    for i in 0..pyramid.len() {
        if !phi[i] {
            continue;
        }
        let bbox = decode(&second.deltas[i], &refined[i]).clip(image_width, image_height);
        dets.push(Detection { bbox, score: sigmoid(second.logits[i]) });
    }

    // pre-NMS top-K by second-step score
    let order = score_order(&dets);
    let mut top: Vec<Detection<T>> =
        order.iter().take(config.pre_nms_top_k).map(|&i| dets[i]).collect();
    top = nms(&top, config.nms_iou);
    top.truncate(config.final_top_k);
    Ok(top)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::{generate, LevelSpec, PyramidConfig};
    use crate::geometry::{encode, BoxDelta};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn d(x0: f64, y0: f64, x1: f64, y1: f64, score: f64) -> Detection<f64> {
        Detection { bbox: BBox::new(x0, y0, x1, y1).unwrap(), score }
    }

    #[test]
    fn nms_keeps_highest_of_identical_pair() {
        let dets = vec![d(0.0, 0.0, 2.0, 2.0, 0.8), d(0.0, 0.0, 2.0, 2.0, 0.9)];
        let out = nms(&dets, 0.5);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);
    }

    #[test]
    fn nms_keeps_disjoint_boxes() {
        let dets = vec![
            d(0.0, 0.0, 1.0, 1.0, 0.3),
            d(5.0, 5.0, 6.0, 6.0, 0.9),
            d(10.0, 0.0, 11.0, 1.0, 0.6),
        ];
        let out = nms(&dets, 0.5);
        assert_eq!(out.len(), 3);
        assert!(out[0].score >= out[1].score && out[1].score >= out[2].score);
    }

    /// Exhaustive O(n²) greedy reference, written independently.
    fn oracle_nms(dets: &[Detection<f64>], thr: f64) -> Vec<Detection<f64>> {
        let mut remaining: Vec<(usize, Detection<f64>)> = dets.iter().cloned().enumerate().collect();
        let mut kept = Vec::new();
        while !remaining.is_empty() {
            // highest score, lowest input index on ties
            let mut best = 0;
            for k in 1..remaining.len() {
                if remaining[k].1.score > remaining[best].1.score {
                    best = k;
                }
            }
            let (_, winner) = remaining.remove(best);
            kept.push(winner);
            remaining.retain(|(_, cand)| winner.bbox.iou(&cand.bbox) <= thr);
        }
        kept
    }

    fn random_dets(seed: u64, n: usize) -> Vec<Detection<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let x = rng.gen_range(0.0..80.0);
                let y = rng.gen_range(0.0..80.0);
                let w = rng.gen_range(2.0..30.0);
                let h = rng.gen_range(2.0..30.0);
                Detection {
                    bbox: BBox::new(x, y, x + w, y + h).unwrap(),
                    score: rng.gen_range(0.0..1.0),
                }
            })
            .collect()
    }

    #[test]
    fn nms_matches_brute_force_oracle() {
        for seed in 0..100u64 {
            let dets = random_dets(seed, 200);
            let ours = nms(&dets, 0.5);
            let oracle = oracle_nms(&dets, 0.5);
            assert_eq!(ours, oracle, "seed {seed}");
        }
    }

    #[test]
    fn nms_is_idempotent() {
        for seed in 0..20u64 {
            let dets = random_dets(seed, 100);
            let once = nms(&dets, 0.4);
            let twice = nms(&once, 0.4);
            assert_eq!(once, twice);
        }
    }

    // -- pipeline ---------------------------------------------------------

    fn pyramid() -> AnchorPyramid<f64> {
        generate(&PyramidConfig {
            input_size: 128.0,
            levels: vec![
                LevelSpec::with_default_anchors("P2", 8.0),
                LevelSpec::with_default_anchors("P3", 16.0),
                LevelSpec::with_default_anchors("P5", 32.0),
            ],
        })
        .unwrap()
    }

    fn cascade_cfg() -> CascadeConfig {
        CascadeConfig {
            stc_levels: vec!["P2".into(), "P3".into()],
            str_levels: vec!["P5".into()],
            negative_threshold: 0.99,
        }
    }

    /// Predictor with constant logits and zero deltas.
    struct Flat {
        logit: f64,
    }

    impl AnchorPredictor<f64> for Flat {
        fn first_step(&self, anchors: &[BBox<f64>]) -> Result<StepOutputs<f64>, ToyError> {
            Ok(StepOutputs {
                logits: vec![self.logit; anchors.len()],
                deltas: vec![BoxDelta::zero(); anchors.len()],
            })
        }
        fn second_step(&self, anchors: &[BBox<f64>]) -> Result<StepOutputs<f64>, ToyError> {
            self.first_step(anchors)
        }
    }

    /// Maps every anchor exactly onto its max-IoU ground truth with a
    /// confident score.
    struct Oracle {
        gts: Vec<BBox<f64>>,
    }

    impl AnchorPredictor<f64> for Oracle {
        fn first_step(&self, anchors: &[BBox<f64>]) -> Result<StepOutputs<f64>, ToyError> {
            let mut logits = Vec::new();
            let mut deltas = Vec::new();
            for anchor in anchors {
                let best = self
                    .gts
                    .iter()
                    .max_by(|a, b| anchor.iou(a).partial_cmp(&anchor.iou(b)).unwrap())
                    .unwrap();
                logits.push(20.0);
                deltas.push(encode(best, anchor).unwrap());
            }
            Ok(StepOutputs { logits, deltas })
        }
        fn second_step(&self, anchors: &[BBox<f64>]) -> Result<StepOutputs<f64>, ToyError> {
            self.first_step(anchors)
        }
    }

    #[test]
    fn pipeline_survives_hopeless_scores() {
        let pyramid = pyramid();
        let out = run_pipeline(
            &pyramid,
            &Flat { logit: -40.0 },
            &cascade_cfg(),
            &InferenceConfig::default(),
            128.0,
            128.0,
        )
        .unwrap();
        // STC-level anchors are filtered; survivors score ~0
        assert!(out.iter().all(|det| det.score < 1e-10));
    }

    #[test]
    fn pipeline_oracle_model_recovers_three_faces() {
        let pyramid = pyramid();
        let gts = vec![
            BBox::new(8.0, 8.0, 28.0, 33.0).unwrap(),
            BBox::new(60.0, 10.0, 90.0, 47.0).unwrap(),
            BBox::new(30.0, 70.0, 80.0, 120.0).unwrap(),
        ];
        let out = run_pipeline(
            &pyramid,
            &Oracle { gts: gts.clone() },
            &cascade_cfg(),
            &InferenceConfig::default(),
            128.0,
            128.0,
        )
        .unwrap();
        assert_eq!(out.len(), 3);
        for det in &out {
            let best = gts.iter().map(|g| det.bbox.iou(g)).fold(0.0f64, f64::max);
            assert!(best > 1.0 - 1e-9, "detection not on a gt: {best}");
        }
    }

    #[test]
    fn theta_one_and_empty_sets_reduce_to_one_step() {
        let pyramid = pyramid();
        let predictor = Flat { logit: 0.3 };
        let relaxed = CascadeConfig { negative_threshold: 1.0, ..cascade_cfg() };
        // identity deltas => refinement is a no-op, so selective and
        // one-step configs must agree
        let selective = run_pipeline(&pyramid, &predictor, &relaxed, &InferenceConfig::default(), 128.0, 128.0).unwrap();
        let one_step = run_pipeline(&pyramid, &predictor, &CascadeConfig::one_step(), &InferenceConfig::default(), 128.0, 128.0).unwrap();
        assert_eq!(selective, one_step);
    }

    #[test]
    fn output_bounded_and_sorted() {
        let pyramid = pyramid();
        let config = InferenceConfig { pre_nms_top_k: 50, nms_iou: 0.9, final_top_k: 10 };
        let out = run_pipeline(&pyramid, &Flat { logit: 2.0 }, &cascade_cfg(), &config, 128.0, 128.0).unwrap();
        assert!(out.len() <= 10);
        for w in out.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
    }

    /// Predictor with seeded random scores, for the θ monotonicity check.
    struct Noisy {
        seed: u64,
    }

    impl AnchorPredictor<f64> for Noisy {
        fn first_step(&self, anchors: &[BBox<f64>]) -> Result<StepOutputs<f64>, ToyError> {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            Ok(StepOutputs {
                logits: (0..anchors.len()).map(|_| rng.gen_range(-8.0..2.0)).collect(),
                deltas: vec![BoxDelta::zero(); anchors.len()],
            })
        }
        fn second_step(&self, anchors: &[BBox<f64>]) -> Result<StepOutputs<f64>, ToyError> {
            self.first_step(anchors)
        }
    }

    #[test]
    fn pipeline_monotone_in_theta_without_topk() {
        let pyramid = pyramid();
        let predictor = Noisy { seed: 5 };
        // top-k stages disabled via huge limits, NMS disabled via iou 1.0
        let config = InferenceConfig { pre_nms_top_k: usize::MAX, nms_iou: 1.0, final_top_k: usize::MAX };
        let mut prev: Option<Vec<Detection<f64>>> = None;
        for theta in [0.5, 0.9, 0.99, 1.0] {
            let cascade = CascadeConfig { negative_threshold: theta, ..cascade_cfg() };
            let out = run_pipeline(&pyramid, &predictor, &cascade, &config, 128.0, 128.0).unwrap();
            if let Some(prev) = &prev {
                for det in prev {
                    assert!(out.contains(det), "raising theta dropped a detection");
                }
            }
            prev = Some(out);
        }
    }
}
