//! A minimal differentiable per-anchor predictor: synthetic anchor features,
//! a linear two-step model with a classifier shared across both steps, a
//! plain gradient-descent trainer, and a receptive-field calculator for
//! multi-branch rectangular-kernel blocks.
//!
//! Features stand in for backbone activations. Per anchor they carry an
//! overlap channel (best IoU over ground truths), the four encoded
//! regression-target channels, and pure-noise distractor channels. Noise is
//! deterministic per (seed, anchor index); the signal follows the anchor's
//! current geometry, so re-featurizing refined anchors yields easier
//! regression targets.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchors::AnchorPyramid;
use crate::cascade::{assemble_batch, str_refine, CascadeBatch, CascadeConfig, StepOutputs};
use crate::dataio::Scene;
use crate::geometry::{encode, BBox, BoxDelta};
use crate::losses::{total_loss, total_loss_with_grads, LossConfig, LossReport};
use crate::matcher::MatchThresholds;
use crate::Real;

#[derive(Debug, Error, PartialEq)]
pub enum ToyError {
    #[error("feature dimension must be at least 5, got {0}")]
    DimTooSmall(usize),
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("classifier prior must lie in (0, 1), got {0}")]
    InvalidPrior(f64),
    #[error("kernel with zero extent in branch {0}")]
    ZeroKernel(usize),
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
    #[error("cascade error: {0}")]
    Cascade(String),
}

impl From<crate::cascade::CascadeError> for ToyError {
    fn from(e: crate::cascade::CascadeError) -> Self {
        ToyError::Cascade(e.to_string())
    }
}

// --- features -----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureParams {
    pub dim: usize,
    /// Noise sigma on the overlap channel.
    pub cls_noise: f64,
    /// Base noise sigma on the regression-target channels.
    pub delta_noise: f64,
    /// Extra delta noise per unit of *squared* target magnitude: regression
    /// is locally easy near the reference box and rapidly harder away from
    /// it, which is what makes two-step refinement pay off. Noisy channel
    /// values saturate at twice the target clamp.
    pub delta_noise_growth: f64,
    /// Sigma of the pure-noise distractor channels.
    pub distractor_scale: f64,
    /// Gain applied to the regression-target channels after noising. Raising
    /// it toward unit channel variance conditions the linear regression
    /// problem (the model learns the inverse coefficient), which full-batch
    /// gradient descent needs to converge within a small epoch budget.
    pub delta_gain: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            dim: 16,
            cls_noise: 0.0,
            delta_noise: 0.0,
            delta_noise_growth: 0.0,
            distractor_scale: 1.0,
            delta_gain: 1.0,
        }
    }
}

/// Flat row-major `n × dim` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorFeatures<T> {
    pub dim: usize,
    pub data: Vec<T>,
}

impl<T: Real> AnchorFeatures<T> {
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn anchor_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut z = seed ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    z = (z ^ (z >> 32)).wrapping_mul(0xD6E8_FEB8_6659_FD93);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 32))
}

fn standard_normal(rng: &mut impl RngCore) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

const DELTA_CLAMP: f64 = 4.0;
/// Saturation bound on the regression-target feature channels. Keeps every
/// channel O(1) so the shared classifier's focal updates stay well scaled no
/// matter how far a background anchor sits from its nearest ground truth.
const FEATURE_CLAMP: f64 = 2.0;

/// Builds per-anchor features against the given (possibly refined) anchor
/// boxes. Channel 0 is the best IoU over ground truths, channels 1–4 the
/// encoded regression target toward the argmax ground truth, the rest
/// distractor noise. Deterministic per `(seed, anchor index)`.
pub fn featurize<T: Real>(
    gts: &[BBox<T>],
    anchors: &[BBox<T>],
    seed: u64,
    params: &FeatureParams,
) -> Result<AnchorFeatures<T>, ToyError> {
    if params.dim < 5 {
        return Err(ToyError::DimTooSmall(params.dim));
    }
    let dim = params.dim;
    let mut data = vec![T::zero(); anchors.len() * dim];
    for (i, anchor) in anchors.iter().enumerate() {
        fill_row(gts, anchor, anchor, i, seed, params, &mut data[i * dim..(i + 1) * dim]);
    }
    Ok(AnchorFeatures { dim, data })
}

/// Features for refined reference boxes. The overlap channel is computed at
/// the anchor's original location — appearance evidence does not move when
/// the reference box is regressed — while the regression-target channels
/// encode against the refined reference. Both slices are indexed by anchor.
pub fn featurize_refined<T: Real>(
    gts: &[BBox<T>],
    locations: &[BBox<T>],
    references: &[BBox<T>],
    seed: u64,
    params: &FeatureParams,
) -> Result<AnchorFeatures<T>, ToyError> {
    if params.dim < 5 {
        return Err(ToyError::DimTooSmall(params.dim));
    }
    let dim = params.dim;
    let mut data = vec![T::zero(); locations.len() * dim];
    for (i, (loc, reference)) in locations.iter().zip(references).enumerate() {
        fill_row(gts, loc, reference, i, seed, params, &mut data[i * dim..(i + 1) * dim]);
    }
    Ok(AnchorFeatures { dim, data })
}

fn fill_row<T: Real>(
    gts: &[BBox<T>],
    location: &BBox<T>,
    reference: &BBox<T>,
    index: usize,
    seed: u64,
    params: &FeatureParams,
    out: &mut [T],
) {
    let mut rng = anchor_rng(seed, index as u64);
    // fixed draw order keeps the noise independent of the signal values
    let mut noise = [0.0f64; 5];
    for n in noise.iter_mut() {
        *n = standard_normal(&mut rng);
    }

    let mut best_iou = 0.0f64;
    for gt in gts {
        best_iou = best_iou.max(location.iou(gt).to_f64().unwrap());
    }
    let mut best_ref_iou = 0.0f64;
    let mut best_gt: Option<&BBox<T>> = None;
    for gt in gts {
        let v = reference.iou(gt).to_f64().unwrap();
        if v > best_ref_iou {
            best_ref_iou = v;
            best_gt = Some(gt);
        }
    }
    let target = best_gt
        .and_then(|gt| encode(gt, reference).ok())
        .unwrap_or_else(BoxDelta::zero);

    out[0] = T::of(best_iou + params.cls_noise * noise[0]);
    for (c, raw) in target.as_array().iter().enumerate() {
        let d = raw.to_f64().unwrap().clamp(-DELTA_CLAMP, DELTA_CLAMP);
        let sigma = params.delta_noise * (1.0 + params.delta_noise_growth * d * d);
        let value = (params.delta_gain * (d + sigma * noise[c + 1]))
            .clamp(-FEATURE_CLAMP, FEATURE_CLAMP);
        out[c + 1] = T::of(value);
    }
    for slot in out.iter_mut().take(params.dim).skip(5) {
        *slot = T::of(params.distractor_scale * standard_normal(&mut rng));
    }
}

/// Recomputes the feature rows selected by `mask` against the given refined
/// reference boxes, leaving all other rows untouched. Noise is re-derived
/// from `(seed, anchor index)`, so a recomputed row whose reference box is
/// unchanged comes out identical.
pub fn refeaturize_rows<T: Real>(
    features: &mut AnchorFeatures<T>,
    gts: &[BBox<T>],
    locations: &[BBox<T>],
    references: &[BBox<T>],
    mask: &[bool],
    seed: u64,
    params: &FeatureParams,
) {
    let dim = features.dim;
    for (i, (loc, reference)) in locations.iter().zip(references).enumerate() {
        if mask[i] {
            fill_row(gts, loc, reference, i, seed, params, &mut features.data[i * dim..(i + 1) * dim]);
        }
    }
}

// --- linear two-step model ------------------------------------------------------

/// Linear per-anchor predictor. The classification weights are a single
/// shared parameter set used by both steps; each step has its own regression
/// weights. Weight vectors have length `dim + 1` (trailing bias).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel<T> {
    pub dim: usize,
    pub w_cls: Vec<T>,
    pub w_reg1: [Vec<T>; 4],
    pub w_reg2: [Vec<T>; 4],
}

/// Versioned on-disk wrapper for serialized models.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile<T> {
    pub format_version: u32,
    pub model: ToyModel<T>,
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

impl<T: Real> ToyModel<T> {
    pub fn zeros(dim: usize) -> Self {
        let w = vec![T::zero(); dim + 1];
        Self { dim, w_cls: w.clone(), w_reg1: std::array::from_fn(|_| w.clone()), w_reg2: std::array::from_fn(|_| w.clone()) }
    }

    fn dot(w: &[T], row: &[T]) -> T {
        let mut acc = T::zero();
        for (a, b) in w.iter().zip(row) {
            acc = acc + *a * *b;
        }
        acc + w[row.len()] // bias
    }

    pub fn class_logits(&self, features: &AnchorFeatures<T>) -> Vec<T> {
        (0..features.len()).map(|i| Self::dot(&self.w_cls, features.row(i))).collect()
    }

    fn reg_deltas(w: &[Vec<T>; 4], features: &AnchorFeatures<T>) -> Vec<BoxDelta<T>> {
        (0..features.len())
            .map(|i| {
                let row = features.row(i);
                BoxDelta::from_array(std::array::from_fn(|c| Self::dot(&w[c], row)))
            })
            .collect()
    }

    /// First-step outputs: shared classifier plus the step-1 regressor.
    pub fn first_step(&self, features: &AnchorFeatures<T>) -> StepOutputs<T> {
        StepOutputs { logits: self.class_logits(features), deltas: Self::reg_deltas(&self.w_reg1, features) }
    }

    /// Second-step outputs: the same shared classifier plus the step-2
    /// regressor.
    pub fn second_step(&self, features: &AnchorFeatures<T>) -> StepOutputs<T> {
        StepOutputs { logits: self.class_logits(features), deltas: Self::reg_deltas(&self.w_reg2, features) }
    }
}

// --- trainer ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Initial face prior: the shared classifier bias starts at
    /// `logit(cls_prior)` so the early background gradient over thousands of
    /// negatives does not swamp the few positives (standard
    /// prior-probability initialization for heavily imbalanced
    /// classification).
    pub cls_prior: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self { learning_rate: 0.02, epochs: 300, cls_prior: 0.01, seed: 0 }
    }
}

/// Everything the trainer needs besides the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSetup {
    pub cascade: CascadeConfig,
    pub loss: LossConfig,
    pub th1: MatchThresholds,
    pub th2: MatchThresholds,
    /// Feature noise for the first step (coarse features).
    pub features1: FeatureParams,
    /// Feature noise for the second step (finer features).
    pub features2: FeatureParams,
}

impl Default for TrainSetup {
    fn default() -> Self {
        Self {
            cascade: CascadeConfig::default(),
            loss: LossConfig::default(),
            th1: MatchThresholds::step1(),
            th2: MatchThresholds::step2(),
            features1: FeatureParams::default(),
            features2: FeatureParams::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult<T> {
    pub model: ToyModel<T>,
    /// Mean per-scene total loss after each epoch's gradient step was
    /// computed (i.e. the loss the step was taken on).
    pub loss_trace: Vec<f64>,
}

pub fn scene_feature_seed(global_seed: u64, scene_index: usize, step: u64) -> u64 {
    global_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((scene_index as u64) << 8)
        .wrapping_add(step)
}

/// One scene's frozen forward state: features for both steps and the
/// assembled batch.
pub struct SceneBatch<T> {
    pub features1: AnchorFeatures<T>,
    pub features2: AnchorFeatures<T>,
    pub batch: CascadeBatch<T>,
}

/// Runs the cascade forward for one scene and assembles the batch. Second-
/// step features are computed against the refined anchors.
pub fn forward_scene<T: Real>(
    model: &ToyModel<T>,
    scene: &Scene<T>,
    pyramid: &AnchorPyramid<T>,
    setup: &TrainSetup,
    seed1: u64,
    seed2: u64,
) -> Result<SceneBatch<T>, ToyError> {
    let gts = scene.gt_boxes();
    let features1 = featurize(&gts, &pyramid.boxes, seed1, &setup.features1)?;
    let first = model.first_step(&features1);
    let (_, psi) = crate::cascade::build_selection_sets(pyramid, &setup.cascade)?;
    let refined = str_refine(&first.deltas, &pyramid.boxes, &psi)?;
    let features2 = featurize_refined(&gts, &pyramid.boxes, &refined, seed2, &setup.features2)?;
    let second = model.second_step(&features2);
    let batch = assemble_batch(pyramid, &gts, &first, &second, &setup.cascade, setup.th1, setup.th2)?;
    Ok(SceneBatch { features1, features2, batch })
}

/// Gradients of the total loss w.r.t. the model weights, holding the batch
/// structure (selection sets, labels, targets, second-step features) fixed.
pub struct WeightGrads<T> {
    pub d_w_cls: Vec<T>,
    pub d_w_reg1: [Vec<T>; 4],
    pub d_w_reg2: [Vec<T>; 4],
}

impl<T: Real> WeightGrads<T> {
    fn zeros(dim: usize) -> Self {
        let w = vec![T::zero(); dim + 1];
        Self { d_w_cls: w.clone(), d_w_reg1: std::array::from_fn(|_| w.clone()), d_w_reg2: std::array::from_fn(|_| w.clone()) }
    }
}

fn accumulate_row<T: Real>(acc: &mut [T], row: &[T], scale: T) {
    for (a, r) in acc.iter_mut().zip(row) {
        *a = *a + scale * *r;
    }
    let bias = acc.len() - 1;
    acc[bias] = acc[bias] + scale;
}

/// Backpropagates the per-anchor loss gradients through the linear model.
pub fn weight_grads<T: Real>(
    scene: &SceneBatch<T>,
    loss_cfg: &LossConfig,
) -> Result<(LossReport<T>, WeightGrads<T>), ToyError> {
    let (report, grads) = total_loss_with_grads(&scene.batch, loss_cfg)?;
    let dim = scene.features1.dim;
    let mut out = WeightGrads::zeros(dim);
    for i in 0..scene.batch.len() {
        let row1 = scene.features1.row(i);
        let row2 = scene.features2.row(i);
        accumulate_row(&mut out.d_w_cls, row1, grads.d_p_logit[i]);
        accumulate_row(&mut out.d_w_cls, row2, grads.d_q_logit[i]);
        for c in 0..4 {
            accumulate_row(&mut out.d_w_reg1[c], row1, grads.d_x[i][c]);
            accumulate_row(&mut out.d_w_reg2[c], row2, grads.d_t[i][c]);
        }
    }
    Ok((report, out))
}

/// Re-evaluates the total loss for new weights against a frozen scene batch:
/// logits and deltas are recomputed from the model, everything else (labels,
/// selection sets, targets, features) stays as assembled. This is the
/// objective [`weight_grads`] differentiates.
pub fn frozen_scene_loss<T: Real>(
    model: &ToyModel<T>,
    scene: &SceneBatch<T>,
    loss_cfg: &LossConfig,
) -> Result<T, ToyError> {
    let first = model.first_step(&scene.features1);
    let second = model.second_step(&scene.features2);
    let mut batch = scene.batch.clone();
    batch.p_logits = first.logits;
    batch.x = first.deltas;
    batch.q_logits = second.logits;
    batch.t = second.deltas;
    Ok(total_loss(&batch, loss_cfg)?.total)
}

fn step<T: Real>(w: &mut [T], g: &[T], lr: T, scale: T) {
    for (wi, gi) in w.iter_mut().zip(g) {
        *wi = *wi - lr * scale * *gi;
    }
}

/// Plain full-batch gradient descent on the total cascade loss. The batch is
/// re-assembled every epoch (refined anchors move as the step-1 regressor
/// learns); within an epoch the assembly is treated as constant.
pub fn train<T: Real>(
    dataset: &[Scene<T>],
    pyramid: &AnchorPyramid<T>,
    setup: &TrainSetup,
    hyper: &TrainHyper,
) -> Result<TrainResult<T>, ToyError> {
    if dataset.is_empty() {
        return Err(ToyError::EmptyDataset);
    }
    if !(hyper.cls_prior > 0.0 && hyper.cls_prior < 1.0) {
        return Err(ToyError::InvalidPrior(hyper.cls_prior));
    }
    let dim = setup.features1.dim;
    let mut model = ToyModel::<T>::zeros(dim);
    model.w_cls[dim] = T::of((hyper.cls_prior / (1.0 - hyper.cls_prior)).ln());
    let mut loss_trace = Vec::with_capacity(hyper.epochs);
    let n_scenes = T::of(dataset.len() as f64);
    let lr = T::of(hyper.learning_rate);

    // Per-scene caches: step-1 features never change across epochs, and only
    // the Ψ rows of the step-2 features do (their anchors are the ones the
    // first-step regressor moves). Noise is keyed on (seed, anchor index), so
    // recomputing just those rows reproduces a full re-featurization exactly.
    let (_, psi) = crate::cascade::build_selection_sets(pyramid, &setup.cascade)?;
    struct SceneCache<T> {
        gts: Vec<BBox<T>>,
        seed2: u64,
        features1: AnchorFeatures<T>,
        features2: AnchorFeatures<T>,
    }
    let mut caches = Vec::with_capacity(dataset.len());
    for (idx, scene) in dataset.iter().enumerate() {
        let s1 = scene_feature_seed(hyper.seed, idx, 1);
        let s2 = scene_feature_seed(hyper.seed, idx, 2);
        let gts = scene.gt_boxes();
        let features1 = featurize(&gts, &pyramid.boxes, s1, &setup.features1)?;
        let features2 = featurize(&gts, &pyramid.boxes, s2, &setup.features2)?;
        caches.push(SceneCache { gts, seed2: s2, features1, features2 });
    }

    for epoch in 0..hyper.epochs {
        let mut epoch_loss = T::zero();
        let mut total = WeightGrads::<T>::zeros(dim);
        for cache in caches.iter_mut() {
            let first = model.first_step(&cache.features1);
            let refined = str_refine(&first.deltas, &pyramid.boxes, &psi)?;
            refeaturize_rows(
                &mut cache.features2,
                &cache.gts,
                &pyramid.boxes,
                &refined,
                &psi,
                cache.seed2,
                &setup.features2,
            );
            let second = model.second_step(&cache.features2);
            let batch = assemble_batch(
                pyramid,
                &cache.gts,
                &first,
                &second,
                &setup.cascade,
                setup.th1,
                setup.th2,
            )?;
            let forward = SceneBatch {
                features1: cache.features1.clone(),
                features2: cache.features2.clone(),
                batch,
            };
            let (report, grads) = weight_grads(&forward, &setup.loss)?;
            epoch_loss = epoch_loss + report.total;
            for c in 0..dim + 1 {
                total.d_w_cls[c] = total.d_w_cls[c] + grads.d_w_cls[c];
                for k in 0..4 {
                    total.d_w_reg1[k][c] = total.d_w_reg1[k][c] + grads.d_w_reg1[k][c];
                    total.d_w_reg2[k][c] = total.d_w_reg2[k][c] + grads.d_w_reg2[k][c];
                }
            }
        }
        let mean_loss = (epoch_loss / n_scenes).to_f64().unwrap();
        if !mean_loss.is_finite() {
            return Err(ToyError::Diverged { epoch });
        }
        loss_trace.push(mean_loss);

        let scale = T::one() / n_scenes;
        step(&mut model.w_cls, &total.d_w_cls, lr, scale);
        for k in 0..4 {
            step(&mut model.w_reg1[k], &total.d_w_reg1[k], lr, scale);
            step(&mut model.w_reg2[k], &total.d_w_reg2[k], lr, scale);
        }
    }

    Ok(TrainResult { model, loss_trace })
}

// --- receptive fields --------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

impl Kernel {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, stride: 1 }
    }
}

/// Multi-branch block shape: each branch is a chain of kernels; the optional
/// shortcut contributes the identity (1, 1) receptive field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfeSpec {
    pub branches: Vec<Vec<Kernel>>,
    pub include_shortcut: bool,
}

impl Default for RfeSpec {
    /// Four branches with 1×k / k×1 kernels (k = 3 and 5) wrapped in 1×1
    /// projections, plus the shortcut path.
    fn default() -> Self {
        let wrap = |k: Kernel| vec![Kernel::new(1, 1), k, Kernel::new(1, 1)];
        Self {
            branches: vec![
                wrap(Kernel::new(1, 3)),
                wrap(Kernel::new(3, 1)),
                wrap(Kernel::new(1, 5)),
                wrap(Kernel::new(5, 1)),
            ],
            include_shortcut: true,
        }
    }
}

/// Composed receptive-field extent per branch: the extent grows by
/// `(k - 1) × accumulated stride` per layer.
pub fn rfe_receptive_fields(spec: &RfeSpec) -> Result<Vec<(usize, usize)>, ToyError> {
    let mut out = Vec::new();
    for (bi, branch) in spec.branches.iter().enumerate() {
        let mut rf = (1usize, 1usize);
        let mut jump = 1usize;
        for kernel in branch {
            if kernel.height == 0 || kernel.width == 0 || kernel.stride == 0 {
                return Err(ToyError::ZeroKernel(bi));
            }
            rf.0 += (kernel.height - 1) * jump;
            rf.1 += (kernel.width - 1) * jump;
            jump *= kernel.stride;
        }
        out.push(rf);
    }
    if spec.include_shortcut {
        out.push((1, 1));
    }
    Ok(out)
}
