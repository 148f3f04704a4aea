//! Scene ingestion and generation: the WIDER-FACE annotation text format,
//! the JSON-lines scene interchange format, seeded synthetic scenes and
//! box-level geometric augmentation.
//!
//! JSON-lines scene schema (one object per line):
//! `{"image_id": str, "width": f, "height": f, "faces": [{"bbox": {"x_min":
//! f, "y_min": f, "x_max": f, "y_max": f}, "blur": i, "expression": i,
//! "illumination": i, "invalid": i, "occlusion": i, "pose": i}]}`.

use std::io::{BufRead, Write};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;
use crate::Real;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: expected face count, got {got:?}")]
    BadCount { line: usize, got: String },
    #[error("line {line}: malformed numeric field {field:?}")]
    BadField { line: usize, field: String },
    #[error("line {line}: face line has {got} fields, expected 10")]
    BadFieldCount { line: usize, got: usize },
    #[error("line {line}: box has negative extent (w={w}, h={h})")]
    NegativeBox { line: usize, w: f64, h: f64 },
    #[error("line {line}: unexpected end of stream, expected {expected}")]
    UnexpectedEof { line: usize, expected: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: invalid scene JSON: {source}")]
    BadJson { line: usize, source: serde_json::Error },
}

/// One annotated face: box plus the WIDER attribute flags, carried opaquely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Face<T> {
    pub bbox: BBox<T>,
    #[serde(default)]
    pub blur: i32,
    #[serde(default)]
    pub expression: i32,
    #[serde(default)]
    pub illumination: i32,
    #[serde(default)]
    pub invalid: i32,
    #[serde(default)]
    pub occlusion: i32,
    #[serde(default)]
    pub pose: i32,
}

impl<T: Real> Face<T> {
    pub fn plain(bbox: BBox<T>) -> Self {
        Self { bbox, blur: 0, expression: 0, illumination: 0, invalid: 0, occlusion: 0, pose: 0 }
    }

    pub fn is_valid(&self) -> bool {
        self.invalid == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene<T> {
    pub image_id: String,
    pub width: T,
    pub height: T,
    pub faces: Vec<Face<T>>,
}

impl<T: Real> Scene<T> {
    /// Boxes of non-invalid faces, the ground truth for matching and eval.
    pub fn gt_boxes(&self) -> Vec<BBox<T>> {
        self.faces.iter().filter(|f| f.is_valid()).map(|f| f.bbox).collect()
    }

    /// Boxes of invalid-flagged faces (evaluation ignore regions).
    pub fn ignore_boxes(&self) -> Vec<BBox<T>> {
        self.faces.iter().filter(|f| !f.is_valid()).map(|f| f.bbox).collect()
    }
}

// --- WIDER annotation format -------------------------------------------------

/// Parses the WIDER ground-truth text format: a filename line, a face-count
/// line, then one `x y w h blur expression illumination invalid occlusion
/// pose` line per face. A zero-count record tolerates the format's single
/// all-zeros dummy line.
///
/// The annotation file carries no image dimensions; scene width/height are
/// set to the smallest size covering all face boxes (minimum 1).
pub fn parse_wider<T: Real, R: BufRead>(reader: R) -> Result<Vec<Scene<T>>, DataError> {
    let mut scenes = Vec::new();
    let mut lines = reader.lines().enumerate();

    loop {
        let (idx, line) = match lines.next() {
            Some((idx, line)) => (idx, line?),
            None => break,
        };
        let line_no = idx + 1;
        let image_id = line.trim().to_string();
        if image_id.is_empty() {
            continue;
        }

        let (count_idx, count_line) = lines.next().ok_or(DataError::UnexpectedEof {
            line: line_no + 1,
            expected: "face count".into(),
        })?;
        let count_line = count_line?;
        let count: usize = count_line
            .trim()
            .parse()
            .map_err(|_| DataError::BadCount { line: count_idx + 1, got: count_line.trim().into() })?;

        let mut faces = Vec::with_capacity(count);
        if count == 0 {
            // dummy all-zeros line after a zero count
            let (dummy_idx, dummy) = lines.next().ok_or(DataError::UnexpectedEof {
                line: count_idx + 2,
                expected: "dummy face line after zero count".into(),
            })?;
            let dummy = dummy?;
            parse_face_line::<T>(&dummy, dummy_idx + 1)?;
        } else {
            for _ in 0..count {
                let (face_idx, face_line) = lines.next().ok_or(DataError::UnexpectedEof {
                    line: count_idx + 1 + count,
                    expected: format!("{count} face lines"),
                })?;
                let face_line = face_line?;
                faces.push(parse_face_line::<T>(&face_line, face_idx + 1)?);
            }
        }

        let (mut width, mut height) = (1.0f64, 1.0f64);
        for face in &faces {
            width = width.max(face.bbox.x_max.to_f64().unwrap_or(0.0).ceil());
            height = height.max(face.bbox.y_max.to_f64().unwrap_or(0.0).ceil());
        }
        scenes.push(Scene { image_id, width: T::of(width), height: T::of(height), faces });
    }

    Ok(scenes)
}

fn parse_face_line<T: Real>(line: &str, line_no: usize) -> Result<Face<T>, DataError> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 10 {
        return Err(DataError::BadFieldCount { line: line_no, got: fields.len() });
    }
    let num = |s: &str| -> Result<f64, DataError> {
        s.parse::<f64>().map_err(|_| DataError::BadField { line: line_no, field: s.to_string() })
    };
    let flag = |s: &str| -> Result<i32, DataError> {
        s.parse::<i32>().map_err(|_| DataError::BadField { line: line_no, field: s.to_string() })
    };
    let (x, y, w, h) = (num(fields[0])?, num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if w < 0.0 || h < 0.0 {
        return Err(DataError::NegativeBox { line: line_no, w, h });
    }
    let bbox = BBox::from_xywh(T::of(x), T::of(y), T::of(w), T::of(h))
        .map_err(|_| DataError::NegativeBox { line: line_no, w, h })?;
    Ok(Face {
        bbox,
        blur: flag(fields[4])?,
        expression: flag(fields[5])?,
        illumination: flag(fields[6])?,
        invalid: flag(fields[7])?,
        occlusion: flag(fields[8])?,
        pose: flag(fields[9])?,
    })
}

// --- JSON-lines scene interchange ---------------------------------------------

pub fn write_scenes<T: Real, W: Write>(scenes: &[Scene<T>], mut out: W) -> Result<(), DataError> {
    for scene in scenes {
        let line = serde_json::to_string(scene)
            .map_err(|source| DataError::BadJson { line: 0, source })?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_scenes<T: Real, R: BufRead>(reader: R) -> Result<Vec<Scene<T>>, DataError> {
    let mut scenes = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let scene = serde_json::from_str(&line)
            .map_err(|source| DataError::BadJson { line: idx + 1, source })?;
        scenes.push(scene);
    }
    Ok(scenes)
}

// --- synthetic scenes ----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub image_size: f64,
    pub faces_min: usize,
    pub faces_max: usize,
    /// √area range; log-uniform draw, capped so boxes fit the image.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Bulk aspect ratios are lognormal around this center.
    pub ratio_center: f64,
    pub ratio_log_std: f64,
    /// Fraction of faces drawn with extreme ratios (>2 or <0.5).
    pub extreme_ratio_fraction: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            image_size: 1024.0,
            faces_min: 1,
            faces_max: 4,
            scale_min: 8.0,
            scale_max: 362.0,
            ratio_center: 1.25,
            ratio_log_std: 0.15,
            extreme_ratio_fraction: 0.1,
        }
    }
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    // splitmix-style stream separation per scene
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

fn standard_normal(rng: &mut impl RngCore) -> f64 {
    // Box-Muller; two uniforms per draw keeps it dependency-free.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn sample_ratio(rng: &mut ChaCha8Rng, params: &SynthParams) -> f64 {
    if rng.gen_bool(params.extreme_ratio_fraction) {
        // heavy tail: uniformly tall (>2) or wide (<0.5)
        let magnitude = rng.gen_range(2.0..3.5);
        if rng.gen_bool(0.5) {
            magnitude
        } else {
            1.0 / magnitude
        }
    } else {
        let r = params.ratio_center * (standard_normal(rng) * params.ratio_log_std).exp();
        r.clamp(0.5, 2.0)
    }
}

/// Generates `n` seeded synthetic scenes whose faces span the pyramid scale
/// range with aspect ratios around the anchor design plus a heavy tail.
pub fn synth_scenes<T: Real>(n: usize, seed: u64, params: &SynthParams) -> Vec<Scene<T>> {
    (0..n)
        .map(|i| {
            let mut rng = scene_rng(seed, i as u64);
            let n_faces = rng.gen_range(params.faces_min..=params.faces_max);
            let size = params.image_size;
            let mut faces = Vec::with_capacity(n_faces);
            for _ in 0..n_faces {
                let cap = params.scale_max.min(0.9 * size);
                let log_s = rng.gen_range(params.scale_min.ln()..cap.ln());
                let scale = log_s.exp();
                let ratio = sample_ratio(&mut rng, params);
                let w = scale / ratio.sqrt();
                let h = scale * ratio.sqrt();
                // center placed so the box stays inside whenever it fits
                let cx = if w < size { rng.gen_range(0.5 * w..size - 0.5 * w) } else { 0.5 * size };
                let cy = if h < size { rng.gen_range(0.5 * h..size - 0.5 * h) } else { 0.5 * size };
                let bbox = BBox::from_center_size(T::of(cx), T::of(cy), T::of(w), T::of(h))
                    .expect("sampled face box is valid");
                faces.push(Face::plain(bbox));
            }
            Scene {
                image_id: format!("synth/{seed}/{i:05}"),
                width: T::of(size),
                height: T::of(size),
                faces,
            }
        })
        .collect()
}

// --- box-level geometric augmentation -------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub expand_min: f64,
    pub expand_max: f64,
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub flip_probability: f64,
    pub output_size: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            expand_min: 1.0,
            expand_max: 2.0,
            crop_scale_min: 0.5,
            crop_scale_max: 1.0,
            flip_probability: 0.5,
            output_size: 1024.0,
        }
    }
}

/// Sampled transform parameters; applying a plan is deterministic, so the
/// arithmetic can be checked against hand-computed fixtures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPlan {
    pub expand_factor: f64,
    /// Placement of the original image inside the expanded canvas.
    pub expand_dx: f64,
    pub expand_dy: f64,
    /// Square crop in expanded-canvas coordinates.
    pub patch_x: f64,
    pub patch_y: f64,
    pub patch_size: f64,
    pub flip: bool,
}

impl AugmentPlan {
    /// Identity up to rescaling: no expansion, full shorter-side crop at the
    /// origin, no flip.
    pub fn identity(width: f64, height: f64) -> Self {
        Self {
            expand_factor: 1.0,
            expand_dx: 0.0,
            expand_dy: 0.0,
            patch_x: 0.0,
            patch_y: 0.0,
            patch_size: width.min(height),
            flip: false,
        }
    }
}

/// Samples an augmentation plan: expansion factor and placement, the
/// two-candidate square crop (full shorter side vs a scaled shorter side,
/// one picked uniformly), and the flip coin.
pub fn sample_augment_plan(
    width: f64,
    height: f64,
    config: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> AugmentPlan {
    let expand_factor = rng.gen_range(config.expand_min..=config.expand_max);
    let canvas_w = width * expand_factor;
    let canvas_h = height * expand_factor;
    let expand_dx = rng.gen_range(0.0..=(canvas_w - width));
    let expand_dy = rng.gen_range(0.0..=(canvas_h - height));

    let shorter = canvas_w.min(canvas_h);
    let full_patch = shorter;
    let scaled_patch = rng.gen_range(config.crop_scale_min..=config.crop_scale_max) * shorter;
    let patch_size = if rng.gen_bool(0.5) { full_patch } else { scaled_patch };
    let patch_x = rng.gen_range(0.0..=(canvas_w - patch_size));
    let patch_y = rng.gen_range(0.0..=(canvas_h - patch_size));
    let flip = rng.gen_bool(config.flip_probability);

    AugmentPlan { expand_factor, expand_dx, expand_dy, patch_x, patch_y, patch_size, flip }
}

/// Applies a plan: translate into the expanded canvas, crop (faces whose
/// centers fall outside the patch are dropped; survivors are clipped to the
/// patch), optional horizontal flip, then rescale to `output_size`.
pub fn apply_augment_plan<T: Real>(
    scene: &Scene<T>,
    plan: &AugmentPlan,
    output_size: f64,
) -> Scene<T> {
    let rescale = T::of(output_size / plan.patch_size);
    let patch = T::of(plan.patch_size);
    let mut faces = Vec::new();
    for face in &scene.faces {
        let moved = face
            .bbox
            .translate(T::of(plan.expand_dx - plan.patch_x), T::of(plan.expand_dy - plan.patch_y));
        let (cx, cy) = moved.center();
        let inside = cx >= T::zero() && cx < patch && cy >= T::zero() && cy < patch;
        if !inside {
            continue;
        }
        let mut bbox = moved.clip(patch, patch);
        if plan.flip {
            bbox = bbox.flip_horizontal(patch);
        }
        faces.push(Face { bbox: bbox.scale_coords(rescale), ..face.clone() });
    }
    Scene {
        image_id: scene.image_id.clone(),
        width: T::of(output_size),
        height: T::of(output_size),
        faces,
    }
}

/// Seeded end-to-end augmentation.
pub fn augment<T: Real>(scene: &Scene<T>, config: &AugmentConfig, seed: u64) -> Scene<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = sample_augment_plan(
        scene.width.to_f64().unwrap(),
        scene.height.to_f64().unwrap(),
        config,
        &mut rng,
    );
    apply_augment_plan(scene, &plan, config.output_size)
}
