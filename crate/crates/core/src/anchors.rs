//! Six-level anchor pyramid generation and per-level population statistics.
//!
//! Each level tiles `A = |scales| × |aspect_ratios|` anchors on every cell of
//! a stride-`S` grid. Anchor shape convention: area = scale², height/width =
//! ratio, so √area is literally the configured scale. Anchors are not clipped
//! to the image at generation time.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;
use crate::Real;

#[derive(Debug, Error, PartialEq)]
pub enum AnchorError {
    #[error("input_size must be positive")]
    ZeroInputSize,
    #[error("pyramid has no levels")]
    NoLevels,
    #[error("level {0} has a non-positive stride")]
    BadStride(String),
    #[error("level {0} has a non-positive scale or ratio")]
    BadScale(String),
    #[error("level {0} has no scales or no aspect ratios")]
    EmptyScales(String),
    #[error("unknown level name: {0}")]
    UnknownLevel(String),
}

/// One pyramid level: a stride-`S` grid carrying anchors of the given scales
/// and aspect ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSpec {
    pub name: String,
    pub stride: f64,
    pub scales: Vec<f64>,
    pub aspect_ratios: Vec<f64>,
}

impl LevelSpec {
    /// Level with the default anchor design: scales `{2S, 2√2·S}`, ratio 1.25.
    pub fn with_default_anchors(name: &str, stride: f64) -> Self {
        Self {
            name: name.to_string(),
            stride,
            scales: vec![2.0 * stride, 2.0 * std::f64::consts::SQRT_2 * stride],
            aspect_ratios: vec![1.25],
        }
    }

    /// Anchors per grid cell.
    pub fn anchors_per_location(&self) -> usize {
        self.scales.len() * self.aspect_ratios.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidConfig {
    pub input_size: f64,
    pub levels: Vec<LevelSpec>,
}

impl Default for PyramidConfig {
    /// P2–P7 with strides 4–128 on a 1024×1024 input.
    fn default() -> Self {
        Self::with_input_size(1024.0)
    }
}

impl PyramidConfig {
    pub fn with_input_size(input_size: f64) -> Self {
        let levels = [("P2", 4.0), ("P3", 8.0), ("P4", 16.0), ("P5", 32.0), ("P6", 64.0), ("P7", 128.0)]
            .iter()
            .map(|(name, stride)| LevelSpec::with_default_anchors(name, *stride))
            .collect();
        Self { input_size, levels }
    }

    pub fn validate(&self) -> Result<(), AnchorError> {
        if self.input_size <= 0.0 {
            return Err(AnchorError::ZeroInputSize);
        }
        if self.levels.is_empty() {
            return Err(AnchorError::NoLevels);
        }
        for level in &self.levels {
            if level.stride <= 0.0 {
                return Err(AnchorError::BadStride(level.name.clone()));
            }
            if level.scales.is_empty() || level.aspect_ratios.is_empty() {
                return Err(AnchorError::EmptyScales(level.name.clone()));
            }
            if level.scales.iter().chain(&level.aspect_ratios).any(|&v| v <= 0.0) {
                return Err(AnchorError::BadScale(level.name.clone()));
            }
        }
        Ok(())
    }

    pub fn level_index(&self, name: &str) -> Result<usize, AnchorError> {
        self.levels
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| AnchorError::UnknownLevel(name.to_string()))
    }
}

/// Grid metadata carried alongside each generated anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorMeta {
    pub level: usize,
    pub row: usize,
    pub col: usize,
    /// Index into the scale×ratio cross product at this location.
    pub shape: usize,
}

/// Flat, level-major list of anchors with per-anchor grid metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorPyramid<T> {
    pub config: PyramidConfig,
    pub boxes: Vec<BBox<T>>,
    pub meta: Vec<AnchorMeta>,
    /// Start offset of each level's slice in `boxes`; last entry = total.
    pub level_offsets: Vec<usize>,
}

impl<T: Real> AnchorPyramid<T> {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn level_of(&self, anchor_index: usize) -> usize {
        self.meta[anchor_index].level
    }

    pub fn level_range(&self, level: usize) -> std::ops::Range<usize> {
        self.level_offsets[level]..self.level_offsets[level + 1]
    }

    pub fn level_count(&self, level: usize) -> usize {
        self.level_range(level).len()
    }
}

/// Generates the anchor pyramid. Cell centers sit at `((col+0.5)·S, (row+0.5)·S)`;
/// for scale `s` and ratio `r`, width = `s/√r` and height = `s·√r`. Ordering is
/// level-major, row-major, then scale-major/ratio-minor at each cell.
pub fn generate<T: Real>(config: &PyramidConfig) -> Result<AnchorPyramid<T>, AnchorError> {
    config.validate()?;
    let mut boxes = Vec::new();
    let mut meta = Vec::new();
    let mut level_offsets = vec![0usize];

    for (level_idx, level) in config.levels.iter().enumerate() {
        let cells = (config.input_size / level.stride).ceil() as usize;
        let cells = cells.max(1);
        for row in 0..cells {
            for col in 0..cells {
                let cx = (col as f64 + 0.5) * level.stride;
                let cy = (row as f64 + 0.5) * level.stride;
                let mut shape = 0;
                for &scale in &level.scales {
                    for &ratio in &level.aspect_ratios {
                        let w = scale / ratio.sqrt();
                        let h = scale * ratio.sqrt();
                        boxes.push(
                            BBox::from_center_size(T::of(cx), T::of(cy), T::of(w), T::of(h))
                                .expect("positive scale/ratio yields a valid box"),
                        );
                        meta.push(AnchorMeta { level: level_idx, row, col, shape });
                        shape += 1;
                    }
                }
            }
        }
        level_offsets.push(boxes.len());
    }

    Ok(AnchorPyramid { config: config.clone(), boxes, meta, level_offsets })
}

/// Fraction of the total anchor population per named group of levels.
///
/// `split` maps a group name to its member level names; every pyramid level
/// must appear in exactly one group.
pub fn level_population_report<T: Real>(
    pyramid: &AnchorPyramid<T>,
    split: &BTreeMap<String, Vec<String>>,
) -> Result<BTreeMap<String, f64>, AnchorError> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut covered = vec![false; pyramid.config.levels.len()];
    for (group, names) in split {
        let mut count = 0usize;
        for name in names {
            let idx = pyramid.config.level_index(name)?;
            covered[idx] = true;
            count += pyramid.level_count(idx);
        }
        counts.insert(group.clone(), count);
    }
    if let Some(missing) = covered.iter().position(|c| !c) {
        return Err(AnchorError::UnknownLevel(format!(
            "level {} not covered by split",
            pyramid.config.levels[missing].name
        )));
    }
    let total = pyramid.len() as f64;
    Ok(counts
        .into_iter()
        .map(|(group, count)| (group, count as f64 / total))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_scale_range_matches_pyramid_extremes() {
        let config = PyramidConfig::default();
        let low = &config.levels[0];
        assert_eq!(low.scales[0], 8.0);
        assert!((low.scales[1] - 11.313708498984761).abs() < 1e-9);
        let high = &config.levels[5];
        assert_eq!(high.scales[0], 256.0);
        assert!((high.scales[1] - 362.03867196751236).abs() < 1e-9);
    }

    #[test]
    fn default_counts_match_closed_form() {
        let pyramid = generate::<f64>(&PyramidConfig::default()).unwrap();
        let expected_locations = [256usize, 128, 64, 32, 16, 8];
        for (level, &cells) in expected_locations.iter().enumerate() {
            assert_eq!(pyramid.level_count(level), cells * cells * 2);
        }
        assert_eq!(pyramid.len(), 174_720);
        assert_eq!(pyramid.len(), 2 * 87_360);
    }

    #[test]
    fn single_centered_anchor() {
        let config = PyramidConfig {
            input_size: 64.0,
            levels: vec![LevelSpec {
                name: "P0".into(),
                stride: 64.0,
                scales: vec![32.0],
                aspect_ratios: vec![1.0],
            }],
        };
        let pyramid = generate::<f64>(&config).unwrap();
        assert_eq!(pyramid.len(), 1);
        let (cx, cy) = pyramid.boxes[0].center();
        assert_eq!((cx, cy), (32.0, 32.0));
        assert!((pyramid.boxes[0].width() - 32.0).abs() < 1e-12);
    }

    #[test]
    fn anchor_shape_invariants() {
        let pyramid = generate::<f64>(&PyramidConfig::with_input_size(256.0)).unwrap();
        for (bbox, meta) in pyramid.boxes.iter().zip(&pyramid.meta) {
            let level = &pyramid.config.levels[meta.level];
            let scale = bbox.scale();
            let nearest = level
                .scales
                .iter()
                .map(|&s| (scale - s).abs() / s)
                .fold(f64::INFINITY, f64::min);
            assert!(nearest < 1e-6, "scale {scale} off-grid");
            let ratio = bbox.height() / bbox.width();
            assert!((ratio - level.aspect_ratios[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let config = PyramidConfig::with_input_size(128.0);
        let a = generate::<f64>(&config).unwrap();
        let b = generate::<f64>(&config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn population_report_splits() {
        let pyramid = generate::<f64>(&PyramidConfig::default()).unwrap();

        let mut all = BTreeMap::new();
        all.insert("all".to_string(), vec!["P2".into(), "P3".into(), "P4".into(), "P5".into(), "P6".into(), "P7".into()]);
        let report = level_population_report(&pyramid, &all).unwrap();
        assert_eq!(report["all"], 1.0);

        let mut split = BTreeMap::new();
        split.insert("low".to_string(), vec!["P2".into(), "P3".into(), "P4".into()]);
        split.insert("high".to_string(), vec!["P5".into(), "P6".into(), "P7".into()]);
        let report = level_population_report(&pyramid, &split).unwrap();
        assert!((report["low"] - 86016.0 / 87360.0).abs() < 1e-12);
        assert!((report["high"] - 1344.0 / 87360.0).abs() < 1e-12);
        assert!((report["low"] + report["high"] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn population_report_rejects_uncovered_level() {
        let pyramid = generate::<f64>(&PyramidConfig::default()).unwrap();
        let mut split = BTreeMap::new();
        split.insert("low".to_string(), vec!["P2".into()]);
        assert!(level_population_report(&pyramid, &split).is_err());
        let mut bad = BTreeMap::new();
        bad.insert("g".to_string(), vec!["P9".into()]);
        assert!(matches!(
            level_population_report(&pyramid, &bad),
            Err(AnchorError::UnknownLevel(_))
        ));
    }

    #[test]
    fn equal_levels_split_evenly() {
        let config = PyramidConfig {
            input_size: 64.0,
            levels: vec![
                LevelSpec { name: "A".into(), stride: 8.0, scales: vec![16.0], aspect_ratios: vec![1.0] },
                LevelSpec { name: "B".into(), stride: 8.0, scales: vec![16.0], aspect_ratios: vec![1.0] },
            ],
        };
        let pyramid = generate::<f64>(&config).unwrap();
        let mut split = BTreeMap::new();
        split.insert("a".to_string(), vec!["A".into()]);
        split.insert("b".to_string(), vec!["B".into()]);
        let report = level_population_report(&pyramid, &split).unwrap();
        assert_eq!(report["a"], 0.5);
        assert_eq!(report["b"], 0.5);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut config = PyramidConfig::default();
        config.input_size = 0.0;
        assert_eq!(generate::<f64>(&config), Err(AnchorError::ZeroInputSize));
        let empty = PyramidConfig { input_size: 64.0, levels: vec![] };
        assert_eq!(generate::<f64>(&empty), Err(AnchorError::NoLevels));
    }
}
