//! Axis-aligned box arithmetic: IoU, the center-offset/log-scale regression
//! transform and its inverse, clipping and flipping.
//!
//! Boxes use the corner convention `(x_min, y_min, x_max, y_max)` with
//! continuous pixel coordinates (no +1 convention). Degenerate zero-area
//! boxes are valid; negative extents are not.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Real;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("box has negative extent: ({x_min}, {y_min}, {x_max}, {y_max})")]
    NegativeExtent {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },
    #[error("non-positive width/height where strictly positive extents are required")]
    NonPositiveExtent,
    #[error("non-finite coordinate")]
    NonFinite,
}

/// Axis-aligned rectangle in image coordinates, corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox<T> {
    pub x_min: T,
    pub y_min: T,
    pub x_max: T,
    pub y_max: T,
}

impl<T: Real> BBox<T> {
    /// Builds a box, rejecting negative extents and non-finite coordinates.
    pub fn new(x_min: T, y_min: T, x_max: T, y_max: T) -> Result<Self, GeometryError> {
        for v in [x_min, y_min, x_max, y_max] {
            if !v.is_finite() {
                return Err(GeometryError::NonFinite);
            }
        }
        if x_max < x_min || y_max < y_min {
            return Err(GeometryError::NegativeExtent {
                x_min: x_min.to_f64().unwrap_or(f64::NAN),
                y_min: y_min.to_f64().unwrap_or(f64::NAN),
                x_max: x_max.to_f64().unwrap_or(f64::NAN),
                y_max: y_max.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    /// Box from center point and width/height.
    pub fn from_center_size(cx: T, cy: T, w: T, h: T) -> Result<Self, GeometryError> {
        let half = T::of(0.5);
        Self::new(cx - half * w, cy - half * h, cx + half * w, cy + half * h)
    }

    /// Box from `(x, y, w, h)` corner-plus-size form (the WIDER annotation layout).
    pub fn from_xywh(x: T, y: T, w: T, h: T) -> Result<Self, GeometryError> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn width(&self) -> T {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> T {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn center(&self) -> (T, T) {
        let half = T::of(0.5);
        (
            half * (self.x_min + self.x_max),
            half * (self.y_min + self.y_max),
        )
    }

    /// √area, the anchor "scale" in the pyramid sense.
    pub fn scale(&self) -> T {
        self.area().sqrt()
    }

    /// Intersection-over-union. Total on valid boxes: returns 0 when the
    /// union has zero area (including two degenerate boxes).
    pub fn iou(&self, other: &Self) -> T {
        let zero = T::zero();
        let ix = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(zero);
        let iy = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(zero);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union > zero {
            inter / union
        } else {
            zero
        }
    }

    /// Clamps the box into `[0, width] × [0, height]`.
    pub fn clip(&self, width: T, height: T) -> Self {
        let zero = T::zero();
        let x_min = self.x_min.max(zero).min(width);
        let y_min = self.y_min.max(zero).min(height);
        let x_max = self.x_max.max(zero).min(width);
        let y_max = self.y_max.max(zero).min(height);
        Self { x_min, y_min, x_max, y_max }
    }

    /// Mirrors the box horizontally inside an image of the given width.
    pub fn flip_horizontal(&self, image_width: T) -> Self {
        Self {
            x_min: image_width - self.x_max,
            y_min: self.y_min,
            x_max: image_width - self.x_min,
            y_max: self.y_max,
        }
    }

    /// Translates by `(dx, dy)`.
    pub fn translate(&self, dx: T, dy: T) -> Self {
        Self {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    /// Scales all coordinates by a common factor.
    pub fn scale_coords(&self, factor: T) -> Self {
        Self {
            x_min: self.x_min * factor,
            y_min: self.y_min * factor,
            x_max: self.x_max * factor,
            y_max: self.y_max * factor,
        }
    }

    pub fn cast<U: Real>(&self) -> BBox<U> {
        BBox {
            x_min: U::of(self.x_min.to_f64().unwrap()),
            y_min: U::of(self.y_min.to_f64().unwrap()),
            x_max: U::of(self.x_max.to_f64().unwrap()),
            y_max: U::of(self.y_max.to_f64().unwrap()),
        }
    }
}

/// Regression offsets in the center-offset/log-scale parameterization,
/// unit variances.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta<T> {
    pub dx: T,
    pub dy: T,
    pub dw: T,
    pub dh: T,
}

impl<T: Real> BoxDelta<T> {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn as_array(&self) -> [T; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_array(a: [T; 4]) -> Self {
        Self { dx: a[0], dy: a[1], dw: a[2], dh: a[3] }
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

/// Encodes a ground-truth box against an anchor:
/// `dx=(gx-ax)/aw, dy=(gy-ay)/ah, dw=ln(gw/aw), dh=ln(gh/ah)`.
///
/// Both boxes must have strictly positive extents.
pub fn encode<T: Real>(gt: &BBox<T>, anchor: &BBox<T>) -> Result<BoxDelta<T>, GeometryError> {
    let (gw, gh) = (gt.width(), gt.height());
    let (aw, ah) = (anchor.width(), anchor.height());
    if gw <= T::zero() || gh <= T::zero() || aw <= T::zero() || ah <= T::zero() {
        return Err(GeometryError::NonPositiveExtent);
    }
    let (gx, gy) = gt.center();
    let (ax, ay) = anchor.center();
    Ok(BoxDelta {
        dx: (gx - ax) / aw,
        dy: (gy - ay) / ah,
        dw: (gw / aw).ln(),
        dh: (gh / ah).ln(),
    })
}

/// Exact algebraic inverse of [`encode`]; output in corner form.
pub fn decode<T: Real>(delta: &BoxDelta<T>, anchor: &BBox<T>) -> BBox<T> {
    let (aw, ah) = (anchor.width(), anchor.height());
    let (ax, ay) = anchor.center();
    let cx = ax + delta.dx * aw;
    let cy = ay + delta.dy * ah;
    let w = aw * delta.dw.exp();
    let h = ah * delta.dh.exp();
    let half = T::of(0.5);
    BBox {
        x_min: cx - half * w,
        y_min: cy - half * h,
        x_max: cx + half * w,
        y_max: cy + half * h,
    }
}
