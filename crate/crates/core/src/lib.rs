//! Non-neural machinery of a selective two-step (cascade) anchor-based face
//! detector: anchor pyramid generation, anchor matching, focal / smooth-L1
//! losses with analytic gradients, the two-step classification and regression
//! cascade, the inference pipeline (filter, refine, decode, NMS) and a
//! precision/recall evaluation suite.
//!
//! Core math is generic over the scalar type through [`Real`]; `f32` and
//! `f64` aliases for the main geometric types live at the crate root.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive};
use serde::{de::DeserializeOwned, Serialize};

pub mod anchors;
pub mod cascade;
pub mod config;
pub mod dataio;
pub mod evaluation;
pub mod experiment;
pub mod geometry;
pub mod inference;
pub mod losses;
pub mod matcher;
pub mod toy;

/// Scalar type the geometry and loss kernels are generic over.
pub trait Real:
    Float + FromPrimitive + Debug + Display + Default + Serialize + DeserializeOwned + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, for constants.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Real")
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub type BBox32 = geometry::BBox<f32>;
pub type BBox64 = geometry::BBox<f64>;
pub type BoxDelta32 = geometry::BoxDelta<f32>;
pub type BoxDelta64 = geometry::BoxDelta<f64>;
pub type Detection32 = inference::Detection<f32>;
pub type Detection64 = inference::Detection<f64>;
