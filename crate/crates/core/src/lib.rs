//! HER2 FISH grading engine.
//!
//! Nuclei are segmented as star-convex polygons, FISH signals are detected
//! per nucleus crop, every nucleus is graded twice (image classifier and
//! signal counts) and gradable nuclei are pooled into a slide-level HER2
//! amplification status. A seeded simulator supplies exact ground truth.
//!
//! Geometry, NMS, CAM and metrics are generic over the scalar type; the
//! aliases below fix the `f64` instantiation used by the pipeline.

pub mod classify;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod image;
pub mod num;
pub mod overlay;
pub mod pipeline;
pub mod report;
pub mod scoring;
pub mod segmentation;
pub mod signal;
pub mod simulator;
pub mod tensor;

pub use error::{Error, Result};

pub type Point = geometry::Point<f64>;
pub type BBox = geometry::BBox<f64>;
pub type StarPolygon = geometry::StarPolygon<f64>;
pub type SignalBox = signal::SignalBox<f64>;
pub type CamMap = classify::CamMap<f64>;
