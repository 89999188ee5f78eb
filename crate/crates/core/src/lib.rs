//! Fetal biometry from ultrasound: image model, geometric measurement, femur
//! endpoint localisation, gestational age, evaluation metrics and synthetic
//! phantoms.

// `!(x > y)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod femur;
pub mod ga;
pub mod geometry;
pub mod image;
pub mod metrics;
pub mod morph;
pub mod synth;

pub use error::{Error, Result};
pub use ga::{estimate_ga, hadlock_ga, validate_biometrics, BiometricSet, GaEstimate, PlausibilityWarning};
pub use geometry::EllipseParams;
pub use image::{FemurAnnotation, Plane, Point, SegmentationMask, Spacing, Structure, UltrasoundImage};
