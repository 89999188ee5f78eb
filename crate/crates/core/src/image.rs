//! Domain images, masks and annotations, plus the intensity and resolution
//! handling applied before anything reaches a network.

use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum accepted side length for any image.
pub const MIN_SIDE: usize = 8;

/// Default network input side length.
pub const MODEL_SIDE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Head,
    Abdomen,
    Femur,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Head, Plane::Abdomen, Plane::Femur];

    pub fn as_str(self) -> &'static str {
        match self {
            Plane::Head => "head",
            Plane::Abdomen => "abdomen",
            Plane::Femur => "femur",
        }
    }

    pub fn parse(s: &str) -> Option<Plane> {
        match s.trim() {
            "head" => Some(Plane::Head),
            "abdomen" => Some(Plane::Abdomen),
            "femur" => Some(Plane::Femur),
            _ => None,
        }
    }
}

impl fmt::Display for Plane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Anatomical structure carried by a segmentation mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    Head,
    Abdomen,
}

impl Structure {
    pub fn as_str(self) -> &'static str {
        match self {
            Structure::Head => "head",
            Structure::Abdomen => "abdomen",
        }
    }

    pub fn plane(self) -> Plane {
        match self {
            Structure::Head => Plane::Head,
            Structure::Abdomen => Plane::Abdomen,
        }
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Physical pixel size in millimetres per pixel along rows and columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub row_mm: f64,
    pub col_mm: f64,
}

impl Spacing {
    pub fn new(row_mm: f64, col_mm: f64) -> Result<Self> {
        if !(row_mm > 0.0 && col_mm > 0.0 && row_mm.is_finite() && col_mm.is_finite()) {
            return Err(Error::InvalidSpacing { row_mm, col_mm });
        }
        Ok(Spacing { row_mm, col_mm })
    }

    pub fn isotropic(mm: f64) -> Result<Self> {
        Self::new(mm, mm)
    }

    pub fn is_isotropic(&self) -> bool {
        (self.row_mm - self.col_mm).abs() <= 1e-12 * self.row_mm.max(self.col_mm)
    }

    /// Spacing of a resampled grid whose pixels are `scale` times larger.
    pub fn scaled(&self, scale: ScaleFactors) -> Spacing {
        Spacing {
            row_mm: self.row_mm * scale.row,
            col_mm: self.col_mm * scale.col,
        }
    }
}

/// Subpixel location with origin at the top-left pixel centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub row: f64,
    pub col: f64,
}

impl Point {
    pub fn new(row: f64, col: f64) -> Self {
        Point { row, col }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.row - other.row).hypot(self.col - other.col)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UltrasoundImage {
    pub pixels: Array2<f32>,
    pub spacing: Spacing,
    pub plane: Plane,
    pub study_id: String,
}

impl UltrasoundImage {
    pub fn new(
        pixels: Array2<f32>,
        spacing: Spacing,
        plane: Plane,
        study_id: impl Into<String>,
    ) -> Result<Self> {
        let (rows, cols) = pixels.dim();
        if rows < MIN_SIDE || cols < MIN_SIDE {
            return Err(Error::ImageTooSmall { rows, cols });
        }
        // Re-validate in case the caller built the struct literal directly.
        Spacing::new(spacing.row_mm, spacing.col_mm)?;
        Ok(UltrasoundImage {
            pixels,
            spacing,
            plane,
            study_id: study_id.into(),
        })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.pixels.dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMask {
    pub pixels: Array2<bool>,
    pub structure: Structure,
}

impl SegmentationMask {
    pub fn new(pixels: Array2<bool>, structure: Structure) -> Self {
        SegmentationMask { pixels, structure }
    }

    /// Binarise arbitrary intensities at half of their maximum.
    pub fn from_intensities(values: &Array2<f32>, structure: Structure) -> Self {
        let max = values.iter().cloned().fold(0.0f32, f32::max);
        let pixels = if max > 0.0 {
            let cut = 0.5 * max;
            values.mapv(|v| v >= cut)
        } else {
            Array2::from_elem(values.dim(), false)
        };
        SegmentationMask { pixels, structure }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub fn area(&self) -> usize {
        self.pixels.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.pixels.iter().any(|&v| v)
    }
}

/// The two femur endpoints marked by an annotator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FemurAnnotation {
    pub p1: Point,
    pub p2: Point,
}

impl FemurAnnotation {
    pub fn new(p1: Point, p2: Point) -> Self {
        FemurAnnotation { p1, p2 }
    }

    /// Checks both points lie inside a `rows x cols` grid and differ.
    pub fn validate(&self, (rows, cols): (usize, usize)) -> Result<()> {
        for p in [self.p1, self.p2] {
            let inside = p.row.is_finite()
                && p.col.is_finite()
                && p.row >= -0.5
                && p.col >= -0.5
                && p.row <= rows as f64 - 0.5
                && p.col <= cols as f64 - 0.5;
            if !inside {
                return Err(Error::InvalidAnnotation(format!(
                    "point ({}, {}) outside {rows}x{cols} image",
                    p.row, p.col
                )));
            }
        }
        if self.p1 == self.p2 {
            return Err(Error::InvalidAnnotation("endpoints coincide".into()));
        }
        Ok(())
    }
}

/// Min-max rescale of intensities into [0, 1].
///
/// A constant image maps to all zeros.
pub fn normalize_intensity(image: &UltrasoundImage) -> Result<UltrasoundImage> {
    let pixels = normalize_array(&image.pixels)?;
    Ok(UltrasoundImage {
        pixels,
        ..image.clone()
    })
}

pub(crate) fn normalize_array(values: &Array2<f32>) -> Result<Array2<f32>> {
    if let Some(((row, col), _)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinitePixel { row, col });
    }
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    if !(range > 0.0) {
        return Ok(Array2::zeros(values.dim()));
    }
    Ok(values.mapv(|v| ((v - lo) / range).clamp(0.0, 1.0)))
}

/// Ratio between original and model pixel size along each axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleFactors {
    pub row: f64,
    pub col: f64,
}

impl ScaleFactors {
    pub fn between(original: (usize, usize), model: (usize, usize)) -> Self {
        ScaleFactors {
            row: original.0 as f64 / model.0 as f64,
            col: original.1 as f64 / model.1 as f64,
        }
    }

    /// Model-grid coordinate to original-grid coordinate (pixel-centre aligned).
    pub fn to_original(&self, p: Point) -> Point {
        Point {
            row: (p.row + 0.5) * self.row - 0.5,
            col: (p.col + 0.5) * self.col - 0.5,
        }
    }

    pub fn to_model(&self, p: Point) -> Point {
        Point {
            row: (p.row + 0.5) / self.row - 0.5,
            col: (p.col + 0.5) / self.col - 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Resized {
    pub image: UltrasoundImage,
    pub mask: Option<SegmentationMask>,
    pub scale: ScaleFactors,
}

/// Resample an image (bilinear) and optional mask (nearest) to `target x target`.
pub fn resize_to_model(
    image: &UltrasoundImage,
    mask: Option<&SegmentationMask>,
    target: usize,
) -> Result<Resized> {
    if target < MIN_SIDE {
        return Err(Error::InvalidInput(format!(
            "model side must be >= {MIN_SIDE}, got {target}"
        )));
    }
    if let Some(m) = mask {
        if m.dim() != image.dim() {
            return Err(Error::ShapeMismatch {
                left: image.dim(),
                right: m.dim(),
            });
        }
    }
    let scale = ScaleFactors::between(image.dim(), (target, target));
    let pixels = resize_bilinear(&image.pixels, (target, target));
    let mask = mask.map(|m| SegmentationMask {
        pixels: resize_nearest(&m.pixels, (target, target)),
        structure: m.structure,
    });
    Ok(Resized {
        image: UltrasoundImage {
            pixels,
            spacing: image.spacing.scaled(scale),
            plane: image.plane,
            study_id: image.study_id.clone(),
        },
        mask,
        scale,
    })
}

fn source_coord(dst: usize, scale: f64, len: usize) -> f64 {
    ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64)
}

pub fn resize_bilinear(src: &Array2<f32>, (rows, cols): (usize, usize)) -> Array2<f32> {
    let (h, w) = src.dim();
    let sr = h as f64 / rows as f64;
    let sc = w as f64 / cols as f64;
    let col_taps: Vec<(usize, usize, f32)> = (0..cols)
        .map(|c| {
            let x = source_coord(c, sc, w);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            (x0, x1, (x - x0 as f64) as f32)
        })
        .collect();
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        let y = source_coord(r, sr, h);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = (y - y0 as f64) as f32;
        let (x0, x1, fx) = col_taps[c];
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

pub fn resize_nearest<T: Copy>(src: &Array2<T>, (rows, cols): (usize, usize)) -> Array2<T> {
    let (h, w) = src.dim();
    let sr = h as f64 / rows as f64;
    let sc = w as f64 / cols as f64;
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        let y = (((r as f64 + 0.5) * sr).floor() as usize).min(h - 1);
        let x = (((c as f64 + 0.5) * sc).floor() as usize).min(w - 1);
        src[[y, x]]
    })
}
