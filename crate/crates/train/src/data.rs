//! In-memory training samples on the model grid.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use biometry_core::dataset::{load_study, Manifest, StudyRecord, MANIFEST};
use biometry_core::femur::make_distance_map;
use biometry_core::image::{normalize_intensity, resize_to_model, ScaleFactors};
use biometry_core::{FemurAnnotation, Point, SegmentationMask, Structure, UltrasoundImage};
use biometry_nets::{Branch, SegTarget, Tensor};

use crate::error::Result;

#[derive(Debug, Clone)]
pub struct SegSample {
    pub study_id: String,
    pub input: Tensor<f32>,
    pub target: SegTarget,
}

#[derive(Debug, Clone)]
pub struct FemurSample {
    pub study_id: String,
    pub input: Tensor<f32>,
    /// Normalised distance map on the model grid, row-major.
    pub target: Vec<f64>,
}

pub fn branch_of(structure: Structure) -> Branch {
    match structure {
        Structure::Head => Branch::Head,
        Structure::Abdomen => Branch::Abdomen,
    }
}

/// Normalised, resampled single-channel input and the grid scale.
pub fn model_input(image: &UltrasoundImage, side: usize) -> Result<(Tensor<f32>, ScaleFactors)> {
    let norm = normalize_intensity(image)?;
    let r = resize_to_model(&norm, None, side)?;
    Ok((to_tensor(&r.image.pixels), r.scale))
}

fn to_tensor(pixels: &ndarray::Array2<f32>) -> Tensor<f32> {
    let (h, w) = pixels.dim();
    Tensor::from_vec(1, h, w, pixels.iter().copied().collect())
}

pub fn seg_sample(study_id: &str, image: &UltrasoundImage, mask: &SegmentationMask, side: usize) -> Result<SegSample> {
    let norm = normalize_intensity(image)?;
    let r = resize_to_model(&norm, Some(mask), side)?;
    let m = r.mask.expect("mask was resized");
    let target = SegTarget::new(side, side, m.pixels.iter().copied().collect(), branch_of(mask.structure))?;
    Ok(SegSample {
        study_id: study_id.to_string(),
        input: to_tensor(&r.image.pixels),
        target,
    })
}

/// Annotation expressed on the model grid.
pub fn annotation_on_model(a: &FemurAnnotation, scale: ScaleFactors, side: usize) -> FemurAnnotation {
    let hi = (side - 1) as f64;
    let map = |p: Point| {
        let q = scale.to_model(p);
        Point::new(q.row.clamp(0.0, hi), q.col.clamp(0.0, hi))
    };
    FemurAnnotation::new(map(a.p1), map(a.p2))
}

pub fn femur_sample(study_id: &str, image: &UltrasoundImage, a: &FemurAnnotation, side: usize) -> Result<FemurSample> {
    let (input, scale) = model_input(image, side)?;
    let map = make_distance_map(&annotation_on_model(a, scale, side), (side, side))?;
    Ok(FemurSample {
        study_id: study_id.to_string(),
        input,
        target: map.values.iter().map(|&v| v as f64).collect(),
    })
}

/// Every masked head and abdomen plane of `studies`.
pub fn seg_samples(studies: &[StudyRecord], side: usize) -> Result<Vec<SegSample>> {
    let mut out = Vec::new();
    for s in studies {
        for scan in [&s.head, &s.abdomen].into_iter().flatten() {
            if let Some(mask) = &scan.mask {
                out.push(seg_sample(&s.study_id, &scan.image, mask, side)?);
            }
        }
    }
    Ok(out)
}

/// Every annotated femur plane of `studies`.
pub fn femur_samples(studies: &[StudyRecord], side: usize) -> Result<Vec<FemurSample>> {
    let mut out = Vec::new();
    for s in studies {
        if let Some(f) = &s.femur {
            if let Some(a) = &f.annotation {
                out.push(femur_sample(&s.study_id, &f.image, a, side)?);
            }
        }
    }
    Ok(out)
}

/// Loads studies by id and remembers every id it was asked for.
#[derive(Debug)]
pub struct StudySource {
    root: PathBuf,
    manifest: Manifest,
    accessed: RefCell<BTreeSet<String>>,
}

impl StudySource {
    pub fn open(root: &Path) -> Result<Self> {
        Ok(StudySource {
            root: root.to_path_buf(),
            manifest: Manifest::read(&root.join(MANIFEST))?,
            accessed: RefCell::default(),
        })
    }

    pub fn study_ids(&self) -> Vec<String> {
        self.manifest.study_ids()
    }

    pub fn load(&self, ids: &[String]) -> Result<Vec<StudyRecord>> {
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            self.accessed.borrow_mut().insert(id.clone());
            if let Some(s) = load_study(&self.root, &self.manifest, id)? {
                out.push(s);
            }
        }
        Ok(out)
    }

    pub fn accessed(&self) -> BTreeSet<String> {
        self.accessed.borrow().clone()
    }
}
