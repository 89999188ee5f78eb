//! Dataset directory I/O.
//!
//! Layout:
//!
//! ```text
//! <root>/manifest.csv
//! <root>/<study_id>/{head,abdomen,femur}.png
//! <root>/<study_id>/{head,abdomen}_mask.png
//! ```
//!
//! The manifest header is
//! `study_id,plane,row_mm_per_px,col_mm_per_px,femur_p1_row,femur_p1_col,femur_p2_row,femur_p2_col`
//! with the femur columns left empty on non-femur rows.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{
    FemurAnnotation, Plane, Point, SegmentationMask, Spacing, Structure, UltrasoundImage,
};

pub const MANIFEST: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneScan {
    pub image: UltrasoundImage,
    pub mask: Option<SegmentationMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRecord {
    pub study_id: String,
    pub head: Option<PlaneScan>,
    pub abdomen: Option<PlaneScan>,
    pub femur: Option<FemurScan>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FemurScan {
    pub image: UltrasoundImage,
    pub annotation: Option<FemurAnnotation>,
}

impl StudyRecord {
    pub fn planes(&self) -> Vec<Plane> {
        let mut planes = Vec::new();
        if self.head.is_some() {
            planes.push(Plane::Head);
        }
        if self.abdomen.is_some() {
            planes.push(Plane::Abdomen);
        }
        if self.femur.is_some() {
            planes.push(Plane::Femur);
        }
        planes
    }

    pub fn scan(&self, structure: Structure) -> Option<&PlaneScan> {
        match structure {
            Structure::Head => self.head.as_ref(),
            Structure::Abdomen => self.abdomen.as_ref(),
        }
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub study_id: String,
    pub plane: Plane,
    pub row_mm_per_px: f64,
    pub col_mm_per_px: f64,
    pub femur_p1_row: Option<f64>,
    pub femur_p1_col: Option<f64>,
    pub femur_p2_row: Option<f64>,
    pub femur_p2_col: Option<f64>,
}

impl ManifestRow {
    pub fn new(study_id: &str, plane: Plane, spacing: Spacing) -> Self {
        ManifestRow {
            study_id: study_id.to_string(),
            plane,
            row_mm_per_px: spacing.row_mm,
            col_mm_per_px: spacing.col_mm,
            femur_p1_row: None,
            femur_p1_col: None,
            femur_p2_row: None,
            femur_p2_col: None,
        }
    }

    pub fn with_annotation(mut self, a: &FemurAnnotation) -> Self {
        self.femur_p1_row = Some(a.p1.row);
        self.femur_p1_col = Some(a.p1.col);
        self.femur_p2_row = Some(a.p2.row);
        self.femur_p2_col = Some(a.p2.col);
        self
    }

    pub fn spacing(&self) -> Result<Spacing> {
        let bad = |field: &str, v: f64| Error::Manifest {
            study: self.study_id.clone(),
            field: field.to_string(),
            reason: format!("spacing must be positive, got {v}"),
        };
        if !(self.row_mm_per_px > 0.0 && self.row_mm_per_px.is_finite()) {
            return Err(bad("row_mm_per_px", self.row_mm_per_px));
        }
        if !(self.col_mm_per_px > 0.0 && self.col_mm_per_px.is_finite()) {
            return Err(bad("col_mm_per_px", self.col_mm_per_px));
        }
        Spacing::new(self.row_mm_per_px, self.col_mm_per_px)
    }

    pub fn annotation(&self) -> Result<Option<FemurAnnotation>> {
        match (
            self.femur_p1_row,
            self.femur_p1_col,
            self.femur_p2_row,
            self.femur_p2_col,
        ) {
            (None, None, None, None) => Ok(None),
            (Some(r1), Some(c1), Some(r2), Some(c2)) => Ok(Some(FemurAnnotation::new(
                Point::new(r1, c1),
                Point::new(r2, c2),
            ))),
            _ => Err(Error::Manifest {
                study: self.study_id.clone(),
                field: "femur_p*".into(),
                reason: "partially filled femur annotation".into(),
            }),
        }
    }
}

/// Parsed manifest keyed by `(study_id, plane)`.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub rows: BTreeMap<(String, Plane), ManifestRow>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut rows = BTreeMap::new();
        for row in reader.deserialize() {
            let row: ManifestRow = row?;
            row.spacing()?;
            row.annotation()?;
            rows.insert((row.study_id.clone(), row.plane), row);
        }
        Ok(Manifest { rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        for row in self.rows.values() {
            writer.serialize(row)?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn insert(&mut self, row: ManifestRow) {
        self.rows.insert((row.study_id.clone(), row.plane), row);
    }

    pub fn get(&self, study_id: &str, plane: Plane) -> Option<&ManifestRow> {
        self.rows.get(&(study_id.to_string(), plane))
    }

    pub fn study_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.rows.keys().map(|(id, _)| id.clone()).collect();
        ids.dedup();
        ids
    }
}

pub fn image_path(root: &Path, study_id: &str, plane: Plane) -> PathBuf {
    root.join(study_id).join(format!("{}.png", plane.as_str()))
}

pub fn mask_path(root: &Path, study_id: &str, structure: Structure) -> PathBuf {
    root.join(study_id)
        .join(format!("{}_mask.png", structure.as_str()))
}

/// Study directory names under `root`, sorted.
pub fn list_study_ids(root: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().is_dir() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

/// Load every study under `root`; the first problem aborts the whole load.
pub fn load_study_dir(root: &Path) -> Result<Vec<StudyRecord>> {
    let manifest = Manifest::read(&root.join(MANIFEST))?;
    let mut studies = Vec::new();
    for id in list_study_ids(root)? {
        if let Some(study) = load_study(root, &manifest, &id)? {
            studies.push(study);
        }
    }
    Ok(studies)
}

/// Load one study directory. Returns `Ok(None)` when it holds no plane image.
pub fn load_study(root: &Path, manifest: &Manifest, study_id: &str) -> Result<Option<StudyRecord>> {
    let mut record = StudyRecord {
        study_id: study_id.to_string(),
        head: None,
        abdomen: None,
        femur: None,
    };
    for structure in [Structure::Head, Structure::Abdomen] {
        let plane = structure.plane();
        let img_path = image_path(root, study_id, plane);
        let m_path = mask_path(root, study_id, structure);
        if !img_path.exists() {
            if m_path.exists() {
                return Err(Error::InvalidInput(format!(
                    "{}: mask without its {plane} image",
                    m_path.display()
                )));
            }
            continue;
        }
        let image = load_plane_image(&img_path, manifest, study_id, plane)?;
        let mask = if m_path.exists() {
            let raw = read_gray(&m_path)?;
            let mask = SegmentationMask::from_intensities(&raw, structure);
            if mask.dim() != image.dim() {
                return Err(Error::ShapeMismatch {
                    left: image.dim(),
                    right: mask.dim(),
                });
            }
            Some(mask)
        } else {
            None
        };
        let scan = Some(PlaneScan { image, mask });
        match structure {
            Structure::Head => record.head = scan,
            Structure::Abdomen => record.abdomen = scan,
        }
    }
    let femur_path = image_path(root, study_id, Plane::Femur);
    if femur_path.exists() {
        let image = load_plane_image(&femur_path, manifest, study_id, Plane::Femur)?;
        let annotation = manifest
            .get(study_id, Plane::Femur)
            .map(ManifestRow::annotation)
            .transpose()?
            .flatten();
        if let Some(a) = &annotation {
            a.validate(image.dim())?;
        }
        record.femur = Some(FemurScan { image, annotation });
    }
    Ok(if record.planes().is_empty() {
        None
    } else {
        Some(record)
    })
}

fn load_plane_image(
    path: &Path,
    manifest: &Manifest,
    study_id: &str,
    plane: Plane,
) -> Result<UltrasoundImage> {
    let row = manifest
        .get(study_id, plane)
        .ok_or_else(|| Error::MissingManifestRow {
            path: path.to_path_buf(),
        })?;
    let spacing = row.spacing()?;
    let pixels = read_gray(path)?;
    UltrasoundImage::new(pixels, spacing, plane, study_id)
}

/// Read an 8- or 16-bit grayscale PNG as raw intensities.
pub fn read_gray(path: &Path) -> Result<Array2<f32>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let scale = match img.color() {
        image::ColorType::L16 | image::ColorType::La16 => 1.0,
        // into_luma16 widens 8-bit data by 257; undo it to keep 0..255 intensities.
        _ => 1.0 / 257.0,
    };
    let gray = img.into_luma16();
    let (w, h) = gray.dimensions();
    let data: Vec<f32> = gray.into_raw().into_iter().map(|v| v as f32 * scale).collect();
    Ok(Array2::from_shape_vec((h as usize, w as usize), data).expect("buffer matches dimensions"))
}

/// Write values in [0, 1] as a 16-bit PNG (`round(65535 * v)`).
pub fn write_gray16(path: &Path, values: &Array2<f32>) -> Result<()> {
    let (h, w) = values.dim();
    let data: Vec<u16> = values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, data).expect("buffer matches dimensions");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Write a binary mask as an 8-bit PNG with values {0, 255}.
pub fn write_mask(path: &Path, mask: &Array2<bool>) -> Result<()> {
    let (h, w) = mask.dim();
    let data: Vec<u8> = mask.iter().map(|&v| if v { 255 } else { 0 }).collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, data).expect("buffer matches dimensions");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Write a study's files and add its rows to `manifest`. Image intensities
/// are expected in [0, 1].
pub fn write_study(root: &Path, study: &StudyRecord, manifest: &mut Manifest) -> Result<()> {
    let dir = root.join(&study.study_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for structure in [Structure::Head, Structure::Abdomen] {
        if let Some(scan) = study.scan(structure) {
            let plane = structure.plane();
            write_gray16(&image_path(root, &study.study_id, plane), &scan.image.pixels)?;
            if let Some(mask) = &scan.mask {
                write_mask(&mask_path(root, &study.study_id, structure), &mask.pixels)?;
            }
            manifest.insert(ManifestRow::new(&study.study_id, plane, scan.image.spacing));
        }
    }
    if let Some(femur) = &study.femur {
        write_gray16(&image_path(root, &study.study_id, Plane::Femur), &femur.image.pixels)?;
        let mut row = ManifestRow::new(&study.study_id, Plane::Femur, femur.image.spacing);
        if let Some(a) = &femur.annotation {
            row = row.with_annotation(a);
        }
        manifest.insert(row);
    }
    Ok(())
}
