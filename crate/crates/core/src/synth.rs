//! Synthetic ultrasound phantoms with exact ground truth.
//!
//! Heads are bright elliptical rings around a textured interior, abdomens are
//! lower-contrast ellipses with organ-like blobs inside, femurs are bright
//! capsules. Every plane gets multiplicative Rayleigh speckle. Pixel spacing
//! is chosen per image so that the true measurement falls in a requested
//! physical range.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_study, FemurScan, Manifest, PlaneScan, StudyRecord, MANIFEST};
use crate::error::{Error, Result};
use crate::femur::{femur_length, EndpointPair};
use crate::ga::{BiometricSet, AC_RANGE_CM, FL_RANGE_CM, HC_RANGE_CM};
use crate::geometry::{ellipse_mask, perimeter, EllipseParams};
use crate::image::{
    normalize_array, FemurAnnotation, Plane, Point, SegmentationMask, Spacing, Structure,
    UltrasoundImage,
};
use crate::morph::gaussian_blur;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub image_size: usize,
    /// Semi-major / semi-minor axis ranges of the head, px.
    pub head_a_px: (f64, f64),
    pub head_b_px: (f64, f64),
    pub abdomen_a_px: (f64, f64),
    pub abdomen_b_px: (f64, f64),
    pub femur_length_px: (f64, f64),
    pub femur_thickness_px: f64,
    /// Physical ranges the true measurements are drawn from, cm.
    pub hc_cm: (f64, f64),
    pub ac_cm: (f64, f64),
    pub fl_cm: (f64, f64),
    pub head_contrast: f32,
    pub abdomen_contrast: f32,
    pub femur_contrast: f32,
    /// Scale of the Rayleigh speckle term; 0 disables speckle.
    pub speckle: f32,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            image_size: 256,
            head_a_px: (82.0, 100.0),
            head_b_px: (64.0, 80.0),
            abdomen_a_px: (76.0, 96.0),
            abdomen_b_px: (66.0, 86.0),
            femur_length_px: (95.0, 135.0),
            femur_thickness_px: 7.0,
            hc_cm: (HC_RANGE_CM.0 + 0.5, HC_RANGE_CM.1 - 0.5),
            ac_cm: (AC_RANGE_CM.0 + 0.5, AC_RANGE_CM.1 - 0.5),
            fl_cm: (FL_RANGE_CM.0 + 0.1, FL_RANGE_CM.1 - 0.1),
            head_contrast: 0.9,
            abdomen_contrast: 0.45,
            femur_contrast: 0.95,
            speckle: 1.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("head_a_px", self.head_a_px),
            ("head_b_px", self.head_b_px),
            ("abdomen_a_px", self.abdomen_a_px),
            ("abdomen_b_px", self.abdomen_b_px),
            ("femur_length_px", self.femur_length_px),
            ("hc_cm", self.hc_cm),
            ("ac_cm", self.ac_cm),
            ("fl_cm", self.fl_cm),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo > 0.0 && hi >= lo) {
                return Err(Error::InvalidInput(format!("{name}: bad range ({lo}, {hi})")));
            }
        }
        if self.image_size < crate::image::MIN_SIDE || !(self.femur_thickness_px > 0.0) {
            return Err(Error::InvalidInput("image size or femur thickness too small".into()));
        }
        let half = self.image_size as f64 / 2.0;
        if self.head_a_px.1 >= half - 4.0 || self.abdomen_a_px.1 >= half - 4.0 {
            return Err(Error::InvalidInput("ellipse does not fit in the image".into()));
        }
        if self.femur_length_px.1 >= self.image_size as f64 - 16.0 {
            return Err(Error::InvalidInput("femur does not fit in the image".into()));
        }
        if !(self.abdomen_contrast < self.head_contrast) {
            return Err(Error::InvalidInput(
                "abdomen boundary contrast must be below head contrast".into(),
            ));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Rayleigh speckle with unit mean: `value * (0.5 + r)` where `E[r] = 0.5`.
fn apply_speckle(base: &Array2<f32>, strength: f32, rng: &mut impl Rng) -> Array2<f32> {
    const SIGMA: f64 = 0.5 / 1.253_314_137_315_500_3; // mean of Rayleigh(sigma) = sigma * sqrt(pi/2)
    let noise = Array2::from_shape_fn(base.dim(), |_| {
        let u: f64 = rng.gen_range(f64::EPSILON..1.0);
        (SIGMA * (-2.0 * u.ln()).sqrt()) as f32
    });
    // Slight correlation gives grains rather than salt.
    let noise = gaussian_blur(&noise, 0.6);
    let mut out = base.clone();
    out.zip_mut_with(&noise, |v, &r| *v *= 1.0 - strength + strength * (0.5 + r) / 1.0);
    out
}

fn finish(base: Array2<f32>, spec: &PhantomSpec, rng: &mut impl Rng) -> Array2<f32> {
    let speckled = apply_speckle(&base, spec.speckle, rng);
    normalize_array(&speckled).expect("phantom intensities are finite")
}

/// Signed distance, in pixels, from pixel centres to the ellipse boundary along
/// the radial direction (negative inside).
fn radial_offset(e: &EllipseParams, r: usize, c: usize) -> f64 {
    let (s, co) = e.rotation.sin_cos();
    let dx = c as f64 - e.center.col;
    let dy = r as f64 - e.center.row;
    let u = dx * co + dy * s;
    let v = -dx * s + dy * co;
    let rho = u.hypot(v);
    if rho == 0.0 {
        return -e.semi_minor;
    }
    let t = v.atan2(u);
    let boundary = 1.0
        / ((t.cos() / e.semi_major).powi(2) + (t.sin() / e.semi_minor).powi(2)).sqrt();
    rho - boundary
}

fn random_ellipse(
    spec: &PhantomSpec,
    a_range: (f64, f64),
    b_range: (f64, f64),
    rng: &mut impl Rng,
) -> EllipseParams {
    let n = spec.image_size as f64;
    let a = uniform(rng, a_range);
    let b = uniform(rng, b_range).min(a);
    let jitter = (n / 2.0 - a - 4.0).clamp(0.0, 12.0);
    let center = Point::new(
        n / 2.0 - 0.5 + uniform(rng, (-jitter, jitter)),
        n / 2.0 - 0.5 + uniform(rng, (-jitter, jitter)),
    );
    EllipseParams::new(center, a, b, uniform(rng, (0.0, PI)))
}

fn background(n: usize, rng: &mut impl Rng) -> Array2<f32> {
    let level = rng.gen_range(0.06f32..0.12);
    let slope = rng.gen_range(-0.04f32..0.04);
    Array2::from_shape_fn((n, n), |(r, _)| level + slope * r as f32 / n as f32)
}

/// Head plane: bright skull ring on the true ellipse around a textured interior.
pub fn gen_head(
    spec: &PhantomSpec,
    rng: &mut impl Rng,
) -> Result<(UltrasoundImage, SegmentationMask, EllipseParams)> {
    let n = spec.image_size;
    let truth = random_ellipse(spec, spec.head_a_px, spec.head_b_px, rng);
    let hc_mm = uniform(rng, spec.hc_cm) * 10.0;
    let spacing = Spacing::isotropic(hc_mm / perimeter(truth.semi_major, truth.semi_minor))?;
    let skull = spec.head_contrast;
    let interior = rng.gen_range(0.22f32..0.32);
    let half_width = rng.gen_range(2.0f64..3.5);
    let (s, c) = truth.rotation.sin_cos();
    let mut base = background(n, rng);
    for ((r, col), v) in base.indexed_iter_mut() {
        let off = radial_offset(&truth, r, col);
        if off <= 0.0 {
            *v = interior;
            // Midline echo along the major axis.
            let dx = col as f64 - truth.center.col;
            let dy = r as f64 - truth.center.row;
            let across = (-dx * s + dy * c).abs();
            if across < 1.5 {
                *v = 0.55;
            }
        }
        let ring = (-(off / half_width).powi(2)).exp() as f32;
        *v = v.max(skull * ring);
    }
    let pixels = finish(base, spec, rng);
    let mask = SegmentationMask::new(ellipse_mask((n, n), &truth), Structure::Head);
    let image = UltrasoundImage::new(pixels, spacing, Plane::Head, "")?;
    Ok((image, mask, truth))
}

/// Abdomen plane: faint boundary, organ-like blobs inside.
pub fn gen_abdomen(
    spec: &PhantomSpec,
    rng: &mut impl Rng,
) -> Result<(UltrasoundImage, SegmentationMask, EllipseParams)> {
    let n = spec.image_size;
    let truth = random_ellipse(spec, spec.abdomen_a_px, spec.abdomen_b_px, rng);
    let ac_mm = uniform(rng, spec.ac_cm) * 10.0;
    let spacing = Spacing::isotropic(ac_mm / perimeter(truth.semi_major, truth.semi_minor))?;
    let wall = spec.abdomen_contrast;
    let interior = rng.gen_range(0.24f32..0.34);
    let blobs: Vec<(f64, f64, f64, f32)> = (0..rng.gen_range(2..5))
        .map(|_| {
            let t = rng.gen_range(0.0..2.0 * PI);
            let rho = rng.gen_range(0.0..0.6);
            let p = truth.point_at(t);
            let row = truth.center.row + rho * (p.row - truth.center.row);
            let col = truth.center.col + rho * (p.col - truth.center.col);
            let radius = rng.gen_range(6.0..18.0);
            let level = if rng.gen_bool(0.5) { 0.05 } else { 0.5 };
            (row, col, radius, level)
        })
        .collect();
    let mut base = background(n, rng);
    for ((r, col), v) in base.indexed_iter_mut() {
        let off = radial_offset(&truth, r, col);
        if off <= 0.0 {
            *v = interior;
            for &(br, bc, radius, level) in &blobs {
                if (r as f64 - br).hypot(col as f64 - bc) < radius && off < -3.0 {
                    *v = level;
                }
            }
        }
        let ring = (-(off / 2.5).powi(2)).exp() as f32;
        *v = v.max(wall * ring);
    }
    let pixels = finish(base, spec, rng);
    let mask = SegmentationMask::new(ellipse_mask((n, n), &truth), Structure::Abdomen);
    let image = UltrasoundImage::new(pixels, spacing, Plane::Abdomen, "")?;
    Ok((image, mask, truth))
}

/// Femur plane: bright capsule between two exact endpoints.
pub fn gen_femur(spec: &PhantomSpec, rng: &mut impl Rng) -> Result<(UltrasoundImage, FemurAnnotation)> {
    let n = spec.image_size as f64;
    let length = uniform(rng, spec.femur_length_px);
    let angle = rng.gen_range(0.0..PI);
    let (s, c) = angle.sin_cos();
    let margin = 8.0;
    let half_extent_r = 0.5 * length * s.abs();
    let half_extent_c = 0.5 * length * c.abs();
    let center = Point::new(
        uniform(rng, (margin + half_extent_r, n - 1.0 - margin - half_extent_r)),
        uniform(rng, (margin + half_extent_c, n - 1.0 - margin - half_extent_c)),
    );
    let p1 = Point::new(center.row - 0.5 * length * s, center.col - 0.5 * length * c);
    let p2 = Point::new(center.row + 0.5 * length * s, center.col + 0.5 * length * c);
    let annotation = FemurAnnotation::new(p1, p2);

    let fl_mm = uniform(rng, spec.fl_cm) * 10.0;
    let spacing = Spacing::isotropic(fl_mm / length)?;
    let radius = spec.femur_thickness_px / 2.0;
    let tissue = rng.gen_range(0.15f32..0.25);
    let mut base = background(spec.image_size, rng);
    // A soft-tissue band around the bone, then the bone itself.
    for ((r, col), v) in base.indexed_iter_mut() {
        let d = segment_distance(Point::new(r as f64, col as f64), p1, p2);
        if d < 4.0 * radius + 10.0 {
            *v = v.max(tissue);
        }
        let edge = ((radius - d) / 1.0).clamp(-3.0, 3.0);
        let bone = (1.0 / (1.0 + (-2.0 * edge).exp())) as f32;
        *v = v.max(spec.femur_contrast * bone);
    }
    let pixels = finish(base, spec, rng);
    let image = UltrasoundImage::new(pixels, spacing, Plane::Femur, "")?;
    annotation.validate(image.dim())?;
    Ok((image, annotation))
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dr, dc) = (b.row - a.row, b.col - a.col);
    let len2 = dr * dr + dc * dc;
    let t = (((p.row - a.row) * dr + (p.col - a.col) * dc) / len2).clamp(0.0, 1.0);
    p.distance(&Point::new(a.row + t * dr, a.col + t * dc))
}

/// A complete study plus the generator's ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticStudy {
    pub record: StudyRecord,
    pub head_truth: EllipseParams,
    pub abdomen_truth: EllipseParams,
    pub femur_truth: FemurAnnotation,
}

impl SyntheticStudy {
    /// Biometrics of the generating shapes, analytic.
    pub fn analytic_biometrics(&self) -> BiometricSet {
        let head_mm = self.record.head.as_ref().expect("head").image.spacing.row_mm;
        let abd_mm = self.record.abdomen.as_ref().expect("abdomen").image.spacing.row_mm;
        let femur_spacing = self.record.femur.as_ref().expect("femur").image.spacing;
        let fl = femur_length(
            &EndpointPair::ordered(self.femur_truth.p1, self.femur_truth.p2),
            femur_spacing,
        )
        .expect("valid spacing");
        BiometricSet::complete(
            perimeter(self.head_truth.semi_major, self.head_truth.semi_minor) * head_mm / 10.0,
            2.0 * self.head_truth.semi_minor * head_mm / 10.0,
            perimeter(self.abdomen_truth.semi_major, self.abdomen_truth.semi_minor) * abd_mm / 10.0,
            fl,
        )
    }
}

pub fn study_id(index: usize) -> String {
    format!("study_{index:04}")
}

/// Deterministic generator for study `index` under `spec.seed`.
pub fn study_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

pub fn gen_study(spec: &PhantomSpec, index: usize) -> Result<SyntheticStudy> {
    spec.validate()?;
    let id = study_id(index);
    let mut rng = study_rng(spec.seed, index);
    let (mut head, head_mask, head_truth) = gen_head(spec, &mut rng)?;
    let (mut abdomen, abd_mask, abdomen_truth) = gen_abdomen(spec, &mut rng)?;
    let (mut femur, femur_truth) = gen_femur(spec, &mut rng)?;
    for img in [&mut head, &mut abdomen, &mut femur] {
        img.study_id = id.clone();
    }
    Ok(SyntheticStudy {
        record: StudyRecord {
            study_id: id,
            head: Some(PlaneScan {
                image: head,
                mask: Some(head_mask),
            }),
            abdomen: Some(PlaneScan {
                image: abdomen,
                mask: Some(abd_mask),
            }),
            femur: Some(FemurScan {
                image: femur,
                annotation: Some(femur_truth),
            }),
        },
        head_truth,
        abdomen_truth,
        femur_truth,
    })
}

/// Write `n_studies` phantoms in the dataset layout; returns the manifest path.
pub fn gen_dataset(spec: &PhantomSpec, n_studies: usize, out_dir: &Path) -> Result<PathBuf> {
    if n_studies == 0 {
        return Err(Error::InvalidInput("number of studies must be positive".into()));
    }
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = Manifest::default();
    for index in 0..n_studies {
        let study = gen_study(spec, index)?;
        write_study(out_dir, &study.record, &mut manifest)?;
    }
    let path = out_dir.join(MANIFEST);
    manifest.write(&path)?;
    Ok(path)
}
