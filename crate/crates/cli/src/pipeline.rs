//! Inference: segment, fit, locate, measure, estimate.

use biometry_core::dataset::StudyRecord;
use biometry_core::femur::{
    femur_length, locate_endpoints, postprocess_map, DistanceMap, EndpointPair, LocateConfig, PostprocessConfig,
};
use biometry_core::geometry::{abdomen_biometrics, head_biometrics};
use biometry_core::image::resize_bilinear;
use biometry_core::{estimate_ga, validate_biometrics, BiometricSet, SegmentationMask, Structure, UltrasoundImage};
use biometry_nets::{softmax2, Checkpoint, UNet};
use biometry_train::data::{branch_of, model_input};
use biometry_train::trainer::decoder_for;
use ndarray::Array2;

use crate::error::{CliError, Result};

/// Loaded networks and their input sides.
#[derive(Debug, Clone)]
pub struct Models {
    pub seg: UNet<f32>,
    pub seg_side: usize,
    pub femur: UNet<f32>,
    pub femur_side: usize,
    pub post: PostprocessConfig,
    pub locate: LocateConfig,
}

/// Input side recorded in a checkpoint's training echo.
pub fn checkpoint_side(ckpt: &Checkpoint) -> Option<usize> {
    ckpt.header.train["config"]["model_side"].as_u64().map(|v| v as usize)
}

/// Foreground probability on the model grid.
pub fn foreground_probability(model: &UNet<f32>, image: &UltrasoundImage, structure: Structure, side: usize) -> Result<Array2<f32>> {
    let (x, _) = model_input(image, side)?;
    let k = decoder_for(model, branch_of(structure))?;
    let logits = model.forward(&x, k)?;
    let p = softmax2(&logits).1;
    Ok(Array2::from_shape_vec((side, side), p.into_iter().map(|v| v as f32).collect()).expect("side x side"))
}

/// Mask at the image's own resolution: the model-grid probability is
/// resampled bilinearly and thresholded at one half.
pub fn segment(model: &UNet<f32>, image: &UltrasoundImage, structure: Structure, side: usize) -> Result<SegmentationMask> {
    let p = foreground_probability(model, image, structure, side)?;
    let up = resize_bilinear(&p, image.dim());
    Ok(SegmentationMask::new(up.mapv(|v| v > 0.5), structure))
}

/// Raw predicted distance map on the model grid, clamped to [0, 1].
pub fn predict_map(model: &UNet<f32>, image: &UltrasoundImage, side: usize) -> Result<(DistanceMap, biometry_core::image::ScaleFactors)> {
    let (x, scale) = model_input(image, side)?;
    let y = model.forward(&x, 0)?;
    let values = Array2::from_shape_vec((side, side), y.data).expect("side x side");
    Ok((DistanceMap::from_prediction(values)?, scale))
}

/// Endpoints in original pixel coordinates.
pub fn locate_femur(models: &Models, image: &UltrasoundImage) -> Result<EndpointPair> {
    let (map, scale) = predict_map(&models.femur, image, models.femur_side)?;
    let pair = locate_endpoints(&postprocess_map(&map, &models.post), &models.locate)?;
    Ok(EndpointPair::ordered(scale.to_original(pair.p1), scale.to_original(pair.p2)))
}

/// Outcome for one study: either measurements or the reason there are none.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyEstimate {
    pub study_id: String,
    pub biometrics: BiometricSet,
    pub ga_weeks: Option<f64>,
    pub warnings: Vec<String>,
    pub error: Option<String>,
}

impl StudyEstimate {
    pub fn failed(study_id: &str, error: impl ToString) -> Self {
        StudyEstimate {
            study_id: study_id.to_string(),
            biometrics: BiometricSet::default(),
            ga_weeks: None,
            warnings: Vec::new(),
            error: Some(error.to_string()),
        }
    }

    fn from_parts(study_id: &str, biometrics: BiometricSet, mut notes: Vec<String>) -> Self {
        let ga_weeks = estimate_ga(&biometrics).ok().map(|g| g.ga_weeks);
        notes.extend(validate_biometrics(&biometrics).iter().map(|w| w.to_string()));
        StudyEstimate {
            study_id: study_id.to_string(),
            biometrics,
            ga_weeks,
            warnings: notes,
            error: None,
        }
    }
}

/// Where masks and endpoints come from.
pub enum Source<'a> {
    Learned(&'a Models),
    /// Ground-truth masks and annotations, bypassing the networks.
    Oracle,
}

fn require<'a, T>(value: Option<&'a T>, what: &str) -> Result<&'a T> {
    value.ok_or_else(|| CliError::Study(format!("{what} missing")))
}

fn measure(study: &StudyRecord, source: &Source) -> Result<StudyEstimate> {
    let head = require(study.head.as_ref(), "head plane")?;
    let abdomen = require(study.abdomen.as_ref(), "abdomen plane")?;
    let femur = require(study.femur.as_ref(), "femur plane")?;
    let (head_mask, abd_mask, pair) = match source {
        Source::Oracle => {
            let a = require(femur.annotation.as_ref(), "femur annotation")?;
            (
                require(head.mask.as_ref(), "head mask")?.clone(),
                require(abdomen.mask.as_ref(), "abdomen mask")?.clone(),
                Ok(EndpointPair::ordered(a.p1, a.p2)),
            )
        }
        Source::Learned(m) => (
            segment(&m.seg, &head.image, Structure::Head, m.seg_side)?,
            segment(&m.seg, &abdomen.image, Structure::Abdomen, m.seg_side)?,
            locate_femur(m, &femur.image),
        ),
    };
    let mut notes = Vec::new();
    let mut b = BiometricSet::default();
    match head_biometrics(&head_mask, head.image.spacing) {
        Ok(h) => {
            b.hc_cm = Some(h.hc_cm);
            b.bpd_cm = Some(h.bpd_cm);
        }
        Err(e) => notes.push(format!("head: {e}")),
    }
    match abdomen_biometrics(&abd_mask, abdomen.image.spacing) {
        Ok(a) => b.ac_cm = Some(a.ac_cm),
        Err(e) => notes.push(format!("abdomen: {e}")),
    }
    match pair.and_then(|p| Ok(femur_length(&p, femur.image.spacing)?)) {
        Ok(fl) => b.fl_cm = Some(fl),
        Err(e) => notes.push(format!("femur: {e}")),
    }
    Ok(StudyEstimate::from_parts(&study.study_id, b, notes))
}

/// Never fails: problems become an error row.
pub fn estimate_study(study: &StudyRecord, source: &Source) -> StudyEstimate {
    measure(study, source).unwrap_or_else(|e| StudyEstimate::failed(&study.study_id, e))
}
