//! The four subcommands as library functions.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use biometry_core::dataset::{load_study, Manifest, MANIFEST};
use biometry_core::synth::{gen_dataset, PhantomSpec};
use biometry_nets::{build_femur_unet, build_shared_unet, Checkpoint, ModelKind};
use biometry_train::{
    femur_samples, finetune_seg, make_split, pretrain_seg, seg_samples, train_femur, RunOptions, SplitPlan,
    StudySource, TrainOutcome,
};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{CliError, Result};
use crate::pipeline::{checkpoint_side, estimate_study, Models, Source, StudyEstimate};
use crate::report::{write_report, ReportRow};

/// Name of the split record written next to a training run.
pub const SPLIT_FILE: &str = "split.json";

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| CliError::Config(format!("{what} is required")))
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `n` phantom studies under `out`; returns the manifest path.
pub fn cmd_synth(out: &Path, n: usize, seed: u64) -> Result<PathBuf> {
    if n == 0 {
        return Err(CliError::Config("--n must be positive".into()));
    }
    let spec = PhantomSpec {
        seed,
        ..PhantomSpec::default()
    };
    let manifest = gen_dataset(&spec, n, out)?;
    info!("wrote {n} studies to {}", out.display());
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Pretrain,
    Finetune,
    Femur,
}

/// Study-level split of `data` under the configured seed.
pub fn plan_split(source: &StudySource, cfg: &PipelineConfig) -> Result<SplitPlan> {
    Ok(make_split(&source.study_ids(), &cfg.train, cfg.seed)?)
}

/// A finished training command.
#[derive(Debug)]
pub struct TrainRun {
    pub outcome: TrainOutcome,
    pub plan: SplitPlan,
    /// Every study id loaded from disk.
    pub accessed: BTreeSet<String>,
}

/// Trains on the fitting part of the split of `cfg.data`; the test ids are
/// recorded in `split.json` and never loaded.
pub fn cmd_train(cfg: &PipelineConfig, mode: TrainMode, ckpt_in: Option<&Path>) -> Result<TrainRun> {
    let data = required(&cfg.data, "data")?;
    let out = required(&cfg.out, "out")?;
    let start = match (mode, ckpt_in) {
        (TrainMode::Finetune, None) => return Err(CliError::Config("finetune needs --ckpt-in".into())),
        (TrainMode::Finetune, Some(p)) => {
            if !p.exists() {
                return Err(CliError::Config(format!("{} does not exist", p.display())));
            }
            Some(Checkpoint::load(p)?)
        }
        _ => None,
    };
    cfg.validate()?;
    let source = StudySource::open(data)?;
    let plan = plan_split(&source, cfg)?;
    fs::create_dir_all(out).map_err(io(out))?;
    let split_path = out.join(SPLIT_FILE);
    let text = serde_json::to_string_pretty(&plan).expect("split serializes");
    fs::write(&split_path, text).map_err(io(&split_path))?;
    let train = source.load(&plan.train_ids)?;
    let val = source.load(&plan.val_ids)?;
    let side = cfg.train.model_side;
    let opts = RunOptions::new(out);
    let outcome = match mode {
        TrainMode::Pretrain => pretrain_seg(
            build_shared_unet(&cfg.net)?,
            &seg_samples(&train, side)?,
            &seg_samples(&val, side)?,
            &cfg.train,
            &opts,
        )?,
        TrainMode::Finetune => finetune_seg(
            start.as_ref().expect("checked above"),
            &seg_samples(&train, side)?,
            &seg_samples(&val, side)?,
            &cfg.train,
            &opts,
        )?,
        TrainMode::Femur => train_femur(
            build_femur_unet(&cfg.net)?,
            &femur_samples(&train, side)?,
            &femur_samples(&val, side)?,
            &cfg.train,
            &opts,
        )?,
    };
    info!(
        "best {} = {:.5} at epoch {}, saved to {}",
        outcome.best.header.metric_name,
        outcome.best_metric,
        outcome.best_epoch,
        outcome.best_path.display()
    );
    Ok(TrainRun {
        outcome,
        accessed: source.accessed(),
        plan,
    })
}

fn load_model(path: &Path, want: &[ModelKind], fallback_side: usize) -> Result<(biometry_nets::UNet<f32>, usize)> {
    let ckpt = Checkpoint::load(path)?;
    if !want.contains(&ckpt.header.kind) {
        return Err(CliError::Config(format!(
            "{}: unexpected model kind {:?}",
            path.display(),
            ckpt.header.kind
        )));
    }
    let side = checkpoint_side(&ckpt).unwrap_or(fallback_side);
    Ok((ckpt.model()?, side))
}

/// Networks named by the config's checkpoint paths.
pub fn load_models(cfg: &PipelineConfig) -> Result<Models> {
    let (seg, seg_side) = load_model(
        required(&cfg.seg_ckpt, "seg_ckpt")?,
        &[ModelKind::SharedSeg, ModelKind::SingleSeg],
        cfg.train.model_side,
    )?;
    let (femur, femur_side) = load_model(required(&cfg.femur_ckpt, "femur_ckpt")?, &[ModelKind::Femur], cfg.train.model_side)?;
    Ok(Models {
        seg,
        seg_side,
        femur,
        femur_side,
        post: cfg.post,
        locate: cfg.locate,
    })
}

/// Estimates every study of `cfg.data`, ordered by study id, and writes the
/// report to `cfg.out`. Unreadable or incomplete studies become error rows.
pub fn cmd_estimate(cfg: &PipelineConfig, oracle: bool) -> Result<Vec<ReportRow>> {
    let data = required(&cfg.data, "data")?;
    let out = required(&cfg.out, "out")?;
    cfg.validate()?;
    let models = if oracle { None } else { Some(load_models(cfg)?) };
    let source = match &models {
        Some(m) => Source::Learned(m),
        None => Source::Oracle,
    };
    let manifest = Manifest::read(&data.join(MANIFEST))?;
    let mut rows = Vec::new();
    for id in manifest.study_ids() {
        let row = match load_study(data, &manifest, &id) {
            Ok(Some(study)) => ReportRow::from(&estimate_study(&study, &source)),
            Ok(None) => ReportRow::from(&StudyEstimate::failed(&id, "no planes listed")),
            Err(e) => ReportRow::from(&StudyEstimate::failed(&id, e)),
        };
        if row.is_error() {
            warn!("{}: {}", row.study_id, row.warnings);
        }
        rows.push(row);
    }
    write_report(out, &rows)?;
    info!("{} studies, {} errors", rows.len(), rows.iter().filter(|r| r.is_error()).count());
    Ok(rows)
}
