//! Epoch loop shared by segmentation and femur training.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use biometry_nets::{
    femur_loss, seg_loss, softmax2, Adam, AdamConfig, Branch, Checkpoint, ModelKind, Tensor, UNet,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{FemurSample, SegSample};
use crate::error::{Result, TrainError};

pub const BEST: &str = "best.ckpt";
pub const LAST: &str = "last.ckpt";
pub const LOG: &str = "train_log.jsonl";

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub dice_head: Option<f64>,
    pub dice_abd: Option<f64>,
    pub femur_loss: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Continue from `last.ckpt` in `out_dir`.
    pub resume: bool,
    /// Stop after this epoch without a final checkpoint, as if interrupted.
    pub stop_after: Option<usize>,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        RunOptions {
            out_dir: out_dir.into(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub log: Vec<LogRecord>,
    /// Study ids of every sample the run read.
    pub accessed: BTreeSet<String>,
    pub epochs_run: usize,
    pub best_path: PathBuf,
    pub log_path: PathBuf,
}

/// Validation scores of a segmentation model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegScores {
    pub loss: f64,
    pub dice_head: Option<f64>,
    pub dice_abd: Option<f64>,
}

impl SegScores {
    /// Mean over the branches present.
    pub fn mean_dice(&self) -> f64 {
        let v: Vec<f64> = [self.dice_head, self.dice_abd].into_iter().flatten().collect();
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Decoder that serves `branch`; a single-decoder model serves both.
pub fn decoder_for(model: &UNet<f32>, branch: Branch) -> Result<usize> {
    match model.kind {
        ModelKind::SingleSeg => Ok(0),
        _ => Ok(model.branch_decoder(branch)?),
    }
}

/// Foreground where the foreground logit wins.
pub fn hard_mask(logits: &Tensor<f32>) -> Vec<bool> {
    softmax2(logits).1.into_iter().map(|p| p > 0.5).collect()
}

fn dice(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

pub fn score_seg(model: &UNet<f32>, samples: &[SegSample]) -> Result<SegScores> {
    if samples.is_empty() {
        return Err(TrainError::NoSamples("empty segmentation validation set".into()));
    }
    let mut loss = 0.0;
    let mut per = [Vec::new(), Vec::new()];
    for s in samples {
        let k = decoder_for(model, s.target.branch)?;
        let logits = model.forward(&s.input, k)?;
        loss += biometry_nets::seg_loss_parts(&logits, &s.target)?.total();
        per[s.target.branch.index()].push(dice(&hard_mask(&logits), &s.target.mask));
    }
    let mean = |v: &Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(SegScores {
        loss: loss / samples.len() as f64,
        dice_head: mean(&per[0]),
        dice_abd: mean(&per[1]),
    })
}

pub fn score_femur(model: &UNet<f32>, samples: &[FemurSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(TrainError::NoSamples("empty femur validation set".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let y = model.forward(&s.input, 0)?;
        total += femur_loss(&y, &s.target)?.0;
    }
    Ok(total / samples.len() as f64)
}

trait Objective {
    fn mode(&self) -> &'static str;
    fn metric_name(&self) -> &'static str;
    fn higher_is_better(&self) -> bool;
    fn len(&self) -> usize;
    fn study_ids(&self) -> BTreeSet<String>;
    fn step(&self, model: &UNet<f32>, i: usize, g: &mut biometry_nets::Grads<f32>) -> Result<f64>;
    /// Metric and the validation log line.
    fn validate(&self, model: &UNet<f32>, epoch: usize) -> Result<(f64, LogRecord)>;
    fn train_record(&self, epoch: usize, loss: f64) -> LogRecord;
}

struct SegObjective<'a> {
    train: &'a [SegSample],
    val: &'a [SegSample],
}

impl Objective for SegObjective<'_> {
    fn mode(&self) -> &'static str {
        "segmentation"
    }
    fn metric_name(&self) -> &'static str {
        "val_mean_dice"
    }
    fn higher_is_better(&self) -> bool {
        true
    }
    fn len(&self) -> usize {
        self.train.len()
    }
    fn study_ids(&self) -> BTreeSet<String> {
        self.train.iter().chain(self.val).map(|s| s.study_id.clone()).collect()
    }
    fn step(&self, model: &UNet<f32>, i: usize, g: &mut biometry_nets::Grads<f32>) -> Result<f64> {
        let s = &self.train[i];
        let k = decoder_for(model, s.target.branch)?;
        Ok(model.loss_and_grad(&s.input, k, g, |y| seg_loss(y, &s.target))?)
    }
    fn validate(&self, model: &UNet<f32>, epoch: usize) -> Result<(f64, LogRecord)> {
        let s = score_seg(model, self.val)?;
        Ok((
            s.mean_dice(),
            LogRecord {
                epoch,
                split: "val".into(),
                loss: s.loss,
                dice_head: s.dice_head,
                dice_abd: s.dice_abd,
                femur_loss: None,
            },
        ))
    }
    fn train_record(&self, epoch: usize, loss: f64) -> LogRecord {
        LogRecord {
            epoch,
            split: "train".into(),
            loss,
            dice_head: None,
            dice_abd: None,
            femur_loss: None,
        }
    }
}

struct FemurObjective<'a> {
    train: &'a [FemurSample],
    val: &'a [FemurSample],
}

impl Objective for FemurObjective<'_> {
    fn mode(&self) -> &'static str {
        "femur"
    }
    fn metric_name(&self) -> &'static str {
        "val_femur_loss"
    }
    fn higher_is_better(&self) -> bool {
        false
    }
    fn len(&self) -> usize {
        self.train.len()
    }
    fn study_ids(&self) -> BTreeSet<String> {
        self.train.iter().chain(self.val).map(|s| s.study_id.clone()).collect()
    }
    fn step(&self, model: &UNet<f32>, i: usize, g: &mut biometry_nets::Grads<f32>) -> Result<f64> {
        let s = &self.train[i];
        Ok(model.loss_and_grad(&s.input, 0, g, |y| femur_loss(y, &s.target))?)
    }
    fn validate(&self, model: &UNet<f32>, epoch: usize) -> Result<(f64, LogRecord)> {
        let l = score_femur(model, self.val)?;
        Ok((
            l,
            LogRecord {
                epoch,
                split: "val".into(),
                loss: l,
                dice_head: None,
                dice_abd: None,
                femur_loss: Some(l),
            },
        ))
    }
    fn train_record(&self, epoch: usize, loss: f64) -> LogRecord {
        LogRecord {
            epoch,
            split: "train".into(),
            loss,
            dice_head: None,
            dice_abd: None,
            femur_loss: Some(loss),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Sample order for `epoch`, derived from the seed alone so that a resumed
/// run replays the same batches.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| TrainError::Io {
                path: path.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
            })
        })
        .collect()
}

fn write_log(path: &Path, records: &[LogRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("log record serialises"));
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

fn append_log(path: &Path, r: &LogRecord) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    writeln!(f, "{}", serde_json::to_string(r).expect("log record serialises")).map_err(io_err(path))
}

fn fit(
    mut model: UNet<f32>,
    obj: &dyn Objective,
    epochs: usize,
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if obj.len() == 0 {
        return Err(TrainError::NoSamples(format!("no {} training samples", obj.mode())));
    }
    if epochs < cfg.val_every {
        return Err(TrainError::InvalidConfig(format!(
            "{epochs} epoch(s) never reach the first validation at epoch {}",
            cfg.val_every
        )));
    }
    fs::create_dir_all(&opts.out_dir).map_err(io_err(&opts.out_dir))?;
    let best_path = opts.out_dir.join(BEST);
    let last_path = opts.out_dir.join(LAST);
    let log_path = opts.out_dir.join(LOG);
    let echo = serde_json::json!({ "mode": obj.mode(), "epochs": epochs, "config": cfg });

    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(adam_cfg, &model.params);
    let mut start = 1;
    let mut best: Option<(f64, usize)> = None;
    let mut log = Vec::new();
    if opts.resume {
        if !last_path.exists() {
            return Err(TrainError::NothingToResume(opts.out_dir.clone()));
        }
        let last = Checkpoint::load(&last_path)?;
        model = last.model()?;
        adam = last
            .adam
            .clone()
            .ok_or_else(|| TrainError::NothingToResume(opts.out_dir.clone()))?;
        start = last.header.epoch + 1;
        if best_path.exists() {
            let b = Checkpoint::load(&best_path)?;
            if b.header.epoch <= last.header.epoch {
                best = Some((b.header.metric_value, b.header.epoch));
            }
        }
        log = if log_path.exists() { read_log(&log_path)? } else { Vec::new() };
        log.retain(|r| r.epoch <= last.header.epoch);
        log::info!("resuming {} at epoch {start}", obj.mode());
    }
    write_log(&log_path, &log)?;

    let better = |new: f64, old: f64| {
        if obj.higher_is_better() {
            new > old
        } else {
            new < old
        }
    };
    let mut epochs_run = start - 1;
    let mut grads = model.params.zeros_like();
    for epoch in start..=epochs {
        let t0 = Instant::now();
        let order = epoch_order(cfg.seed, epoch, obj.len());
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.zero();
            for &i in batch {
                total += obj.step(&model, i, &mut grads)?;
            }
            grads.scale(1.0 / batch.len() as f32);
            adam.update(&mut model.params, &grads);
        }
        let train_loss = total / obj.len() as f64;
        let rec = obj.train_record(epoch, train_loss);
        append_log(&log_path, &rec)?;
        log.push(rec);

        if epoch % cfg.val_every == 0 {
            let (metric, rec) = obj.validate(&model, epoch)?;
            append_log(&log_path, &rec)?;
            log.push(rec);
            if best.is_none_or(|(m, _)| better(metric, m)) {
                best = Some((metric, epoch));
                Checkpoint::capture(&model, None, epoch, obj.metric_name(), metric, echo.clone()).save(&best_path)?;
            }
            log::info!(
                "{} epoch {epoch}/{epochs}: train loss {train_loss:.5}, {} {metric:.5} ({:.1}s)",
                obj.mode(),
                obj.metric_name(),
                t0.elapsed().as_secs_f64()
            );
        } else {
            log::info!(
                "{} epoch {epoch}/{epochs}: train loss {train_loss:.5} ({:.1}s)",
                obj.mode(),
                t0.elapsed().as_secs_f64()
            );
        }
        epochs_run = epoch;
        if epoch % cfg.checkpoint_every == 0 || epoch == epochs {
            Checkpoint::capture(&model, Some(&adam), epoch, obj.metric_name(), train_loss, echo.clone())
                .save(&last_path)?;
        }
        if opts.stop_after == Some(epoch) {
            break;
        }
    }

    let (best_metric, best_epoch) = best.ok_or_else(|| TrainError::NoSamples("no validation was run".into()))?;
    Ok(TrainOutcome {
        best: Checkpoint::load(&best_path)?,
        best_epoch,
        best_metric,
        log,
        accessed: obj.study_ids(),
        epochs_run,
        best_path,
        log_path,
    })
}

fn warn_missing_branches(train: &[SegSample]) {
    for b in Branch::ALL {
        if !train.iter().any(|s| s.target.branch == b) {
            log::warn!("no {b} samples: only the other branch is trained");
        }
    }
}

/// Train a segmentation model from its current parameters for
/// `cfg.epochs_pretrain` epochs, keeping the best validation Dice.
pub fn pretrain_seg(
    model: UNet<f32>,
    train: &[SegSample],
    val: &[SegSample],
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    warn_missing_branches(train);
    fit(model, &SegObjective { train, val }, cfg.epochs_pretrain, cfg, opts)
}

/// Continue from `start` for `cfg.epochs_finetune` epochs with a fresh optimizer.
pub fn finetune_seg(
    start: &Checkpoint,
    train: &[SegSample],
    val: &[SegSample],
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    if start.header.kind == ModelKind::Femur {
        return Err(TrainError::InvalidConfig("fine-tuning needs a segmentation checkpoint".into()));
    }
    warn_missing_branches(train);
    fit(start.model()?, &SegObjective { train, val }, cfg.epochs_finetune, cfg, opts)
}

/// Train the distance-map regressor, keeping the lowest validation loss.
pub fn train_femur(
    model: UNet<f32>,
    train: &[FemurSample],
    val: &[FemurSample],
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    if model.kind != ModelKind::Femur {
        return Err(TrainError::InvalidConfig("femur training needs a femur model".into()));
    }
    if train.is_empty() {
        return Err(TrainError::NoSamples("no femur annotations".into()));
    }
    fit(model, &FemurObjective { train, val }, cfg.epochs_femur, cfg, opts)
}
