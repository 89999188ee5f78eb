//! Flat `key = value` configuration.

use std::fs;
use std::path::{Path, PathBuf};

use biometry_core::femur::{LocateConfig, PostprocessConfig};
use biometry_nets::NetConfig;
use biometry_train::TrainConfig;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
#[derive(Default)]
pub struct PipelineConfig {
    pub data: Option<PathBuf>,
    pub seg_ckpt: Option<PathBuf>,
    pub femur_ckpt: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub post: PostprocessConfig,
    pub locate: LocateConfig,
    pub seed: u64,
}


/// Every recognised key.
pub const KEYS: &[&str] = &[
    "data",
    "seg_ckpt",
    "femur_ckpt",
    "out",
    "seed",
    "base_width",
    "leaky_slope",
    "lr",
    "batch_size",
    "epochs_pretrain",
    "epochs_finetune",
    "epochs_femur",
    "val_fraction",
    "val_every",
    "train_fraction",
    "model_side",
    "checkpoint_every",
    "sigma",
    "percentile",
    "disk_radius",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse {value:?}")))
}

impl PipelineConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "data" => self.data = Some(value.into()),
            "seg_ckpt" => self.seg_ckpt = Some(value.into()),
            "femur_ckpt" => self.femur_ckpt = Some(value.into()),
            "out" => self.out = Some(value.into()),
            "seed" => {
                self.seed = num(key, value)?;
                self.train.seed = self.seed;
                self.net.seed = self.seed;
            }
            "base_width" => self.net.base_width = num(key, value)?,
            "leaky_slope" => self.net.leaky_slope = num(key, value)?,
            "lr" => self.train.lr = num(key, value)?,
            "batch_size" => self.train.batch_size = num(key, value)?,
            "epochs_pretrain" => self.train.epochs_pretrain = num(key, value)?,
            "epochs_finetune" => self.train.epochs_finetune = num(key, value)?,
            "epochs_femur" => self.train.epochs_femur = num(key, value)?,
            "val_fraction" => self.train.val_fraction = num(key, value)?,
            "val_every" => self.train.val_every = num(key, value)?,
            "train_fraction" => self.train.train_fraction = num(key, value)?,
            "model_side" => self.train.model_side = num(key, value)?,
            "checkpoint_every" => self.train.checkpoint_every = num(key, value)?,
            "sigma" => self.post.sigma = num(key, value)?,
            "percentile" => {
                self.post.percentile = num(key, value)?;
                self.locate.start_percentile = self.post.percentile;
            }
            "disk_radius" => {
                self.post.disk_radius = num(key, value)?;
                self.locate.disk_radius = self.post.disk_radius;
            }
            other => return Err(CliError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// `key=value` override as given on the command line.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("expected key=value, got {assignment:?}")))?;
        self.set(k, v)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            cfg.apply(line)
                .map_err(|e| CliError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        for p in [&self.data, &self.seg_ckpt, &self.femur_ckpt].into_iter().flatten() {
            if !p.exists() {
                return Err(CliError::Config(format!("{} does not exist", p.display())));
            }
        }
        if let Some(d) = &self.data {
            if !d.join(biometry_core::dataset::MANIFEST).is_file() {
                return Err(CliError::Config(format!("{} has no manifest", d.display())));
            }
        }
        if !(self.post.sigma >= 0.0) || !(self.post.percentile > 0.0 && self.post.percentile < 100.0) {
            return Err(CliError::Config("sigma must be >= 0 and percentile in (0, 100)".into()));
        }
        Ok(())
    }

    /// Text form readable by [`PipelineConfig::parse`].
    pub fn render(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut lines = Vec::new();
        for (k, v) in [
            ("data", path(&self.data)),
            ("seg_ckpt", path(&self.seg_ckpt)),
            ("femur_ckpt", path(&self.femur_ckpt)),
            ("out", path(&self.out)),
        ] {
            if let Some(v) = v {
                lines.push(format!("{k} = {v}"));
            }
        }
        let t = &self.train;
        for (k, v) in [
            ("seed", self.seed.to_string()),
            ("base_width", self.net.base_width.to_string()),
            ("leaky_slope", self.net.leaky_slope.to_string()),
            ("lr", t.lr.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("epochs_pretrain", t.epochs_pretrain.to_string()),
            ("epochs_finetune", t.epochs_finetune.to_string()),
            ("epochs_femur", t.epochs_femur.to_string()),
            ("val_fraction", t.val_fraction.to_string()),
            ("val_every", t.val_every.to_string()),
            ("train_fraction", t.train_fraction.to_string()),
            ("model_side", t.model_side.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("sigma", self.post.sigma.to_string()),
            ("percentile", self.post.percentile.to_string()),
            ("disk_radius", self.post.disk_radius.to_string()),
        ] {
            lines.push(format!("{k} = {v}"));
        }
        lines.join("\n") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_override() {
        let mut cfg = PipelineConfig::parse("# desk run\nbase_width = 8\nmodel_side=64\n\nseed = 3 # trailing\n").unwrap();
        assert_eq!(cfg.net.base_width, 8);
        assert_eq!(cfg.train.model_side, 64);
        assert_eq!((cfg.seed, cfg.train.seed), (3, 3));
        cfg.apply("model_side=128").unwrap();
        assert_eq!(cfg.train.model_side, 128);
    }

    #[test]
    fn unknown_keys_and_bad_values() {
        assert!(PipelineConfig::parse("colour = blue").is_err());
        assert!(PipelineConfig::parse("lr = fast").is_err());
        assert!(PipelineConfig::default().apply("lr").is_err());
    }

    #[test]
    fn render_round_trips() {
        let mut cfg = PipelineConfig::default();
        cfg.apply("data=/tmp/x").unwrap();
        cfg.apply("sigma=1.5").unwrap();
        assert_eq!(PipelineConfig::parse(&cfg.render()).unwrap(), cfg);
    }

    #[test]
    fn every_key_is_settable() {
        let values = ["p", "p", "p", "p", "1", "8", "0.02", "0.01", "4", "3", "3", "3", "0.2", "2", "0.7", "64", "5", "1.0", "12", "1"];
        let mut cfg = PipelineConfig::default();
        for (k, v) in KEYS.iter().zip(values) {
            cfg.set(k, v).unwrap();
        }
    }
}
