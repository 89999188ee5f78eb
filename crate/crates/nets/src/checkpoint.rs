//! Versioned checkpoint files.
//!
//! Layout: the magic line, one line of JSON header, then the parameters as
//! little-endian `f32` in header order, followed by the Adam moments when the
//! header records an optimizer state.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::error::{NetError, Result};
use crate::params::{ParamInfo, ParamStore};
use crate::unet::{ModelKind, NetConfig, UNet};

pub const MAGIC: &str = "AGEUS-CKPT-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub cfg: AdamConfig,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub net: NetConfig,
    pub kind: ModelKind,
    /// Last completed epoch.
    pub epoch: usize,
    pub metric_name: String,
    pub metric_value: f64,
    /// Free-form echo of the training configuration.
    #[serde(default)]
    pub train: serde_json::Value,
    pub census: Vec<String>,
    pub tensors: Vec<ParamInfo>,
    #[serde(default)]
    pub optimizer: Option<OptimizerState>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore<f32>,
    pub adam: Option<Adam<f32>>,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> NetError {
    NetError::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> NetError + '_ {
    move |source| NetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl Checkpoint {
    /// Snapshot of `model`, optionally with its optimizer.
    pub fn capture(
        model: &UNet<f32>,
        adam: Option<&Adam<f32>>,
        epoch: usize,
        metric_name: &str,
        metric_value: f64,
        train: serde_json::Value,
    ) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                net: model.cfg.clone(),
                kind: model.kind,
                epoch,
                metric_name: metric_name.to_string(),
                metric_value,
                train,
                census: model.census(),
                tensors: model.params.info.clone(),
                optimizer: adam.map(|a| OptimizerState { cfg: a.cfg, step: a.step }),
            },
            params: model.params.clone(),
            adam: adam.cloned(),
        }
    }

    /// Rebuild the network described by the header.
    pub fn model(&self) -> Result<UNet<f32>> {
        UNet::of_kind(&self.header.net, self.header.kind)?.with_params(self.params.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let tmp: PathBuf = path.with_extension("tmp");
        let header = serde_json::to_string(&self.header).map_err(|e| ckpt_err(path, e.to_string()))?;
        let mut buf = Vec::with_capacity(self.params.count() * 4 * 3 + header.len() + 32);
        buf.extend_from_slice(MAGIC.as_bytes());
        buf.push(b'\n');
        buf.extend_from_slice(header.as_bytes());
        buf.push(b'\n');
        let mut put = |vals: &[Vec<f32>]| {
            for v in vals.iter().flatten() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        };
        put(&self.params.values);
        if let (Some(a), Some(_)) = (&self.adam, &self.header.optimizer) {
            put(&a.m);
            put(&a.v);
        }
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(&buf).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(io_err(path))?;
        let mut r = BufReader::new(f);
        let mut line = String::new();
        r.read_line(&mut line).map_err(io_err(path))?;
        if line.trim_end() != MAGIC {
            return Err(ckpt_err(path, format!("missing {MAGIC} magic")));
        }
        line.clear();
        r.read_line(&mut line).map_err(io_err(path))?;
        let header: CheckpointHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| ckpt_err(path, format!("header: {e}")))?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(io_err(path))?;

        let total: usize = header.tensors.iter().map(ParamInfo::len).sum();
        let blocks = if header.optimizer.is_some() { 3 } else { 1 };
        if rest.len() != total * 4 * blocks {
            return Err(ckpt_err(
                path,
                format!("payload is {} bytes, header describes {}", rest.len(), total * 4 * blocks),
            ));
        }
        let mut floats = rest.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        let mut take = || -> Vec<Vec<f32>> {
            header
                .tensors
                .iter()
                .map(|t| floats.by_ref().take(t.len()).collect())
                .collect()
        };
        let params = ParamStore {
            info: header.tensors.clone(),
            values: take(),
        };
        let adam = header.optimizer.as_ref().map(|o| Adam {
            cfg: o.cfg,
            step: o.step,
            m: take(),
            v: take(),
        });
        let ckpt = Checkpoint { header, params, adam };
        // Reject files whose layout does not match the architecture they name.
        ckpt.model().map_err(|e| ckpt_err(path, e.to_string()))?;
        Ok(ckpt)
    }
}
