//! Per-study estimate CSV.

use std::path::Path;

use biometry_core::BiometricSet;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::pipeline::StudyEstimate;

pub const HEADER: [&str; 7] = ["study_id", "hc_cm", "bpd_cm", "ac_cm", "fl_cm", "ga_weeks", "warnings"];

/// Prefix marking a row whose study could not be processed.
pub const ERROR_PREFIX: &str = "error: ";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub study_id: String,
    pub hc_cm: Option<f64>,
    pub bpd_cm: Option<f64>,
    pub ac_cm: Option<f64>,
    pub fl_cm: Option<f64>,
    pub ga_weeks: Option<f64>,
    pub warnings: String,
}

impl ReportRow {
    pub fn is_error(&self) -> bool {
        self.warnings.starts_with(ERROR_PREFIX)
    }

    pub fn biometrics(&self) -> BiometricSet {
        BiometricSet {
            hc_cm: self.hc_cm,
            bpd_cm: self.bpd_cm,
            ac_cm: self.ac_cm,
            fl_cm: self.fl_cm,
        }
    }
}

impl From<&StudyEstimate> for ReportRow {
    fn from(e: &StudyEstimate) -> Self {
        let warnings = match &e.error {
            Some(err) => format!("{ERROR_PREFIX}{err}"),
            None => e.warnings.join("; "),
        };
        ReportRow {
            study_id: e.study_id.clone(),
            hc_cm: e.biometrics.hc_cm,
            bpd_cm: e.biometrics.bpd_cm,
            ac_cm: e.biometrics.ac_cm,
            fl_cm: e.biometrics.fl_cm,
            ga_weeks: e.ga_weeks,
            warnings,
        }
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> CliError + '_ {
    move |source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(HEADER).map_err(csv_err(path))?;
    let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.study_id.clone(),
            num(r.hc_cm),
            num(r.bpd_cm),
            num(r.ac_cm),
            num(r.fl_cm),
            num(r.ga_weeks),
            r.warnings.clone(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header: Vec<String> = r.headers().map_err(csv_err(path))?.iter().map(str::to_string).collect();
    if header != HEADER {
        return Err(CliError::Config(format!("{}: not an estimate report", path.display())));
    }
    r.deserialize().map(|row| row.map_err(csv_err(path))).collect()
}
