//! Error tables for estimate reports against ground truth.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use biometry_core::dataset::{load_study, Manifest, StudyRecord, MANIFEST};
use biometry_core::metrics::{
    dice, error_report, hausdorff_mm, ks_normality, summarize, wilcoxon_signed_rank, ErrorReport, MetricSummary,
    Orientation, TestResult,
};
use biometry_core::Structure;
use log::warn;
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::pipeline::{estimate_study, segment, Models, Source};
use crate::report::{read_report, ReportRow};

pub const ERRORS_CSV: &str = "errors.csv";
pub const SEGMENTATION_CSV: &str = "segmentation.csv";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const TABLE_TXT: &str = "report.txt";

/// Measurements compared, in table order.
pub const QUANTITIES: [&str; 5] = ["hc_cm", "bpd_cm", "ac_cm", "fl_cm", "ga_weeks"];

fn value(row: &ReportRow, q: &str) -> Option<f64> {
    match q {
        "hc_cm" => row.hc_cm,
        "bpd_cm" => row.bpd_cm,
        "ac_cm" => row.ac_cm,
        "fl_cm" => row.fl_cm,
        "ga_weeks" => row.ga_weeks,
        _ => None,
    }
}

/// One line of the error table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantityErrors {
    pub quantity: String,
    pub n: usize,
    /// Studies in truth whose prediction is absent.
    pub missing: usize,
    pub error: Option<ErrorReport>,
    /// Summary of absolute errors.
    pub abs_error: Option<MetricSummary>,
    /// Normality of the signed errors.
    pub ks: Option<TestResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentationSummary {
    pub structure: String,
    pub metric: String,
    pub n: usize,
    pub summary: MetricSummary,
}

/// Paired test of absolute errors of two prediction files.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub quantity: String,
    pub n: usize,
    pub test: Option<TestResult>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Evaluation {
    pub errors: Vec<QuantityErrors>,
    pub segmentation: Vec<SegmentationSummary>,
    pub comparison: Vec<Comparison>,
}

/// Ground truth rows: the oracle path over every readable study.
pub fn truth_rows(data: &Path) -> Result<(Vec<ReportRow>, Vec<StudyRecord>)> {
    let manifest = Manifest::read(&data.join(MANIFEST))?;
    let mut rows = Vec::new();
    let mut studies = Vec::new();
    for id in manifest.study_ids() {
        match load_study(data, &manifest, &id) {
            Ok(Some(s)) => {
                let row = ReportRow::from(&estimate_study(&s, &Source::Oracle));
                if row.is_error() {
                    warn!("truth {id}: {}", row.warnings);
                }
                rows.push(row);
                studies.push(s);
            }
            Ok(None) => {}
            Err(e) => warn!("truth {id}: {e}"),
        }
    }
    Ok((rows, studies))
}

fn by_id(rows: &[ReportRow]) -> BTreeMap<&str, &ReportRow> {
    rows.iter().map(|r| (r.study_id.as_str(), r)).collect()
}

/// Paired (prediction, truth) values of `q`, ordered by study id.
pub fn paired(pred: &[ReportRow], truth: &[ReportRow], q: &str) -> (Vec<f64>, Vec<f64>, usize) {
    let pred = by_id(pred);
    let (mut p, mut t, mut missing) = (Vec::new(), Vec::new(), 0);
    for (id, tr) in by_id(truth) {
        let Some(tv) = value(tr, q) else { continue };
        match pred.get(id).and_then(|r| value(r, q)) {
            Some(pv) => {
                p.push(pv);
                t.push(tv);
            }
            None => missing += 1,
        }
    }
    (p, t, missing)
}

pub fn quantity_errors(pred: &[ReportRow], truth: &[ReportRow]) -> Vec<QuantityErrors> {
    QUANTITIES
        .iter()
        .map(|&q| {
            let (p, t, missing) = paired(pred, truth, q);
            let signed: Vec<f64> = p.iter().zip(&t).map(|(a, b)| a - b).collect();
            let abs: Vec<f64> = signed.iter().map(|e| e.abs()).collect();
            QuantityErrors {
                quantity: q.to_string(),
                n: p.len(),
                missing,
                error: error_report(&p, &t).ok(),
                abs_error: summarize(&abs, Orientation::LowerBetter).ok(),
                ks: ks_normality(&signed).ok(),
            }
        })
        .collect()
}

/// Wilcoxon test on the absolute errors of `a` and `b` over studies both predict.
pub fn compare(a: &[ReportRow], b: &[ReportRow], truth: &[ReportRow]) -> Vec<Comparison> {
    let (a, b) = (by_id(a), by_id(b));
    QUANTITIES
        .iter()
        .map(|&q| {
            let (mut ea, mut eb) = (Vec::new(), Vec::new());
            for (id, tr) in by_id(truth) {
                let vals = (value(tr, q), a.get(id).and_then(|r| value(r, q)), b.get(id).and_then(|r| value(r, q)));
                if let (Some(t), Some(x), Some(y)) = vals {
                    ea.push((x - t).abs());
                    eb.push((y - t).abs());
                }
            }
            Comparison {
                quantity: q.to_string(),
                n: ea.len(),
                test: wilcoxon_signed_rank(&ea, &eb).ok(),
            }
        })
        .collect()
}

/// Dice and Hausdorff distance of the model's masks against the stored ones.
pub fn segmentation_scores(models: &Models, studies: &[StudyRecord]) -> Result<Vec<SegmentationSummary>> {
    let mut out = Vec::new();
    for structure in [Structure::Head, Structure::Abdomen] {
        let (mut dices, mut hds) = (Vec::new(), Vec::new());
        for s in studies {
            let Some(scan) = s.scan(structure) else { continue };
            let Some(truth) = &scan.mask else { continue };
            let pred = segment(&models.seg, &scan.image, structure, models.seg_side)?;
            dices.push(dice(&pred, truth)?);
            match hausdorff_mm(&pred, truth, scan.image.spacing) {
                Ok(h) => hds.push(h),
                Err(e) => warn!("{} {structure:?}: {e}", s.study_id),
            }
        }
        let name = format!("{structure:?}").to_lowercase();
        for (metric, values, orientation) in [
            ("dice", dices, Orientation::HigherBetter),
            ("hausdorff_mm", hds, Orientation::LowerBetter),
        ] {
            if let Ok(summary) = summarize(&values, orientation) {
                out.push(SegmentationSummary {
                    structure: name.clone(),
                    metric: metric.to_string(),
                    n: values.len(),
                    summary,
                });
            }
        }
    }
    Ok(out)
}

fn f(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let err = |source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.flush().map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

impl Evaluation {
    /// Plain-text tables.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:>4} {:>4} {:>9} {:>9} {:>9} {:>8} {:>9} {:>19} {:>9} {:>7}",
            "quantity", "n", "miss", "MAE", "MSE", "RMSE", "MAPE%", "med|e|", "IQR|e|", "p95|e|", "KS p"
        );
        for q in &self.errors {
            let e = q.error;
            let a = q.abs_error;
            let _ = writeln!(
                s,
                "{:<10} {:>4} {:>4} {:>9.4} {:>9.4} {:>9.4} {:>8.2} {:>9.4} {:>19} {:>9.4} {:>7}",
                q.quantity,
                q.n,
                q.missing,
                e.map_or(f64::NAN, |e| e.mae),
                e.map_or(f64::NAN, |e| e.mse),
                e.map_or(f64::NAN, |e| e.rmse),
                e.map_or(f64::NAN, |e| 100.0 * e.mape),
                a.map_or(f64::NAN, |a| a.median),
                a.map_or("-".to_string(), |a| format!("[{:.4}, {:.4}]", a.iqr_low, a.iqr_high)),
                a.map_or(f64::NAN, |a| a.worst5),
                q.ks.map_or("-".to_string(), |t| format!("{:.4}", t.p_value)),
            );
        }
        if !self.segmentation.is_empty() {
            let _ = writeln!(s, "\n{:<8} {:<13} {:>4} {:>8} {:>19} {:>8}", "plane", "metric", "n", "median", "IQR", "worst5%");
            for g in &self.segmentation {
                let m = g.summary;
                let _ = writeln!(
                    s,
                    "{:<8} {:<13} {:>4} {:>8.4} {:>19} {:>8.4}",
                    g.structure,
                    g.metric,
                    g.n,
                    m.median,
                    format!("[{:.4}, {:.4}]", m.iqr_low, m.iqr_high),
                    m.worst5
                );
            }
        }
        if !self.comparison.is_empty() {
            let _ = writeln!(s, "\n{:<10} {:>4} {:>10} {:>10}", "quantity", "n", "W", "p");
            for c in &self.comparison {
                let (w, p) = c
                    .test
                    .map_or(("-".to_string(), "-".to_string()), |t| (format!("{}", t.statistic), format!("{:.5}", t.p_value)));
                let _ = writeln!(s, "{:<10} {:>4} {:>10} {:>10}", c.quantity, c.n, w, p);
            }
        }
        s
    }

    /// Writes the CSV files and the text table into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut written = Vec::new();
        let path = dir.join(ERRORS_CSV);
        let rows = self
            .errors
            .iter()
            .map(|q| {
                vec![
                    q.quantity.clone(),
                    q.n.to_string(),
                    q.missing.to_string(),
                    f(q.error.map(|e| e.mae)),
                    f(q.error.map(|e| e.mse)),
                    f(q.error.map(|e| e.rmse)),
                    f(q.error.map(|e| e.mape)),
                    f(q.abs_error.map(|a| a.median)),
                    f(q.abs_error.map(|a| a.iqr_low)),
                    f(q.abs_error.map(|a| a.iqr_high)),
                    f(q.abs_error.map(|a| a.worst5)),
                    f(q.ks.map(|t| t.statistic)),
                    f(q.ks.map(|t| t.p_value)),
                ]
            })
            .collect();
        write_csv(
            &path,
            &[
                "quantity", "n", "missing", "mae", "mse", "rmse", "mape", "median", "iqr_low", "iqr_high", "worst5",
                "ks_statistic", "ks_p",
            ],
            rows,
        )?;
        written.push(path);
        if !self.segmentation.is_empty() {
            let path = dir.join(SEGMENTATION_CSV);
            let rows = self
                .segmentation
                .iter()
                .map(|g| {
                    vec![
                        g.structure.clone(),
                        g.metric.clone(),
                        g.n.to_string(),
                        g.summary.median.to_string(),
                        g.summary.iqr_low.to_string(),
                        g.summary.iqr_high.to_string(),
                        g.summary.worst5.to_string(),
                    ]
                })
                .collect();
            write_csv(&path, &["structure", "metric", "n", "median", "iqr_low", "iqr_high", "worst5"], rows)?;
            written.push(path);
        }
        if !self.comparison.is_empty() {
            let path = dir.join(COMPARISON_CSV);
            let rows = self
                .comparison
                .iter()
                .map(|c| {
                    vec![
                        c.quantity.clone(),
                        c.n.to_string(),
                        f(c.test.map(|t| t.statistic)),
                        f(c.test.map(|t| t.p_value)),
                    ]
                })
                .collect();
            write_csv(&path, &["quantity", "n", "wilcoxon_statistic", "p_value"], rows)?;
            written.push(path);
        }
        let path = dir.join(TABLE_TXT);
        fs::write(&path, self.render()).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        written.push(path);
        Ok(written)
    }
}

/// Scores `pred` against the dataset at `truth`; `compare_with` adds a
/// paired test against a second report, `models` adds Dice and Hausdorff.
pub fn cmd_evaluate(
    pred: &Path,
    truth: &Path,
    out: &Path,
    compare_with: Option<&Path>,
    models: Option<&Models>,
) -> Result<Evaluation> {
    for p in [Some(pred), Some(truth), compare_with].into_iter().flatten() {
        if !p.exists() {
            return Err(CliError::Config(format!("{} does not exist", p.display())));
        }
    }
    let pred_rows = read_report(pred)?;
    let (truth_rows, studies) = truth_rows(truth)?;
    let mut eval = Evaluation {
        errors: quantity_errors(&pred_rows, &truth_rows),
        ..Evaluation::default()
    };
    if let Some(other) = compare_with {
        eval.comparison = compare(&pred_rows, &read_report(other)?, &truth_rows);
    }
    if let Some(m) = models {
        eval.segmentation = segmentation_scores(m, &studies)?;
    }
    eval.write(out)?;
    Ok(eval)
}
