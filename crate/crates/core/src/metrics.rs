//! Segmentation overlap and boundary metrics, regression error summaries and
//! the two hypothesis tests used to compare methods.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::image::{SegmentationMask, Spacing};
use crate::morph::{offset, percentile_sorted, NEIGHBORS_4};

fn check_same_shape(a: &Array2<bool>, b: &Array2<bool>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(())
}

/// `2|A ∩ B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(a: &SegmentationMask, b: &SegmentationMask) -> Result<f64> {
    dice_pixels(&a.pixels, &b.pixels)
}

pub fn dice_pixels(a: &Array2<bool>, b: &Array2<bool>) -> Result<f64> {
    check_same_shape(a, b)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += (x && y) as usize;
        total += x as usize + y as usize;
    }
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

/// Foreground pixels with a 4-neighbour in the background (the image edge
/// counts as background).
pub fn boundary(mask: &Array2<bool>) -> Array2<bool> {
    let dim = mask.dim();
    Array2::from_shape_fn(dim, |p| {
        mask[p]
            && NEIGHBORS_4
                .iter()
                .any(|&d| offset(p, d, dim).is_none_or(|q| !mask[q]))
    })
}

/// Exact symmetric Hausdorff distance between the two mask boundaries, in mm.
pub fn hausdorff_mm(a: &SegmentationMask, b: &SegmentationMask, spacing: Spacing) -> Result<f64> {
    hausdorff_pixels(&a.pixels, &b.pixels, spacing)
}

pub fn hausdorff_pixels(a: &Array2<bool>, b: &Array2<bool>, spacing: Spacing) -> Result<f64> {
    check_same_shape(a, b)?;
    let ba = boundary(a);
    let bb = boundary(b);
    if !ba.iter().any(|&v| v) || !bb.iter().any(|&v| v) {
        return Err(Error::InvalidInput("Hausdorff distance of an empty mask".into()));
    }
    let to_b = squared_distance_transform(&bb, spacing);
    let to_a = squared_distance_transform(&ba, spacing);
    let directed = |from: &Array2<bool>, field: &Array2<f64>| {
        from.iter()
            .zip(field.iter())
            .filter(|(&on, _)| on)
            .map(|(_, &d)| d)
            .fold(0.0f64, f64::max)
    };
    Ok(directed(&ba, &to_b).max(directed(&bb, &to_a)).sqrt())
}

/// Exact squared Euclidean distance (in mm^2) from every pixel to the nearest
/// `true` pixel of `sites`, by two passes of the lower-envelope transform.
pub fn squared_distance_transform(sites: &Array2<bool>, spacing: Spacing) -> Array2<f64> {
    let (rows, cols) = sites.dim();
    let mut columns_pass = Array2::from_elem((rows, cols), f64::INFINITY);
    let mut f = vec![0.0; rows.max(cols)];
    let mut out = vec![0.0; rows.max(cols)];
    for c in 0..cols {
        for r in 0..rows {
            f[r] = if sites[[r, c]] { 0.0 } else { f64::INFINITY };
        }
        lower_envelope(&f[..rows], spacing.row_mm, &mut out[..rows]);
        for r in 0..rows {
            columns_pass[[r, c]] = out[r];
        }
    }
    let mut result = Array2::from_elem((rows, cols), f64::INFINITY);
    for r in 0..rows {
        for c in 0..cols {
            f[c] = columns_pass[[r, c]];
        }
        lower_envelope(&f[..cols], spacing.col_mm, &mut out[..cols]);
        for c in 0..cols {
            result[[r, c]] = out[c];
        }
    }
    result
}

/// `out[q] = min_p f[p] + ((q - p) * step)^2` over finite `f[p]`.
fn lower_envelope(f: &[f64], step: f64, out: &mut [f64]) {
    let sites: Vec<usize> = (0..f.len()).filter(|&i| f[i].is_finite()).collect();
    if sites.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let pos = |i: usize| i as f64 * step;
    // Intersection abscissa of the parabolas rooted at p and q (p < q).
    let meet = |p: usize, q: usize| {
        ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)))
    };
    let mut hull: Vec<usize> = Vec::with_capacity(sites.len());
    let mut bounds: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    for &q in &sites {
        while let Some(&p) = hull.last() {
            let s = meet(p, q);
            if s <= *bounds.last().expect("one bound per hull entry") {
                hull.pop();
                bounds.pop();
            } else {
                break;
            }
        }
        let s = match hull.last() {
            Some(&p) => meet(p, q),
            None => f64::NEG_INFINITY,
        };
        hull.push(q);
        bounds.push(s);
    }
    let mut k = 0;
    for (i, o) in out.iter_mut().enumerate() {
        let x = pos(i);
        while k + 1 < hull.len() && bounds[k + 1] < x {
            k += 1;
        }
        let p = hull[k];
        let d = (i as f64 - p as f64) * step;
        *o = f[p] + d * d;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    /// Mean absolute percentage error as a fraction (0.023 = 2.3%).
    pub mape: f64,
}

pub fn error_report(pred: &[f64], truth: &[f64]) -> Result<ErrorReport> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::InvalidInput(format!(
            "error report needs equal nonzero lengths, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    if truth.contains(&0.0) {
        return Err(Error::InvalidInput("MAPE undefined for a zero reference value".into()));
    }
    let n = pred.len() as f64;
    let (mut abs, mut sq, mut pct) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.iter().zip(truth) {
        let e = p - t;
        abs += e.abs();
        sq += e * e;
        pct += e.abs() / t.abs();
    }
    let mse = sq / n;
    Ok(ErrorReport {
        mae: abs / n,
        mse,
        rmse: mse.sqrt(),
        mape: pct / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Orientation {
    HigherBetter,
    LowerBetter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub median: f64,
    pub iqr_low: f64,
    pub iqr_high: f64,
    /// 5th percentile for higher-is-better metrics, 95th otherwise.
    pub worst5: f64,
}

pub fn summarize(values: &[f64], orientation: Orientation) -> Result<MetricSummary> {
    if values.is_empty() {
        return Err(Error::InvalidInput("cannot summarise an empty sample".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Ok(MetricSummary {
        median: percentile_sorted(&sorted, 50.0),
        iqr_low: percentile_sorted(&sorted, 25.0),
        iqr_high: percentile_sorted(&sorted, 75.0),
        worst5: match orientation {
            Orientation::HigherBetter => percentile_sorted(&sorted, 5.0),
            Orientation::LowerBetter => percentile_sorted(&sorted, 95.0),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Survival function of the limiting Kolmogorov distribution, `P(K > lambda)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.0 {
        // Theta-function form converges fast for small arguments.
        let pi2 = std::f64::consts::PI * std::f64::consts::PI;
        let mut cdf = 0.0;
        for k in 1..=20 {
            let j = (2 * k - 1) as f64;
            cdf += (-j * j * pi2 / (8.0 * lambda * lambda)).exp();
        }
        cdf *= (2.0 * std::f64::consts::PI).sqrt() / lambda;
        (1.0 - cdf).clamp(0.0, 1.0)
    } else {
        let mut sf = 0.0;
        for k in 1..=100 {
            let kf = k as f64;
            let term = (-2.0 * kf * kf * lambda * lambda).exp();
            sf += if k % 2 == 1 { term } else { -term };
            if term < 1e-18 {
                break;
            }
        }
        (2.0 * sf).clamp(0.0, 1.0)
    }
}

/// One-sample Kolmogorov-Smirnov test against a normal distribution with the
/// sample mean and standard deviation, asymptotic p-value (no Lilliefors
/// correction).
pub fn ks_normality(values: &[f64]) -> Result<TestResult> {
    let n = values.len();
    if n < 5 {
        return Err(Error::InvalidInput(format!("KS test needs n >= 5, got {n}")));
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    if !(var > 0.0) {
        return Err(Error::DegenerateSample("zero variance".into()));
    }
    let sd = var.sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let d = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal_cdf((x - mean) / sd);
            ((i + 1) as f64 / nf - f).max(f - i as f64 / nf)
        })
        .fold(0.0f64, f64::max);
    Ok(TestResult {
        statistic: d,
        p_value: kolmogorov_sf(nf.sqrt() * d),
    })
}

/// Largest sample size for which the exact null distribution is enumerated.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

/// Two-sided Wilcoxon signed-rank test on paired samples. The statistic is
/// `min(W+, W-)` after dropping zero differences.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<TestResult> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|&d| d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(Error::DegenerateSample("all paired differences are zero".into()));
    }
    let n = diffs.len();
    if n < 5 {
        return Err(Error::InvalidInput(format!(
            "Wilcoxon test needs n >= 5 nonzero differences, got {n}"
        )));
    }

    // Midranks of |d|, kept doubled so they stay integral.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diffs[i].abs().total_cmp(&diffs[j].abs()));
    let mut doubled_rank = vec![0u64; n];
    let mut tie_sizes = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && diffs[order[end]].abs() == diffs[order[start]].abs() {
            end += 1;
        }
        // Ranks start+1..=end share their mean; doubled: start + end + 1.
        for &k in &order[start..end] {
            doubled_rank[k] = (start + end + 1) as u64;
        }
        tie_sizes.push(end - start);
        start = end;
    }
    let w_plus2: u64 = (0..n).filter(|&i| diffs[i] > 0.0).map(|i| doubled_rank[i]).sum();
    let total2: u64 = doubled_rank.iter().sum();
    let w_minus2 = total2 - w_plus2;
    let w2 = w_plus2.min(w_minus2);
    let statistic = w2 as f64 / 2.0;

    let p_value = if n <= WILCOXON_EXACT_MAX_N {
        // counts[s] = number of sign assignments whose doubled W+ equals s.
        let mut counts = vec![0f64; total2 as usize + 1];
        counts[0] = 1.0;
        let mut reach = 0usize;
        for &r in &doubled_rank {
            let r = r as usize;
            for s in (0..=reach).rev() {
                if counts[s] != 0.0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let tail: f64 = counts[..=w2 as usize].iter().sum();
        (2.0 * tail / 2f64.powi(n as i32)).min(1.0)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let tie_term: f64 = tie_sizes
            .iter()
            .map(|&t| {
                let t = t as f64;
                t * t * t - t
            })
            .sum::<f64>()
            / 48.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
        let z = (statistic - mean) / var.sqrt();
        (2.0 * normal_cdf(-z.abs())).min(1.0)
    };
    Ok(TestResult { statistic, p_value })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_from(rows: &[&str]) -> Array2<bool> {
        let h = rows.len();
        let w = rows[0].len();
        Array2::from_shape_fn((h, w), |(r, c)| rows[r].as_bytes()[c] == b'#')
    }

    #[test]
    fn dice_examples() {
        let a = mask_from(&["##..", "##..", "....", "...."]);
        let b = mask_from(&[".##.", ".##.", "....", "...."]);
        let c = mask_from(&["....", "....", "..##", "..##"]);
        assert_eq!(dice_pixels(&a, &a).unwrap(), 1.0);
        assert_eq!(dice_pixels(&a, &c).unwrap(), 0.0);
        assert_eq!(dice_pixels(&a, &b).unwrap(), 0.5);
        let empty = Array2::from_elem((4, 4), false);
        assert_eq!(dice_pixels(&empty, &empty).unwrap(), 1.0);
        assert!(dice_pixels(&a, &Array2::from_elem((4, 5), false)).is_err());
    }

    #[test]
    fn hausdorff_examples() {
        let one = Spacing::isotropic(1.0).unwrap();
        let a = mask_from(&["#......", "......."]);
        let b = mask_from(&["...#...", "......."]);
        assert_eq!(hausdorff_pixels(&a, &a, one).unwrap(), 0.0);
        let half = Spacing::isotropic(0.5).unwrap();
        assert!((hausdorff_pixels(&a, &b, half).unwrap() - 1.5).abs() < 1e-12);

        let outer = Array2::from_shape_fn((14, 14), |(r, c)| (2..12).contains(&r) && (2..12).contains(&c));
        let inner = Array2::from_shape_fn((14, 14), |(r, c)| (4..10).contains(&r) && (4..10).contains(&c));
        let h = hausdorff_pixels(&outer, &inner, one).unwrap();
        assert!((h - 2.0 * std::f64::consts::SQRT_2).abs() < 1e-12);

        let empty = Array2::from_elem((2, 7), false);
        assert!(hausdorff_pixels(&a, &empty, one).is_err());
    }

    #[test]
    fn error_report_examples() {
        let r = error_report(&[2.0, 4.0], &[1.0, 2.0]).unwrap();
        assert!((r.mae - 1.5).abs() < 1e-12);
        assert!((r.mse - 2.5).abs() < 1e-12);
        assert!((r.rmse - 1.5811).abs() < 1e-4);
        assert!((r.mape - 1.0).abs() < 1e-12);

        let truth = [3.0, 5.0, 8.0];
        let same = error_report(&truth, &truth).unwrap();
        assert_eq!(same, ErrorReport { mae: 0.0, mse: 0.0, rmse: 0.0, mape: 0.0 });
        let off: Vec<f64> = truth.iter().map(|t| t + 1.0).collect();
        let r = error_report(&off, &truth).unwrap();
        assert_eq!((r.mae, r.mse, r.rmse), (1.0, 1.0, 1.0));

        assert!(error_report(&[1.0], &[0.0]).is_err());
        assert!(error_report(&[], &[]).is_err());
        assert!(error_report(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn summarize_examples() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let s = summarize(&v, Orientation::LowerBetter).unwrap();
        assert!((s.median - 50.5).abs() < 1e-12);
        assert!((s.worst5 - 95.05).abs() < 1e-12);
        let h = summarize(&v, Orientation::HigherBetter).unwrap();
        assert!((h.worst5 - 5.95).abs() < 1e-12);
        assert_eq!(
            summarize(&[4.2], Orientation::HigherBetter).unwrap(),
            MetricSummary { median: 4.2, iqr_low: 4.2, iqr_high: 4.2, worst5: 4.2 }
        );
        assert!(summarize(&[], Orientation::HigherBetter).is_err());
    }

    #[test]
    fn kolmogorov_sf_matches_reference_values() {
        // Reference values of the limiting distribution's survival function.
        assert!((kolmogorov_sf(1.0) - 0.26999967).abs() < 1e-7);
        assert!((kolmogorov_sf(1.36) - 0.04946).abs() < 1e-4);
        assert!((kolmogorov_sf(0.5) - 0.96394).abs() < 1e-4);
        // Both series agree at the switch point.
        assert!((kolmogorov_sf(1.0 - 1e-9) - kolmogorov_sf(1.0)).abs() < 1e-8);
    }

    #[test]
    fn ks_rejects_degenerate() {
        assert!(ks_normality(&[1.0, 1.0, 1.0, 1.0, 1.0]).is_err());
        assert!(ks_normality(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn wilcoxon_exact_all_positive() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [0.0; 6];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert!((r.p_value - 0.03125).abs() < 1e-15);
    }

    #[test]
    fn wilcoxon_errors() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!(matches!(wilcoxon_signed_rank(&a, &a), Err(Error::DegenerateSample(_))));
        assert!(wilcoxon_signed_rank(&a, &[1.0, 2.0]).is_err());
        assert!(wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0], &[0.0; 4]).is_err());
    }

    #[test]
    fn wilcoxon_exact_handles_ties() {
        // |d| = 1,1,2,3,3 with ranks 1.5,1.5,3,4.5,4.5; W- = 1.5.
        let a = [1.0, -1.0, 2.0, 3.0, 3.0];
        let r = wilcoxon_signed_rank(&a, &[0.0; 5]).unwrap();
        assert_eq!(r.statistic, 1.5);
        // Enumerate all 32 sign patterns directly.
        let ranks = [1.5, 1.5, 3.0, 4.5, 4.5];
        let extreme = (0..32u32)
            .filter(|m| {
                let wp: f64 = (0..5).filter(|i| m & (1 << i) != 0).map(|i| ranks[i]).sum();
                wp.min(15.0 - wp) <= 1.5
            })
            .count();
        assert!((r.p_value - extreme as f64 / 32.0).abs() < 1e-15);
    }

    #[test]
    fn wilcoxon_normal_approximation_large_n() {
        let a: Vec<f64> = (0..40).map(|i| i as f64 * 0.1 + if i % 3 == 0 { -2.0 } else { 1.0 }).collect();
        let b: Vec<f64> = (0..40).map(|i| i as f64 * 0.1).collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!(r.p_value > 0.0 && r.p_value <= 1.0);
        let swapped = wilcoxon_signed_rank(&b, &a).unwrap();
        assert!((r.p_value - swapped.p_value).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn dice_symmetric(bits_a in proptest::collection::vec(any::<bool>(), 64), bits_b in proptest::collection::vec(any::<bool>(), 64)) {
            let a = Array2::from_shape_vec((8, 8), bits_a).unwrap();
            let b = Array2::from_shape_vec((8, 8), bits_b).unwrap();
            let d = dice_pixels(&a, &b).unwrap();
            prop_assert_eq!(d, dice_pixels(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&d));
        }

        #[test]
        fn error_report_scale_equivariant(pairs in proptest::collection::vec((0.5f64..100.0, 0.5f64..100.0), 1..20), k in 0.1f64..10.0) {
            let pred: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let truth: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let base = error_report(&pred, &truth).unwrap();
            let sp: Vec<f64> = pred.iter().map(|v| v * k).collect();
            let st: Vec<f64> = truth.iter().map(|v| v * k).collect();
            let scaled = error_report(&sp, &st).unwrap();
            prop_assert!((scaled.mae - k * base.mae).abs() <= 1e-9 * (1.0 + k * base.mae));
            prop_assert!((scaled.rmse - k * base.rmse).abs() <= 1e-9 * (1.0 + k * base.rmse));
            prop_assert!((scaled.mse - k * k * base.mse).abs() <= 1e-9 * (1.0 + k * k * base.mse));
            prop_assert!((scaled.mape - base.mape).abs() <= 1e-9);
            prop_assert!((base.rmse - base.mse.sqrt()).abs() <= 1e-9);
        }

        #[test]
        fn summarize_permutation_invariant(mut v in proptest::collection::vec(-1e3f64..1e3, 1..50), seed in any::<u64>()) {
            let s1 = summarize(&v, Orientation::HigherBetter).unwrap();
            // Deterministic shuffle.
            let mut state = seed | 1;
            for i in (1..v.len()).rev() {
                state ^= state << 13; state ^= state >> 7; state ^= state << 17;
                v.swap(i, (state % (i as u64 + 1)) as usize);
            }
            let s2 = summarize(&v, Orientation::HigherBetter).unwrap();
            prop_assert_eq!(s1, s2);
            prop_assert!(s1.iqr_low <= s1.median && s1.median <= s1.iqr_high);
        }

        #[test]
        fn wilcoxon_swap_symmetric(pairs in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 5..30)) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            if let (Ok(x), Ok(y)) = (wilcoxon_signed_rank(&a, &b), wilcoxon_signed_rank(&b, &a)) {
                prop_assert_eq!(x.statistic, y.statistic);
                prop_assert!((x.p_value - y.p_value).abs() < 1e-12);
                prop_assert!(x.p_value > 0.0 && x.p_value <= 1.0);
            }
        }

        #[test]
        fn ks_statistic_in_unit_interval(v in proptest::collection::vec(-1e3f64..1e3, 5..60)) {
            if let Ok(r) = ks_normality(&v) {
                prop_assert!((0.0..=1.0).contains(&r.statistic));
                prop_assert!((0.0..=1.0).contains(&r.p_value));
            }
        }
    }
}
