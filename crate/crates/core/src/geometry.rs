//! Contour extraction, direct least-squares ellipse fitting and the
//! circumference / diameter measurements derived from it.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Point, SegmentationMask, Spacing};
use crate::morph::{connected_components, offset};

/// Components smaller than this are rejected before fitting.
pub const MIN_STRUCTURE_PX: usize = 10;

/// Geometric ellipse. `rotation` is the angle of the major axis measured from
/// the +column axis towards +row, in [0, pi).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseParams {
    pub center: Point,
    pub semi_major: f64,
    pub semi_minor: f64,
    pub rotation: f64,
}

impl EllipseParams {
    /// Builds a normalised ellipse: axes sorted so `semi_major >= semi_minor`
    /// and rotation folded into [0, pi).
    pub fn new(center: Point, a: f64, b: f64, rotation: f64) -> Self {
        let (semi_major, semi_minor, rotation) = if a >= b {
            (a, b, rotation)
        } else {
            (b, a, rotation + PI / 2.0)
        };
        EllipseParams {
            center,
            semi_major,
            semi_minor,
            rotation: normalize_angle(rotation),
        }
    }

    /// Point at parametric angle `t`.
    pub fn point_at(&self, t: f64) -> Point {
        let (s, c) = self.rotation.sin_cos();
        let u = self.semi_major * t.cos();
        let v = self.semi_minor * t.sin();
        Point {
            col: self.center.col + u * c - v * s,
            row: self.center.row + u * s + v * c,
        }
    }

    /// True when `p` lies inside or on the ellipse.
    pub fn contains(&self, p: Point) -> bool {
        let (s, c) = self.rotation.sin_cos();
        let dx = p.col - self.center.col;
        let dy = p.row - self.center.row;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.semi_major).powi(2) + (v / self.semi_minor).powi(2) <= 1.0
    }

    pub fn area(&self) -> f64 {
        PI * self.semi_major * self.semi_minor
    }
}

fn normalize_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(PI);
    // rem_euclid can round up to exactly PI for tiny negative inputs.
    if t >= PI {
        0.0
    } else {
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipseFit {
    pub ellipse: EllipseParams,
    /// RMS algebraic residual of the unit-norm conic on normalised points.
    pub residual: f64,
}

/// Clockwise Moore neighbourhood starting west, in (row, col) offsets.
const MOORE: [(isize, isize); 8] = [
    (0, -1),
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
];

/// Ordered boundary of the largest 8-connected foreground component.
pub fn extract_contour(mask: &SegmentationMask) -> Result<Vec<Point>> {
    let cc = connected_components(&mask.pixels);
    let label = cc.largest().ok_or(Error::NoStructure)?;
    let size = cc.sizes[label as usize - 1];
    if size < MIN_STRUCTURE_PX {
        return Err(Error::StructureTooSmall { pixels: size });
    }
    let component = cc.mask_of(label);
    let trace = trace_boundary(&component);
    Ok(trace
        .into_iter()
        .map(|(r, c)| Point::new(r as f64, c as f64))
        .collect())
}

/// Moore-neighbour tracing with Jacob's stopping criterion. Pixels outside
/// the grid count as background.
fn trace_boundary(component: &Array2<bool>) -> Vec<(usize, usize)> {
    let dim = component.dim();
    let start = component
        .indexed_iter()
        .find(|(_, &v)| v)
        .map(|(p, _)| p)
        .expect("component is nonempty");
    let is_fg = |p: (usize, usize), d: (isize, isize)| -> Option<(usize, usize)> {
        offset(p, d, dim).filter(|&q| component[q])
    };
    // The raster-first pixel always has a background west neighbour.
    let step = |p: (usize, usize), from_dir: usize| -> Option<((usize, usize), usize)> {
        for k in 1..=8 {
            let dir = (from_dir + k) % 8;
            if let Some(q) = is_fg(p, MOORE[dir]) {
                // Backtrack direction as seen from q: the last background
                // neighbour we examined, re-expressed relative to q.
                let prev = MOORE[(dir + 7) % 8];
                let (pr, pc) = (p.0 as isize + prev.0, p.1 as isize + prev.1);
                let rel = (pr - q.0 as isize, pc - q.1 as isize);
                let back = MOORE
                    .iter()
                    .position(|&d| d == rel)
                    .unwrap_or((dir + 4) % 8);
                return Some((q, back));
            }
        }
        None
    };
    let mut contour = vec![start];
    let Some((first_next, first_back)) = step(start, 0) else {
        return contour;
    };
    let (mut current, mut back) = (first_next, first_back);
    let mut guard = 0usize;
    let limit = 4 * component.len() + 8;
    loop {
        if current == start {
            // Jacob's criterion: stop once we re-enter the start the same way.
            match step(current, back) {
                Some((next, _)) if next == first_next => break,
                _ => {}
            }
        }
        contour.push(current);
        let Some((next, nb)) = step(current, back) else { break };
        current = next;
        back = nb;
        guard += 1;
        if guard > limit {
            break;
        }
    }
    contour
}

/// Direct least-squares ellipse fit with the ellipse-specific constraint
/// `4AC - B^2 = 1`, solved in the numerically stable reduced form.
pub fn fit_ellipse(points: &[Point]) -> Result<EllipseFit> {
    if points.len() < 6 {
        return Err(Error::InvalidInput(format!(
            "ellipse fit needs at least 6 points, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.col).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.row).sum::<f64>() / n;
    let mean_dist = points
        .iter()
        .map(|p| (p.col - mean_x).hypot(p.row - mean_y))
        .sum::<f64>()
        / n;
    if !(mean_dist > 1e-12) {
        return Err(Error::DegenerateConic);
    }
    let scale = std::f64::consts::SQRT_2 / mean_dist;

    let mut s1 = Matrix3::<f64>::zeros();
    let mut s2 = Matrix3::<f64>::zeros();
    let mut s3 = Matrix3::<f64>::zeros();
    let normalized: Vec<(f64, f64)> = points
        .iter()
        .map(|p| ((p.col - mean_x) * scale, (p.row - mean_y) * scale))
        .collect();
    for &(x, y) in &normalized {
        let q = Vector3::new(x * x, x * y, y * y);
        let l = Vector3::new(x, y, 1.0);
        s1 += q * q.transpose();
        s2 += q * l.transpose();
        s3 += l * l.transpose();
    }
    let s3_inv = s3.try_inverse().ok_or(Error::DegenerateConic)?;
    let t = -s3_inv * s2.transpose();
    let m = s1 + s2 * t;
    // Premultiply by the inverse of the constraint matrix [[0,0,2],[0,-1,0],[2,0,0]].
    let reduced = Matrix3::from_rows(&[
        (m.row(2) / 2.0).into_owned(),
        (-m.row(1)).into_owned(),
        (m.row(0) / 2.0).into_owned(),
    ]);

    let mut best: Option<(f64, Vector3<f64>)> = None;
    let scale_m = reduced.norm().max(1e-300);
    for lambda in reduced.complex_eigenvalues().iter() {
        if lambda.im.abs() > 1e-9 * scale_m {
            continue;
        }
        let Some(v) = null_vector(&(reduced - Matrix3::identity() * lambda.re)) else {
            continue;
        };
        let constraint = 4.0 * v[0] * v[2] - v[1] * v[1];
        if constraint > 0.0 {
            let v = v / constraint.sqrt();
            // Among admissible vectors keep the one with smallest algebraic cost.
            let cost = v.dot(&(m * v));
            if best.is_none_or(|(c, _)| cost < c) {
                best = Some((cost, v));
            }
        }
    }
    let (_, quad) = best.ok_or(Error::DegenerateConic)?;
    let lin = t * quad;
    let coeffs = [quad[0], quad[1], quad[2], lin[0], lin[1], lin[2]];
    let norm = coeffs.iter().map(|c| c * c).sum::<f64>().sqrt();
    let residual = (normalized
        .iter()
        .map(|&(x, y)| {
            let e = coeffs[0] * x * x
                + coeffs[1] * x * y
                + coeffs[2] * y * y
                + coeffs[3] * x
                + coeffs[4] * y
                + coeffs[5];
            (e / norm).powi(2)
        })
        .sum::<f64>()
        / n)
        .sqrt();

    let local = conic_to_ellipse(&coeffs)?;
    let ellipse = EllipseParams::new(
        Point::new(
            local.center.row / scale + mean_y,
            local.center.col / scale + mean_x,
        ),
        local.semi_major / scale,
        local.semi_minor / scale,
        local.rotation,
    );
    Ok(EllipseFit { ellipse, residual })
}

fn null_vector(a: &Matrix3<f64>) -> Option<Vector3<f64>> {
    let rows = [
        a.row(0).transpose(),
        a.row(1).transpose(),
        a.row(2).transpose(),
    ];
    let candidates = [
        rows[0].cross(&rows[1]),
        rows[0].cross(&rows[2]),
        rows[1].cross(&rows[2]),
    ];
    let best = candidates
        .iter()
        .max_by(|x, y| x.norm().total_cmp(&y.norm()))?;
    let n = best.norm();
    if n > 0.0 && n.is_finite() {
        Some(best / n)
    } else {
        // Rank <= 1: any vector orthogonal to the nonzero row works.
        let r = rows.iter().max_by(|x, y| x.norm().total_cmp(&y.norm()))?;
        if r.norm() == 0.0 {
            return None;
        }
        let helper = if r[0].abs() < 0.9 * r.norm() {
            Vector3::x()
        } else {
            Vector3::y()
        };
        let v = r.cross(&helper);
        Some(v / v.norm())
    }
}

/// Geometric parameters of `A x^2 + B xy + C y^2 + D x + E y + F = 0` with
/// x = column, y = row.
pub fn conic_to_ellipse(coeffs: &[f64; 6]) -> Result<EllipseParams> {
    let [a, b, c, d, e, f] = *coeffs;
    let det = 4.0 * a * c - b * b;
    if !(det > 0.0) {
        return Err(Error::DegenerateConic);
    }
    let x0 = (b * e - 2.0 * c * d) / det;
    let y0 = (b * d - 2.0 * a * e) / det;
    let f0 = f + 0.5 * (d * x0 + e * y0);
    let theta = 0.5 * b.atan2(a - c);
    let (s, co) = theta.sin_cos();
    let lambda_u = a * co * co + b * co * s + c * s * s;
    let lambda_v = a * s * s - b * co * s + c * co * co;
    let ru = -f0 / lambda_u;
    let rv = -f0 / lambda_v;
    if !(ru > 0.0 && rv > 0.0 && ru.is_finite() && rv.is_finite()) {
        return Err(Error::DegenerateConic);
    }
    Ok(EllipseParams::new(
        Point::new(y0, x0),
        ru.sqrt(),
        rv.sqrt(),
        theta,
    ))
}

/// Ramanujan's second perimeter approximation.
pub fn ellipse_perimeter(e: &EllipseParams) -> f64 {
    perimeter(e.semi_major, e.semi_minor)
}

pub fn perimeter(a: f64, b: f64) -> f64 {
    let sum = a + b;
    if sum <= 0.0 {
        return 0.0;
    }
    let h = ((a - b) / sum).powi(2);
    PI * sum * (1.0 + 3.0 * h / (10.0 + (4.0 - 3.0 * h).sqrt()))
}

/// Quantity to convert from pixels to centimetres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PixelMeasure {
    /// A bare length; only meaningful with isotropic spacing.
    Length(f64),
    /// A displacement `(d_row, d_col)` in pixels.
    Vector(f64, f64),
}

pub fn px_to_cm(measure: PixelMeasure, spacing: Spacing) -> Result<f64> {
    Spacing::new(spacing.row_mm, spacing.col_mm)?;
    match measure {
        PixelMeasure::Length(len) => {
            if !spacing.is_isotropic() {
                return Err(Error::DirectionRequired);
            }
            Ok(len * spacing.row_mm / 10.0)
        }
        PixelMeasure::Vector(dr, dc) => {
            Ok((dr * spacing.row_mm).hypot(dc * spacing.col_mm) / 10.0)
        }
    }
}

/// Contour rescaled into millimetre coordinates.
fn contour_mm(mask: &SegmentationMask, spacing: Spacing) -> Result<Vec<Point>> {
    Spacing::new(spacing.row_mm, spacing.col_mm)?;
    Ok(extract_contour(mask)?
        .into_iter()
        .map(|p| Point::new(p.row * spacing.row_mm, p.col * spacing.col_mm))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadMeasurement {
    pub hc_cm: f64,
    pub bpd_cm: f64,
    /// Fitted ellipse in millimetre coordinates.
    pub ellipse_mm: EllipseParams,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbdomenMeasurement {
    pub ac_cm: f64,
    pub ellipse_mm: EllipseParams,
}

/// HC from the fitted ellipse perimeter and BPD from its minor axis.
pub fn head_biometrics(mask: &SegmentationMask, spacing: Spacing) -> Result<HeadMeasurement> {
    let fit = fit_ellipse(&contour_mm(mask, spacing)?)?;
    Ok(HeadMeasurement {
        hc_cm: ellipse_perimeter(&fit.ellipse) / 10.0,
        bpd_cm: 2.0 * fit.ellipse.semi_minor / 10.0,
        ellipse_mm: fit.ellipse,
    })
}

pub fn abdomen_biometrics(
    mask: &SegmentationMask,
    spacing: Spacing,
) -> Result<AbdomenMeasurement> {
    let fit = fit_ellipse(&contour_mm(mask, spacing)?)?;
    Ok(AbdomenMeasurement {
        ac_cm: ellipse_perimeter(&fit.ellipse) / 10.0,
        ellipse_mm: fit.ellipse,
    })
}

/// Rasterise a filled ellipse (pixel centres inside or on the boundary).
pub fn ellipse_mask(dim: (usize, usize), e: &EllipseParams) -> Array2<bool> {
    Array2::from_shape_fn(dim, |(r, c)| e.contains(Point::new(r as f64, c as f64)))
}
