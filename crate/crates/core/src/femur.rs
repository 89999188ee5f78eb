//! Femur endpoint localisation through normalised distance maps.
//!
//! Training targets encode, for every pixel, the distance to the nearer of the
//! two annotated endpoints. At inference the two low-valued basins of a
//! predicted map are separated with a marker-controlled watershed and the
//! lowest pixel of each basin is taken as an endpoint.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use ndarray::Array2;
use ordered_float::OrderedFloat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{px_to_cm, PixelMeasure};
use crate::image::{FemurAnnotation, Point, Spacing};
use crate::morph::{
    connected_components, disk, gaussian_blur, offset, open, percentile, regional_minima,
    watershed, Components, NEIGHBORS_8,
};

/// Per-pixel distance to the nearest femur endpoint, scaled into [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap {
    pub values: Array2<f32>,
}

impl DistanceMap {
    pub fn new(values: Array2<f32>) -> Result<Self> {
        if let Some(((row, col), _)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinitePixel { row, col });
        }
        Ok(DistanceMap { values })
    }

    /// Clamp a raw network output into [0, 1].
    pub fn from_prediction(values: Array2<f32>) -> Result<Self> {
        Self::new(values.mapv(|v| v.clamp(0.0, 1.0)))
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EndpointPair {
    pub p1: Point,
    pub p2: Point,
}

impl EndpointPair {
    /// Orders the pair leftmost-topmost first.
    pub fn ordered(a: Point, b: Point) -> Self {
        let key = |p: &Point| (OrderedFloat(p.col), OrderedFloat(p.row));
        if key(&a) <= key(&b) {
            EndpointPair { p1: a, p2: b }
        } else {
            EndpointPair { p1: b, p2: a }
        }
    }

    pub fn length_px(&self) -> f64 {
        self.p1.distance(&self.p2)
    }
}

/// Target map for an annotation on a `rows x cols` grid.
pub fn make_distance_map(
    annotation: &FemurAnnotation,
    (rows, cols): (usize, usize),
) -> Result<DistanceMap> {
    if annotation.p1 == annotation.p2 {
        return Err(Error::InvalidAnnotation("endpoints coincide".into()));
    }
    annotation.validate((rows, cols))?;
    let (p1, p2) = (annotation.p1, annotation.p2);
    let mut raw = Array2::from_shape_fn((rows, cols), |(r, c)| {
        let q = Point::new(r as f64, c as f64);
        q.distance(&p1).min(q.distance(&p2))
    });
    for p in [p1, p2] {
        let r = (p.row.round().max(0.0) as usize).min(rows - 1);
        let c = (p.col.round().max(0.0) as usize).min(cols - 1);
        raw[[r, c]] = 0.0;
    }
    let max = raw.iter().cloned().fold(0.0f64, f64::max);
    let values = if max > 0.0 {
        raw.mapv(|v| (v / max) as f32)
    } else {
        raw.mapv(|v| v as f32)
    };
    DistanceMap::new(values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostprocessConfig {
    /// Gaussian smoothing width in pixels.
    pub sigma: f64,
    /// Radius of the disk used for the opening of the low-value region.
    pub disk_radius: usize,
    /// Percentile defining the low-value region.
    pub percentile: f64,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            sigma: 2.0,
            disk_radius: 2,
            percentile: 10.0,
        }
    }
}

/// Smooth a predicted map and clean its low-value region.
///
/// After Gaussian smoothing the pixels at or below the configured percentile
/// form the low-value region (the bright region of the inverted map). That
/// region is opened with a disk; pixels removed by the opening are raised to
/// the threshold so they cannot seed spurious basins. The result is
/// re-normalised to [0, 1].
pub fn postprocess_map(map: &DistanceMap, cfg: &PostprocessConfig) -> DistanceMap {
    let (lo, hi) = min_max(&map.values);
    if !(hi > lo) {
        return map.clone();
    }
    let mut smooth = gaussian_blur(&map.values, cfg.sigma);
    let threshold = percentile(smooth.iter().map(|&v| v as f64), cfg.percentile) as f32;
    let low = smooth.mapv(|v| v <= threshold);
    let kept = open(&low, &disk(cfg.disk_radius));
    for ((v, &was_low), &still_low) in smooth.iter_mut().zip(low.iter()).zip(kept.iter()) {
        if was_low && !still_low {
            *v = threshold;
        }
    }
    let (lo, hi) = min_max(&smooth);
    let values = if hi > lo {
        smooth.mapv(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
    } else {
        Array2::zeros(smooth.dim())
    };
    DistanceMap { values }
}

fn min_max(a: &Array2<f32>) -> (f32, f32) {
    a.iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocateConfig {
    pub start_percentile: f64,
    pub percentile_step: f64,
    pub min_percentile: f64,
    pub max_percentile: f64,
    pub disk_radius: usize,
    /// Smallest distance in pixels between two reported endpoints.
    pub min_separation: f64,
    /// Smallest basin depth accepted when a basin has to be split.
    pub min_depth: f32,
}

impl Default for LocateConfig {
    fn default() -> Self {
        LocateConfig {
            start_percentile: 10.0,
            percentile_step: 2.0,
            min_percentile: 2.0,
            max_percentile: 30.0,
            disk_radius: 2,
            min_separation: 3.0,
            min_depth: 0.005,
        }
    }
}

struct Attempt {
    low: Array2<bool>,
    components: Components,
}

fn threshold_attempt(values: &Array2<f32>, q: f64, radius: usize) -> Attempt {
    let t = percentile(values.iter().map(|&v| v as f64), q) as f32;
    let low = values.mapv(|v| v <= t);
    let components = connected_components(&open(&low, &disk(radius)));
    Attempt { low, components }
}

/// Percentiles visited by the sweep: downwards from the start, then upwards.
fn sweep(cfg: &LocateConfig) -> Vec<f64> {
    let mut qs = Vec::new();
    let mut q = cfg.start_percentile;
    while q >= cfg.min_percentile - 1e-9 {
        qs.push(q);
        q -= cfg.percentile_step;
    }
    let mut q = cfg.start_percentile + cfg.percentile_step;
    while q <= cfg.max_percentile + 1e-9 {
        qs.push(q);
        q += cfg.percentile_step;
    }
    qs
}

/// Number of low-value regions found at the starting percentile.
pub fn count_low_regions(map: &DistanceMap, cfg: &LocateConfig) -> usize {
    threshold_attempt(&map.values, cfg.start_percentile, cfg.disk_radius)
        .components
        .count()
}

/// Locate both endpoints on a (post-processed) map, in map pixel coordinates.
pub fn locate_endpoints(map: &DistanceMap, cfg: &LocateConfig) -> Result<EndpointPair> {
    let values = &map.values;
    let dim = values.dim();

    let mut best: Option<Attempt> = None;
    for q in sweep(cfg) {
        let attempt = threshold_attempt(values, q, cfg.disk_radius);
        let n = attempt.components.count();
        let better = best
            .as_ref()
            .is_none_or(|b| n.abs_diff(2) < b.components.count().abs_diff(2));
        if better {
            best = Some(attempt);
        }
        if n == 2 {
            break;
        }
    }
    let best = best.ok_or(Error::EndpointsNotSeparable)?;

    let mut markers = Array2::<u32>::zeros(dim);
    if best.components.count() >= 2 {
        // Keep the two components holding the deepest minima.
        let mut deepest = vec![(f32::INFINITY, (usize::MAX, usize::MAX)); best.components.count()];
        for ((p, &label), &v) in best.components.labels.indexed_iter().zip(values.iter()) {
            if label > 0 {
                let slot = &mut deepest[label as usize - 1];
                if v < slot.0 {
                    *slot = (v, p);
                }
            }
        }
        let mut order: Vec<usize> = (0..deepest.len()).collect();
        order.sort_by(|&a, &b| {
            deepest[a]
                .0
                .total_cmp(&deepest[b].0)
                .then(deepest[a].1.cmp(&deepest[b].1))
        });
        for (new_label, &k) in order.iter().take(2).enumerate() {
            let old = k as u32 + 1;
            for (m, &l) in markers.iter_mut().zip(best.components.labels.iter()) {
                if l == old {
                    *m = new_label as u32 + 1;
                }
            }
        }
    } else {
        // A single basin: split it at its two most significant minima.
        let (a, b) = split_minima(values, &best.low, cfg).ok_or(Error::EndpointsNotSeparable)?;
        markers[a] = 1;
        markers[b] = 2;
    }

    let regions = watershed(values, &markers, &best.low);
    let mut argmin = [None::<(f32, (usize, usize))>; 2];
    for ((p, &label), &v) in regions.indexed_iter().zip(values.iter()) {
        if label == 0 {
            continue;
        }
        let slot = &mut argmin[label as usize - 1];
        // Raster order plus strict comparison keeps the lexicographically smallest tie.
        if slot.is_none_or(|(best_v, _)| v < best_v) {
            *slot = Some((v, p));
        }
    }
    match argmin {
        [Some((_, a)), Some((_, b))] if a != b => Ok(EndpointPair::ordered(
            Point::new(a.0 as f64, a.1 as f64),
            Point::new(b.0 as f64, b.1 as f64),
        )),
        _ => Err(Error::EndpointsNotSeparable),
    }
}

/// Two regional minima inside `within`, the deepest first, separated by at
/// least `min_separation` px and with the second one at least `min_depth`
/// below the saddle joining it to lower ground.
fn split_minima(
    values: &Array2<f32>,
    within: &Array2<bool>,
    cfg: &LocateConfig,
) -> Option<((usize, usize), (usize, usize))> {
    let mut minima = regional_minima(values, within);
    minima.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let (first, _) = *minima.first()?;
    const MAX_CANDIDATES: usize = 64;
    for &(p, v) in minima.iter().skip(1).take(MAX_CANDIDATES) {
        let sep = (p.0 as f64 - first.0 as f64).hypot(p.1 as f64 - first.1 as f64);
        if sep < cfg.min_separation {
            continue;
        }
        if basin_depth(values, within, p, v) >= cfg.min_depth {
            return Some((first, p));
        }
    }
    None
}

/// Rise needed from the minimum at `start` before the flood reaches a lower
/// pixel (its dynamic). Infinite when nothing lower is reachable.
fn basin_depth(
    values: &Array2<f32>,
    within: &Array2<bool>,
    start: (usize, usize),
    level: f32,
) -> f32 {
    let dim = values.dim();
    let mut seen = Array2::from_elem(dim, false);
    let mut heap = BinaryHeap::new();
    heap.push(Reverse((OrderedFloat(level), start)));
    seen[start] = true;
    let mut flood = level;
    while let Some(Reverse((OrderedFloat(v), p))) = heap.pop() {
        flood = flood.max(v);
        if values[p] < level {
            return flood - level;
        }
        for d in NEIGHBORS_8 {
            if let Some(n) = offset(p, d, dim) {
                if within[n] && !seen[n] {
                    seen[n] = true;
                    heap.push(Reverse((OrderedFloat(values[n]), n)));
                }
            }
        }
    }
    f32::INFINITY
}

/// Femur length in centimetres under per-axis spacing.
pub fn femur_length(pair: &EndpointPair, spacing: Spacing) -> Result<f64> {
    px_to_cm(
        PixelMeasure::Vector(pair.p2.row - pair.p1.row, pair.p2.col - pair.p1.col),
        spacing,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ann(p1: (f64, f64), p2: (f64, f64)) -> FemurAnnotation {
        FemurAnnotation::new(Point::new(p1.0, p1.1), Point::new(p2.0, p2.1))
    }

    #[test]
    fn one_row_map() {
        let m = make_distance_map(&ann((0.0, 0.0), (0.0, 4.0)), (1, 5)).unwrap();
        let got: Vec<f32> = m.values.iter().cloned().collect();
        assert_eq!(got, vec![0.0, 0.5, 1.0, 0.5, 0.0]);
    }

    #[test]
    fn map_zero_at_endpoints_and_unit_max() {
        let m = make_distance_map(&ann((10.3, 12.6), (50.0, 70.0)), (64, 96)).unwrap();
        assert_eq!(m.values[[10, 13]], 0.0);
        assert_eq!(m.values[[50, 70]], 0.0);
        let max = m.values.iter().cloned().fold(0.0, f32::max);
        assert_eq!(max, 1.0);
    }

    #[test]
    fn degenerate_annotation_rejected() {
        assert!(make_distance_map(&ann((5.0, 5.0), (5.0, 5.0)), (16, 16)).is_err());
        assert!(make_distance_map(&ann((5.0, 5.0), (40.0, 5.0)), (16, 16)).is_err());
    }

    #[test]
    fn constant_map_is_fixed_point() {
        let m = DistanceMap::new(Array2::from_elem((32, 32), 0.4)).unwrap();
        assert_eq!(postprocess_map(&m, &PostprocessConfig::default()), m);
    }

    fn argmin_in(values: &Array2<f32>, center: (usize, usize), radius: isize) -> (usize, usize) {
        let mut best = (f32::INFINITY, center);
        for dr in -radius..=radius {
            for dc in -radius..=radius {
                if let Some(q) = offset(center, (dr, dc), values.dim()) {
                    if values[q] < best.0 {
                        best = (values[q], q);
                    }
                }
            }
        }
        best.1
    }

    #[test]
    fn smoothing_keeps_minima_within_one_pixel() {
        let m = make_distance_map(&ann((60.0, 40.0), (150.0, 200.0)), (256, 256)).unwrap();
        let p = postprocess_map(&m, &PostprocessConfig::default());
        for e in [(60usize, 40usize), (150, 200)] {
            let found = argmin_in(&p.values, e, 10);
            assert!(found.0.abs_diff(e.0) <= 1 && found.1.abs_diff(e.1) <= 1, "{found:?} vs {e:?}");
        }
    }

    #[test]
    fn noisy_map_yields_two_regions() {
        let m = make_distance_map(&ann((80.0, 50.0), (120.0, 190.0)), (256, 256)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noisy = DistanceMap::new(m.values.mapv(|v| v + rng.gen_range(-0.05f32..0.05))).unwrap();
        let p = postprocess_map(&noisy, &PostprocessConfig::default());
        assert_eq!(count_low_regions(&p, &LocateConfig::default()), 2);
        let pair = locate_endpoints(&p, &LocateConfig::default()).unwrap();
        assert!(pair.p1.distance(&Point::new(80.0, 50.0)) <= 2.0);
        assert!(pair.p2.distance(&Point::new(120.0, 190.0)) <= 2.0);
    }

    #[test]
    fn exact_map_round_trip() {
        let m = make_distance_map(&ann((40.0, 40.0), (40.0, 200.0)), (256, 256)).unwrap();
        let pair = locate_endpoints(&m, &LocateConfig::default()).unwrap();
        assert!(pair.p1.distance(&Point::new(40.0, 40.0)) <= 1.0);
        assert!(pair.p2.distance(&Point::new(40.0, 200.0)) <= 1.0);
    }

    #[test]
    fn close_endpoints_never_duplicate() {
        for (a, b) in [((100.0, 100.0), (100.0, 106.0)), ((50.0, 80.0), (54.0, 84.5))] {
            let m = make_distance_map(&ann(a, b), (256, 256)).unwrap();
            match locate_endpoints(&m, &LocateConfig::default()) {
                Ok(pair) => {
                    let expected = EndpointPair::ordered(Point::new(a.0, a.1), Point::new(b.0, b.1));
                    assert!(pair.p1.distance(&expected.p1) <= 1.0, "{pair:?}");
                    assert!(pair.p2.distance(&expected.p2) <= 1.0, "{pair:?}");
                    assert_ne!(pair.p1, pair.p2);
                }
                Err(e) => assert!(matches!(e, Error::EndpointsNotSeparable)),
            }
        }
    }

    #[test]
    fn single_minimum_is_not_separable() {
        let m = DistanceMap::new(Array2::from_shape_fn((64, 64), |(r, c)| {
            ((r as f32 - 32.0).hypot(c as f32 - 32.0) / 46.0).min(1.0)
        }))
        .unwrap();
        assert!(matches!(
            locate_endpoints(&m, &LocateConfig::default()),
            Err(Error::EndpointsNotSeparable)
        ));
    }

    #[test]
    fn mirrored_map_gives_ordered_pair() {
        let m = make_distance_map(&ann((100.0, 180.0), (100.0, 76.0)), (200, 256)).unwrap();
        let pair = locate_endpoints(&m, &LocateConfig::default()).unwrap();
        assert_eq!(pair.p1, Point::new(100.0, 76.0));
        assert_eq!(pair.p2, Point::new(100.0, 180.0));
    }

    #[test]
    fn femur_length_examples() {
        let iso = |mm| Spacing::isotropic(mm).unwrap();
        let pair = |a: (f64, f64), b: (f64, f64)| EndpointPair {
            p1: Point::new(a.0, a.1),
            p2: Point::new(b.0, b.1),
        };
        assert!((femur_length(&pair((0.0, 0.0), (0.0, 100.0)), iso(0.5)).unwrap() - 5.0).abs() < 1e-12);
        assert!((femur_length(&pair((0.0, 0.0), (30.0, 40.0)), iso(0.2)).unwrap() - 1.0).abs() < 1e-12);
        let aniso = Spacing::new(0.2, 0.1).unwrap();
        assert!((femur_length(&pair((0.0, 0.0), (30.0, 40.0)), aniso).unwrap() - 0.72111).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn map_symmetric_in_endpoints(r1 in 0.0f64..31.0, c1 in 0.0f64..31.0, r2 in 0.0f64..31.0, c2 in 0.0f64..31.0) {
            prop_assume!((r1, c1) != (r2, c2));
            let a = make_distance_map(&ann((r1, c1), (r2, c2)), (32, 32)).unwrap();
            let b = make_distance_map(&ann((r2, c2), (r1, c1)), (32, 32)).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn femur_length_symmetric_and_translation_invariant(
            r1 in -50.0f64..50.0, c1 in -50.0f64..50.0, r2 in -50.0f64..50.0, c2 in -50.0f64..50.0,
            tr in -100.0f64..100.0, tc in -100.0f64..100.0, sr in 0.05f64..1.0, sc in 0.05f64..1.0,
        ) {
            let s = Spacing::new(sr, sc).unwrap();
            let p = |r: f64, c: f64| Point::new(r, c);
            let fwd = femur_length(&EndpointPair { p1: p(r1, c1), p2: p(r2, c2) }, s).unwrap();
            let rev = femur_length(&EndpointPair { p1: p(r2, c2), p2: p(r1, c1) }, s).unwrap();
            let moved = femur_length(&EndpointPair { p1: p(r1 + tr, c1 + tc), p2: p(r2 + tr, c2 + tc) }, s).unwrap();
            prop_assert!((fwd - rev).abs() <= 1e-12);
            prop_assert!((fwd - moved).abs() <= 1e-9 * (1.0 + fwd));
        }

        #[test]
        fn distance_nondecreasing_moving_away(
            r1 in 0.0f64..63.0, c1 in 0.0f64..63.0, r2 in 0.0f64..63.0, c2 in 0.0f64..63.0,
            qr in 0usize..64, qc in 0usize..64, dr in -1isize..=1, dc in -1isize..=1,
        ) {
            prop_assume!((r1, c1) != (r2, c2) && (dr, dc) != (0, 0));
            let a = ann((r1, c1), (r2, c2));
            let m = make_distance_map(&a, (64, 64)).unwrap();
            // A step moves away from both endpoints when it increases the
            // distance to each of them.
            let q = Point::new(qr as f64, qc as f64);
            let Some(n) = offset((qr, qc), (dr, dc), (64, 64)) else { return Ok(()) };
            let np = Point::new(n.0 as f64, n.1 as f64);
            prop_assume!(np.distance(&a.p1) > q.distance(&a.p1) && np.distance(&a.p2) > q.distance(&a.p2));
            prop_assert!(m.values[n] >= m.values[[qr, qc]]);
        }
    }
}
