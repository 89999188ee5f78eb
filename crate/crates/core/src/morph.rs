//! Low-level raster operations: connected components, smoothing, binary
//! morphology, regional minima and marker-controlled watershed.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use ndarray::Array2;

pub const NEIGHBORS_8: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

pub const NEIGHBORS_4: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];

#[inline]
pub(crate) fn offset(
    (r, c): (usize, usize),
    (dr, dc): (isize, isize),
    (rows, cols): (usize, usize),
) -> Option<(usize, usize)> {
    let nr = r as isize + dr;
    let nc = c as isize + dc;
    if nr < 0 || nc < 0 || nr >= rows as isize || nc >= cols as isize {
        None
    } else {
        Some((nr as usize, nc as usize))
    }
}

/// 8-connected component labelling. Label 0 is background; components are
/// numbered from 1 in raster order of their first pixel.
#[derive(Debug, Clone)]
pub struct Components {
    pub labels: Array2<u32>,
    /// `sizes[k]` is the pixel count of label `k + 1`.
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    /// Label of the largest component; ties go to the lower label.
    pub fn largest(&self) -> Option<u32> {
        self.sizes
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i as u32 + 1)
    }

    pub fn mask_of(&self, label: u32) -> Array2<bool> {
        self.labels.mapv(|l| l == label)
    }
}

pub fn connected_components(mask: &Array2<bool>) -> Components {
    let dim = mask.dim();
    let mut labels = Array2::<u32>::zeros(dim);
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for ((r, c), &on) in mask.indexed_iter() {
        if !on || labels[[r, c]] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        let mut size = 0;
        labels[[r, c]] = label;
        queue.push_back((r, c));
        while let Some(p) = queue.pop_front() {
            size += 1;
            for d in NEIGHBORS_8 {
                if let Some(q) = offset(p, d, dim) {
                    if mask[q] && labels[q] == 0 {
                        labels[q] = label;
                        queue.push_back(q);
                    }
                }
            }
        }
        sizes.push(size);
    }
    Components { labels, sizes }
}

/// Separable Gaussian blur with edge replication; kernel truncated at 3 sigma.
pub fn gaussian_blur(src: &Array2<f32>, sigma: f64) -> Array2<f32> {
    if sigma <= 0.0 {
        return src.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (rows, cols) = src.dim();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = Array2::<f32>::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = 0.0f64;
            for (k, w) in kernel.iter().enumerate() {
                let cc = clamp(c as isize + k as isize - radius, cols);
                acc += w * src[[r, cc]] as f64;
            }
            tmp[[r, c]] = acc as f32;
        }
    }
    let mut out = Array2::<f32>::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = 0.0f64;
            for (k, w) in kernel.iter().enumerate() {
                let rr = clamp(r as isize + k as isize - radius, rows);
                acc += w * tmp[[rr, c]] as f64;
            }
            out[[r, c]] = acc as f32;
        }
    }
    out
}

/// Offsets of a discrete disk of the given radius.
pub fn disk(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut offsets = Vec::new();
    for dr in -r..=r {
        for dc in -r..=r {
            if dr * dr + dc * dc <= r * r {
                offsets.push((dr, dc));
            }
        }
    }
    offsets
}

/// Binary erosion; pixels outside the image count as background.
pub fn erode(mask: &Array2<bool>, element: &[(isize, isize)]) -> Array2<bool> {
    let dim = mask.dim();
    Array2::from_shape_fn(dim, |p| {
        mask[p]
            && element
                .iter()
                .all(|&d| offset(p, d, dim).is_some_and(|q| mask[q]))
    })
}

pub fn dilate(mask: &Array2<bool>, element: &[(isize, isize)]) -> Array2<bool> {
    let dim = mask.dim();
    Array2::from_shape_fn(dim, |p| {
        element
            .iter()
            .any(|&(dr, dc)| offset(p, (-dr, -dc), dim).is_some_and(|q| mask[q]))
    })
}

pub fn open(mask: &Array2<bool>, element: &[(isize, isize)]) -> Array2<bool> {
    dilate(&erode(mask, element), element)
}

/// Percentile with linear interpolation between order statistics, `q` in [0, 100].
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty sample");
    let q = q.clamp(0.0, 100.0);
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn percentile(values: impl IntoIterator<Item = f64>, q: f64) -> f64 {
    let mut v: Vec<f64> = values.into_iter().collect();
    v.sort_by(|a, b| a.total_cmp(b));
    percentile_sorted(&v, q)
}

/// Regional minima: maximal 8-connected plateaus with no strictly lower
/// neighbour, restricted to pixels where `within` is true. Each is returned as
/// its lexicographically smallest pixel together with its value.
pub fn regional_minima(
    values: &Array2<f32>,
    within: &Array2<bool>,
) -> Vec<((usize, usize), f32)> {
    let dim = values.dim();
    let mut seen = Array2::from_elem(dim, false);
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for (p, &inside) in within.indexed_iter() {
        if !inside || seen[p] {
            continue;
        }
        let level = values[p];
        let mut is_min = true;
        let mut first = p;
        seen[p] = true;
        stack.push(p);
        while let Some(q) = stack.pop() {
            first = first.min(q);
            for d in NEIGHBORS_8 {
                let Some(n) = offset(q, d, dim) else { continue };
                if !within[n] {
                    continue;
                }
                let v = values[n];
                if v < level {
                    is_min = false;
                } else if v == level && !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            }
        }
        if is_min {
            out.push((first, level));
        }
    }
    out
}

#[derive(Debug, PartialEq)]
struct Flood {
    value: f32,
    order: u64,
    pos: (usize, usize),
}

impl Eq for Flood {}

impl Ord for Flood {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on value, FIFO among equal values.
        other
            .value
            .total_cmp(&self.value)
            .then(other.order.cmp(&self.order))
    }
}

impl PartialOrd for Flood {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Marker-controlled watershed by priority flooding (8-connectivity).
///
/// `markers` holds labels > 0 for seed pixels. Flooding is restricted to
/// pixels where `within` is true; unreachable pixels keep label 0.
pub fn watershed(
    values: &Array2<f32>,
    markers: &Array2<u32>,
    within: &Array2<bool>,
) -> Array2<u32> {
    let dim = values.dim();
    let mut labels = markers.clone();
    let mut heap = BinaryHeap::new();
    let mut order = 0u64;
    for (p, &l) in markers.indexed_iter() {
        if l == 0 {
            continue;
        }
        for d in NEIGHBORS_8 {
            if let Some(n) = offset(p, d, dim) {
                if labels[n] == 0 && within[n] {
                    heap.push(Flood {
                        value: values[n],
                        order,
                        pos: n,
                    });
                    order += 1;
                }
            }
        }
    }
    while let Some(Flood { pos, .. }) = heap.pop() {
        if labels[pos] != 0 {
            continue;
        }
        // Take the label of the labelled neighbour with the lowest value.
        let mut best: Option<(f32, u32)> = None;
        for d in NEIGHBORS_8 {
            if let Some(n) = offset(pos, d, dim) {
                let l = labels[n];
                if l != 0 && best.is_none_or(|(v, _)| values[n] < v) {
                    best = Some((values[n], l));
                }
            }
        }
        let Some((_, label)) = best else { continue };
        labels[pos] = label;
        for d in NEIGHBORS_8 {
            if let Some(n) = offset(pos, d, dim) {
                if labels[n] == 0 && within[n] {
                    heap.push(Flood {
                        value: values[n].max(values[pos]),
                        order,
                        pos: n,
                    });
                    order += 1;
                }
            }
        }
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn components_counted_with_diagonals() {
        let mut m = Array2::from_elem((6, 6), false);
        m[[0, 0]] = true;
        m[[1, 1]] = true; // diagonal neighbour: same component
        m[[4, 4]] = true;
        let cc = connected_components(&m);
        assert_eq!(cc.count(), 2);
        assert_eq!(cc.sizes, vec![2, 1]);
        assert_eq!(cc.largest(), Some(1));
    }

    #[test]
    fn blur_preserves_constant() {
        let a = Array2::from_elem((10, 12), 0.37f32);
        let b = gaussian_blur(&a, 2.0);
        assert!(b.iter().all(|&v| (v - 0.37).abs() < 1e-6));
    }

    #[test]
    fn opening_removes_small_islands() {
        let mut m = Array2::from_elem((30, 30), false);
        for r in 5..20 {
            for c in 5..20 {
                m[[r, c]] = true;
            }
        }
        m[[25, 25]] = true;
        let o = open(&m, &disk(2));
        assert!(!o[[25, 25]]);
        assert!(o[[12, 12]]);
    }

    #[test]
    fn percentile_interpolates() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((percentile_sorted(&v, 50.0) - 50.5).abs() < 1e-12);
        assert!((percentile_sorted(&v, 95.0) - 95.05).abs() < 1e-12);
        assert_eq!(percentile_sorted(&[4.0], 30.0), 4.0);
    }

    #[test]
    fn watershed_splits_two_basins() {
        // Two cones on a row, ridge in the middle.
        let a = Array2::from_shape_fn((5, 21), |(r, c)| {
            let d1 = ((r as f32 - 2.0).powi(2) + (c as f32 - 3.0).powi(2)).sqrt();
            let d2 = ((r as f32 - 2.0).powi(2) + (c as f32 - 17.0).powi(2)).sqrt();
            d1.min(d2)
        });
        let mut markers = Array2::zeros((5, 21));
        markers[[2, 3]] = 1;
        markers[[2, 17]] = 2;
        let labels = watershed(&a, &markers, &Array2::from_elem((5, 21), true));
        assert!(labels.iter().all(|&l| l != 0));
        assert_eq!(labels[[2, 0]], 1);
        assert_eq!(labels[[2, 20]], 2);
        assert_eq!(labels[[0, 8]], 1);
        assert_eq!(labels[[4, 12]], 2);
    }

    #[test]
    fn regional_minima_found_on_plateau() {
        let mut a = Array2::from_elem((5, 5), 1.0f32);
        a[[1, 1]] = 0.0;
        a[[1, 2]] = 0.0;
        a[[4, 4]] = 0.5;
        let mins = regional_minima(&a, &Array2::from_elem((5, 5), true));
        assert_eq!(mins, vec![((1, 1), 0.0), ((4, 4), 0.5)]);
    }
}
