//! Calibration surfaces: scattered-point phase unwrapping and LOESS fitting.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::TAU;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::phasemodel::{geometric_deltas, wrap, PhaseDifferences};
use crate::scene::{tx_antenna_position, Band, Pose};
use crate::{Error, Result, Vec3};

pub const DEFAULT_SPAN: f64 = 0.5;
pub const DEFAULT_DEGREE: usize = 1;
/// Neighbour count of the unwrapping graph.
pub const UNWRAP_NEIGHBOURS: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationPointSet {
    pub band_index: usize,
    /// TX antenna locations in the target plane.
    pub locations: Vec<[f64; 2]>,
    /// `residuals[pair][point]`, wrapped, one list per non-reference anchor.
    pub residuals: Vec<Vec<f64>>,
}

/// Wrapped residuals between measured and geometric phase differences.
pub fn compute_residuals(band: &Band, points: &[(Pose, PhaseDifferences)]) -> Result<CalibrationPointSet> {
    let pairs = band.n_anchors() - 1;
    let mut residuals = vec![Vec::with_capacity(points.len()); pairs];
    let mut locations = Vec::with_capacity(points.len());
    for (i, (pose, d)) in points.iter().enumerate() {
        if d.band_index != band.index || d.deltas.len() != pairs {
            return Err(Error::BandMismatch(format!(
                "calibration point {i}: observation for band {} with {} deltas, expected band {} with {pairs}",
                d.band_index,
                d.deltas.len(),
                band.index
            )));
        }
        let x = tx_antenna_position(pose, band);
        let g = geometric_deltas(band, &x);
        for (p, (m, g)) in d.deltas.iter().zip(&g).enumerate() {
            residuals[p].push(wrap(m - g));
        }
        locations.push([x.x, x.y]);
    }
    Ok(CalibrationPointSet { band_index: band.index, locations, residuals })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Unwrapped {
    pub values: Vec<f64>,
    /// Graph cycles whose wrapped differences do not sum to zero.
    pub inconsistent_cycles: usize,
}

#[derive(PartialEq)]
struct Edge(f64, usize, usize);
impl Eq for Edge {}
impl PartialOrd for Edge {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Edge {
    // Min-heap on length, then indices for determinism.
    fn cmp(&self, o: &Self) -> Ordering {
        o.0.total_cmp(&self.0).then_with(|| o.1.cmp(&self.1)).then_with(|| o.2.cmp(&self.2))
    }
}

fn dist2(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn knn_graph(points: &[[f64; 2]], k: usize) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut adj = vec![Vec::new(); n];
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| dist2(&points[i], &points[a]).total_cmp(&dist2(&points[i], &points[b])).then(a.cmp(&b)));
        for &j in others.iter().take(k) {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    for a in &mut adj {
        a.sort_unstable();
        a.dedup();
    }
    adj
}

/// Unwrap phases sampled at scattered points.
///
/// Builds the k-nearest-neighbour graph, grows a minimum spanning tree (by
/// edge length) from the first point and integrates shortest-arc differences
/// along it. The first point keeps its value. Disconnected graph components
/// are joined by their shortest connecting edge. Assumes true neighbour
/// differences stay below π.
pub fn unwrap_scattered(points: &[[f64; 2]], wrapped: &[f64]) -> Result<Unwrapped> {
    let n = points.len();
    if n != wrapped.len() {
        return Err(Error::Validation("unwrap: points and values differ in length".into()));
    }
    if n == 0 {
        return Err(Error::EmptyInput("unwrap: no points".into()));
    }
    let adj = knn_graph(points, UNWRAP_NEIGHBOURS);
    let mut values = vec![f64::NAN; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    let mut tree = vec![usize::MAX; n];
    let visit = |i: usize, done: &mut Vec<bool>, heap: &mut BinaryHeap<Edge>| {
        done[i] = true;
        for &j in &adj[i] {
            if !done[j] {
                heap.push(Edge(dist2(&points[i], &points[j]), i, j));
            }
        }
    };
    values[0] = wrapped[0];
    visit(0, &mut done, &mut heap);
    let mut remaining = n - 1;
    while remaining > 0 {
        let (p, c) = match heap.pop() {
            Some(Edge(_, p, c)) if !done[c] => (p, c),
            Some(_) => continue,
            None => {
                // Join the nearest unvisited point.
                let mut best = (f64::INFINITY, 0, 0);
                for i in (0..n).filter(|&i| done[i]) {
                    for j in (0..n).filter(|&j| !done[j]) {
                        let d = dist2(&points[i], &points[j]);
                        if d < best.0 {
                            best = (d, i, j);
                        }
                    }
                }
                (best.1, best.2)
            }
        };
        let approx = values[p] + wrap(wrapped[c] - wrapped[p]);
        // Keep the result exactly congruent to the input.
        values[c] = wrapped[c] + TAU * ((approx - wrapped[c]) / TAU).round();
        tree[c] = p;
        remaining -= 1;
        visit(c, &mut done, &mut heap);
    }
    let mut inconsistent_cycles = 0;
    for i in 0..n {
        for &j in adj[i].iter().filter(|&&j| j > i) {
            if tree[j] == i || tree[i] == j {
                continue;
            }
            if ((values[j] - values[i]) - wrap(wrapped[j] - wrapped[i])).abs() > 1e-6 {
                inconsistent_cycles += 1;
            }
        }
    }
    Ok(Unwrapped { values, inconsistent_cycles })
}

/// Result of one LOESS query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoessEval {
    pub value: f64,
    /// The local fit was rank deficient and fell back to a weighted mean.
    pub rank_deficient: bool,
    /// The query lies outside the convex hull of the training points.
    pub extrapolated: bool,
}

/// One fitted correction surface (per anchor pair).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSurface {
    pub points: Vec<[f64; 2]>,
    /// Training values after mean removal.
    pub values: Vec<f64>,
    pub span: f64,
    pub degree: usize,
    pub mean_offset: f64,
    #[serde(skip)]
    hull: Vec<[f64; 2]>,
}

fn n_coefficients(degree: usize) -> usize {
    match degree {
        0 => 1,
        1 => 3,
        _ => 6,
    }
}

fn cross(o: &[f64; 2], a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Counter-clockwise convex hull (monotone chain).
fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut p = points.to_vec();
    p.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    p.dedup();
    if p.len() < 3 {
        return p;
    }
    let mut h: Vec<[f64; 2]> = Vec::with_capacity(2 * p.len());
    for pass in 0..2 {
        let start = h.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 { Box::new(p.iter()) } else { Box::new(p.iter().rev()) };
        for q in iter {
            while h.len() >= start + 2 && cross(&h[h.len() - 2], &h[h.len() - 1], q) <= 0.0 {
                h.pop();
            }
            h.push(*q);
        }
        h.pop();
    }
    h
}

fn inside_hull(hull: &[[f64; 2]], q: &[f64; 2]) -> bool {
    if hull.len() < 3 {
        return false;
    }
    (0..hull.len()).all(|i| cross(&hull[i], &hull[(i + 1) % hull.len()], q) >= -1e-12)
}

impl CalibrationSurface {
    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    fn ensure_hull(&mut self) {
        if self.hull.is_empty() {
            self.hull = convex_hull(&self.points);
        }
    }

    pub fn inside_hull(&self, q: &[f64; 2]) -> bool {
        if self.hull.is_empty() {
            return inside_hull(&convex_hull(&self.points), q);
        }
        inside_hull(&self.hull, q)
    }

    /// Value of the surface at `q` with fit diagnostics.
    pub fn query_detail(&self, q: &[f64; 2]) -> LoessEval {
        let n = self.points.len();
        let p = n_coefficients(self.degree);
        let k = ((self.span * n as f64).ceil() as usize).clamp((p + 1).min(n), n);
        let mut idx: Vec<(f64, usize)> = self.points.iter().enumerate().map(|(i, x)| (dist2(x, q), i)).collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < n {
            idx.select_nth_unstable_by(k - 1, cmp);
            idx.truncate(k);
        }
        idx.sort_by(cmp);
        let dmax = idx.last().map(|x| x.0.sqrt()).unwrap_or(0.0);
        let weights: Vec<f64> = idx
            .iter()
            .map(|&(d2, _)| {
                if dmax <= 0.0 {
                    return 1.0;
                }
                let u = (d2.sqrt() / dmax).min(1.0);
                (1.0 - u * u * u).powi(3)
            })
            .collect();
        let extrapolated = !self.inside_hull(q);
        let wsum: f64 = weights.iter().sum();
        let mean_fallback = |rank_deficient| {
            let v = if wsum > 0.0 {
                idx.iter().zip(&weights).map(|(&(_, i), w)| w * self.values[i]).sum::<f64>() / wsum
            } else {
                idx.iter().map(|&(_, i)| self.values[i]).sum::<f64>() / idx.len() as f64
            };
            LoessEval { value: v + self.mean_offset, rank_deficient, extrapolated }
        };
        if p == 1 {
            return mean_fallback(false);
        }
        // Weighted least squares in coordinates centred on the query, scaled by dmax.
        let scale = if dmax > 0.0 { dmax } else { 1.0 };
        let mut a = DMatrix::<f64>::zeros(idx.len(), p);
        let mut b = DVector::<f64>::zeros(idx.len());
        for (r, (&(_, i), w)) in idx.iter().zip(&weights).enumerate() {
            let sw = w.sqrt();
            let u = (self.points[i][0] - q[0]) / scale;
            let v = (self.points[i][1] - q[1]) / scale;
            let row = [1.0, u, v, u * u, u * v, v * v];
            for c in 0..p {
                a[(r, c)] = sw * row[c];
            }
            b[r] = sw * self.values[i];
        }
        let svd = a.svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if !(smax > 0.0) || smin < 1e-8 * smax {
            return mean_fallback(true);
        }
        match svd.solve(&b, 0.0) {
            Ok(c) => LoessEval { value: c[0] + self.mean_offset, rank_deficient: false, extrapolated },
            Err(_) => mean_fallback(true),
        }
    }

    pub fn query(&self, q: &[f64; 2]) -> f64 {
        self.query_detail(q).value
    }
}

/// Local regression surface through `values` at `points`, with the mean
/// removed before the fit and re-added to every query.
pub fn fit_loess(points: &[[f64; 2]], values: &[f64], span: f64, degree: usize) -> Result<CalibrationSurface> {
    if points.len() != values.len() {
        return Err(Error::Validation("LOESS: points and values differ in length".into()));
    }
    if !(span > 0.0 && span <= 1.0) {
        return Err(Error::Validation(format!("LOESS span {span} must be in (0, 1]")));
    }
    if degree > 2 {
        return Err(Error::Validation(format!("LOESS degree {degree} must be 0, 1 or 2")));
    }
    let p = n_coefficients(degree);
    if (points.len() as f64) * span < p as f64 || points.len() <= p {
        return Err(Error::Validation(format!(
            "LOESS needs more than {p} points inside the span (have {} with span {span})",
            points.len()
        )));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let mut s = CalibrationSurface {
        points: points.to_vec(),
        values: values.iter().map(|v| v - mean).collect(),
        span,
        degree,
        mean_offset: mean,
        hull: Vec::new(),
    };
    s.ensure_hull();
    Ok(s)
}

/// Correction surfaces of one band, one per non-reference anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBundle {
    pub band_index: usize,
    pub surfaces: Vec<CalibrationSurface>,
    /// Cycles flagged by the unwrapping consistency check, per pair.
    #[serde(default)]
    pub inconsistent_cycles: Vec<usize>,
}

impl CalibrationBundle {
    /// Correction for every pair at TX antenna location `x`.
    pub fn query(&self, x: &Vec3) -> Vec<f64> {
        self.surfaces.iter().map(|s| s.query(&[x.x, x.y])).collect()
    }

    pub fn inside_hull(&self, x: &Vec3) -> bool {
        self.surfaces.iter().all(|s| s.inside_hull(&[x.x, x.y]))
    }

    fn rebuild(&mut self) {
        for s in &mut self.surfaces {
            s.ensure_hull();
        }
    }
}

/// Unwrap, remove the mean, fit LOESS and keep the mean, for each pair.
pub fn build_calibration(band: &Band, set: &CalibrationPointSet, span: f64, degree: usize) -> Result<CalibrationBundle> {
    if set.band_index != band.index || set.residuals.len() != band.n_anchors() - 1 {
        return Err(Error::BandMismatch(format!(
            "point set for band {} with {} pairs does not match band {}",
            set.band_index,
            set.residuals.len(),
            band.index
        )));
    }
    if set.locations.len() < 4 {
        return Err(Error::Validation(format!("calibration needs at least 4 points, got {}", set.locations.len())));
    }
    let mut surfaces = Vec::with_capacity(set.residuals.len());
    let mut inconsistent = Vec::with_capacity(set.residuals.len());
    for r in &set.residuals {
        let u = unwrap_scattered(&set.locations, r)?;
        surfaces.push(fit_loess(&set.locations, &u.values, span, degree)?);
        inconsistent.push(u.inconsistent_cycles);
    }
    Ok(CalibrationBundle { band_index: band.index, surfaces, inconsistent_cycles: inconsistent })
}

/// Delay-correction surfaces of the TDoA baseline (no unwrapping).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdoaCalibration {
    pub band_index: usize,
    pub surfaces: Vec<CalibrationSurface>,
}

impl TdoaCalibration {
    /// Delay correction, seconds, per pair.
    pub fn query(&self, x: &Vec3) -> Vec<f64> {
        self.surfaces.iter().map(|s| s.query(&[x.x, x.y])).collect()
    }
}

/// Fit one LOESS surface per pair to delay residuals (seconds).
pub fn calibrate_tdoa(
    band_index: usize,
    locations: &[[f64; 2]],
    residual_delays: &[Vec<f64>],
    span: f64,
    degree: usize,
) -> Result<TdoaCalibration> {
    let surfaces = residual_delays.iter().map(|r| fit_loess(locations, r, span, degree)).collect::<Result<_>>()?;
    Ok(TdoaCalibration { band_index, surfaces })
}

pub fn save_bundles(path: &Path, bundles: &[CalibrationBundle]) -> Result<()> {
    let text = serde_json::to_string_pretty(bundles).map_err(|e| Error::Output(e.to_string()))?;
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

pub fn load_bundles(path: &Path) -> Result<Vec<CalibrationBundle>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    let mut b: Vec<CalibrationBundle> =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    for x in &mut b {
        x.rebuild();
    }
    Ok(b)
}

/// First `n` points of the Halton (2, 3) sequence mapped onto the area,
/// inset by `margin` on every side.
pub fn halton_points(area: &crate::scene::Area, n: usize, margin: f64) -> Vec<[f64; 2]> {
    fn radical_inverse(mut i: usize, base: usize) -> f64 {
        let (mut f, mut r) = (1.0, 0.0);
        while i > 0 {
            f /= base as f64;
            r += f * (i % base) as f64;
            i /= base;
        }
        r
    }
    let [x0, y0] = area.origin_m;
    (1..=n)
        .map(|i| {
            [
                x0 + margin + radical_inverse(i, 2) * (area.x_m - 2.0 * margin),
                y0 + margin + radical_inverse(i, 3) * (area.y_m - 2.0 * margin),
            ]
        })
        .collect()
}
