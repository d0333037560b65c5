//! Location likelihood of one band and its local maxima.

use std::f64::consts::TAU;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::calibration::CalibrationBundle;
use crate::phasemodel::{range_phase, wrap, PhaseDifferences};
use crate::scene::{tx_position_at, Band};
use crate::{Error, Result, Vec3};

pub const DEFAULT_SIGMA_DEG: f64 = 15.0;
/// Grid step as a fraction of the wavelength.
pub const GRID_STEP_FRACTION: f64 = 1.0 / 20.0;
/// Search-box half-extent in units of the local peak spacing.
pub const BOX_FACTOR: f64 = 1.2;
/// RMS residual (per pair) beyond which a local maximum counts as weak.
pub const PEAK_FLOOR_DEG: f64 = 60.0;
/// Peak refinement stops once the probe step falls below `step / REFINE_DIVISOR`.
pub const REFINE_DIVISOR: f64 = 1024.0;
const MAX_HALVINGS: usize = 20;
/// Grids at least this large are evaluated in parallel.
const PARALLEL_MIN_POINTS: usize = 4096;

/// Number of wrap terms on each side of the main lobe.
pub fn truncation_terms(sigma: f64) -> i64 {
    (4.0 * sigma / TAU).ceil() as i64 + 1
}

/// Log density of a wrapped normal, summing `2m + 1` shifted lobes.
pub fn wrapped_gaussian_logpdf_terms(residual: f64, sigma: f64, m: i64) -> f64 {
    let r = wrap(residual);
    let norm = -(sigma * (TAU).sqrt()).ln();
    let inv = 1.0 / (2.0 * sigma * sigma);
    let head = -r * r * inv;
    let sum: f64 = (-m..=m)
        .filter(|&i| i != 0)
        .map(|i| {
            let s = r + TAU * i as f64;
            (-s * s * inv - head).exp()
        })
        .sum();
    norm + head + sum.ln_1p()
}

/// Log density of a zero-mean wrapped normal at `residual`.
pub fn wrapped_gaussian_logpdf(residual: f64, sigma: f64) -> f64 {
    wrapped_gaussian_logpdf_terms(residual, sigma, truncation_terms(sigma))
}

/// Axis-aligned search box sampled on a regular grid that contains the centre.
/// A zero vertical half-extent gives a planar box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchBox {
    pub center: Vec3,
    pub half_extent: Vec3,
    pub step: f64,
}

impl SearchBox {
    fn half_count(&self, axis: usize) -> usize {
        (self.half_extent[axis] / self.step + 1e-9).floor() as usize
    }

    /// Grid coordinates along one axis.
    pub fn axis(&self, axis: usize) -> Vec<f64> {
        let h = self.half_count(axis) as i64;
        (-h..=h).map(|i| self.center[axis] + i as f64 * self.step).collect()
    }

    pub fn is_planar(&self) -> bool {
        self.half_count(2) == 0
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| (p[a] - self.center[a]).abs() <= self.half_extent[a] + 1e-12)
    }

    fn clamp(&self, p: Vec3) -> Vec3 {
        Vec3::from_fn(|a, _| p[a].clamp(self.center[a] - self.half_extent[a], self.center[a] + self.half_extent[a]))
    }
}

#[derive(Debug, Clone)]
pub struct LikelihoodQuery<'a> {
    pub band: &'a Band,
    pub deltas: &'a PhaseDifferences,
    pub heading: f64,
    pub calibration: Option<&'a CalibrationBundle>,
    pub sigma: f64,
    pub search_box: SearchBox,
    /// Weak-peak floor as an RMS residual angle; `f64::INFINITY` keeps every peak strong.
    pub peak_floor: f64,
}

impl LikelihoodQuery<'_> {
    pub fn validate(&self) -> Result<()> {
        let v = |m: &str| Err(Error::Validation(m.to_string()));
        if !(self.sigma > 0.0) {
            return v("likelihood sigma must be positive");
        }
        if !(self.search_box.step > 0.0) {
            return v("grid step must be positive");
        }
        if self.search_box.half_count(0) == 0 || self.search_box.half_count(1) == 0 {
            return v("search box must contain at least 2x2 grid points");
        }
        if self.deltas.band_index != self.band.index || self.deltas.deltas.len() + 1 != self.band.n_anchors() {
            return Err(Error::BandMismatch(format!(
                "deltas for band {} do not match band {}",
                self.deltas.band_index, self.band.index
            )));
        }
        if let Some(c) = self.calibration {
            if c.band_index != self.band.index || c.surfaces.len() != self.deltas.deltas.len() {
                return Err(Error::BandMismatch(format!("calibration for band {} does not match band {}", c.band_index, self.band.index)));
            }
        }
        Ok(())
    }

    fn weak_margin(&self) -> f64 {
        let n = self.deltas.deltas.len() as f64;
        n * self.peak_floor * self.peak_floor / (2.0 * self.sigma * self.sigma)
    }
}

/// Log-likelihood of the observed deltas for a target at `x`.
pub fn log_likelihood(q: &LikelihoodQuery, x: &Vec3) -> f64 {
    let b = q.band;
    let xk = tx_position_at(x, q.heading, b);
    let dref = (b.anchors[b.reference_index] - xk).norm();
    let gamma = q.calibration.map(|c| c.query(&xk));
    b.non_reference()
        .enumerate()
        .map(|(p, n)| {
            let dn = (b.anchors[n] - xk).norm();
            let g = gamma.as_ref().map_or(0.0, |g| g[p]);
            let omega = range_phase(b.carrier_hz, dn - dref) + g;
            wrapped_gaussian_logpdf(omega - q.deltas.deltas[p], q.sigma)
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub position: Vec3,
    pub loglik: f64,
    /// Within the weak-peak floor of the best peak in the box.
    pub strong: bool,
}

#[derive(Debug, Clone)]
pub struct LikelihoodField {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub zs: Vec<f64>,
    /// Row-major: `values[(iz * ys.len() + iy) * xs.len() + ix]`.
    pub values: Vec<f64>,
    /// Sorted by descending log-likelihood.
    pub peaks: Vec<Peak>,
    pub calibration_out_of_hull: bool,
}

impl LikelihoodField {
    pub fn value(&self, ix: usize, iy: usize, iz: usize) -> f64 {
        self.values[(iz * self.ys.len() + iy) * self.xs.len() + ix]
    }

    pub fn strong_peaks(&self) -> impl Iterator<Item = &Peak> {
        self.peaks.iter().filter(|p| p.strong)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let planar = self.zs.len() == 1;
        writeln!(w, "{}", if planar { "x,y,loglik" } else { "x,y,z,loglik" })?;
        for (iz, z) in self.zs.iter().enumerate() {
            for (iy, y) in self.ys.iter().enumerate() {
                for (ix, x) in self.xs.iter().enumerate() {
                    let v = self.value(ix, iy, iz);
                    if planar {
                        writeln!(w, "{x},{y},{v}")?;
                    } else {
                        writeln!(w, "{x},{y},{z},{v}")?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Evaluate the field on the query grid and list its refined local maxima.
pub fn evaluate_field(q: &LikelihoodQuery) -> Result<LikelihoodField> {
    q.validate()?;
    let sb = &q.search_box;
    let (xs, ys, zs) = (sb.axis(0), sb.axis(1), sb.axis(2));
    let (nx, ny, nz) = (xs.len(), ys.len(), zs.len());
    let mut values = vec![0.0; nx * ny * nz];
    let fill_row = |row: usize, out: &mut [f64]| {
        let (iz, iy) = (row / ny, row % ny);
        for (ix, v) in out.iter_mut().enumerate() {
            *v = log_likelihood(q, &Vec3::new(xs[ix], ys[iy], zs[iz]));
        }
    };
    if values.len() >= PARALLEL_MIN_POINTS {
        values.par_chunks_mut(nx).enumerate().for_each(|(r, out)| fill_row(r, out));
    } else {
        values.chunks_mut(nx).enumerate().for_each(|(r, out)| fill_row(r, out));
    }
    let at = |ix: usize, iy: usize, iz: usize| values[(iz * ny + iy) * nx + ix];
    let zr: Vec<i64> = if nz > 1 { vec![-1, 0, 1] } else { vec![0] };
    let mut grid_peaks = Vec::new();
    for iz in 0..nz {
        if nz > 1 && (iz == 0 || iz == nz - 1) {
            continue;
        }
        for iy in 1..ny - 1 {
            'cell: for ix in 1..nx - 1 {
                let v = at(ix, iy, iz);
                for &dz in &zr {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            if dx == 0 && dy == 0 && dz == 0 {
                                continue;
                            }
                            let u = at((ix as i64 + dx) as usize, (iy as i64 + dy) as usize, (iz as i64 + dz) as usize);
                            if !(v > u) {
                                continue 'cell;
                            }
                        }
                    }
                }
                grid_peaks.push((Vec3::new(xs[ix], ys[iy], zs[iz]), v));
            }
        }
    }
    if grid_peaks.is_empty() {
        return Err(Error::NoPeak(format!("no interior local maximum in the band {} search box", q.band.index)));
    }
    let dims = if nz > 1 { 3 } else { 2 };
    let mut peaks: Vec<Peak> = grid_peaks
        .into_iter()
        .map(|(p, v)| {
            let (position, loglik) = refine_peak(q, p, v, dims);
            Peak { position, loglik, strong: true }
        })
        .collect();
    peaks.sort_by(|a, b| b.loglik.total_cmp(&a.loglik).then_with(|| lex(&a.position, &b.position)));
    let best = peaks[0].loglik;
    let margin = q.weak_margin();
    for p in &mut peaks {
        p.strong = p.loglik >= best - margin;
    }
    let calibration_out_of_hull = q.calibration.is_some_and(|c| {
        let xk = tx_position_at(&sb.center, q.heading, q.band);
        !c.inside_hull(&xk)
    });
    Ok(LikelihoodField { xs, ys, zs, values, peaks, calibration_out_of_hull })
}

pub(crate) fn lex(a: &Vec3, b: &Vec3) -> std::cmp::Ordering {
    a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)).then(a.z.total_cmp(&b.z))
}

/// Hooke–Jeeves pattern search: coordinate probes with a halving step plus
/// pattern moves along the last successful displacement, kept inside the box.
fn refine_peak(q: &LikelihoodQuery, start: Vec3, start_val: f64, dims: usize) -> (Vec3, f64) {
    let sb = &q.search_box;
    let f = |p: &Vec3| log_likelihood(q, p);
    let explore = |p: Vec3, v: f64, h: f64| {
        let (mut p, mut v) = (p, v);
        for a in 0..dims {
            for s in [1.0, -1.0] {
                let mut c = p;
                c[a] += s * h;
                let c = sb.clamp(c);
                let cv = f(&c);
                if cv > v {
                    p = c;
                    v = cv;
                    break;
                }
            }
        }
        (p, v)
    };
    let (mut base, mut bv) = (start, start_val);
    let mut h = sb.step / 2.0;
    let stop = sb.step / REFINE_DIVISOR;
    let mut halvings = 0;
    let mut budget = 4000usize;
    while h >= stop && halvings <= MAX_HALVINGS && budget > 0 {
        let (n, nv) = explore(base, bv, h);
        budget = budget.saturating_sub(2 * dims);
        if nv > bv {
            // Pattern moves while they keep paying off.
            let (mut prev, mut cur, mut cv) = (base, n, nv);
            while budget > 0 {
                let jump = sb.clamp(cur + (cur - prev));
                let (t, tv) = explore(jump, f(&jump), h);
                budget = budget.saturating_sub(2 * dims + 1);
                if tv > cv {
                    prev = cur;
                    cur = t;
                    cv = tv;
                } else {
                    break;
                }
            }
            base = cur;
            bv = cv;
        } else {
            h /= 2.0;
            halvings += 1;
        }
    }
    (base, bv)
}

/// Distance to the nearest strong neighbouring peak of a band near `x`,
/// predicted from anchor geometry.
///
/// Linearizes the differential ranges around `x`: with `G` the gradient
/// matrix (one row per non-reference anchor), displacements `v` with
/// `G·v ≈ λ·i` for an integer vector `i` are the other peaks. The candidate
/// for each `i` is the least-squares `v`, kept if its RMS phase residual stays
/// within `floor`. Returns `None` when no candidate is found.
pub fn estimate_peak_spacing(band: &Band, x: &Vec3, heading: f64, planar: bool, floor: f64) -> Option<f64> {
    let xk = tx_position_at(x, heading, band);
    let unit = |a: &Vec3| {
        let d = xk - a;
        d / d.norm()
    };
    let uref = unit(&band.anchors[band.reference_index]);
    let rows: Vec<Vec3> = band.non_reference().map(|n| unit(&band.anchors[n]) - uref).collect();
    let m = rows.len();
    let dims = if planar { 2 } else { 3 };
    let g = DMatrix::from_fn(m, dims, |r, c| rows[r][c]);
    let pinv = g.clone().pseudo_inverse(1e-12).ok()?;
    let lambda = band.wavelength();
    let range: i64 = match m {
        0..=4 => 3,
        5..=6 => 2,
        _ => 1,
    };
    let limit = m as f64 * floor * floor;
    let mut best: Option<f64> = None;
    let mut idx = vec![-range; m];
    loop {
        if idx.iter().any(|&i| i != 0) {
            let target = DVector::from_iterator(m, idx.iter().map(|&i| lambda * i as f64));
            let v = &pinv * &target;
            let res = &g * &v - &target;
            let ss: f64 = res.iter().map(|r| (TAU * r / lambda).powi(2)).sum();
            if ss <= limit {
                let d = v.norm();
                if best.is_none_or(|b| d < b) {
                    best = Some(d);
                }
            }
        }
        let mut j = 0;
        loop {
            if j == m {
                return best;
            }
            idx[j] += 1;
            if idx[j] <= range {
                break;
            }
            idx[j] = -range;
            j += 1;
        }
    }
}

/// Default search box of a band centred at `center`.
pub fn default_search_box(band: &Band, center: &Vec3, heading: f64, planar: bool, floor: f64, box_factor: f64) -> SearchBox {
    let lambda = band.wavelength();
    let spacing = estimate_peak_spacing(band, center, heading, planar, floor).unwrap_or(2.0 * lambda);
    let half = box_factor * spacing;
    SearchBox {
        center: *center,
        half_extent: Vec3::new(half, half, if planar { 0.0 } else { half }),
        step: lambda * GRID_STEP_FRACTION,
    }
}
