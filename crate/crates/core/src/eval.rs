//! Monte-Carlo experiment harness and summary statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use crate::baseline::{collect_tdoa_calibration, run_baseline, BaselineConfig, BaselineStep, TrajectoryPoint};
use crate::calibration::{build_calibration, compute_residuals, halton_points, CalibrationBundle, DEFAULT_DEGREE, DEFAULT_SPAN};
use crate::phasemodel::{observation_deltas, simulate_observation};
use crate::refine::{refine, RefineConfig, StageFlags};
use crate::rng::{domain, stream};
use crate::scene::{Pose, Scene};
use crate::{Error, Result, Vec3};

/// Percentile convention written into every summary.
pub const PERCENTILE_CONVENTION: &str =
    "linear interpolation between order statistics: p-quantile at 0-based rank (n-1)*p";

/// Truth plus an isotropic planar Gaussian displacement whose norm has median
/// `eps` (Rayleigh median `σ·√(2 ln 2)`, so `σ = eps / √(2 ln 2)` per axis).
pub fn synth_initial_estimate<R: Rng + ?Sized>(truth: &Vec3, eps: f64, rng: &mut R) -> Vec3 {
    if eps <= 0.0 {
        return *truth;
    }
    let s = eps / (2.0 * std::f64::consts::LN_2).sqrt();
    let n = Normal::new(0.0, s).expect("finite sigma");
    truth + Vec3::new(n.sample(rng), n.sample(rng), 0.0)
}

/// One combination of the swept parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub eps_mm: f64,
    pub sigma_p_deg: f64,
    pub sigma_o_deg: f64,
    /// Calibration points; 0 runs without a calibration surface.
    pub n_cal: usize,
}

impl SweepPoint {
    fn key(&self) -> (u64, u64, u64, usize) {
        (self.eps_mm.to_bits(), self.sigma_p_deg.to_bits(), self.sigma_o_deg.to_bits(), self.n_cal)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub grid_spacing_m: f64,
    /// Inset of the grid from the area border.
    pub grid_margin_m: f64,
    pub repeats: usize,
    pub eps_mm: Vec<f64>,
    pub sigma_p_deg: Vec<f64>,
    pub sigma_o_deg: Vec<f64>,
    pub n_cal: Vec<usize>,
    pub heading_rad: f64,
    pub seed: u64,
    pub refine: RefineConfig,
    pub calibration_span: f64,
    pub calibration_degree: usize,
}

impl ExperimentSpec {
    pub fn new(scene: &Scene) -> Self {
        Self {
            grid_spacing_m: 0.05,
            grid_margin_m: 0.0,
            repeats: 16,
            eps_mm: vec![10.0],
            sigma_p_deg: vec![0.0],
            sigma_o_deg: vec![0.0],
            n_cal: vec![0],
            heading_rad: 0.0,
            seed: scene.seed,
            refine: RefineConfig::for_scene(scene),
            calibration_span: DEFAULT_SPAN,
            calibration_degree: DEFAULT_DEGREE,
        }
    }

    /// Defaults overlaid with the scenario's `evaluate` section; `refine`
    /// is the scenario's refinement section.
    pub fn from_value(scene: &Scene, evaluate: Option<&serde_json::Value>, refine: Option<&serde_json::Value>) -> Result<Self> {
        let mut s = Self::new(scene);
        s.refine = RefineConfig::from_value(scene, refine)?;
        if let Some(v) = evaluate {
            let f: ExperimentFile = serde_json::from_value(v.clone()).map_err(|e| Error::Parse(format!("evaluate: {e}")))?;
            s.grid_spacing_m = f.grid_spacing_m.unwrap_or(s.grid_spacing_m);
            s.grid_margin_m = f.grid_margin_m.unwrap_or(s.grid_margin_m);
            s.repeats = f.repeats.unwrap_or(s.repeats);
            s.eps_mm = f.eps_mm.unwrap_or(s.eps_mm);
            s.sigma_p_deg = f.sigma_p_deg.unwrap_or(s.sigma_p_deg);
            s.sigma_o_deg = f.sigma_o_deg.unwrap_or(s.sigma_o_deg);
            s.n_cal = f.n_cal.unwrap_or(s.n_cal);
            s.heading_rad = f.heading_deg.map_or(s.heading_rad, f64::to_radians);
            s.calibration_span = f.calibration_span.unwrap_or(s.calibration_span);
            s.calibration_degree = f.calibration_degree.unwrap_or(s.calibration_degree);
        }
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let v = |m: &str| Err(Error::Validation(m.to_string()));
        if !(self.grid_spacing_m > 0.0) {
            return v("grid spacing must be positive");
        }
        if !(self.grid_margin_m >= 0.0) {
            return v("grid margin must be non-negative");
        }
        if self.repeats == 0 {
            return v("repeats must be at least 1");
        }
        if self.eps_mm.is_empty() || self.sigma_p_deg.is_empty() || self.sigma_o_deg.is_empty() || self.n_cal.is_empty() {
            return v("sweep lists must be non-empty");
        }
        if self.eps_mm.iter().chain(&self.sigma_p_deg).chain(&self.sigma_o_deg).any(|x| !(*x >= 0.0)) {
            return v("sweep values must be non-negative");
        }
        Ok(())
    }

    /// Grid locations, x fastest.
    pub fn grid(&self, scene: &Scene) -> Vec<[f64; 2]> {
        let a = &scene.area;
        let count = |ext: f64| ((ext - 2.0 * self.grid_margin_m) / self.grid_spacing_m + 1e-9).floor().max(0.0) as usize + 1;
        let (nx, ny) = (count(a.x_m), count(a.y_m));
        let mut g = Vec::with_capacity(nx * ny);
        for iy in 0..ny {
            for ix in 0..nx {
                g.push([
                    a.origin_m[0] + self.grid_margin_m + ix as f64 * self.grid_spacing_m,
                    a.origin_m[1] + self.grid_margin_m + iy as f64 * self.grid_spacing_m,
                ]);
            }
        }
        g
    }

    /// Sweep points in canonical order (ε outermost, N_c innermost).
    pub fn sweep(&self) -> Vec<SweepPoint> {
        let mut out = Vec::new();
        for &eps_mm in &self.eps_mm {
            for &sigma_p_deg in &self.sigma_p_deg {
                for &sigma_o_deg in &self.sigma_o_deg {
                    for &n_cal in &self.n_cal {
                        out.push(SweepPoint { eps_mm, sigma_p_deg, sigma_o_deg, n_cal });
                    }
                }
            }
        }
        out
    }

    pub fn n_trials(&self, scene: &Scene) -> usize {
        self.grid(scene).len() * self.repeats * self.sweep().len()
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentFile {
    grid_spacing_m: Option<f64>,
    grid_margin_m: Option<f64>,
    repeats: Option<usize>,
    eps_mm: Option<Vec<f64>>,
    sigma_p_deg: Option<Vec<f64>>,
    sigma_o_deg: Option<Vec<f64>>,
    n_cal: Option<Vec<usize>>,
    heading_deg: Option<f64>,
    calibration_span: Option<f64>,
    calibration_degree: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial_id: u64,
    pub sweep: SweepPoint,
    pub truth: Vec3,
    /// Empty for failed trials.
    pub estimates: Vec<Vec3>,
    /// Per-stage distance to truth, mm. Empty for failed trials.
    pub errors_mm: Vec<f64>,
    pub flags: Vec<StageFlags>,
    pub margins_mm: Vec<Option<f64>>,
    pub failure: Option<String>,
}

impl TrialRecord {
    pub fn initial_error_mm(&self) -> Option<f64> {
        self.errors_mm.first().copied()
    }

    pub fn final_error_mm(&self) -> Option<f64> {
        self.errors_mm.last().copied()
    }

    fn flag_string(&self) -> String {
        if let Some(f) = &self.failure {
            return format!("failed:{}", f.replace([',', '\n', '"'], " "));
        }
        let mut parts = Vec::new();
        for (k, f) in self.flags.iter().enumerate() {
            if f.weak_peak {
                parts.push(format!("weak{}", k + 1));
            }
            if f.calibration_out_of_hull {
                parts.push(format!("hull{}", k + 1));
            }
        }
        if parts.is_empty() {
            "ok".into()
        } else {
            parts.join("|")
        }
    }
}

/// Calibration bundles (one per band) fitted from `n_cal` Halton points with
/// the scene's own phase noise.
pub fn calibrate_scene(scene: &Scene, n_cal: usize, heading: f64, span: f64, degree: usize, seed: u64) -> Result<Vec<CalibrationBundle>> {
    let mut rng = stream(seed, domain::CALIBRATION, n_cal as u64);
    let locs = halton_points(&scene.area, n_cal, 0.0);
    let mut per_band: Vec<Vec<(Pose, crate::phasemodel::PhaseDifferences)>> = vec![Vec::new(); scene.n_bands()];
    for l in &locs {
        let pose = Pose::new(scene.plane_point(l[0], l[1]), heading);
        let obs = simulate_observation(scene, &pose, &mut rng, 0.0)?;
        for (k, d) in observation_deltas(scene, &obs).into_iter().enumerate() {
            per_band[k].push((pose, d));
        }
    }
    scene
        .bands
        .iter()
        .zip(&per_band)
        .map(|(b, pts)| build_calibration(b, &compute_residuals(b, pts)?, span, degree))
        .collect()
}

/// One trial: simulate, perturb, refine.
pub fn run_trial(
    scene: &Scene,
    spec: &ExperimentSpec,
    trial_id: u64,
    sweep: SweepPoint,
    xy: [f64; 2],
    calibration: Option<&[CalibrationBundle]>,
) -> TrialRecord {
    let mut rng = stream(spec.seed, domain::TRIAL, trial_id);
    let truth = scene.plane_point(xy[0], xy[1]);
    let mut rec = TrialRecord {
        trial_id,
        sweep,
        truth,
        estimates: vec![],
        errors_mm: vec![],
        flags: vec![],
        margins_mm: vec![],
        failure: None,
    };
    let run = |rng: &mut rand_chacha::ChaCha8Rng| -> Result<crate::refine::RefinementResult> {
        let pose = Pose::new(truth, spec.heading_rad);
        let obs = simulate_observation(scene, &pose, rng, sweep.sigma_p_deg.to_radians())?;
        let deltas = observation_deltas(scene, &obs);
        let x0 = synth_initial_estimate(&truth, sweep.eps_mm * 1e-3, rng);
        let heading = if sweep.sigma_o_deg > 0.0 {
            spec.heading_rad + Normal::new(0.0, sweep.sigma_o_deg.to_radians()).expect("finite sigma").sample(rng)
        } else {
            spec.heading_rad
        };
        refine(scene, &deltas, heading, &x0, calibration, &spec.refine)
    };
    match run(&mut rng) {
        Ok(r) => {
            rec.errors_mm = r.estimates.iter().map(|e| (e - truth).norm() * 1e3).collect();
            rec.estimates = r.estimates;
            rec.flags = r.flags;
            rec.margins_mm = r.margins.iter().map(|m| m.map(|v| v * 1e3)).collect();
        }
        Err(e) => rec.failure = Some(e.to_string()),
    }
    rec
}

/// Every grid location × repeat × sweep point, in canonical order
/// (sweep point, then grid row, column, repeat). Trials run in parallel and
/// each owns the random stream of its trial index.
pub fn run_experiment(scene: &Scene, spec: &ExperimentSpec) -> Result<Vec<TrialRecord>> {
    spec.validate()?;
    spec.refine.validate(scene)?;
    let grid = spec.grid(scene);
    let sweep = spec.sweep();
    let mut cals: BTreeMap<usize, Vec<CalibrationBundle>> = BTreeMap::new();
    for &n in spec.n_cal.iter().filter(|&&n| n > 0) {
        if let std::collections::btree_map::Entry::Vacant(e) = cals.entry(n) {
            e.insert(calibrate_scene(scene, n, spec.heading_rad, spec.calibration_span, spec.calibration_degree, spec.seed)?);
        }
    }
    let per_sweep = grid.len() * spec.repeats;
    let total = per_sweep * sweep.len();
    Ok((0..total)
        .into_par_iter()
        .map(|i| {
            let s = sweep[i / per_sweep];
            let xy = grid[(i % per_sweep) / spec.repeats];
            let cal = cals.get(&s.n_cal).map(|c| c.as_slice());
            run_trial(scene, spec, i as u64, s, xy, cal)
        })
        .collect())
}

/// Records as CSV; the stage count comes from the first successful record.
pub fn records_csv(records: &[TrialRecord], n_stages: usize) -> String {
    let mut s = String::from("trial_id,eps_mm,sigma_p_deg,sigma_o_deg,n_cal,x_true,y_true");
    for k in 0..n_stages {
        let _ = write!(s, ",err_stage{k}_mm");
    }
    s.push_str(",flags\n");
    for r in records {
        let _ = write!(
            s,
            "{},{},{},{},{},{},{}",
            r.trial_id, r.sweep.eps_mm, r.sweep.sigma_p_deg, r.sweep.sigma_o_deg, r.sweep.n_cal, r.truth.x, r.truth.y
        );
        for k in 0..n_stages {
            match r.errors_mm.get(k) {
                Some(e) => {
                    let _ = write!(s, ",{e}");
                }
                None => s.push_str(",nan"),
            }
        }
        let _ = writeln!(s, ",{}", r.flag_string());
    }
    s
}

/// Linear-interpolation percentile of sorted data, `p` in [0, 1].
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageStats {
    pub median_mm: f64,
    pub p90_mm: f64,
    /// Sorted errors: the empirical CDF support.
    pub cdf_mm: Vec<f64>,
}

impl StageStats {
    pub fn from_errors(mut e: Vec<f64>) -> Self {
        e.sort_by(f64::total_cmp);
        Self { median_mm: percentile(&e, 0.5), p90_mm: percentile(&e, 0.9), cdf_mm: e }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummary {
    pub sweep: SweepPoint,
    pub trials: usize,
    pub failed: usize,
    pub stages: Vec<StageStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub percentile_convention: String,
    pub groups: Vec<GroupSummary>,
}

impl Summary {
    /// Overall final-stage statistics across every group.
    pub fn overall_final(records: &[TrialRecord]) -> Option<StageStats> {
        let e: Vec<f64> = records.iter().filter_map(|r| r.final_error_mm()).collect();
        (!e.is_empty()).then(|| StageStats::from_errors(e))
    }
}

/// Per sweep point and stage: median, p90 and sorted errors. Groups are
/// ordered by sweep values, so the result does not depend on record order.
pub fn summarize(records: &[TrialRecord]) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no records to summarize".into()));
    }
    let mut groups: BTreeMap<(u64, u64, u64, usize), (SweepPoint, usize, usize, Vec<Vec<f64>>)> = BTreeMap::new();
    for r in records {
        let g = groups.entry(r.sweep.key()).or_insert((r.sweep, 0, 0, Vec::new()));
        g.1 += 1;
        if r.failure.is_some() {
            g.2 += 1;
            continue;
        }
        if g.3.len() < r.errors_mm.len() {
            g.3.resize(r.errors_mm.len(), Vec::new());
        }
        for (k, e) in r.errors_mm.iter().enumerate() {
            g.3[k].push(*e);
        }
    }
    let groups = groups
        .into_values()
        .map(|(sweep, trials, failed, stages)| GroupSummary {
            sweep,
            trials,
            failed,
            stages: stages.into_iter().map(StageStats::from_errors).collect(),
        })
        .collect();
    Ok(Summary { percentile_convention: PERCENTILE_CONVENTION.into(), groups })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Transition {
    /// Initial error at which the fitted success probability is 0.5, mm.
    pub threshold_mm: f64,
    /// Distance between the 90 % and 10 % success points, mm.
    pub width_mm: f64,
    pub n_success: usize,
    pub n_failure: usize,
}

/// Logistic fit of success (final error below `success_below_mm`) against
/// initial error. A small ridge on the slope keeps separable data finite.
pub fn detect_transition(samples: &[(f64, f64)], success_below_mm: f64) -> Result<Transition> {
    let ys: Vec<f64> = samples.iter().map(|&(_, f)| if f < success_below_mm { 1.0 } else { 0.0 }).collect();
    let n_success = ys.iter().filter(|&&y| y > 0.5).count();
    let n_failure = ys.len() - n_success;
    if n_success == 0 || n_failure == 0 {
        return Err(Error::InsufficientData(format!("{n_success} successes and {n_failure} failures")));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let sd = (samples.iter().map(|s| (s.0 - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    let z: Vec<f64> = samples.iter().map(|s| (s.0 - mean) / sd).collect();
    let ridge = 1e-3;
    let (mut a, mut b) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (zi, yi) in z.iter().zip(&ys) {
            let p = 1.0 / (1.0 + (-(a + b * zi)).exp());
            let w = (p * (1.0 - p)).max(1e-12);
            ga += yi - p;
            gb += (yi - p) * zi;
            haa += w;
            hab += w * zi;
            hbb += w * zi * zi;
        }
        gb -= ridge * b;
        hbb += ridge;
        let det = haa * hbb - hab * hab;
        if !(det.abs() > 0.0) {
            break;
        }
        let da = (hbb * ga - hab * gb) / det;
        let db = (haa * gb - hab * ga) / det;
        a += da;
        b += db;
        if da.abs().max(db.abs()) < 1e-10 {
            break;
        }
    }
    if b == 0.0 {
        return Err(Error::InsufficientData("success does not depend on initial error".into()));
    }
    Ok(Transition {
        threshold_mm: mean - a / b * sd,
        width_mm: (2.0 * 9f64.ln() / b).abs() * sd,
        n_success,
        n_failure,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrientationTolerance {
    /// `(σ_o deg, success fraction, implied tolerance deg)` per sweep value.
    pub per_sigma: Vec<(f64, f64, f64)>,
    pub tolerance_deg: f64,
}

/// Largest heading error that still succeeds, inferred per σ_o from the
/// success fraction `p` as the `(1+p)/2` Gaussian quantile times σ_o (success
/// iff |heading error| is below the tolerance), then averaged.
pub fn orientation_tolerance(points: &[(f64, usize, usize)]) -> Result<OrientationTolerance> {
    if points.is_empty() {
        return Err(Error::EmptyInput("no orientation sweep points".into()));
    }
    let std = StdNormal::new(0.0, 1.0).expect("standard normal");
    let mut per_sigma = Vec::with_capacity(points.len());
    for &(sigma_deg, succ, total) in points {
        if total == 0 || !(sigma_deg > 0.0) {
            return Err(Error::InsufficientData(format!("sweep point σ_o = {sigma_deg}° has no usable trials")));
        }
        let half = 0.5 / total as f64;
        let p = (succ as f64 / total as f64).clamp(half, 1.0 - half);
        per_sigma.push((sigma_deg, succ as f64 / total as f64, std.inverse_cdf((1.0 + p) / 2.0) * sigma_deg));
    }
    let tolerance_deg = per_sigma.iter().map(|x| x.2).sum::<f64>() / per_sigma.len() as f64;
    Ok(OrientationTolerance { per_sigma, tolerance_deg })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingStep {
    pub baseline: BaselineStep,
    /// Refinement seeded by the filtered baseline; `None` if it failed.
    pub refined: Option<Vec3>,
}

impl TrackingStep {
    pub fn baseline_error(&self) -> f64 {
        (self.baseline.filtered - self.baseline.truth).norm()
    }

    pub fn refined_error(&self) -> Option<f64> {
        self.refined.map(|r| (r - self.baseline.truth).norm())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackingSummary {
    pub steps: usize,
    pub refine_failures: usize,
    pub baseline_median_mm: f64,
    pub refined_median_mm: f64,
    /// Baseline median over refined median.
    pub ratio: f64,
}

/// Track a trajectory with the baseline, then refine every filtered fix with
/// the carrier phases measured at the true pose and the magnetometer heading.
pub fn run_tracking(
    scene: &Scene,
    trajectory: &[TrajectoryPoint],
    baseline: &BaselineConfig,
    refine_cfg: &RefineConfig,
    calibration: Option<&[CalibrationBundle]>,
    seed: u64,
) -> Result<Vec<TrackingStep>> {
    let band = scene.highest_band();
    let tdoa_cal = if baseline.calibration_points > 0 {
        let mut rng = stream(seed, domain::BASELINE, 0);
        Some(collect_tdoa_calibration(scene, band, baseline.calibration_points, baseline.delay_noise(band), &mut rng)?)
    } else {
        None
    };
    let mut rng = stream(seed, domain::BASELINE, 1);
    let steps = run_baseline(scene, trajectory, baseline, tdoa_cal.as_ref(), &mut rng)?;
    let mut rng = stream(seed, domain::BASELINE, 2);
    let mut out = Vec::with_capacity(steps.len());
    for b in steps {
        let obs = simulate_observation(scene, &Pose::new(b.truth, b.heading), &mut rng, 0.0)?;
        let deltas = observation_deltas(scene, &obs);
        let refined = refine(scene, &deltas, b.heading_measured, &b.filtered, calibration, refine_cfg).ok().map(|r| r.final_estimate());
        out.push(TrackingStep { baseline: b, refined });
    }
    Ok(out)
}

pub fn summarize_tracking(steps: &[TrackingStep]) -> Result<TrackingSummary> {
    let mut b: Vec<f64> = steps.iter().map(|s| s.baseline_error() * 1e3).collect();
    let mut r: Vec<f64> = steps.iter().filter_map(|s| s.refined_error()).map(|e| e * 1e3).collect();
    if r.is_empty() {
        return Err(Error::EmptyInput("no refined tracking steps".into()));
    }
    b.sort_by(f64::total_cmp);
    r.sort_by(f64::total_cmp);
    let (bm, rm) = (percentile(&b, 0.5), percentile(&r, 0.5));
    Ok(TrackingSummary {
        steps: steps.len(),
        refine_failures: steps.len() - r.len(),
        baseline_median_mm: bm,
        refined_median_mm: rm,
        ratio: bm / rm,
    })
}

/// Tracking steps as CSV.
pub fn tracking_csv(steps: &[TrackingStep]) -> String {
    let mut s = String::from("t_s,x_true,y_true,heading_rad,heading_measured_rad,x_tdoa,y_tdoa,tdoa_converged,x_kf,y_kf,x_refined,y_refined,err_kf_mm,err_refined_mm\n");
    for st in steps {
        let b = &st.baseline;
        let (rx, ry, re) = match st.refined {
            Some(r) => (r.x.to_string(), r.y.to_string(), (st.refined_error().unwrap_or(f64::NAN) * 1e3).to_string()),
            None => ("nan".into(), "nan".into(), "nan".into()),
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{rx},{ry},{},{re}",
            b.t,
            b.truth.x,
            b.truth.y,
            b.heading,
            b.heading_measured,
            b.tdoa.x,
            b.tdoa.y,
            b.tdoa_converged,
            b.filtered.x,
            b.filtered.y,
            st.baseline_error() * 1e3
        );
    }
    s
}
