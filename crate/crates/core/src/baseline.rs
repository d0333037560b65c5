//! TDoA multilateration, odometry sensor models and Kalman tracking.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate_tdoa, halton_points, TdoaCalibration, DEFAULT_DEGREE, DEFAULT_SPAN};
use crate::channel::{cfr_to_cir, earliest_peak_delay, synthesize_cfr, PEAK_THRESHOLD, UPSAMPLING};
use crate::phasemodel::wrap;
use crate::scene::{tx_antenna_position, Band, Pose, Scene, SolveMode};
use crate::{Error, Result, Vec3, SPEED_OF_LIGHT};

/// Default per-anchor delay noise as a fraction of 1/B.
pub const DEFAULT_DELAY_NOISE_FRACTION: f64 = 0.02;
/// Calibration points for the TDoA correction surfaces.
pub const DEFAULT_TDOA_CAL_POINTS: usize = 100;
const STEP_TOL: f64 = 1e-4;
const MAX_ITER: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct TdoaObservation {
    pub band_index: usize,
    /// Arrival-time differences against the reference anchor, seconds.
    pub delays: Vec<f64>,
    pub timestamp: f64,
}

/// Differential delays to the band's anchors. With the channel path active,
/// arrival times come from the earliest CIR peak, so multipath biases them.
pub fn simulate_tdoa<R: Rng + ?Sized>(
    scene: &Scene,
    band: &Band,
    pose: &Pose,
    rng: &mut R,
    delay_noise_sigma: f64,
) -> Result<TdoaObservation> {
    let tx = tx_antenna_position(pose, band);
    let noise = Normal::new(0.0, delay_noise_sigma.max(0.0)).map_err(|e| Error::Domain(e.to_string()))?;
    let mut arrival = Vec::with_capacity(band.n_anchors());
    for n in 0..band.n_anchors() {
        let t = if scene.uses_channel_path() {
            let cfr = synthesize_cfr(scene, band, n, pose, 0.0, None, rng);
            earliest_peak_delay(&cfr_to_cir(&cfr, UPSAMPLING), PEAK_THRESHOLD)?
        } else {
            (band.anchors[n] - tx).norm() / SPEED_OF_LIGHT
        };
        let w = if delay_noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
        arrival.push(t + w);
    }
    let r = arrival[band.reference_index];
    let delays = band.non_reference().map(|n| arrival[n] - r).collect();
    Ok(TdoaObservation { band_index: band.index, delays, timestamp: 0.0 })
}

/// Geometric differential delays at TX location `x`.
pub fn geometric_delays(band: &Band, x: &Vec3) -> Vec<f64> {
    let dref = (band.anchors[band.reference_index] - x).norm();
    band.non_reference().map(|n| ((band.anchors[n] - x).norm() - dref) / SPEED_OF_LIGHT).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TdoaFix {
    pub position: Vec3,
    pub iterations: usize,
    /// False when the iteration limit was hit; `position` is the best iterate.
    pub converged: bool,
}

/// Damped Gauss–Newton fit of the TX position to differential delays.
/// Planar scenes solve on the target plane.
pub fn solve_tdoa(
    scene: &Scene,
    band: &Band,
    obs: &TdoaObservation,
    calibration: Option<&TdoaCalibration>,
    init: &Vec3,
) -> Result<TdoaFix> {
    let m = band.n_anchors() - 1;
    if obs.delays.len() != m || obs.band_index != band.index {
        return Err(Error::BandMismatch(format!("TDoA observation for band {} does not match band {}", obs.band_index, band.index)));
    }
    let planar = scene.solve_mode == SolveMode::Planar;
    let dims = if planar { 2 } else { 3 };
    if m < dims {
        return Err(Error::DegenerateGeometry(format!("{m} delays cannot fix {dims} coordinates")));
    }
    let meas: Vec<f64> = obs.delays.iter().map(|d| d * SPEED_OF_LIGHT).collect();
    let residuals = |x: &Vec3| -> DVector<f64> {
        let corr = calibration.map(|c| c.query(x));
        let g = geometric_delays(band, x);
        DVector::from_iterator(
            m,
            (0..m).map(|i| meas[i] - (g[i] + corr.as_ref().map_or(0.0, |c| c[i])) * SPEED_OF_LIGHT),
        )
    };
    let jacobian = |x: &Vec3| -> DMatrix<f64> {
        let uref = {
            let d = x - band.anchors[band.reference_index];
            d / d.norm()
        };
        let rows: Vec<Vec3> = band
            .non_reference()
            .map(|n| {
                let d = x - band.anchors[n];
                d / d.norm() - uref
            })
            .collect();
        DMatrix::from_fn(m, dims, |r, c| rows[r][c])
    };
    let mut x = *init;
    if planar {
        x.z = scene.target_plane_height;
    }
    let mut r = residuals(&x);
    let mut cost = r.norm_squared();
    let mut mu = 1e-3;
    for it in 1..=MAX_ITER {
        let j = jacobian(&x);
        let sv = j.clone().svd(false, false).singular_values;
        let (smax, smin) = (sv.max(), sv.min());
        if !(smax > 0.0) || smin < 1e-9 * smax {
            return Err(Error::DegenerateGeometry("TDoA Jacobian is rank deficient".into()));
        }
        let jt = j.transpose();
        let jtj = &jt * &j;
        let g = &jt * &r;
        let mut accepted = None;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for d in 0..dims {
                a[(d, d)] += mu * jtj[(d, d)].max(1e-12);
            }
            let Some(step) = a.lu().solve(&g) else {
                mu *= 10.0;
                continue;
            };
            let mut cand = x;
            for d in 0..dims {
                cand[d] += step[d];
            }
            let rc = residuals(&cand);
            let cc = rc.norm_squared();
            if cc <= cost {
                accepted = Some((cand, rc, cc, step.norm()));
                mu = (mu / 3.0).max(1e-12);
                break;
            }
            mu *= 10.0;
        }
        let Some((cand, rc, cc, step)) = accepted else {
            // No descent direction left: at a minimum to machine precision.
            return Ok(TdoaFix { position: x, iterations: it, converged: true });
        };
        x = cand;
        r = rc;
        cost = cc;
        if step < STEP_TOL {
            return Ok(TdoaFix { position: x, iterations: it, converged: true });
        }
    }
    Ok(TdoaFix { position: x, iterations: MAX_ITER, converged: false })
}

/// Simulate delays at `n_points` known Halton locations and fit correction
/// surfaces to the residuals against the geometric model.
pub fn collect_tdoa_calibration<R: Rng + ?Sized>(
    scene: &Scene,
    band: &Band,
    n_points: usize,
    delay_noise_sigma: f64,
    rng: &mut R,
) -> Result<TdoaCalibration> {
    let locs = halton_points(&scene.area, n_points, 0.0);
    let mut residuals = vec![Vec::with_capacity(n_points); band.n_anchors() - 1];
    for l in &locs {
        let pose = Pose::new(scene.plane_point(l[0], l[1]), 0.0);
        let obs = simulate_tdoa(scene, band, &pose, rng, delay_noise_sigma)?;
        let g = geometric_delays(band, &pose.position);
        for (p, (m, g)) in obs.delays.iter().zip(&g).enumerate() {
            residuals[p].push(m - g);
        }
    }
    calibrate_tdoa(band.index, &locs, &residuals, DEFAULT_SPAN, DEFAULT_DEGREE)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    pub wheel_radius_m: f64,
    pub ppr: f64,
    pub period_s: f64,
    pub magnetometer_sigma_rad: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        Self { wheel_radius_m: 0.1, ppr: 1024.0, period_s: 0.175, magnetometer_sigma_rad: 0.86f64.to_radians() }
    }
}

impl SensorModel {
    pub fn pulse_length(&self) -> f64 {
        TAU * self.wheel_radius_m / self.ppr
    }

    /// Standard deviation of the quantized speed, `2πr / (√12·PPR·T)`.
    pub fn encoder_sigma(&self) -> f64 {
        self.pulse_length() / (12f64.sqrt() * self.period_s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.wheel_radius_m > 0.0 && self.ppr > 0.0 && self.period_s > 0.0 && self.magnetometer_sigma_rad >= 0.0) {
            return Err(Error::Validation("sensor model needs positive r, PPR and T".into()));
        }
        Ok(())
    }
}

/// Speed from the distance travelled over one period, rounded to whole
/// encoder pulses. The error is uniform over the sub-pulse phase of the
/// travelled distance, which gives the `2πr / (√12·PPR·T)` spread.
pub fn simulate_encoder(true_speed: f64, model: &SensorModel) -> f64 {
    let l = model.pulse_length();
    let pulses = (true_speed.max(0.0) * model.period_s / l).round();
    pulses * l / model.period_s
}

pub fn simulate_magnetometer<R: Rng + ?Sized>(true_heading: f64, sigma: f64, rng: &mut R) -> f64 {
    if sigma > 0.0 {
        wrap(true_heading + Normal::new(0.0, sigma).expect("finite sigma").sample(rng))
    } else {
        wrap(true_heading)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackState {
    /// `[x, y, ẋ, ẏ]`.
    pub x: Vector4<f64>,
    pub p: Matrix4<f64>,
    pub t: f64,
}

/// Filter noise parameters. `Q = sigma_a·I₄` and
/// `R = diag(sigma_pos, sigma_pos, sigma_vel, sigma_vel)` entry for entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KfParams {
    pub sigma_a: f64,
    pub sigma_pos: f64,
    pub sigma_vel: f64,
}

impl Default for KfParams {
    fn default() -> Self {
        Self { sigma_a: 50.0, sigma_pos: 0.3, sigma_vel: 5.0 }
    }
}

impl KfParams {
    pub fn q(&self) -> Matrix4<f64> {
        Matrix4::identity() * self.sigma_a
    }

    pub fn r(&self) -> Matrix4<f64> {
        Matrix4::from_diagonal(&Vector4::new(self.sigma_pos, self.sigma_pos, self.sigma_vel, self.sigma_vel))
    }
}

fn transition(dt: f64) -> Matrix4<f64> {
    let mut f = Matrix4::identity();
    f[(0, 2)] = dt;
    f[(1, 3)] = dt;
    f
}

fn symmetrize(p: &Matrix4<f64>) -> Matrix4<f64> {
    (p + p.transpose()) * 0.5
}

impl TrackState {
    /// State initialized from a first measurement, covariance `R`.
    pub fn from_measurement(y: &Vector4<f64>, params: &KfParams, t: f64) -> Self {
        Self { x: *y, p: params.r(), t }
    }

    /// Constant-velocity prediction.
    pub fn predict(&self, dt: f64, q: &Matrix4<f64>) -> Self {
        let f = transition(dt);
        Self { x: f * self.x, p: symmetrize(&(f * self.p * f.transpose() + q)), t: self.t + dt }
    }
}

/// Predict over `dt` then update with a direct observation of the full state.
pub fn kf_step(state: &TrackState, dt: f64, y: &Vector4<f64>, params: &KfParams) -> Result<TrackState> {
    if !(dt > 0.0) {
        return Err(Error::Validation(format!("filter step needs dt > 0, got {dt}")));
    }
    let pred = state.predict(dt, &params.q());
    let r = params.r();
    let s = pred.p + r;
    let s_inv = s.try_inverse().ok_or(Error::SingularInnovation)?;
    let k = pred.p * s_inv;
    let x = pred.x + k * (y - pred.x);
    let ik = Matrix4::identity() - k;
    // Joseph form keeps the covariance positive semi-definite.
    let p = symmetrize(&(ik * pred.p * ik.transpose() + k * r * k.transpose()));
    Ok(TrackState { x, p, t: pred.t })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t_s: f64,
    pub x_m: f64,
    pub y_m: f64,
    pub heading_rad: f64,
}

pub fn load_trajectory(path: &Path) -> Result<Vec<TrajectoryPoint>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    let t: Vec<TrajectoryPoint> = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    validate_trajectory(&t)?;
    Ok(t)
}

pub fn validate_trajectory(t: &[TrajectoryPoint]) -> Result<()> {
    if t.is_empty() {
        return Err(Error::EmptyInput("trajectory has no points".into()));
    }
    if t.windows(2).any(|w| !(w[1].t_s > w[0].t_s)) {
        return Err(Error::Validation("trajectory timestamps must be strictly increasing".into()));
    }
    Ok(())
}

/// Pick-and-place style path: the target shuttles between two stations,
/// drawing a full circle of `loop_radius` at each, for `cycles` round trips.
/// Sampled every `dt` at constant `speed`; heading follows the direction of
/// travel.
pub fn loop_trajectory(area: &crate::scene::Area, speed: f64, dt: f64, cycles: usize, loop_radius: f64) -> Vec<TrajectoryPoint> {
    let [x0, y0] = area.origin_m;
    let (w, h) = (area.x_m, area.y_m);
    let pick = [x0 + 0.3 * w, y0 + 0.75 * h];
    let drop = [x0 + 0.75 * w, y0 + 0.3 * h];
    let start = [x0 + 0.2 * w, y0 + 0.2 * h];
    // Dense polyline.
    let mut pts: Vec<[f64; 2]> = vec![start];
    let line = |pts: &mut Vec<[f64; 2]>, to: [f64; 2]| {
        let from = *pts.last().expect("nonempty");
        let n = ((to[0] - from[0]).hypot(to[1] - from[1]) / 1e-3).ceil().max(1.0) as usize;
        for i in 1..=n {
            let s = i as f64 / n as f64;
            pts.push([from[0] + s * (to[0] - from[0]), from[1] + s * (to[1] - from[1])]);
        }
    };
    let circle = |pts: &mut Vec<[f64; 2]>| {
        let c0 = *pts.last().expect("nonempty");
        // Circle tangent to the current point, centre offset upward.
        let c = [c0[0], c0[1] + loop_radius];
        let n = (TAU * loop_radius / 1e-3).ceil() as usize;
        for i in 1..=n {
            let a = -PI / 2.0 + TAU * i as f64 / n as f64;
            pts.push([c[0] + loop_radius * a.cos(), c[1] + loop_radius * a.sin()]);
        }
    };
    for _ in 0..cycles {
        line(&mut pts, pick);
        circle(&mut pts);
        line(&mut pts, drop);
        circle(&mut pts);
    }
    line(&mut pts, start);
    // Resample by arc length.
    let mut cum = vec![0.0];
    for w in pts.windows(2) {
        let l = cum.last().expect("nonempty") + (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
        cum.push(l);
    }
    let total = *cum.last().expect("nonempty");
    let ds = speed * dt;
    let n = (total / ds).floor() as usize;
    let mut out = Vec::with_capacity(n + 1);
    let mut j = 0;
    for i in 0..=n {
        let s = i as f64 * ds;
        while j + 1 < cum.len() - 1 && cum[j + 1] < s {
            j += 1;
        }
        let seg = (cum[j + 1] - cum[j]).max(1e-15);
        let u = ((s - cum[j]) / seg).clamp(0.0, 1.0);
        let (a, b) = (pts[j], pts[j + 1]);
        out.push(TrajectoryPoint {
            t_s: i as f64 * dt,
            x_m: a[0] + u * (b[0] - a[0]),
            y_m: a[1] + u * (b[1] - a[1]),
            heading_rad: (b[1] - a[1]).atan2(b[0] - a[0]),
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    /// Per-anchor delay noise; `None` uses the default fraction of 1/B.
    pub delay_noise_s: Option<f64>,
    pub kf: KfParams,
    pub sensors: SensorModel,
    /// Calibration points for the delay-correction surfaces; 0 disables.
    pub calibration_points: usize,
    /// Path used when no trajectory file is given.
    pub trajectory: LoopSpec,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            delay_noise_s: None,
            kf: KfParams::default(),
            sensors: SensorModel::default(),
            calibration_points: DEFAULT_TDOA_CAL_POINTS,
            trajectory: LoopSpec::default(),
        }
    }
}

/// Parameters of [`loop_trajectory`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopSpec {
    pub speed_mps: f64,
    pub dt_s: f64,
    pub cycles: usize,
    pub loop_radius_m: f64,
}

impl Default for LoopSpec {
    fn default() -> Self {
        Self { speed_mps: 0.0825, dt_s: 0.02, cycles: 1, loop_radius_m: 0.1 }
    }
}

impl LoopSpec {
    pub fn build(&self, area: &crate::scene::Area) -> Result<Vec<TrajectoryPoint>> {
        if !(self.speed_mps > 0.0 && self.dt_s > 0.0 && self.loop_radius_m > 0.0) || self.cycles == 0 {
            return Err(Error::Validation("trajectory speed, step, radius and cycles must be positive".into()));
        }
        let t = loop_trajectory(area, self.speed_mps, self.dt_s, self.cycles, self.loop_radius_m);
        validate_trajectory(&t)?;
        Ok(t)
    }
}

impl BaselineConfig {
    pub fn from_value(v: Option<&serde_json::Value>) -> Result<Self> {
        let c: Self = match v {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Parse(format!("baseline: {e}")))?,
            None => Self::default(),
        };
        c.sensors.validate()?;
        Ok(c)
    }

    pub fn delay_noise(&self, band: &Band) -> f64 {
        self.delay_noise_s.unwrap_or(DEFAULT_DELAY_NOISE_FRACTION / band.bandwidth_hz)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineStep {
    pub t: f64,
    pub truth: Vec3,
    pub heading: f64,
    /// Magnetometer reading used by the filter.
    pub heading_measured: f64,
    pub tdoa: Vec3,
    pub tdoa_converged: bool,
    pub filtered: Vec3,
}

/// Speed along the trajectory at each point: backward differences, forward
/// at the first point.
fn speeds(tr: &[TrajectoryPoint]) -> Vec<f64> {
    let d = |a: &TrajectoryPoint, b: &TrajectoryPoint| (b.x_m - a.x_m).hypot(b.y_m - a.y_m) / (b.t_s - a.t_s);
    (0..tr.len())
        .map(|i| match (i, tr.len()) {
            (_, 1) => 0.0,
            (0, _) => d(&tr[0], &tr[1]),
            _ => d(&tr[i - 1], &tr[i]),
        })
        .collect()
}

/// Track a trajectory with the TDoA solver fused with odometry by the filter.
pub fn run_baseline<R: Rng + ?Sized>(
    scene: &Scene,
    trajectory: &[TrajectoryPoint],
    cfg: &BaselineConfig,
    calibration: Option<&TdoaCalibration>,
    rng: &mut R,
) -> Result<Vec<BaselineStep>> {
    validate_trajectory(trajectory)?;
    let band = scene.highest_band();
    let sigma = cfg.delay_noise(band);
    let v = speeds(trajectory);
    let c = scene.area.center();
    let mut guess = scene.plane_point(c[0], c[1]);
    let mut state: Option<TrackState> = None;
    let mut out = Vec::with_capacity(trajectory.len());
    for (i, p) in trajectory.iter().enumerate() {
        let pose = Pose::new(scene.plane_point(p.x_m, p.y_m), p.heading_rad);
        let mut obs = simulate_tdoa(scene, band, &pose, rng, sigma)?;
        obs.timestamp = p.t_s;
        let fix = solve_tdoa(scene, band, &obs, calibration, &guess)?;
        let speed = simulate_encoder(v[i], &cfg.sensors);
        let heading = simulate_magnetometer(p.heading_rad, cfg.sensors.magnetometer_sigma_rad, rng);
        let y = Vector4::new(fix.position.x, fix.position.y, speed * heading.cos(), speed * heading.sin());
        let next = match &state {
            None => TrackState::from_measurement(&y, &cfg.kf, p.t_s),
            Some(s) => kf_step(s, p.t_s - s.t, &y, &cfg.kf)?,
        };
        let filtered = scene.plane_point(next.x[0], next.x[1]);
        guess = filtered;
        state = Some(next);
        out.push(BaselineStep {
            t: p.t_s,
            truth: pose.position,
            heading: p.heading_rad,
            heading_measured: heading,
            tdoa: fix.position,
            tdoa_converged: fix.converged,
            filtered,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Area, ChannelMode};
    use approx::assert_relative_eq;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene() -> Scene {
        let anchors = vec![Vec3::new(0.0, 0.0, 0.3), Vec3::new(1.2, 0.0, 0.5), Vec3::new(0.0, 1.2, 0.4), Vec3::new(1.2, 1.2, 0.6)];
        Scene {
            bands: vec![Band {
                index: 1,
                carrier_hz: 10.25e9,
                bandwidth_hz: 400.32e6,
                anchors,
                reference_index: 3,
                tx_offset: Vec3::zeros(),
                scs_hz: None,
                n_subcarriers: None,
                gamma: None,
            }],
            reflectors: vec![],
            phase_noise_sigma: vec![0.0],
            target_plane_height: 0.0,
            area: Area { x_m: 1.2, y_m: 1.2, origin_m: [0.0, 0.0] },
            solve_mode: SolveMode::Planar,
            channel_mode: ChannelMode::Auto,
            seed: 0,
        }
    }

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    #[test]
    fn equidistant_anchor_has_zero_delay() {
        let s = scene();
        let mut b = s.bands[0].clone();
        b.anchors[0] = Vec3::new(1.2, -1.2, 0.6);
        let pose = Pose::new(Vec3::new(1.2, 0.0, 0.6), 0.0);
        let o = simulate_tdoa(&s, &b, &pose, &mut rng(1), 0.0).unwrap();
        assert!(o.delays[0].abs() < 1e-20);
    }

    #[test]
    fn noiseless_delays_are_geometric() {
        let s = scene();
        let pose = Pose::new(Vec3::new(0.3, 0.8, 0.0), 0.0);
        let o = simulate_tdoa(&s, &s.bands[0], &pose, &mut rng(1), 0.0).unwrap();
        for (a, b) in o.delays.iter().zip(geometric_delays(&s.bands[0], &pose.position)) {
            assert!((a - b).abs() < 1e-20);
        }
    }

    #[test]
    fn noiseless_solve_recovers_truth() {
        let s = scene();
        let truth = Vec3::new(0.6, 0.6, 0.0);
        let o = simulate_tdoa(&s, &s.bands[0], &Pose::new(truth, 0.0), &mut rng(1), 0.0).unwrap();
        for init in [Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.2, 1.2, 0.0), Vec3::new(0.1, 1.1, 0.0), Vec3::new(0.5, 0.7, 0.0)] {
            let f = solve_tdoa(&s, &s.bands[0], &o, None, &init).unwrap();
            assert!(f.converged);
            assert!((f.position - truth).norm() < 1e-4, "{init:?} -> {:?}", f.position);
        }
    }

    #[test]
    fn collinear_anchors_are_degenerate() {
        let mut s = scene();
        s.bands[0].anchors = (0..4).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        let o = TdoaObservation { band_index: 1, delays: vec![0.0; 3], timestamp: 0.0 };
        let e = solve_tdoa(&s, &s.bands[0], &o, None, &Vec3::new(1.4, 0.0, 0.0));
        assert!(matches!(e, Err(Error::DegenerateGeometry(_))), "{e:?}");
    }

    #[test]
    fn encoder_examples() {
        let m = SensorModel::default();
        assert_relative_eq!(m.encoder_sigma() * 1e3, 1.0120, epsilon = 1e-3);
        assert_eq!(simulate_encoder(0.0, &m), 0.0);
        let v = 7.0 * m.pulse_length() / m.period_s;
        assert_relative_eq!(simulate_encoder(v, &m), v, max_relative = 1e-12);
    }

    #[test]
    fn magnetometer_identity_and_wrap() {
        let mut r = rng(3);
        assert_eq!(simulate_magnetometer(0.4, 0.0, &mut r), 0.4);
        for _ in 0..1000 {
            let h = simulate_magnetometer(PI - 1e-3, 0.86f64.to_radians(), &mut r);
            assert!(wrap(h - (PI - 1e-3)).abs() < 0.1);
            assert!(h > -PI && h <= PI);
        }
    }

    #[test]
    fn predict_structure() {
        let s = TrackState { x: Vector4::new(0.0, 0.0, 1.0, 0.0), p: Matrix4::zeros(), t: 0.0 };
        let p = s.predict(0.2, &Matrix4::zeros());
        assert_relative_eq!(p.x[0], 0.2);
        assert_eq!(p.x[1], 0.0);
    }

    #[test]
    fn noiseless_filter_converges() {
        let params = KfParams { sigma_a: 1e-9, sigma_pos: 1e-9, sigma_vel: 1e-9 };
        let truth = |t: f64| Vector4::new(0.1 + 0.08 * t, 0.2 - 0.03 * t, 0.08, -0.03);
        let mut s = TrackState::from_measurement(&(truth(0.0) + Vector4::new(0.01, -0.02, 0.0, 0.0)), &KfParams::default(), 0.0);
        for i in 1..200 {
            let t = i as f64 * 0.1;
            s = kf_step(&s, 0.1, &truth(t), &params).unwrap();
        }
        assert!((s.x - truth(s.t)).norm() < 1e-6);
    }

    #[test]
    fn stationary_steady_state_beats_measurement() {
        // Riccati fixed point for the position block of a stationary target.
        let params = KfParams { sigma_a: 1e-4, sigma_pos: 0.09, sigma_vel: 0.01 };
        let mut r = rng(4);
        let n = Normal::new(0.0, params.sigma_pos.sqrt()).unwrap();
        let v = Normal::new(0.0, params.sigma_vel.sqrt()).unwrap();
        let mut s = TrackState::from_measurement(&Vector4::zeros(), &params, 0.0);
        let mut errs = Vec::new();
        for i in 0..20_000 {
            let y = Vector4::new(n.sample(&mut r), n.sample(&mut r), v.sample(&mut r), v.sample(&mut r));
            s = kf_step(&s, 0.1, &y, &params).unwrap();
            if i > 1000 {
                errs.push(s.x[0]);
            }
        }
        let std = (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt();
        let p_ss = s.p[(0, 0)].sqrt();
        assert!(std < params.sigma_pos.sqrt(), "{std}");
        assert!((std / p_ss - 1.0).abs() < 0.3, "empirical {std} vs predicted {p_ss}");
    }

    #[test]
    fn loop_trajectory_shape() {
        let a = Area { x_m: 1.2, y_m: 1.2, origin_m: [0.0, 0.0] };
        let t = loop_trajectory(&a, 0.0825, 0.1, 2, 0.08);
        validate_trajectory(&t).unwrap();
        assert!(t.len() > 100);
        for w in t.windows(2) {
            let d = (w[1].x_m - w[0].x_m).hypot(w[1].y_m - w[0].y_m);
            assert!(d <= 0.0825 * 0.1 + 1e-9);
        }
        assert!(t.iter().all(|p| a.contains(&Vec3::new(p.x_m, p.y_m, 0.0))));
    }

    #[test]
    fn zero_noise_baseline_tracks_truth() {
        let s = scene();
        let cfg = BaselineConfig {
            delay_noise_s: Some(0.0),
            sensors: SensorModel { magnetometer_sigma_rad: 0.0, ppr: 1e12, ..SensorModel::default() },
            calibration_points: 0,
            ..BaselineConfig::default()
        };
        let t: Vec<TrajectoryPoint> = (0..50)
            .map(|i| TrajectoryPoint { t_s: i as f64 * 0.1, x_m: 0.2 + 0.01 * i as f64, y_m: 0.5, heading_rad: 0.0 })
            .collect();
        let out = run_baseline(&s, &t, &cfg, None, &mut rng(5)).unwrap();
        for st in &out {
            assert!((st.filtered - st.truth).norm() < 1e-4, "{:?}", st);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn covariance_stays_psd(seed in any::<u64>()) {
            let mut r = rng(seed);
            let params = KfParams::default();
            let mut s = TrackState::from_measurement(&Vector4::zeros(), &params, 0.0);
            for _ in 0..2000 {
                let dt = r.random_range(0.001..1.0);
                let y = Vector4::from_fn(|_, _| r.random_range(-5.0..5.0));
                s = kf_step(&s, dt, &y, &params).unwrap();
                let asym = (s.p - s.p.transpose()).abs().max();
                prop_assert!(asym <= 1e-12 * s.p.abs().max().max(1.0));
                let ev = s.p.symmetric_eigenvalues();
                prop_assert!(ev.min() >= -1e-12);
            }
        }

        #[test]
        fn solve_is_translation_equivariant(tx in -5.0f64..5.0, ty in -5.0f64..5.0, px in 0.2f64..1.0, py in 0.2f64..1.0) {
            let s = scene();
            let mut st = s.clone();
            let t = Vec3::new(tx, ty, 0.0);
            for a in &mut st.bands[0].anchors { *a += t; }
            st.area.origin_m = [tx, ty];
            let truth = Vec3::new(px, py, 0.0);
            let o = simulate_tdoa(&s, &s.bands[0], &Pose::new(truth, 0.0), &mut rng(1), 0.0).unwrap();
            let ot = simulate_tdoa(&st, &st.bands[0], &Pose::new(truth + t, 0.0), &mut rng(1), 0.0).unwrap();
            let init = Vec3::new(0.6, 0.6, 0.0);
            let a = solve_tdoa(&s, &s.bands[0], &o, None, &init).unwrap();
            let b = solve_tdoa(&st, &st.bands[0], &ot, None, &(init + t)).unwrap();
            prop_assert!((a.position + t - b.position).norm() < 1e-6);
        }

        #[test]
        fn exact_sensors_give_true_velocity(v in 0.0f64..1.0, h in -PI..PI) {
            let m = SensorModel { ppr: 1e15, magnetometer_sigma_rad: 0.0, ..SensorModel::default() };
            let mut r = rng(9);
            let sv = simulate_encoder(v, &m);
            let sh = simulate_magnetometer(h, 0.0, &mut r);
            prop_assert!((sv * sh.cos() - v * h.cos()).abs() < 1e-9);
            prop_assert!((sv * sh.sin() - v * h.sin()).abs() < 1e-9);
        }

        #[test]
        fn encoder_std_matches_formula(r_m in 0.02f64..0.3, ppr in 64.0f64..4096.0, t in 0.05f64..0.5, seed in any::<u64>()) {
            let m = SensorModel { wheel_radius_m: r_m, ppr, period_s: t, ..SensorModel::default() };
            let mut g = rng(seed);
            let q = m.pulse_length() / m.period_s;
            let n = 4000;
            let e: Vec<f64> = (0..n)
                .map(|_| {
                    let v = 0.05 + g.random::<f64>() * 20.0 * q;
                    simulate_encoder(v, &m) - v
                })
                .collect();
            let mean = e.iter().sum::<f64>() / n as f64;
            let std = (e.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            prop_assert!((std / m.encoder_sigma() - 1.0).abs() < 0.1, "std {} formula {}", std, m.encoder_sigma());
        }
    }
}
