//! Iterative cross-band refinement and the 1D integer-ambiguity helper.

use std::f64::consts::TAU;

use serde::Deserialize;

use crate::calibration::CalibrationBundle;
use crate::likelihood::{
    default_search_box, evaluate_field, lex, wrapped_gaussian_logpdf, LikelihoodField, LikelihoodQuery, SearchBox,
    BOX_FACTOR, DEFAULT_SIGMA_DEG, GRID_STEP_FRACTION, PEAK_FLOOR_DEG,
};
use crate::phasemodel::PhaseDifferences;
use crate::scene::{PerBand, Scene, SolveMode};
use crate::{Error, Result, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    /// Likelihood sigma per band, radians.
    pub sigma: Vec<f64>,
    pub step_fraction: f64,
    pub box_factor: f64,
    /// Weak-peak floor, radians RMS residual per pair.
    pub peak_floor: f64,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RefineFile {
    sigma_deg: Option<PerBand>,
    step_fraction: Option<f64>,
    box_factor: Option<f64>,
    peak_floor_deg: Option<f64>,
}

impl RefineConfig {
    pub fn for_scene(scene: &Scene) -> Self {
        Self {
            sigma: vec![DEFAULT_SIGMA_DEG.to_radians(); scene.n_bands()],
            step_fraction: GRID_STEP_FRACTION,
            box_factor: BOX_FACTOR,
            peak_floor: PEAK_FLOOR_DEG.to_radians(),
        }
    }

    /// Defaults overlaid with the scenario's `refine` section.
    pub fn from_value(scene: &Scene, v: Option<&serde_json::Value>) -> Result<Self> {
        let mut c = Self::for_scene(scene);
        let Some(v) = v else { return Ok(c) };
        let f: RefineFile = serde_json::from_value(v.clone()).map_err(|e| Error::Parse(format!("refine: {e}")))?;
        match f.sigma_deg {
            Some(PerBand::One(s)) => c.sigma = vec![s.to_radians(); scene.n_bands()],
            Some(PerBand::Many(s)) => c.sigma = s.iter().map(|x| x.to_radians()).collect(),
            None => {}
        }
        if let Some(x) = f.step_fraction {
            c.step_fraction = x;
        }
        if let Some(x) = f.box_factor {
            c.box_factor = x;
        }
        if let Some(x) = f.peak_floor_deg {
            c.peak_floor = x.to_radians();
        }
        c.validate(scene)?;
        Ok(c)
    }

    pub fn validate(&self, scene: &Scene) -> Result<()> {
        if self.sigma.len() != scene.n_bands() || self.sigma.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Validation("refine sigma needs one positive value per band".into()));
        }
        if !(self.step_fraction > 0.0 && self.box_factor > 0.0 && self.peak_floor > 0.0) {
            return Err(Error::Validation("refine step_fraction, box_factor and peak_floor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StageFlags {
    /// The box centre lies outside a calibration surface's training hull.
    pub calibration_out_of_hull: bool,
    /// The chosen peak's fit is worse than the weak-peak floor in absolute terms.
    pub weak_peak: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementResult {
    /// `x̂_0 … x̂_K`.
    pub estimates: Vec<Vec3>,
    pub loglik: Vec<f64>,
    /// Distance from the chosen peak to the next-nearest strong peak.
    pub margins: Vec<Option<f64>>,
    pub flags: Vec<StageFlags>,
    pub boxes: Vec<SearchBox>,
}

impl RefinementResult {
    pub fn final_estimate(&self) -> Vec3 {
        *self.estimates.last().expect("at least one estimate")
    }
}

/// Likelihood query of band `k` (1-based) centred on `center`.
pub fn stage_query<'a>(
    scene: &'a Scene,
    k: usize,
    deltas: &'a PhaseDifferences,
    heading: f64,
    center: &Vec3,
    calibration: Option<&'a CalibrationBundle>,
    cfg: &RefineConfig,
) -> Result<LikelihoodQuery<'a>> {
    let band = scene.band(k)?;
    let planar = scene.solve_mode == SolveMode::Planar;
    let mut c = *center;
    if planar {
        c.z = scene.target_plane_height;
    }
    let mut sb = default_search_box(band, &c, heading, planar, cfg.peak_floor, cfg.box_factor);
    sb.step = band.wavelength() * cfg.step_fraction;
    Ok(LikelihoodQuery { band, deltas, heading, calibration, sigma: cfg.sigma[k - 1], search_box: sb, peak_floor: cfg.peak_floor })
}

/// Strong peak nearest to `anchor`; ties go to the higher likelihood, then
/// the lexicographically smaller position. Returns the pick and the distance
/// from it to the next-nearest strong peak.
pub fn nearest_peak(field: &LikelihoodField, anchor: &Vec3) -> Option<(crate::likelihood::Peak, Option<f64>)> {
    let mut c: Vec<_> = field.strong_peaks().copied().collect();
    c.sort_by(|a, b| {
        let (da, db) = ((a.position - anchor).norm(), (b.position - anchor).norm());
        da.total_cmp(&db).then(b.loglik.total_cmp(&a.loglik)).then_with(|| lex(&a.position, &b.position))
    });
    let first = *c.first()?;
    let margin = c[1..].iter().map(|p| (p.position - first.position).norm()).fold(None, |m: Option<f64>, d| {
        Some(m.map_or(d, |m| m.min(d)))
    });
    Some((first, margin))
}

/// Band-by-band refinement from `x0`, lowest band first. Each stage keeps the
/// strong likelihood peak nearest to the previous estimate.
pub fn refine(
    scene: &Scene,
    observations: &[PhaseDifferences],
    heading: f64,
    x0: &Vec3,
    calibration: Option<&[CalibrationBundle]>,
    cfg: &RefineConfig,
) -> Result<RefinementResult> {
    let k_max = scene.n_bands();
    if observations.len() != k_max {
        return Err(Error::BandMismatch(format!("{} observations for {k_max} bands", observations.len())));
    }
    if calibration.is_some_and(|c| c.len() != k_max) {
        return Err(Error::BandMismatch("calibration needs one bundle per band".into()));
    }
    if !x0.iter().all(|v| v.is_finite()) {
        return Err(Error::Validation("initial estimate is not finite".into()));
    }
    let mut start = *x0;
    if scene.solve_mode == SolveMode::Planar {
        start.z = scene.target_plane_height;
    }
    let mut out = RefinementResult {
        estimates: vec![start],
        loglik: Vec::with_capacity(k_max),
        margins: Vec::with_capacity(k_max),
        flags: Vec::with_capacity(k_max),
        boxes: Vec::with_capacity(k_max),
    };
    for k in 1..=k_max {
        let prev = *out.estimates.last().expect("nonempty");
        let obs = &observations[k - 1];
        if obs.band_index != k {
            return Err(Error::BandMismatch(format!("observation {} is for band {}", k, obs.band_index)));
        }
        let q = stage_query(scene, k, obs, heading, &prev, calibration.map(|c| &c[k - 1]), cfg)?;
        let field = evaluate_field(&q)?;
        let (peak, margin) = nearest_peak(&field, &prev).ok_or_else(|| Error::NoPeak(format!("band {k}")))?;
        let floor = obs.deltas.len() as f64 * wrapped_gaussian_logpdf(cfg.peak_floor, q.sigma);
        out.estimates.push(peak.position);
        out.loglik.push(peak.loglik);
        out.margins.push(margin);
        out.flags.push(StageFlags { calibration_out_of_hull: field.calibration_out_of_hull, weak_peak: peak.loglik < floor });
        out.boxes.push(q.search_box);
    }
    Ok(out)
}

/// Resolve the integer cycle count of a 1D range `d = (k + φ/2π)·λ` from a
/// coarse `initial ± uncertainty`.
pub fn resolve_ambiguity_1d(initial: f64, uncertainty: f64, wavelength: f64, fractional_phase: f64) -> Result<(i64, f64)> {
    if !(wavelength > 0.0 && uncertainty >= 0.0) {
        return Err(Error::Domain("wavelength must be positive and uncertainty non-negative".into()));
    }
    if uncertainty > wavelength / 2.0 {
        return Err(Error::Ambiguity(format!(
            "uncertainty {uncertainty} admits more than one cycle count at wavelength {wavelength}"
        )));
    }
    let frac = fractional_phase / TAU;
    let k = ((initial - frac * wavelength) / wavelength).round();
    let refined = (k + frac) * wavelength;
    let tol = uncertainty * (1.0 + 1e-12);
    if (refined - initial).abs() > tol {
        return Err(Error::Ambiguity(format!(
            "no cycle count places the range within {uncertainty} of {initial}"
        )));
    }
    // At exactly half a wavelength both window edges can be feasible.
    let other = if refined >= initial { refined - wavelength } else { refined + wavelength };
    if (other - initial).abs() <= tol {
        return Err(Error::Ambiguity(format!("two cycle counts fit {initial} ± {uncertainty}")));
    }
    Ok((k as i64, refined))
}
