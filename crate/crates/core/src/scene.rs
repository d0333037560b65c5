//! Bands, anchors, reflectors, poses and the scenario file format.

use std::path::Path;

use nalgebra::Rotation3;
use serde::{Deserialize, Serialize};

use crate::phasemodel::wrap;
use crate::{Error, Result, Vec3};

/// Smooth synthetic phase-center error of one anchor, in radians:
/// `offset + amp * sin(2πx/px + phx) * cos(2πy/py + phy)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaField {
    #[serde(default)]
    pub offset_rad: f64,
    #[serde(default)]
    pub amp_rad: f64,
    #[serde(default = "default_period")]
    pub period_x_m: f64,
    #[serde(default = "default_period")]
    pub period_y_m: f64,
    #[serde(default)]
    pub phase_x_rad: f64,
    #[serde(default)]
    pub phase_y_rad: f64,
}

fn default_period() -> f64 {
    1.2
}

impl GammaField {
    pub fn constant(offset_rad: f64) -> Self {
        Self {
            offset_rad,
            amp_rad: 0.0,
            period_x_m: 1.2,
            period_y_m: 1.2,
            phase_x_rad: 0.0,
            phase_y_rad: 0.0,
        }
    }

    pub fn eval(&self, p: &Vec3) -> f64 {
        use std::f64::consts::TAU;
        self.offset_rad
            + self.amp_rad
                * (TAU * p.x / self.period_x_m + self.phase_x_rad).sin()
                * (TAU * p.y / self.period_y_m + self.phase_y_rad).cos()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    /// 1-based, ascending with frequency.
    pub index: usize,
    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
    pub anchors: Vec<Vec3>,
    /// 0-based position of the reference anchor in `anchors`.
    pub reference_index: usize,
    /// TX antenna displacement from the target point, body frame.
    pub tx_offset: Vec3,
    /// Subcarrier spacing; `None` picks the default numerology.
    pub scs_hz: Option<f64>,
    /// Subcarrier count; `None` derives it from bandwidth and spacing.
    pub n_subcarriers: Option<usize>,
    /// True per-anchor phase-center error used by the simulator.
    pub gamma: Option<Vec<GammaField>>,
}

impl Band {
    pub fn wavelength(&self) -> f64 {
        crate::SPEED_OF_LIGHT / self.carrier_hz
    }

    pub fn n_anchors(&self) -> usize {
        self.anchors.len()
    }

    /// Anchor indices other than the reference, in order.
    pub fn non_reference(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.anchors.len()).filter(move |&n| n != self.reference_index)
    }

    /// True phase-center error of anchor `n` at TX antenna location `p`.
    pub fn gamma_at(&self, n: usize, p: &Vec3) -> f64 {
        match &self.gamma {
            Some(g) => g[n].eval(p),
            None => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reflector {
    pub point: Vec3,
    pub normal: Vec3,
    /// Path amplitude relative to LoS.
    pub inv_alpha: f64,
}

impl Reflector {
    /// Mirror image of `p` across the reflector plane.
    pub fn image(&self, p: &Vec3) -> Vec3 {
        p - 2.0 * (p - self.point).dot(&self.normal) * self.normal
    }

    fn side(&self, p: &Vec3) -> f64 {
        (p - self.point).dot(&self.normal)
    }

    /// Specular path length from `tx` to `rx`, if both lie on the same side.
    pub fn path_length(&self, tx: &Vec3, rx: &Vec3) -> Option<f64> {
        let (a, b) = (self.side(tx), self.side(rx));
        if a * b <= 0.0 {
            return None;
        }
        Some((rx - self.image(tx)).norm())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SolveMode {
    #[default]
    Planar,
    #[serde(rename = "3d")]
    ThreeD,
}

/// Which simulator produces phase observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    /// Channel path when reflectors exist, closed form otherwise.
    #[default]
    Auto,
    ClosedForm,
    Channel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Area {
    pub x_m: f64,
    pub y_m: f64,
    #[serde(default)]
    pub origin_m: [f64; 2],
}

impl Area {
    pub fn contains(&self, p: &Vec3) -> bool {
        let [x0, y0] = self.origin_m;
        p.x >= x0 && p.x <= x0 + self.x_m && p.y >= y0 && p.y <= y0 + self.y_m
    }

    pub fn center(&self) -> [f64; 2] {
        [self.origin_m[0] + self.x_m / 2.0, self.origin_m[1] + self.y_m / 2.0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub bands: Vec<Band>,
    pub reflectors: Vec<Reflector>,
    /// Per-band phase noise std, radians.
    pub phase_noise_sigma: Vec<f64>,
    pub target_plane_height: f64,
    pub area: Area,
    pub solve_mode: SolveMode,
    pub channel_mode: ChannelMode,
    pub seed: u64,
}

impl Scene {
    pub fn n_bands(&self) -> usize {
        self.bands.len()
    }

    pub fn band(&self, index: usize) -> Result<&Band> {
        index
            .checked_sub(1)
            .and_then(|i| self.bands.get(i))
            .ok_or_else(|| Error::BandMismatch(format!("no band with index {index}")))
    }

    pub fn highest_band(&self) -> &Band {
        self.bands.last().expect("validated scene has bands")
    }

    pub fn uses_channel_path(&self) -> bool {
        match self.channel_mode {
            ChannelMode::Auto => !self.reflectors.is_empty(),
            ChannelMode::ClosedForm => false,
            ChannelMode::Channel => true,
        }
    }

    /// Point on the target plane.
    pub fn plane_point(&self, x: f64, y: f64) -> Vec3 {
        Vec3::new(x, y, self.target_plane_height)
    }

    pub fn validate(&self) -> Result<()> {
        let v = |m: String| Err(Error::Validation(m));
        if self.bands.is_empty() {
            return v("scene has no bands".into());
        }
        let min_anchors = match self.solve_mode {
            SolveMode::Planar => 3,
            SolveMode::ThreeD => 4,
        };
        for (i, b) in self.bands.iter().enumerate() {
            let k = i + 1;
            if b.index != k {
                return v(format!("band {k}: index {} out of order", b.index));
            }
            if !(b.carrier_hz > 0.0 && b.carrier_hz.is_finite()) {
                return v(format!("band {k}: carrier frequency must be positive"));
            }
            if !(b.bandwidth_hz > 0.0 && b.bandwidth_hz < b.carrier_hz) {
                return v(format!("band {k}: bandwidth must satisfy 0 < B < f"));
            }
            if i > 0 && self.bands[i - 1].carrier_hz >= b.carrier_hz {
                return v(format!("band {k}: bands must be strictly ascending in frequency"));
            }
            if b.anchors.len() < min_anchors {
                return v(format!(
                    "band {k}: {} anchors, {:?} solve needs at least {min_anchors}",
                    b.anchors.len(),
                    self.solve_mode
                ));
            }
            if b.reference_index >= b.anchors.len() {
                return v(format!("band {k}: reference_index {} out of range", b.reference_index));
            }
            for (p, a) in b.anchors.iter().enumerate() {
                if !a.iter().all(|c| c.is_finite()) {
                    return v(format!("band {k}: anchor {p} not finite"));
                }
                for (q, c) in b.anchors.iter().enumerate().skip(p + 1) {
                    if (a - c).norm() <= 1e-3 {
                        return v(format!("band {k}: anchors {p} and {q} closer than 1 mm"));
                    }
                }
            }
            if let Some(g) = &b.gamma {
                if g.len() != b.anchors.len() {
                    return v(format!("band {k}: gamma needs one entry per anchor"));
                }
            }
            if let Some(s) = b.scs_hz {
                if !(s > 0.0) {
                    return v(format!("band {k}: scs_hz must be positive"));
                }
            }
        }
        if self.highest_band().tx_offset != Vec3::zeros() {
            return v("the highest band must have a zero TX offset".into());
        }
        for (i, r) in self.reflectors.iter().enumerate() {
            if !(r.inv_alpha > 0.0 && r.inv_alpha <= 1.0) {
                return v(format!("reflector {i}: inv_alpha must be in (0, 1]"));
            }
            if (r.normal.norm() - 1.0).abs() > 1e-12 {
                return v(format!("reflector {i}: normal must have unit length"));
            }
        }
        if self.phase_noise_sigma.len() != self.bands.len() {
            return v("noise sigma needs one value per band".into());
        }
        if self.phase_noise_sigma.iter().any(|s| !(*s >= 0.0)) {
            return v("noise sigma must be non-negative".into());
        }
        if !(self.area.x_m > 0.0 && self.area.y_m > 0.0) {
            return v("area extents must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vec3,
    heading: f64,
}

impl Pose {
    pub fn new(position: Vec3, heading: f64) -> Self {
        Self { position, heading: wrap(heading) }
    }

    pub fn heading(&self) -> f64 {
        self.heading
    }
}

/// Rotation of a body-frame vector about the vertical axis.
pub fn rotate_heading(v: &Vec3, heading: f64) -> Vec3 {
    Rotation3::from_axis_angle(&Vec3::z_axis(), heading) * v
}

/// Location of the band's TX antenna for a target pose.
pub fn tx_antenna_position(pose: &Pose, band: &Band) -> Vec3 {
    tx_position_at(&pose.position, pose.heading(), band)
}

pub(crate) fn tx_position_at(x: &Vec3, heading: f64, band: &Band) -> Vec3 {
    if band.tx_offset == Vec3::zeros() {
        return *x;
    }
    x + rotate_heading(&band.tx_offset, heading)
}

// ---------------------------------------------------------------- file format

/// Scalar or per-band list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerBand {
    One(f64),
    Many(Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandFile {
    pub f_hz: f64,
    pub bandwidth_hz: f64,
    #[serde(default)]
    pub anchors_m: Option<Vec<[f64; 3]>>,
    #[serde(default)]
    pub anchors_mm: Option<Vec<[f64; 3]>>,
    #[serde(default)]
    pub reference_index: Option<usize>,
    #[serde(default)]
    pub tx_offset_m: Option<[f64; 3]>,
    #[serde(default)]
    pub tx_offset_mm: Option<[f64; 3]>,
    #[serde(default)]
    pub scs_hz: Option<f64>,
    #[serde(default)]
    pub n_subcarriers: Option<usize>,
    #[serde(default)]
    pub gamma: Option<Vec<GammaField>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReflectorFile {
    pub point_m: [f64; 3],
    pub normal: [f64; 3],
    pub inv_alpha: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseFile {
    pub sigma_deg: PerBand,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    #[serde(default)]
    pub description: Option<String>,
    pub bands: Vec<BandFile>,
    #[serde(default)]
    pub reflectors: Vec<ReflectorFile>,
    pub noise: Option<NoiseFile>,
    pub area: Area,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub solve_mode: SolveMode,
    #[serde(default)]
    pub channel_mode: ChannelMode,
    #[serde(default)]
    pub target_plane_height_m: f64,
    /// Refinement settings; read by [`crate::refine::RefineConfig::from_value`].
    #[serde(default)]
    pub refine: Option<serde_json::Value>,
    /// Baseline settings; read by [`crate::baseline::BaselineConfig::from_value`].
    #[serde(default)]
    pub baseline: Option<serde_json::Value>,
    /// Experiment sweep settings; read by [`crate::eval::ExperimentSpec::from_value`].
    #[serde(default)]
    pub evaluate: Option<serde_json::Value>,
}

impl SceneFile {
    pub fn into_scene(self) -> Result<Scene> {
        let n = self.bands.len();
        let mut bands = Vec::with_capacity(n);
        for (i, b) in self.bands.into_iter().enumerate() {
            let anchors: Vec<Vec3> = match (b.anchors_m, b.anchors_mm) {
                (Some(a), None) => a.iter().map(|p| Vec3::from(*p)).collect(),
                (None, Some(a)) => a.iter().map(|p| Vec3::from(*p) * 1e-3).collect(),
                _ => {
                    return Err(Error::Validation(format!(
                        "band {}: give exactly one of anchors_m, anchors_mm",
                        i + 1
                    )))
                }
            };
            let tx_offset = match (b.tx_offset_m, b.tx_offset_mm) {
                (Some(t), None) => Vec3::from(t),
                (None, Some(t)) => Vec3::from(t) * 1e-3,
                (None, None) => Vec3::zeros(),
                _ => {
                    return Err(Error::Validation(format!(
                        "band {}: give at most one of tx_offset_m, tx_offset_mm",
                        i + 1
                    )))
                }
            };
            let reference_index = b.reference_index.unwrap_or(anchors.len().saturating_sub(1));
            bands.push(Band {
                index: i + 1,
                carrier_hz: b.f_hz,
                bandwidth_hz: b.bandwidth_hz,
                anchors,
                reference_index,
                tx_offset,
                scs_hz: b.scs_hz,
                n_subcarriers: b.n_subcarriers,
                gamma: b.gamma,
            });
        }
        let mut reflectors = Vec::new();
        for (i, r) in self.reflectors.into_iter().enumerate() {
            let normal = Vec3::from(r.normal);
            let len = normal.norm();
            if !(len > 0.0 && len.is_finite()) {
                return Err(Error::Validation(format!("reflector {i}: zero normal")));
            }
            reflectors.push(Reflector { point: Vec3::from(r.point_m), normal: normal / len, inv_alpha: r.inv_alpha });
        }
        let phase_noise_sigma = match self.noise.map(|x| x.sigma_deg) {
            None => vec![0.0; n],
            Some(PerBand::One(s)) => vec![s.to_radians(); n],
            Some(PerBand::Many(v)) => v.iter().map(|s| s.to_radians()).collect(),
        };
        let scene = Scene {
            bands,
            reflectors,
            phase_noise_sigma,
            target_plane_height: self.target_plane_height_m,
            area: self.area,
            solve_mode: self.solve_mode,
            channel_mode: self.channel_mode,
            seed: self.seed,
        };
        scene.validate()?;
        Ok(scene)
    }
}

/// Read a scenario file as raw JSON (for applying overrides before parsing).
pub fn read_scenario_value(path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

pub fn scene_file_from_value(v: serde_json::Value) -> Result<SceneFile> {
    serde_json::from_value(v).map_err(|e| Error::Parse(e.to_string()))
}

pub fn scene_from_value(v: serde_json::Value) -> Result<Scene> {
    scene_file_from_value(v)?.into_scene()
}

/// Load and validate a scenario file.
pub fn load_scene(path: &Path) -> Result<Scene> {
    scene_from_value(read_scenario_value(path)?)
}
