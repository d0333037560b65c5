//! Closed-form phase model, phase differences and observation simulation.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::channel::{circular_mean, measured_los_phase, DMRS_SYMBOLS};
use crate::scene::{tx_antenna_position, Band, Pose, Scene};
use crate::{Result, SPEED_OF_LIGHT};

/// Wrap an angle to (−π, π]. Values already in range are returned unchanged.
pub fn wrap(x: f64) -> f64 {
    if x > -PI && x <= PI {
        return x;
    }
    // round() is symmetric, which keeps wrap odd away from the boundary.
    let mut r = x - TAU * (x / TAU).round();
    if r <= -PI {
        r += TAU;
    } else if r > PI {
        r -= TAU;
    }
    r
}

/// Phase of a path of length `d` at frequency `f`, reduced to (−π, π]
/// before scaling so large ranges keep full precision.
pub fn range_phase(f: f64, d: f64) -> f64 {
    let cycles = f * d / SPEED_OF_LIGHT;
    wrap(TAU * (cycles - cycles.round()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseObservation {
    pub band_index: usize,
    pub phases: Vec<f64>,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseDifferences {
    pub band_index: usize,
    /// One entry per non-reference anchor, in anchor order.
    pub deltas: Vec<f64>,
}

/// Measured phase of anchor `n` for a target at `pose`.
pub fn model_phase(band: &Band, anchor_index: usize, pose: &Pose, offset: f64, gamma: f64, noise: f64) -> f64 {
    let x = tx_antenna_position(pose, band);
    let d = (band.anchors[anchor_index] - x).norm();
    wrap(range_phase(band.carrier_hz, d) + offset + gamma + noise)
}

/// Differences against the reference anchor; the common offset cancels.
pub fn phase_differences(obs: &PhaseObservation, reference_index: usize) -> PhaseDifferences {
    let r = obs.phases[reference_index];
    let deltas = obs
        .phases
        .iter()
        .enumerate()
        .filter(|(n, _)| *n != reference_index)
        .map(|(_, p)| wrap(p - r))
        .collect();
    PhaseDifferences { band_index: obs.band_index, deltas }
}

/// Noiseless geometric phase differences at the TX antenna location `x`
/// (no calibration term).
pub fn geometric_deltas(band: &Band, x: &crate::Vec3) -> Vec<f64> {
    let dref = (band.anchors[band.reference_index] - x).norm();
    band.non_reference()
        .map(|n| {
            let dn = (band.anchors[n] - x).norm();
            range_phase(band.carrier_hz, dn - dref)
        })
        .collect()
}

/// One observation per band. A fresh uniform offset is drawn per band; each
/// anchor gets the scene's noise plus `sigma_p_extra`. With the channel path
/// the scene noise is split over the DM-RS symbols (each σ·√3) and
/// circular-averaged, so its effective spread matches the closed form.
///
/// Draw order per band: offset, then for each anchor the scene noise
/// draw(s) followed by the extra noise draw.
pub fn simulate_observation<R: Rng + ?Sized>(
    scene: &Scene,
    pose: &Pose,
    rng: &mut R,
    sigma_p_extra: f64,
) -> Result<Vec<PhaseObservation>> {
    let channel = scene.uses_channel_path();
    let mut out = Vec::with_capacity(scene.n_bands());
    for (k, band) in scene.bands.iter().enumerate() {
        let offset = PI - rng.random::<f64>() * TAU;
        let sigma = scene.phase_noise_sigma[k];
        let tx = tx_antenna_position(pose, band);
        let mut phases = Vec::with_capacity(band.n_anchors());
        for n in 0..band.n_anchors() {
            let gamma = band.gamma_at(n, &tx);
            let phase = if channel {
                let base = measured_los_phase(scene, band, n, pose, offset, rng)? + gamma;
                if sigma > 0.0 {
                    let s = Normal::new(0.0, sigma * (DMRS_SYMBOLS as f64).sqrt()).expect("finite sigma");
                    let sym: Vec<f64> = (0..DMRS_SYMBOLS).map(|_| wrap(base + s.sample(rng))).collect();
                    circular_mean(&sym)?
                } else {
                    wrap(base)
                }
            } else {
                let w = gaussian(rng, sigma);
                model_phase(band, n, pose, offset, gamma, w)
            };
            phases.push(wrap(phase + gaussian(rng, sigma_p_extra)));
        }
        out.push(PhaseObservation { band_index: band.index, phases, timestamp: 0.0 });
    }
    Ok(out)
}

/// Phase differences of every band, against each band's reference anchor.
pub fn observation_deltas(scene: &Scene, obs: &[PhaseObservation]) -> Vec<PhaseDifferences> {
    obs.iter().zip(&scene.bands).map(|(o, b)| phase_differences(o, b.reference_index)).collect()
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Area, ChannelMode, SolveMode};
    use crate::Vec3;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene(sigma_deg: f64) -> Scene {
        let anchors = |h: f64| vec![Vec3::new(0., 0., h), Vec3::new(1.2, 0., h), Vec3::new(0., 1.2, h), Vec3::new(1.2, 1.2, h)];
        let band = |i, f, b, h, off: Vec3| Band {
            index: i,
            carrier_hz: f,
            bandwidth_hz: b,
            anchors: anchors(h),
            reference_index: 3,
            tx_offset: off,
            scs_hz: None,
            n_subcarriers: None,
            gamma: None,
        };
        Scene {
            bands: vec![band(1, 3.25e9, 47.88e6, 0.7, Vec3::new(0.05, 0., 0.)), band(2, 10.25e9, 400.32e6, 0.3, Vec3::zeros())],
            reflectors: vec![],
            phase_noise_sigma: vec![sigma_deg.to_radians(); 2],
            target_plane_height: 0.0,
            area: Area { x_m: 1.2, y_m: 1.2, origin_m: [0., 0.] },
            solve_mode: SolveMode::Planar,
            channel_mode: ChannelMode::Auto,
            seed: 0,
        }
    }

    #[test]
    fn wrap_examples() {
        assert_eq!(wrap(3.0 * PI), PI);
        assert_eq!(wrap(-PI), PI);
        assert_relative_eq!(wrap(7.5), 7.5 - TAU, epsilon = 1e-15);
        assert_relative_eq!(wrap(7.5), 1.2168, epsilon = 1e-4);
        assert_eq!(wrap(0.25), 0.25);
        assert_relative_eq!(wrap(-7.0 * PI / 2.0), PI / 2.0, epsilon = 1e-14);
    }

    #[test]
    fn model_phase_examples() {
        let s = scene(0.0);
        let mut b = s.bands[1].clone();
        let lambda = b.wavelength();
        b.anchors[0] = Vec3::new(2.5 * lambda, 0.0, 0.0);
        let pose = Pose::new(Vec3::zeros(), 0.0);
        assert_relative_eq!(model_phase(&b, 0, &pose, 0.0, 0.0, 0.0).abs(), PI, epsilon = 1e-9);
        b.anchors[0] = Vec3::zeros();
        assert_eq!(model_phase(&b, 0, &pose, 0.7, 0.0, 0.0), 0.7);
    }

    #[test]
    fn model_phase_matches_exact_rational_oracle() {
        // 2π·f·d/c for f = 10.25 GHz, d = 1 m: the cycle count is the rational
        // 10_250_000_000 / 299_792_458, whose fractional part is exact in integers.
        let num: u64 = 10_250_000_000;
        let den: u64 = 299_792_458;
        let frac = (num % den) as f64 / den as f64;
        let expect = wrap(TAU * frac);
        let mut b = scene(0.0).bands[1].clone();
        b.anchors[0] = Vec3::new(1.0, 0.0, 0.0);
        let got = model_phase(&b, 0, &Pose::new(Vec3::zeros(), 0.0), 0.0, 0.0, 0.0);
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
        assert_relative_eq!(TAU * num as f64 / den as f64, 214.824_114_75, epsilon = 1e-8);
    }

    #[test]
    fn phase_differences_examples() {
        let o = PhaseObservation { band_index: 1, phases: vec![0.3; 4], timestamp: 0.0 };
        assert_eq!(phase_differences(&o, 3).deltas, vec![0.0; 3]);
        let o = PhaseObservation { band_index: 1, phases: vec![170f64.to_radians(), (-170f64).to_radians()], timestamp: 0.0 };
        assert_relative_eq!(phase_differences(&o, 1).deltas[0].to_degrees(), -20.0, epsilon = 1e-9);
    }

    #[test]
    fn noiseless_simulation_matches_model() {
        let s = scene(0.0);
        let pose = Pose::new(Vec3::new(0.4, 0.7, 0.0), 0.3);
        let obs = simulate_observation(&s, &pose, &mut ChaCha8Rng::seed_from_u64(3), 0.0).unwrap();
        for (o, b) in obs.iter().zip(&s.bands) {
            let model = PhaseObservation {
                band_index: b.index,
                phases: (0..4).map(|n| model_phase(b, n, &pose, 0.0, 0.0, 0.0)).collect(),
                timestamp: 0.0,
            };
            let a = phase_differences(o, 3);
            let m = phase_differences(&model, 3);
            for (x, y) in a.deltas.iter().zip(&m.deltas) {
                assert!(wrap(x - y).abs() < 1e-9);
            }
            let g = geometric_deltas(b, &tx_antenna_position(&pose, b));
            for (x, y) in a.deltas.iter().zip(&g) {
                assert!(wrap(x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn offset_redraw_is_invisible_in_deltas() {
        let s = scene(0.0);
        let pose = Pose::new(Vec3::new(0.4, 0.7, 0.0), 0.0);
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let a = simulate_observation(&s, &pose, &mut r, 0.0).unwrap();
        let b = simulate_observation(&s, &pose, &mut r, 0.0).unwrap();
        assert_ne!(a[0].phases, b[0].phases);
        let (da, db) = (observation_deltas(&s, &a), observation_deltas(&s, &b));
        for (x, y) in da[1].deltas.iter().zip(&db[1].deltas) {
            assert!(wrap(x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn delta_spread_is_sqrt2_sigma() {
        let s = scene(5.0);
        let pose = Pose::new(Vec3::new(0.5, 0.5, 0.0), 0.0);
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let first = observation_deltas(&s, &simulate_observation(&s, &pose, &mut r, 0.0).unwrap())[1].deltas[0];
        let n = 10_000;
        let devs: Vec<f64> = (0..n)
            .map(|_| {
                let d = observation_deltas(&s, &simulate_observation(&s, &pose, &mut r, 0.0).unwrap());
                wrap(d[1].deltas[0] - first)
            })
            .collect();
        let mean = devs.iter().sum::<f64>() / n as f64;
        let std = (devs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let expect = 2f64.sqrt() * 5f64.to_radians();
        assert!((std / expect - 1.0).abs() < 0.1, "std {std} expect {expect}");
    }

    proptest! {
        #[test]
        fn wrap_properties(x in -1e4f64..1e4) {
            let w = wrap(x);
            prop_assert!(w > -PI && w <= PI);
            prop_assert_eq!(wrap(w), w);
            prop_assert!(((x - w) / TAU - ((x - w) / TAU).round()).abs() < 1e-9);
            if w != PI {
                prop_assert_eq!(wrap(-x), -w);
            }
        }

        #[test]
        fn offset_invariance(ph in proptest::collection::vec(-PI..PI, 2..8), c in -PI..PI) {
            let o = PhaseObservation { band_index: 1, phases: ph.clone(), timestamp: 0.0 };
            let r = ph.len() - 1;
            let a = phase_differences(&o, r);
            let shifted = PhaseObservation { band_index: 1, phases: ph.iter().map(|p| wrap(p + c)).collect(), timestamp: 0.0 };
            let b = phase_differences(&shifted, r);
            for (x, y) in a.deltas.iter().zip(&b.deltas) {
                prop_assert!(wrap(x - y).abs() < 1e-12);
            }
        }
    }
}
