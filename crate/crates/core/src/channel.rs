//! Channel frequency/impulse responses and LoS phase extraction.

use std::f64::consts::TAU;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::phasemodel::wrap;
use crate::scene::{tx_antenna_position, Band, Pose, Scene};
use crate::{Error, Result, SPEED_OF_LIGHT};

/// Default CIR upsampling factor.
pub const UPSAMPLING: usize = 32;
/// Default earliest-peak threshold as a fraction of the global maximum.
pub const PEAK_THRESHOLD: f64 = 0.5;
/// Number of DM-RS symbols averaged per phase measurement.
pub const DMRS_SYMBOLS: usize = 3;

/// Subcarrier grid of a band.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Numerology {
    pub scs_hz: f64,
    pub n_subcarriers: usize,
}

impl Numerology {
    /// 30 kHz spacing below 6 GHz, 240 kHz above, 12-subcarrier resource blocks
    /// filling the bandwidth, unless the band overrides either value.
    pub fn for_band(band: &Band) -> Self {
        let scs_hz = band.scs_hz.unwrap_or(if band.carrier_hz < 6e9 { 30e3 } else { 240e3 });
        let n_subcarriers = band
            .n_subcarriers
            .unwrap_or_else(|| (((band.bandwidth_hz / scs_hz) / 12.0).round() as usize * 12).max(12));
        Self { scs_hz, n_subcarriers }
    }

    /// Absolute subcarrier frequencies, symmetric about the carrier.
    pub fn frequencies(&self, carrier_hz: f64) -> Vec<f64> {
        let mid = (self.n_subcarriers as f64 - 1.0) / 2.0;
        (0..self.n_subcarriers).map(|i| carrier_hz + (i as f64 - mid) * self.scs_hz).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelFrequencyResponse {
    pub band_index: usize,
    pub frequencies: Vec<f64>,
    pub samples: Vec<Complex64>,
}

impl ChannelFrequencyResponse {
    pub fn carrier_hz(&self) -> f64 {
        (self.frequencies[0] + self.frequencies[self.frequencies.len() - 1]) / 2.0
    }

    pub fn spacing_hz(&self) -> f64 {
        let n = self.frequencies.len();
        if n < 2 {
            return 0.0;
        }
        (self.frequencies[n - 1] - self.frequencies[0]) / (n - 1) as f64
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "index,frequency_hz,re,im")?;
        for (i, (f, s)) in self.frequencies.iter().zip(&self.samples).enumerate() {
            writeln!(w, "{i},{f},{},{}", s.re, s.im)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelImpulseResponse {
    /// Uniform delay grid starting at zero.
    pub delays: Vec<f64>,
    pub samples: Vec<Complex64>,
    pub upsampling_factor: usize,
}

impl ChannelImpulseResponse {
    pub fn delay_step(&self) -> f64 {
        self.delays.get(1).copied().unwrap_or(0.0)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "index,delay_s,re,im")?;
        for (i, (d, s)) in self.delays.iter().zip(&self.samples).enumerate() {
            writeln!(w, "{i},{d},{},{}", s.re, s.im)?;
        }
        Ok(())
    }
}

/// Propagation path lengths and gains from a TX location to one anchor:
/// LoS first, then one specular bounce per reflector facing both ends.
pub fn paths(scene: &Scene, tx: &crate::Vec3, rx: &crate::Vec3) -> Vec<(f64, f64)> {
    let mut out = vec![((rx - tx).norm(), 1.0)];
    for r in &scene.reflectors {
        if let Some(d) = r.path_length(tx, rx) {
            out.push((d, r.inv_alpha));
        }
    }
    out
}

/// CFR seen by `anchor_index` for a target at `pose`. `snr_db` adds complex
/// white noise relative to unit LoS power.
pub fn synthesize_cfr<R: Rng + ?Sized>(
    scene: &Scene,
    band: &Band,
    anchor_index: usize,
    pose: &Pose,
    unknown_offset: f64,
    snr_db: Option<f64>,
    rng: &mut R,
) -> ChannelFrequencyResponse {
    let tx = tx_antenna_position(pose, band);
    let path_list = paths(scene, &tx, &band.anchors[anchor_index]);
    let frequencies = Numerology::for_band(band).frequencies(band.carrier_hz);
    let rot = Complex64::from_polar(1.0, unknown_offset);
    let mut samples: Vec<Complex64> = frequencies
        .iter()
        .map(|&f| {
            let h: Complex64 = path_list
                .iter()
                .map(|&(d, g)| {
                    let cycles = f * d / SPEED_OF_LIGHT;
                    Complex64::from_polar(g, -TAU * (cycles - cycles.round()))
                })
                .sum();
            h * rot
        })
        .collect();
    if let Some(snr) = snr_db {
        let s = (10f64.powf(-snr / 10.0) / 2.0).sqrt();
        let n = Normal::new(0.0, s).expect("finite sigma");
        for x in &mut samples {
            *x += Complex64::new(n.sample(rng), n.sample(rng));
        }
    }
    ChannelFrequencyResponse { band_index: band.index, frequencies, samples }
}

/// Zero-padded inverse DFT of the CFR onto a delay grid of step
/// `1 / (upsampling · N · Δf)` covering one period `1/Δf`.
///
/// `h[m] = (1/N) Σ_i H_i exp(j2π (f_i − f_c) t_m)`, so a unit single path
/// peaks at magnitude 1 and energy obeys `Σ|h|² = (U/N) Σ|H|²`.
pub fn cfr_to_cir(cfr: &ChannelFrequencyResponse, upsampling_factor: usize) -> ChannelImpulseResponse {
    let n = cfr.samples.len();
    let len = n * upsampling_factor.max(1);
    let mut buf = vec![Complex64::new(0.0, 0.0); len];
    buf[..n].copy_from_slice(&cfr.samples);
    FftPlanner::new().plan_fft_inverse(len).process(&mut buf);
    // Bin i holds frequency f_i − f_c + (N−1)/2·Δf; undo the half-band shift.
    let shift = -std::f64::consts::PI * (n as f64 - 1.0) / len as f64;
    let scale = 1.0 / n as f64;
    for (m, x) in buf.iter_mut().enumerate() {
        let ph = shift * m as f64;
        *x *= Complex64::from_polar(scale, wrap(ph));
    }
    let dt = 1.0 / (len as f64 * cfr.spacing_hz());
    ChannelImpulseResponse {
        delays: (0..len).map(|m| m as f64 * dt).collect(),
        samples: buf,
        upsampling_factor,
    }
}

/// Index of the earliest local maximum of |h| above `threshold × max`.
pub fn earliest_peak(cir: &ChannelImpulseResponse, peak_threshold_fraction: f64) -> Result<usize> {
    let mag: Vec<f64> = cir.samples.iter().map(|c| c.norm()).collect();
    let len = mag.len();
    let gmax = mag.iter().cloned().fold(0.0, f64::max);
    if !(gmax > 0.0) {
        return Err(Error::NoPeak("CIR is zero".into()));
    }
    let floor = peak_threshold_fraction * gmax;
    (0..len)
        .find(|&m| {
            let prev = mag[(m + len - 1) % len];
            let next = mag[(m + 1) % len];
            mag[m] >= floor && mag[m] >= prev && mag[m] > next
        })
        .ok_or_else(|| Error::NoPeak(format!("no CIR sample above {peak_threshold_fraction} of max")))
}

/// Delay of the earliest peak, refined by a parabola through |h| at the peak
/// sample and its two neighbours.
pub fn earliest_peak_delay(cir: &ChannelImpulseResponse, peak_threshold_fraction: f64) -> Result<f64> {
    let m = earliest_peak(cir, peak_threshold_fraction)?;
    let len = cir.samples.len();
    let (a, b, c) = (
        cir.samples[(m + len - 1) % len].norm(),
        cir.samples[m].norm(),
        cir.samples[(m + 1) % len].norm(),
    );
    let den = a - 2.0 * b + c;
    let frac = if den < 0.0 { (0.5 * (a - c) / den).clamp(-0.5, 0.5) } else { 0.0 };
    let step = cir.delay_step();
    let period = step * len as f64;
    let t = (m as f64 + frac) * step;
    // Wrap delays in the last half period to negative values.
    Ok(if t > period / 2.0 { t - period } else { t })
}

/// Phase of the CIR at its earliest significant peak.
pub fn extract_los_phase(cir: &ChannelImpulseResponse, peak_threshold_fraction: f64) -> Result<f64> {
    let m = earliest_peak(cir, peak_threshold_fraction)?;
    Ok(wrap(cir.samples[m].arg()))
}

/// Wrap-safe mean direction.
pub fn circular_mean(angles: &[f64]) -> Result<f64> {
    if angles.is_empty() {
        return Err(Error::EmptyInput("circular_mean of no angles".into()));
    }
    let (s, c) = angles.iter().fold((0.0, 0.0), |(s, c), a| (s + a.sin(), c + a.cos()));
    let r = s.hypot(c);
    if r < 1e-12 {
        return Err(Error::UndefinedMean(r));
    }
    Ok(wrap(s.atan2(c)))
}

/// Worst-case LoS phase error caused by one echo of relative amplitude
/// `1/alpha` arriving `excess_delay` after the LoS.
pub fn multipath_phase_error_bound(alpha: f64, bandwidth_hz: f64, excess_delay: f64) -> Result<f64> {
    if !(alpha > 0.0 && bandwidth_hz > 0.0 && excess_delay > 0.0) {
        return Err(Error::Domain(format!(
            "bound needs positive alpha, bandwidth and excess delay (got {alpha}, {bandwidth_hz}, {excess_delay})"
        )));
    }
    Ok((1.0 / (alpha * bandwidth_hz * excess_delay)).atan())
}

/// Receiver-chain phase of one anchor: CFR synthesis, CIR, earliest peak.
/// The sign is flipped so the result increases with range like the closed-form
/// model; the unknown offset enters negated, which is immaterial because it
/// is uniformly random.
pub fn measured_los_phase<R: Rng + ?Sized>(
    scene: &Scene,
    band: &Band,
    anchor_index: usize,
    pose: &Pose,
    unknown_offset: f64,
    rng: &mut R,
) -> Result<f64> {
    let cfr = synthesize_cfr(scene, band, anchor_index, pose, unknown_offset, None, rng);
    let cir = cfr_to_cir(&cfr, UPSAMPLING);
    Ok(wrap(-extract_los_phase(&cir, PEAK_THRESHOLD)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Area, ChannelMode, Reflector, SolveMode};
    use crate::Vec3;
    use approx::assert_relative_eq;
    use proptest::prelude::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn scene(carrier: f64, bw: f64, reflectors: Vec<Reflector>) -> Scene {
        Scene {
            bands: vec![Band {
                index: 1,
                carrier_hz: carrier,
                bandwidth_hz: bw,
                anchors: vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0), Vec3::new(-1.0, 0.0, 0.0)],
                reference_index: 2,
                tx_offset: Vec3::zeros(),
                scs_hz: None,
                n_subcarriers: None,
                gamma: None,
            }],
            reflectors,
            phase_noise_sigma: vec![0.0],
            target_plane_height: 0.0,
            area: Area { x_m: 1.0, y_m: 1.0, origin_m: [0.0, 0.0] },
            solve_mode: SolveMode::Planar,
            channel_mode: ChannelMode::Auto,
            seed: 0,
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    fn single_tap(carrier: f64, scs: f64, n: usize, tau: f64, phase: f64) -> ChannelFrequencyResponse {
        let nu = Numerology { scs_hz: scs, n_subcarriers: n };
        let frequencies = nu.frequencies(carrier);
        let samples = frequencies.iter().map(|f| Complex64::from_polar(1.0, phase - TAU * f * tau)).collect();
        ChannelFrequencyResponse { band_index: 1, frequencies, samples }
    }

    #[test]
    fn numerology_defaults() {
        let s = scene(3.25e9, 47.88e6, vec![]);
        assert_eq!(Numerology::for_band(&s.bands[0]), Numerology { scs_hz: 30e3, n_subcarriers: 1596 });
        let s = scene(10.25e9, 400.32e6, vec![]);
        assert_eq!(Numerology::for_band(&s.bands[0]), Numerology { scs_hz: 240e3, n_subcarriers: 1668 });
        let f = Numerology { scs_hz: 1.0, n_subcarriers: 4 }.frequencies(10.0);
        assert_eq!(f, vec![8.5, 9.5, 10.5, 11.5]);
    }

    #[test]
    fn los_cfr_matches_closed_form() {
        let s = scene(3.25e9, 47.88e6, vec![]);
        let cfr = synthesize_cfr(&s, &s.bands[0], 0, &Pose::new(Vec3::zeros(), 0.0), 0.0, None, &mut rng());
        for (f, h) in cfr.frequencies.iter().zip(&cfr.samples) {
            assert_relative_eq!(h.norm(), 1.0, epsilon = 1e-12);
            let expect = wrap(-TAU * f / SPEED_OF_LIGHT);
            assert!(wrap(h.arg() - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_gain_reflector_is_invisible() {
        let refl = Reflector { point: Vec3::new(0., -2., 0.), normal: Vec3::new(0., 1., 0.), inv_alpha: 0.0 };
        let a = scene(3.25e9, 47.88e6, vec![]);
        let b = scene(3.25e9, 47.88e6, vec![refl]);
        let pose = Pose::new(Vec3::new(0.1, 0.2, 0.0), 0.0);
        let ca = synthesize_cfr(&a, &a.bands[0], 1, &pose, 0.3, None, &mut rng());
        let cb = synthesize_cfr(&b, &b.bands[0], 1, &pose, 0.3, None, &mut rng());
        assert_eq!(ca, cb);
    }

    #[test]
    fn equidistant_anchors_share_phases() {
        let s = scene(10.25e9, 400.32e6, vec![]);
        let pose = Pose::new(Vec3::zeros(), 0.0);
        let c0 = synthesize_cfr(&s, &s.bands[0], 0, &pose, 1.1, None, &mut rng());
        let c2 = synthesize_cfr(&s, &s.bands[0], 2, &pose, 1.1, None, &mut rng());
        assert_eq!(c0.samples, c2.samples);
    }

    #[test]
    fn constant_cfr_gives_sinc_at_zero() {
        let cfr = single_tap(1e9, 1e6, 64, 0.0, 0.0);
        let cir = cfr_to_cir(&cfr, 8);
        assert_eq!(cir.samples.len(), 512);
        assert_relative_eq!(cir.samples[0].re, 1.0, epsilon = 1e-12);
        assert!(cir.samples[0].im.abs() < 1e-12);
        let peak = cir.samples.iter().enumerate().max_by(|a, b| a.1.norm().total_cmp(&b.1.norm())).unwrap().0;
        assert_eq!(peak, 0);
        // Dirichlet kernel: first null at one original sample.
        assert!(cir.samples[8].norm() < 1e-12);
    }

    #[test]
    fn single_tap_peaks_at_nearest_grid_delay() {
        let (scs, n, u) = (240e3, 1668, 32);
        let tau = 7.3e-9;
        let cir = cfr_to_cir(&single_tap(10.25e9, scs, n, tau, 0.4), u);
        let dt = 1.0 / (u as f64 * n as f64 * scs);
        assert_relative_eq!(cir.delay_step(), dt, max_relative = 1e-12);
        let peak = cir.samples.iter().enumerate().max_by(|a, b| a.1.norm().total_cmp(&b.1.norm())).unwrap().0;
        assert_eq!(peak, (tau / dt).round() as usize);
        let t = earliest_peak_delay(&cir, 0.5).unwrap();
        assert!((t - tau).abs() < dt / 4.0);
    }

    #[test]
    fn parseval_with_padding() {
        let mut r = rng();
        let frequencies: Vec<f64> = (0..50).map(|i| 1e9 + i as f64 * 1e5).collect();
        let samples: Vec<Complex64> = (0..50).map(|_| Complex64::new(r.random::<f64>() - 0.5, r.random::<f64>() - 0.5)).collect();
        let cfr = ChannelFrequencyResponse { band_index: 1, frequencies, samples };
        let cir = cfr_to_cir(&cfr, 4);
        let e_f: f64 = cfr.samples.iter().map(|c| c.norm_sqr()).sum();
        let e_t: f64 = cir.samples.iter().map(|c| c.norm_sqr()).sum();
        assert_relative_eq!(e_t, 4.0 / 50.0 * e_f, max_relative = 1e-12);
    }

    #[test]
    fn cir_is_linear() {
        let x = single_tap(1e9, 1e6, 40, 3e-9, 0.2);
        let y = single_tap(1e9, 1e6, 40, 11e-9, -1.0);
        let (a, b) = (Complex64::new(0.5, 1.0), Complex64::new(-2.0, 0.3));
        let z = ChannelFrequencyResponse {
            band_index: 1,
            frequencies: x.frequencies.clone(),
            samples: x.samples.iter().zip(&y.samples).map(|(p, q)| a * p + b * q).collect(),
        };
        let (cx, cy, cz) = (cfr_to_cir(&x, 32), cfr_to_cir(&y, 32), cfr_to_cir(&z, 32));
        for i in 0..cz.samples.len() {
            assert!((cz.samples[i] - (a * cx.samples[i] + b * cy.samples[i])).norm() < 1e-12);
        }
    }

    #[test]
    fn single_path_phase_recovered() {
        let cir = cfr_to_cir(&single_tap(10.25e9, 240e3, 1668, 0.0, PI / 3.0), 32);
        assert!((extract_los_phase(&cir, 0.5).unwrap() - PI / 3.0).abs() < 1e-9);
    }

    #[test]
    fn earliest_peak_beats_stronger_echo() {
        // B = 400 MHz: LoS at 0 ns, echo 1.5x stronger at 40 ns.
        let nu = Numerology { scs_hz: 240e3, n_subcarriers: 1668 };
        let frequencies = nu.frequencies(10.25e9);
        let (p_los, p_echo) = (0.7, -2.0);
        let samples = frequencies
            .iter()
            .map(|f| Complex64::from_polar(1.0, p_los) + Complex64::from_polar(1.5, p_echo - TAU * f * 40e-9))
            .collect();
        let cir = cfr_to_cir(&ChannelFrequencyResponse { band_index: 1, frequencies, samples }, 32);
        let got = extract_los_phase(&cir, PEAK_THRESHOLD).unwrap();
        assert!(wrap(got - p_los).abs() < 1f64.to_radians(), "got {got}");
    }

    #[test]
    fn unreachable_threshold_is_no_peak() {
        let cir = cfr_to_cir(&single_tap(1e9, 1e6, 16, 0.0, 0.0), 4);
        assert!(matches!(extract_los_phase(&cir, 1.1), Err(Error::NoPeak(_))));
    }

    #[test]
    fn circular_mean_examples() {
        let d = |v: &[f64]| circular_mean(&v.iter().map(|x| x.to_radians()).collect::<Vec<_>>()).unwrap().to_degrees();
        assert!(d(&[359.0, 1.0]).abs() < 1e-9);
        assert_relative_eq!(d(&[10.0, 10.0, 10.0]), 10.0, epsilon = 1e-9);
        assert_relative_eq!(d(&[0.0, 90.0]), 45.0, epsilon = 1e-9);
        assert!(matches!(circular_mean(&[0.0, PI]), Err(Error::UndefinedMean(_))));
        assert!(circular_mean(&[]).is_err());
    }

    #[test]
    fn bound_examples() {
        let b = multipath_phase_error_bound(2.0, 100e6, 10e-9).unwrap().to_degrees();
        assert!((b - 26.565).abs() < 1e-3);
        let b = multipath_phase_error_bound(1.0, 400e6, 10e-9).unwrap().to_degrees();
        assert_relative_eq!(b, 0.25f64.atan().to_degrees(), epsilon = 1e-12);
        assert!((b - 14.04).abs() < 0.01);
        assert!(multipath_phase_error_bound(1e12, 400e6, 10e-9).unwrap() < 1e-9);
        assert!(multipath_phase_error_bound(0.0, 1.0, 1.0).is_err());
        assert!(multipath_phase_error_bound(1.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn pure_los_recovers_geometric_phase() {
        let s = scene(10.25e9, 400.32e6, vec![]);
        let pose = Pose::new(Vec3::new(0.13, 0.27, 0.0), 0.0);
        let off = 0.9;
        let cir = cfr_to_cir(&synthesize_cfr(&s, &s.bands[0], 1, &pose, off, None, &mut rng()), 32);
        let d = (s.bands[0].anchors[1] - pose.position).norm();
        // The CFR convention exp(−j2πfτ) puts the range term with negative sign.
        let expect = wrap(-TAU * 10.25e9 * d / SPEED_OF_LIGHT + off);
        assert!(wrap(extract_los_phase(&cir, 0.5).unwrap() - expect).abs() < 0.5f64.to_radians());
        let m = measured_los_phase(&s, &s.bands[0], 1, &pose, off, &mut rng()).unwrap();
        assert!(wrap(m - (TAU * 10.25e9 * d / SPEED_OF_LIGHT - off)).abs() < 0.5f64.to_radians());
    }

    proptest! {
        #[test]
        fn circular_mean_rotation_equivariant(v in proptest::collection::vec(-1.0f64..1.0, 1..8), delta in -10.0f64..10.0) {
            let a = circular_mean(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + delta).collect();
            let b = circular_mean(&shifted).unwrap();
            prop_assert!(wrap(b - a - delta).abs() < 1e-9);
        }
    }
}
