//! Multi-band carrier-phase localization refinement.
//!
//! The crate simulates a target carrying one transmit antenna per frequency
//! band, observed by a set of phase-coherent receive anchors per band. A coarse
//! initial position is refined band by band: each band's wrapped-Gaussian
//! location likelihood is searched for the local maximum nearest to the
//! previous estimate, so lower bands resolve the integer ambiguity of higher
//! ones.
//!
//! Module map:
//!
//! - [`scene`]: bands, anchors, reflectors, poses and scenario files.
//! - [`channel`]: CFR synthesis, CIR reconstruction and LoS phase extraction.
//! - [`phasemodel`]: closed-form phase model and observation simulation.
//! - [`calibration`]: scattered-point unwrapping and LOESS calibration surfaces.
//! - [`likelihood`]: location likelihood fields and peak search.
//! - [`refine`]: iterative cross-band refinement and 1D ambiguity resolution.
//! - [`baseline`]: TDoA multilateration, sensor models and Kalman tracking.
//! - [`eval`]: Monte-Carlo experiment harness and summary statistics.

pub mod baseline;
pub mod calibration;
pub mod channel;
pub mod error;
pub mod eval;
pub mod likelihood;
pub mod phasemodel;
pub mod refine;
pub mod rng;
pub mod scene;

pub use error::{Error, Result};

/// Speed of light in vacuum, m/s (exact SI value).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// 3D vector in meters.
pub type Vec3 = nalgebra::Vector3<f64>;

/// Degrees to radians.
#[inline]
pub fn deg(v: f64) -> f64 {
    v.to_radians()
}
