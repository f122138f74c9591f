//! Laser-beam geometry: instantaneous Rabi frequency and detuning seen by a
//! moving ion at a Gaussian beam crossing.

use crate::{Error, Result};

/// Default optical wavelength for the Raman beam pair (m).
pub const DEFAULT_WAVELENGTH: f64 = 313e-9;

/// How a beam's Stark offset is exposed to a moving ion.
///
/// Physically the AC Stark shift follows the local intensity, which is what
/// reproduces published transit-gate fidelity budgets. Treating the offset
/// as uniform while the beam drives the ion instead makes frequency-scan
/// line centers shift by the full configured offset, matching static-ion
/// measurements of the shift; under the intensity-following model the
/// transit-averaged line shift is smaller (1/√2 of the peak for p = 2).
/// The two conventions cannot be reconciled by any single choice, so the
/// exposure is configurable per beam.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StarkExposure {
    /// Offset scales with the local normalised intensity (physical default).
    #[default]
    Intensity,
    /// Offset applies in full wherever the beam supplies drive.
    Uniform,
}

/// A Gaussian beam crossing the trap axis.
///
/// The perpendicular distance from the beam axis for an axial displacement
/// dz is dz·sin θ, so the Rabi profile along the axis is
/// Ω(z) = Ω_pk·exp(−p·((z−z_c)·sin θ)²/w0²).
///
/// `profile_exponent` p selects whether Ω tracks field amplitude (p = 1) or
/// intensity (p = 2, the default for overlapped co-propagating Raman pairs).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamGeometry {
    /// Crossing point on the trap axis (m).
    pub center: f64,
    /// Crossing angle to the trap axis (rad), 0 < θ ≤ π/2.
    pub angle: f64,
    /// 1/e² intensity radius (m). A quoted "waist diameter" is 2·w0.
    pub waist: f64,
    /// Peak two-photon Rabi frequency (rad/s).
    pub peak_rabi: f64,
    /// Profile exponent p ∈ {1, 2}.
    pub profile_exponent: u8,
    /// Static detuning offset (rad/s); houses e.g. an AC Stark differential.
    pub stark_offset: f64,
    /// How the Stark offset follows the beam profile.
    pub stark_exposure: StarkExposure,
    /// Beam-pair alignment error (rad); residual wavevector Δk = k·α.
    pub alignment_error: f64,
    /// Optical wavenumber k = 2π/λ (rad/m).
    pub wavenumber: f64,
}

impl BeamGeometry {
    pub fn new(center: f64, angle: f64, waist: f64, peak_rabi: f64) -> Result<Self> {
        let b = Self {
            center,
            angle,
            waist,
            peak_rabi,
            profile_exponent: 2,
            stark_offset: 0.0,
            stark_exposure: StarkExposure::default(),
            alignment_error: 0.0,
            wavenumber: 2.0 * std::f64::consts::PI / DEFAULT_WAVELENGTH,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.waist <= 0.0 {
            return Err(Error::invalid("beam waist must be positive"));
        }
        if !(self.angle > 0.0 && self.angle <= std::f64::consts::FRAC_PI_2) {
            return Err(Error::invalid("crossing angle must satisfy 0 < θ ≤ π/2"));
        }
        if self.peak_rabi < 0.0 {
            return Err(Error::invalid("peak Rabi frequency must be ≥ 0"));
        }
        if !matches!(self.profile_exponent, 1 | 2) {
            return Err(Error::invalid("profile exponent must be 1 or 2"));
        }
        Ok(())
    }

    /// Residual difference wavevector Δk = k·α (rad/m).
    pub fn residual_wavevector(&self) -> f64 {
        self.wavenumber * self.alignment_error
    }

    /// Normalised intensity envelope at axial position z, in [0, 1].
    pub fn intensity_fraction(&self, z: f64) -> f64 {
        let u = (z - self.center) * self.angle.sin() / self.waist;
        (-2.0 * u * u).exp()
    }

    /// Effective transit-profile decay rate χ = √p·|v|·sin θ / w0 for a
    /// constant-velocity crossing, i.e. Ω(t) = Ω_pk·exp(−χ²(t−t₀)²).
    pub fn transit_chi(&self, velocity: f64) -> f64 {
        (self.profile_exponent as f64).sqrt() * velocity.abs() * self.angle.sin() / self.waist
    }
}

/// Ω(z) for the beam's profile exponent.
pub fn rabi_at_position(beam: &BeamGeometry, z: f64) -> f64 {
    let u = (z - beam.center) * beam.angle.sin() / beam.waist;
    beam.peak_rabi * (-(beam.profile_exponent as f64) * u * u).exp()
}

/// Geometry of a retro-reflected second crossing: the waist grows by
/// `waist_scale` and the peak Rabi frequency drops with the transmitted
/// power and the larger spot, Ω_pk′ = Ω_pk·(T/waist_scale²)^(p/2). The
/// Stark offset scales with the same peak-intensity ratio. Measured values
/// can always be set directly on the returned geometry.
pub fn make_retro_zone(
    primary: &BeamGeometry,
    center: f64,
    waist_scale: f64,
    power_transmission: f64,
) -> Result<BeamGeometry> {
    if waist_scale < 1.0 {
        return Err(Error::invalid("waist_scale must be ≥ 1"));
    }
    if !(power_transmission > 0.0 && power_transmission <= 1.0) && power_transmission != 0.0 {
        return Err(Error::invalid("power_transmission must lie in (0, 1]"));
    }
    let intensity_ratio = power_transmission / (waist_scale * waist_scale);
    let p = primary.profile_exponent as f64;
    Ok(BeamGeometry {
        center,
        waist: primary.waist * waist_scale,
        peak_rabi: primary.peak_rabi * intensity_ratio.powf(p / 2.0),
        stark_offset: primary.stark_offset * intensity_ratio,
        ..*primary
    })
}

/// First-order Doppler detuning δ_D = Δk·v = k·α·v (rad/s).
pub fn doppler_shift(beam: &BeamGeometry, velocity: f64) -> f64 {
    beam.residual_wavevector() * velocity
}

/// Total instantaneous detuning at the beam center:
/// δ = base + δ₀ + δ_D(v).
pub fn total_detuning(beam: &BeamGeometry, velocity: f64, base: f64) -> f64 {
    base + beam.stark_offset + doppler_shift(beam, velocity)
}
