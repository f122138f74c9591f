//! Inverse problems: transit pulse areas, velocity calibration, velocity
//! deduction from fit parameters, Doppler-misalignment nulling and
//! residual-detuning fidelity budgets.

use serde::Serialize;

use crate::beam::{self, BeamGeometry};
use crate::fit::{fit_scan, gaussian_model};
use crate::measure::{run_scan, ScanVariable};
use crate::numeric::quad::adaptive_simpson;
use crate::numeric::root::{brent, RootError};
use crate::qubit::{
    average_fidelity, rotation_unitary, run_sequence, sequence_unitary, PulseElement, QubitState,
    SequenceConfig, Trajectory,
};
use crate::scenario::ResolvedScenario;
use crate::{Error, Result};

/// Result of a calibration solve, serialisable as the report JSON.
#[derive(Debug, Clone, Serialize)]
pub struct CalibrationReport {
    pub quantity: String,
    pub value: f64,
    pub unit: String,
    pub residual: f64,
    pub iterations: usize,
    pub method: String,
}

impl CalibrationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

/// How far out (in beam-frame waists) a transit starts and ends.
const TRANSIT_REACH_WAISTS: f64 = 8.0;

/// A constant-velocity transport element through `beam`, long enough that
/// the drive at both ends is negligible.
pub fn transit_element(
    beam: &BeamGeometry,
    velocity: f64,
    beam_off_time: Option<f64>,
    phase: f64,
) -> PulseElement {
    let reach = TRANSIT_REACH_WAISTS * beam.waist / beam.angle.sin();
    let duration = 2.0 * reach / velocity.abs();
    let z_start = beam.center - reach * velocity.signum();
    PulseElement::Transport {
        trajectory: Trajectory::ConstantVelocity { z_start, velocity, duration },
        beams: vec![*beam],
        beam_off_time,
        phase,
    }
}

/// Total rotation angle θ = ∫Ω(z(t))dt for a constant-velocity transit;
/// equals (1/|v|)∫Ω(z)dz. Adaptive quadrature, relative tolerance 1e-10.
pub fn pulse_area(beam: &BeamGeometry, velocity: f64) -> f64 {
    if beam.peak_rabi == 0.0 {
        return 0.0;
    }
    let reach = TRANSIT_REACH_WAISTS * beam.waist / beam.angle.sin();
    let area = adaptive_simpson(
        &|z| beam::rabi_at_position(beam, z),
        beam.center - reach,
        beam.center + reach,
        1e-10,
    );
    area / velocity.abs()
}

/// Closed-form transit pulse area Ω_pk·√(π/p)·w0/(|v|·sinθ); used as an
/// independent oracle for [`pulse_area`].
pub fn pulse_area_closed_form(beam: &BeamGeometry, velocity: f64) -> f64 {
    let p = beam.profile_exponent as f64;
    beam.peak_rabi * (std::f64::consts::PI / p).sqrt() * beam.waist
        / (velocity.abs() * beam.angle.sin())
}

#[derive(Debug, Clone)]
pub struct VelocityCalibration {
    pub velocity: f64,
    /// θ(v) − θ_target at the solution.
    pub residual: f64,
    pub iterations: usize,
    /// |⟨R(θ)↑|ψ(v)⟩|² from a full spin propagation at δ = 0.
    pub verified_fidelity: f64,
}

impl VelocityCalibration {
    pub fn report(&self) -> CalibrationReport {
        CalibrationReport {
            quantity: "velocity".into(),
            value: self.velocity,
            unit: "m/s".into(),
            residual: self.residual,
            iterations: self.iterations,
            method: "brent on pulse_area(v) − θ_target".into(),
        }
    }
}

/// Solve pulse_area(v) = θ_target for v within `bracket` (relative tolerance
/// 1e-8), then verify the returned velocity with a full spin propagation.
pub fn solve_velocity(
    beam: &BeamGeometry,
    theta_target: f64,
    bracket: (f64, f64),
) -> Result<VelocityCalibration> {
    let (lo, hi) = bracket;
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::invalid("velocity bracket must satisfy 0 < v_lo < v_hi"));
    }
    let g = |v: f64| pulse_area(beam, v) - theta_target;
    let root = match brent(g, lo, hi, 1e-8 * 0.5 * (lo + hi), 1e-12 * theta_target, 200) {
        Ok(r) => r,
        Err(RootError::NotBracketed { f_lo, f_hi }) => {
            return Err(Error::Bracket {
                lo,
                hi,
                f_lo: f_lo + theta_target,
                f_hi: f_hi + theta_target,
            })
        }
        Err(RootError::IterationLimit) => {
            return Err(Error::invalid("velocity solve exceeded its iteration budget"))
        }
    };
    let velocity = root.x;

    // verification: propagate the actual transit at δ = 0 (the beam's own
    // offsets stripped) and compare with the ideal rotation
    let mut resonant = *beam;
    resonant.stark_offset = 0.0;
    resonant.alignment_error = 0.0;
    let el = transit_element(&resonant, velocity, None, 0.0);
    let (state, _) = run_sequence(&QubitState::up(), &[el], &SequenceConfig::default())?;
    let target_state = rotation_unitary(theta_target, 0.0).apply(&QubitState::up());
    let verified_fidelity = state.overlap(&target_state).norm_sqr();
    if verified_fidelity < 0.9999 {
        return Err(Error::invalid(format!(
            "velocity verification failed: state fidelity {verified_fidelity:.6}"
        )));
    }
    Ok(VelocityCalibration {
        velocity,
        residual: root.f,
        iterations: root.iterations,
        verified_fidelity,
    })
}

/// The published relation between the transit-model decay rate and the
/// transport velocity, implemented verbatim: v = √2·w0·χ.
pub fn deduce_velocity(chi_fit: f64, waist: f64) -> f64 {
    std::f64::consts::SQRT_2 * waist * chi_fit
}

#[derive(Debug, Clone)]
pub struct DopplerNull {
    /// Estimated alignment error (rad).
    pub alpha: f64,
    /// Gaussian-fit centers of the forward and reversed scans (rad/s).
    pub centers: [f64; 2],
    pub center_sigmas: [f64; 2],
    /// Transport speed used in the conversion (m/s).
    pub speed: f64,
}

impl DopplerNull {
    pub fn report(&self) -> CalibrationReport {
        CalibrationReport {
            quantity: "alignment_error".into(),
            value: self.alpha,
            unit: "rad".into(),
            residual: (self.center_sigmas[0].powi(2) + self.center_sigmas[1].powi(2)).sqrt()
                / (2.0 * self.speed),
            iterations: 2,
            method: "gaussian centers of forward/reversed frequency scans".into(),
        }
    }
}

/// Estimate the beam-pair alignment error from two frequency scans with the
/// transport direction reversed in between: the Doppler term δ_D = kαv flips
/// sign, so the fitted centers separate by 2kαv and
/// α = (ω_rev − ω_fwd)/(2k|v|).
pub fn doppler_null(scenario: &ResolvedScenario, threads: usize) -> Result<DopplerNull> {
    let spec = scenario
        .scan
        .ok_or_else(|| Error::Config("doppler_null needs a frequency scan".into()))?;
    if spec.variable != ScanVariable::Frequency {
        return Err(Error::Config("doppler_null needs a frequency scan".into()));
    }
    let (beam, speed) = first_transport_geometry(scenario)?;
    let fwd = run_scan(scenario, threads)?;
    let rev = run_scan(&scenario.reversed(), threads)?;
    let (c_fwd, s_fwd) = fit_dip_center(&fwd[0])?;
    let (c_rev, s_rev) = fit_dip_center(&rev[0])?;
    let alpha = (c_rev - c_fwd) / (2.0 * beam.wavenumber * speed);
    Ok(DopplerNull {
        alpha,
        centers: [c_fwd, c_rev],
        center_sigmas: [s_fwd, s_rev],
        speed,
    })
}

/// Gaussian-fit a dip center on the core of the line (points below half
/// depth). The true lineshape has heavier-than-Gaussian tails, so a
/// whole-window fit pulls both centers toward the window middle and
/// contracts their separation; near the bottom the line is symmetric and
/// locally quadratic, which the Gaussian matches, leaving the center
/// unbiased up to grid discreteness. Returns (center, fit σ of the center).
pub fn fit_dip_center(scan: &crate::measure::ScanResult) -> Result<(f64, f64)> {
    let model = gaussian_model();
    let n = scan.points.len();
    // smooth for the core selection only
    let smooth: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 2).min(n);
            scan.points[lo..hi].iter().map(|p| p.p_hat).sum::<f64>() / (hi - lo) as f64
        })
        .collect();
    let top = smooth.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let bottom = smooth.iter().cloned().fold(f64::INFINITY, f64::min);
    let threshold = top - 0.55 * (top - bottom);
    let i_min = smooth
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(n / 2);
    let mut lo = i_min;
    while lo > 0 && smooth[lo - 1] <= threshold {
        lo -= 1;
    }
    let mut hi = i_min;
    while hi + 1 < n && smooth[hi + 1] <= threshold {
        hi += 1;
    }
    let sel = &scan.points[lo..=hi];
    let fit = if sel.len() >= 2 * model.n_params() {
        let xs: Vec<f64> = sel.iter().map(|p| p.x).collect();
        let ys: Vec<f64> = sel.iter().map(|p| p.p_hat).collect();
        let ss: Vec<f64> = sel.iter().map(|p| p.sigma).collect();
        let (guess, _) = crate::fit::initial_guess(&model, &xs, &ys)?;
        crate::fit::fit_curve(&model, &xs, &ys, &ss, &guess)?
    } else {
        fit_scan(&model, scan, None)?
    };
    let c = fit.value("x0").ok_or_else(|| Error::Config("fit lost its center".into()))?;
    Ok((c, fit.sigma("x0").unwrap_or(f64::NAN)))
}

fn first_transport_geometry(scenario: &ResolvedScenario) -> Result<(BeamGeometry, f64)> {
    for el in &scenario.ions[0].elements {
        if let PulseElement::Transport { trajectory, beams, .. } = el {
            let beam = *beams
                .first()
                .ok_or_else(|| Error::Config("transport has no beams".into()))?;
            let speed = match trajectory {
                Trajectory::ConstantVelocity { velocity, .. } => velocity.abs(),
                Trajectory::Realized(rt) => {
                    let (_, v) = rt.sample(rt.duration() / 2.0);
                    v.abs()
                }
            };
            return Ok((beam, speed));
        }
    }
    Err(Error::Config("scenario has no transport element".into()))
}

/// Average fidelity of a transit gate with a residual detuning present
/// throughout the pulse: the effective unitary is extracted by propagating
/// the basis states and compared with the ideal rotation. `velocity` should
/// solve the target angle at δ = 0.
///
/// The residual detuning enters through the beam's Stark-offset channel
/// with the intensity-following exposure, regardless of how the beam is
/// otherwise configured: a detuning extended into the beam-free wings would
/// make the fidelity depend on the arbitrary length of the transit padding
/// instead of on the gate.
pub fn stark_fidelity(
    beam: &BeamGeometry,
    delta_residual: f64,
    theta_target: f64,
    velocity: f64,
) -> Result<f64> {
    let mut detuned = *beam;
    detuned.stark_offset = delta_residual;
    detuned.stark_exposure = crate::beam::StarkExposure::Intensity;
    let el = transit_element(&detuned, velocity, None, 0.0);
    let actual = sequence_unitary(&[el], &SequenceConfig::default())?;
    average_fidelity(&actual, &rotation_unitary(theta_target, 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::{ScanSpec, SpamModel};
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    const TAU: f64 = 2.0 * PI;
    const UM: f64 = 1e-6;

    fn b2_beam() -> BeamGeometry {
        // retro-reflected zone: 160 µm waist diameter, 16.1 kHz peak
        BeamGeometry::new(0.0, FRAC_PI_4, 80.0 * UM, TAU * 16.1e3).unwrap()
    }

    #[test]
    fn pulse_area_zero_without_drive() {
        let mut b = b2_beam();
        b.peak_rabi = 0.0;
        assert_eq!(pulse_area(&b, 3.0), 0.0);
    }

    #[test]
    fn pulse_area_scales_inversely_with_speed() {
        let b = b2_beam();
        let a1 = pulse_area(&b, 2.0);
        let a2 = pulse_area(&b, 4.0);
        assert_relative_eq!(a1, 2.0 * a2, max_relative = 1e-10);
        // quadrature agrees with the closed form
        assert_relative_eq!(a1, pulse_area_closed_form(&b, 2.0), max_relative = 1e-9);
    }

    #[test]
    fn b2_velocity_near_published_values() {
        // the quoted π calibration is ~4.7 m/s; our default geometry lands in
        // the same band, and the π/2 velocity is exactly twice the π one
        let b = b2_beam();
        let v_pi = solve_velocity(&b, PI, (1.0, 20.0)).unwrap();
        assert!(
            (3.5..6.0).contains(&v_pi.velocity),
            "v_pi = {} m/s",
            v_pi.velocity
        );
        let v_half = solve_velocity(&b, FRAC_PI_2, (1.0, 40.0)).unwrap();
        assert_relative_eq!(v_half.velocity, 2.0 * v_pi.velocity, max_relative = 1e-6);
        // published 8.9/4.7 ≈ 1.89 sits within 10% of the exact factor 2
        assert!((8.9_f64 / 4.7 - 2.0).abs() / 2.0 < 0.10);
        assert!(v_pi.verified_fidelity >= 0.9999);
    }

    #[test]
    fn solve_velocity_round_trip() {
        let b = b2_beam();
        let v_star = 5.3;
        let theta = pulse_area(&b, v_star);
        let cal = solve_velocity(&b, theta, (2.0, 9.0)).unwrap();
        assert_relative_eq!(cal.velocity, v_star, max_relative = 1e-8);
    }

    #[test]
    fn solve_velocity_bad_bracket() {
        let b = b2_beam();
        let r = solve_velocity(&b, PI, (100.0, 200.0));
        match r {
            Err(Error::Bracket { f_lo, f_hi, .. }) => {
                assert!(f_lo > 0.0 && f_hi > 0.0);
            }
            other => panic!("expected bracket error, got {other:?}"),
        }
    }

    #[test]
    fn deduce_velocity_consistency_fixture() {
        // χ = 7753 s⁻¹ with w0 = 56.6 µm → 0.62 m/s
        let v = deduce_velocity(7753.0, 56.6 * UM);
        assert_abs_diff_eq!(v, 0.6206, epsilon = 5e-4);
        assert_relative_eq!(deduce_velocity(2.0 * 7753.0, 56.6 * UM), 2.0 * v);
        assert_eq!(deduce_velocity(7753.0, 0.0), 0.0);
    }

    #[test]
    fn stark_fidelity_trivials() {
        let b = BeamGeometry::new(0.0, FRAC_PI_4, 36.5 * UM, TAU * 47.9e3).unwrap();
        let v = solve_velocity(&b, FRAC_PI_2, (1.0, 60.0)).unwrap().velocity;
        let f0 = stark_fidelity(&b, 0.0, FRAC_PI_2, v).unwrap();
        assert!((f0 - 1.0).abs() < 1e-8, "F(0) = {f0}");

        // even in δ
        let d = TAU * 1.3e3;
        let f_plus = stark_fidelity(&b, d, FRAC_PI_2, v).unwrap();
        let f_minus = stark_fidelity(&b, -d, FRAC_PI_2, v).unwrap();
        assert_abs_diff_eq!(f_plus, f_minus, epsilon = 1e-9);

        // quadratic small-δ scaling: halving δ quarters the infidelity
        let f_half = stark_fidelity(&b, d / 2.0, FRAC_PI_2, v).unwrap();
        let ratio = (1.0 - f_plus) / (1.0 - f_half);
        assert!((3.6..4.4).contains(&ratio), "ratio {ratio}");

        // the 1.3 kHz budget lands in the published band
        assert!((0.9995..=0.9999).contains(&f_plus), "F = {f_plus}");
    }

    #[test]
    fn doppler_null_recovers_alignment() {
        // long transit through a wide beam resolves the ~557 Hz shift
        let mut beam = BeamGeometry::new(0.0, FRAC_PI_4, 600.0 * UM, TAU * 4.7e3).unwrap();
        let alpha_true = 1e-3_f64.to_radians();
        beam.alignment_error = alpha_true;
        let v = 10.0;
        let el = transit_element(&beam, v, None, 0.0);
        let scan = ScanSpec {
            variable: ScanVariable::Frequency,
            start: -TAU * 6e3,
            stop: TAU * 6e3,
            points: 61,
            shots: 250,
        };
        let scenario =
            ResolvedScenario::single_ion(vec![el], SpamModel::ideal(), Some(scan), 11);
        let null = doppler_null(&scenario, 1).unwrap();
        assert!(
            (null.alpha - alpha_true).abs() <= 0.10 * alpha_true,
            "α = {} vs {}",
            null.alpha,
            alpha_true
        );

        // sign flips with the hidden misalignment
        let mut beam_neg = beam;
        beam_neg.alignment_error = -alpha_true;
        let el = transit_element(&beam_neg, v, None, 0.0);
        let scenario2 =
            ResolvedScenario::single_ion(vec![el], SpamModel::ideal(), Some(scan), 11);
        let null2 = doppler_null(&scenario2, 1).unwrap();
        assert!(null2.alpha < 0.0);

        // α = 0 is consistent with zero within the fit uncertainty
        let mut beam_zero = beam;
        beam_zero.alignment_error = 0.0;
        let el = transit_element(&beam_zero, v, None, 0.0);
        let scenario3 =
            ResolvedScenario::single_ion(vec![el], SpamModel::ideal(), Some(scan), 11);
        let null3 = doppler_null(&scenario3, 1).unwrap();
        let sigma_alpha = (null3.center_sigmas[0].powi(2) + null3.center_sigmas[1].powi(2))
            .sqrt()
            / (2.0 * beam.wavenumber * v);
        assert!(
            null3.alpha.abs() < 4.0 * sigma_alpha,
            "α̂ = {} vs σ {}",
            null3.alpha,
            sigma_alpha
        );
    }

    #[test]
    fn doppler_null_unbiased_in_noiseless_limit() {
        // σ → 0: recovery is exact up to the grid-discreteness floor of the
        // core-windowed fit (well under 2 % here)
        let mut beam = BeamGeometry::new(0.0, FRAC_PI_4, 600.0 * UM, TAU * 4.7e3).unwrap();
        let alpha_true = 1e-3_f64.to_radians();
        beam.alignment_error = alpha_true;
        let v = 10.0;
        let el = transit_element(&beam, v, None, 0.0);
        let scan = ScanSpec {
            variable: ScanVariable::Frequency,
            start: -TAU * 6e3,
            stop: TAU * 6e3,
            points: 61,
            shots: 1,
        };
        let scenario =
            ResolvedScenario::single_ion(vec![el], SpamModel::ideal(), Some(scan), 1);
        let centers: Vec<f64> = [scenario.clone(), scenario.reversed()]
            .iter()
            .map(|sc| {
                let noiseless = crate::measure::run_scan_noiseless(sc).unwrap();
                let scan_result = crate::measure::ScanResult {
                    variable: "frequency".into(),
                    unit: "rad/s".into(),
                    ion: "ion1".into(),
                    seed: 0,
                    points: noiseless[0]
                        .iter()
                        .map(|&(x, _, p_obs)| crate::measure::ScanPoint {
                            x,
                            p_hat: p_obs,
                            sigma: 1e-4,
                            n: 1,
                        })
                        .collect(),
                };
                fit_dip_center(&scan_result).unwrap().0
            })
            .collect();
        let alpha = (centers[1] - centers[0]) / (2.0 * beam.wavenumber * v);
        assert!(
            (alpha - alpha_true).abs() <= 0.02 * alpha_true,
            "noiseless α̂ = {alpha:.4e} vs {alpha_true:.4e}"
        );
    }

    #[test]
    fn report_serialises() {
        let b = b2_beam();
        let cal = solve_velocity(&b, PI, (1.0, 20.0)).unwrap();
        let json = cal.report().to_json();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["quantity"], "velocity");
        assert_eq!(v["unit"], "m/s");
    }
}
