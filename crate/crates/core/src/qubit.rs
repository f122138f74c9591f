//! Two-level qubit dynamics in the rotating frame of the drive.
//!
//! The Hamiltonian is H = (δ(t)/2)σ_z + (Ω(t)/2)(cos φ σ_x + sin φ σ_y);
//! propagation uses exact 2×2 exponentials of the piecewise-constant
//! midpoint-sampled Hamiltonian, which is unconditionally unitary.
//!
//! The closed-form transit model for a constant-velocity Gaussian-beam
//! crossing is implemented verbatim as the fit model:
//! P(↑, t) = cos²(ζ/2), ζ(t) = (Ω₀/χ)√π·[erf(χt₀) − erf(χ(t₀−t))].
//! Note the printed prefactor: direct integration of Ω(t) = Ω_p·e^{−χ²(t−t₀)²}
//! gives a pulse area of (Ω_p/χ)(√π/2)·f, half the model's ζ at equal
//! parameters, so the physical peak Rabi frequency maps onto the model as
//! Ω₀ = Ω_p/2 (see [`eq1_parameters`]). The two routes are reconciled
//! numerically in the tests rather than by trusting the prefactor.

use num_complex::Complex64;

use crate::beam::{self, BeamGeometry};
use crate::waveform::RealizedTrajectory;
use crate::{Error, Result};

/// Normalised spin state (c↑, c↓).
#[derive(Debug, Clone, Copy)]
pub struct QubitState {
    pub up: Complex64,
    pub down: Complex64,
}

impl QubitState {
    pub fn up() -> Self {
        Self { up: Complex64::new(1.0, 0.0), down: Complex64::new(0.0, 0.0) }
    }

    pub fn down() -> Self {
        Self { up: Complex64::new(0.0, 0.0), down: Complex64::new(1.0, 0.0) }
    }

    pub fn norm_sq(&self) -> f64 {
        self.up.norm_sqr() + self.down.norm_sqr()
    }

    /// P(↑).
    pub fn p_up(&self) -> f64 {
        self.up.norm_sqr() / self.norm_sq()
    }

    pub fn overlap(&self, other: &QubitState) -> Complex64 {
        self.up.conj() * other.up + self.down.conj() * other.down
    }

    fn renormalize(&mut self) {
        let n = self.norm_sq().sqrt();
        if (n - 1.0).abs() > 1e-12 {
            self.up /= n;
            self.down /= n;
        }
    }
}

/// 2×2 unitary, row-major [[a, b], [c, d]].
#[derive(Debug, Clone, Copy)]
pub struct GateUnitary {
    pub m: [[Complex64; 2]; 2],
}

impl GateUnitary {
    pub fn identity() -> Self {
        let one = Complex64::new(1.0, 0.0);
        let zero = Complex64::new(0.0, 0.0);
        Self { m: [[one, zero], [zero, one]] }
    }

    pub fn apply(&self, s: &QubitState) -> QubitState {
        QubitState {
            up: self.m[0][0] * s.up + self.m[0][1] * s.down,
            down: self.m[1][0] * s.up + self.m[1][1] * s.down,
        }
    }

    pub fn mul(&self, rhs: &GateUnitary) -> GateUnitary {
        let mut out = [[Complex64::new(0.0, 0.0); 2]; 2];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, el) in row.iter_mut().enumerate() {
                *el = self.m[i][0] * rhs.m[0][j] + self.m[i][1] * rhs.m[1][j];
            }
        }
        GateUnitary { m: out }
    }

    pub fn adjoint(&self) -> GateUnitary {
        GateUnitary {
            m: [
                [self.m[0][0].conj(), self.m[1][0].conj()],
                [self.m[0][1].conj(), self.m[1][1].conj()],
            ],
        }
    }

    pub fn trace(&self) -> Complex64 {
        self.m[0][0] + self.m[1][1]
    }

    /// ‖U†U − I‖_max.
    pub fn unitarity_deviation(&self) -> f64 {
        let p = self.adjoint().mul(self);
        let mut dev = 0.0_f64;
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                dev = dev.max((p.m[i][j] - want).norm());
            }
        }
        dev
    }
}

/// Rotation by θ about the equatorial axis at azimuth φ:
/// U = cos(θ/2)·I − i·sin(θ/2)·(cos φ σ_x + sin φ σ_y).
pub fn rotation_unitary(theta: f64, phi: f64) -> GateUnitary {
    let c = Complex64::new((theta / 2.0).cos(), 0.0);
    let s = (theta / 2.0).sin();
    let mi = Complex64::new(0.0, -1.0);
    let e_m = Complex64::new(phi.cos(), -phi.sin());
    let e_p = Complex64::new(phi.cos(), phi.sin());
    GateUnitary { m: [[c, mi * s * e_m], [mi * s * e_p, c]] }
}

/// Exact propagator for one step of constant (Ω, δ, φ).
#[inline]
fn step_unitary(omega: f64, delta: f64, phi: f64, dt: f64) -> GateUnitary {
    let eff = (omega * omega + delta * delta).sqrt();
    if eff * dt.abs() < 1e-300 {
        return GateUnitary::identity();
    }
    let half = 0.5 * eff * dt;
    let c = half.cos();
    let s = half.sin();
    let (nx, ny, nz) = (omega * phi.cos() / eff, omega * phi.sin() / eff, delta / eff);
    // U = cos(half) I − i sin(half) (n·σ)
    GateUnitary {
        m: [
            [
                Complex64::new(c, -s * nz),
                Complex64::new(-s * ny, -s * nx),
            ],
            [
                Complex64::new(s * ny, -s * nx),
                Complex64::new(c, s * nz),
            ],
        ],
    }
}

/// Propagate through sampled (Ω, δ) series with fixed drive phase.
///
/// Each sample is treated as the Hamiltonian over one step of length `dt`
/// (callers provide midpoint samples). The state norm is corrected only when
/// drift exceeds 1e-12.
pub fn propagate_spin(
    state: &QubitState,
    omega: &[f64],
    delta: &[f64],
    phi: f64,
    dt: f64,
) -> Result<QubitState> {
    if omega.len() != delta.len() {
        return Err(Error::invalid("Ω and δ series must have equal length"));
    }
    if dt <= 0.0 {
        return Err(Error::invalid("dt must be positive"));
    }
    if omega.iter().chain(delta.iter()).any(|x| !x.is_finite()) {
        return Err(Error::invalid("non-finite sample in Ω or δ series"));
    }
    let mut s = *state;
    for (&om, &de) in omega.iter().zip(delta) {
        s = step_unitary(om, de, phi, dt).apply(&s);
        s.renormalize();
    }
    Ok(s)
}

/// The closed-form transit-Rabi probability, exactly as the fit model is
/// written: P(↑, t) = cos²(ζ/2) with ζ = (Ω₀/χ)√π·[erf(χt₀) − erf(χ(t₀−t))].
pub fn transit_probability_analytic(omega0: f64, chi: f64, t0: f64, t: f64) -> f64 {
    let f = libm::erf(chi * t0) - libm::erf(chi * (t0 - t));
    let zeta = omega0 / chi * std::f64::consts::PI.sqrt() * f;
    (zeta / 2.0).cos().powi(2)
}

/// Mapping from a physical beam crossing at constant speed onto the transit
/// model's (Ω₀, χ): χ = √p·|v|·sinθ/w0 and Ω₀ = Ω_pk/2 (the model's √π
/// prefactor counts the Gaussian pulse area twice; see the module docs).
pub fn eq1_parameters(beam: &BeamGeometry, velocity: f64) -> (f64, f64) {
    (beam.peak_rabi / 2.0, beam.transit_chi(velocity))
}

// ---------------------------------------------------------------------------
// Pulse sequences
// ---------------------------------------------------------------------------

/// Ion trajectory carried by a transport segment.
#[derive(Debug, Clone)]
pub enum Trajectory {
    /// Analytic constant-velocity motion.
    ConstantVelocity { z_start: f64, velocity: f64, duration: f64 },
    /// Tracked well trajectory from a synthesized waveform.
    Realized(RealizedTrajectory),
}

impl Trajectory {
    pub fn duration(&self) -> f64 {
        match self {
            Trajectory::ConstantVelocity { duration, .. } => *duration,
            Trajectory::Realized(rt) => rt.duration(),
        }
    }

    /// Position and velocity at time t from segment start (clamped to the
    /// segment).
    pub fn sample(&self, t: f64) -> (f64, f64) {
        match self {
            Trajectory::ConstantVelocity { z_start, velocity, duration } => {
                let tc = t.clamp(0.0, *duration);
                (z_start + velocity * tc, *velocity)
            }
            Trajectory::Realized(rt) => rt.sample(t),
        }
    }
}

/// One element of a pulse sequence.
#[derive(Debug, Clone)]
pub enum PulseElement {
    /// Ion transported through one or more beams; the beams switch off at
    /// `beam_off_time` (from segment start) when set.
    Transport {
        trajectory: Trajectory,
        beams: Vec<BeamGeometry>,
        beam_off_time: Option<f64>,
        phase: f64,
    },
    /// Resonantly driven stationary pulse of nominal angle θ.
    Static { theta: f64, phase: f64, detuning: f64, rabi: f64 },
    /// Shift added to the drive phase of all subsequent elements.
    PhaseShift { phi: f64 },
    /// Coherent population-transfer pulse; ideal here, its infidelity is
    /// consumed by the measurement model.
    Transfer { fidelity: f64 },
}

impl PulseElement {
    pub fn validate(&self) -> Result<()> {
        if let PulseElement::Transport { trajectory, beam_off_time: Some(t_off), .. } = self {
            if !(*t_off >= 0.0 && *t_off <= trajectory.duration()) {
                return Err(Error::invalid(format!(
                    "beam_off_time {t_off} outside segment duration {}",
                    trajectory.duration()
                )));
            }
        }
        Ok(())
    }
}

/// Propagation controls for [`run_sequence`].
#[derive(Debug, Clone, Copy)]
pub struct SequenceConfig {
    /// Base two-photon detuning (difference-frequency offset), rad/s.
    pub base_detuning: f64,
    /// Target phase advance per integration step, rad (step = budget/Ω_max).
    pub step_phase_budget: f64,
    /// Hard cap on the integration step (s).
    pub max_step: f64,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self { base_detuning: 0.0, step_phase_budget: 5e-3, max_step: 1e-6 }
    }
}

/// Final state and ideal P(↑) after applying `elements` in order.
pub fn run_sequence(
    initial: &QubitState,
    elements: &[PulseElement],
    config: &SequenceConfig,
) -> Result<(QubitState, f64)> {
    let mut state = *initial;
    let mut phase_acc = 0.0;
    for (idx, el) in elements.iter().enumerate() {
        el.validate().map_err(|e| Error::Sequencing { element: idx, message: e.to_string() })?;
        match el {
            PulseElement::Transport { trajectory, beams, beam_off_time, phase } => {
                state = propagate_transport(
                    &state,
                    trajectory,
                    beams,
                    *beam_off_time,
                    phase + phase_acc,
                    config,
                )
                .map_err(|e| match e {
                    Error::Sequencing { .. } => e,
                    other => Error::Sequencing { element: idx, message: other.to_string() },
                })?;
            }
            PulseElement::Static { theta, phase, detuning, rabi } => {
                if *rabi <= 0.0 {
                    return Err(Error::Sequencing {
                        element: idx,
                        message: "static pulse needs Ω > 0".into(),
                    });
                }
                let duration = theta.abs() / rabi;
                let n = (duration / (config.step_phase_budget / rabi)).ceil().max(1.0) as usize;
                let dt = duration / n as f64;
                let om = vec![*rabi * theta.signum(); n];
                let de = vec![config.base_detuning + detuning; n];
                state = propagate_spin(&state, &om, &de, phase + phase_acc, dt)?;
            }
            PulseElement::PhaseShift { phi } => phase_acc += phi,
            PulseElement::Transfer { .. } => {}
        }
    }
    let p_up = state.p_up();
    Ok((state, p_up))
}

/// Transport-segment propagation: converts position/velocity into Ω(t), δ(t).
///
/// Detuning contributions combine per beam: the Stark offset follows the
/// beam's [`StarkExposure`](crate::beam::StarkExposure) convention, while
/// the kinematic Doppler term applies in full wherever that beam supplies
/// drive, weighted by its share of the total Rabi frequency.
fn propagate_transport(
    state: &QubitState,
    trajectory: &Trajectory,
    beams: &[BeamGeometry],
    beam_off_time: Option<f64>,
    phi: f64,
    config: &SequenceConfig,
) -> Result<QubitState> {
    let duration = trajectory.duration();
    if duration <= 0.0 {
        return Ok(*state);
    }
    let omega_cap: f64 = beams.iter().map(|b| b.peak_rabi).sum::<f64>().max(1.0);
    let dt_target = (config.step_phase_budget / omega_cap).min(config.max_step);
    let t_end = beam_off_time.unwrap_or(duration).min(duration);

    let mut s = *state;
    if t_end > 0.0 {
        let n = (t_end / dt_target).ceil().max(1.0) as usize;
        let dt = t_end / n as f64;
        let mut om = Vec::with_capacity(n);
        let mut de = Vec::with_capacity(n);
        for k in 0..n {
            let t_mid = (k as f64 + 0.5) * dt;
            let (z, v) = trajectory.sample(t_mid);
            if !z.is_finite() || !v.is_finite() {
                return Err(Error::invalid("non-finite trajectory sample"));
            }
            let mut omega = 0.0;
            let mut stark_intensity = 0.0;
            let mut uniform_weighted = 0.0;
            let mut doppler_weighted = 0.0;
            for b in beams {
                let ob = beam::rabi_at_position(b, z);
                omega += ob;
                match b.stark_exposure {
                    beam::StarkExposure::Intensity => {
                        stark_intensity += b.intensity_fraction(z) * b.stark_offset;
                    }
                    beam::StarkExposure::Uniform => {
                        uniform_weighted += ob * b.stark_offset;
                    }
                }
                doppler_weighted += ob * beam::doppler_shift(b, v);
            }
            let share = |weighted: f64| if omega > 1e-9 { weighted / omega } else { 0.0 };
            om.push(omega);
            de.push(
                config.base_detuning
                    + stark_intensity
                    + share(uniform_weighted)
                    + share(doppler_weighted),
            );
        }
        s = propagate_spin(&s, &om, &de, phi, dt)?;
    }
    // after beam switch-off: free precession at the base detuning only
    let remaining = duration - t_end;
    if remaining > 0.0 {
        s = propagate_spin(&s, &[0.0], &[config.base_detuning], phi, remaining)?;
    }
    Ok(s)
}

/// Effective unitary of a pulse sequence, from propagating the basis states.
pub fn sequence_unitary(elements: &[PulseElement], config: &SequenceConfig) -> Result<GateUnitary> {
    let (col0, _) = run_sequence(&QubitState::up(), elements, config)?;
    let (col1, _) = run_sequence(&QubitState::down(), elements, config)?;
    Ok(GateUnitary { m: [[col0.up, col1.up], [col0.down, col1.down]] })
}

/// Average gate fidelity F = (d + |Tr(U_target† U)|²) / (d(d+1)), d = 2.
pub fn average_fidelity(actual: &GateUnitary, target: &GateUnitary) -> Result<f64> {
    for (name, u) in [("actual", actual), ("target", target)] {
        let dev = u.unitarity_deviation();
        if dev > 1e-6 {
            return Err(Error::NotUnitary { deviation: dev }).map_err(|e| {
                Error::invalid(format!("{name} gate: {e}"))
            });
        }
    }
    let tr = target.adjoint().mul(actual).trace();
    Ok((2.0 + tr.norm_sqr()) / 6.0)
}
