//! Measurement simulation: SPAM errors, quantum projection noise and scan
//! execution.
//!
//! Observed probabilities follow the affine map
//! p_obs = ε_d + ((1−ε_b) − ε_d)·S·p_ideal, with bright-state survival
//! S = (1−ε_p)·(1−ε_t)^n composed from preparation and the n coherent
//! transfer pulses in the prep/readout path. Counts are binomial with a
//! counter-based RNG stream per (master seed, scan index, point index), so
//! results are reproducible and independent of evaluation order.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Binomial, Distribution};

use crate::numeric::mix64;
use crate::qubit::{run_sequence, PulseElement, QubitState, SequenceConfig};
use crate::scenario::ResolvedScenario;
use crate::{Error, Result};

/// State-preparation and measurement error budget.
#[derive(Debug, Clone, Copy)]
pub struct SpamModel {
    pub prep_error: f64,
    /// Per-transfer-pulse infidelity ε_t.
    pub transfer_infidelity: f64,
    pub dark_error: f64,
    pub bright_error: f64,
    /// Transfer pulses in the prep/readout path.
    pub transfer_pulses: u32,
}

impl Default for SpamModel {
    fn default() -> Self {
        Self {
            prep_error: 0.0,
            transfer_infidelity: 0.008,
            dark_error: 0.0,
            bright_error: 0.0,
            transfer_pulses: 2,
        }
    }
}

impl SpamModel {
    /// No errors at all.
    pub fn ideal() -> Self {
        Self {
            prep_error: 0.0,
            transfer_infidelity: 0.0,
            dark_error: 0.0,
            bright_error: 0.0,
            transfer_pulses: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("prep_error", self.prep_error),
            ("transfer_infidelity", self.transfer_infidelity),
            ("dark_error", self.dark_error),
            ("bright_error", self.bright_error),
        ] {
            if !(0.0..0.5).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 0.5)")));
            }
        }
        Ok(())
    }

    /// Bright-state survival S = (1−ε_p)(1−ε_t)^n.
    pub fn bright_survival(&self) -> f64 {
        (1.0 - self.prep_error)
            * (1.0 - self.transfer_infidelity).powi(self.transfer_pulses as i32)
    }
}

/// Affine SPAM map (see module docs).
pub fn apply_spam(p_ideal: f64, spam: &SpamModel) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_ideal) {
        return Err(Error::invalid(format!("p_ideal {p_ideal} outside [0, 1]")));
    }
    spam.validate()?;
    Ok(apply_spam_survival(p_ideal, spam.bright_survival(), spam))
}

fn apply_spam_survival(p_ideal: f64, survival: f64, spam: &SpamModel) -> f64 {
    spam.dark_error + ((1.0 - spam.bright_error) - spam.dark_error) * survival * p_ideal
}

/// Counter-based RNG stream for one scan point.
pub fn point_rng(master_seed: u64, scan_index: u64, point_index: u64) -> ChaCha12Rng {
    let k0 = mix64(master_seed);
    let k1 = mix64(k0 ^ mix64(scan_index.wrapping_add(0x5ca1ab1e)));
    let k2 = mix64(k1 ^ mix64(point_index.wrapping_add(0xdecafbad)));
    let k3 = mix64(k2);
    let mut seed = [0u8; 32];
    seed[0..8].copy_from_slice(&k0.to_le_bytes());
    seed[8..16].copy_from_slice(&k1.to_le_bytes());
    seed[16..24].copy_from_slice(&k2.to_le_bytes());
    seed[24..32].copy_from_slice(&k3.to_le_bytes());
    ChaCha12Rng::from_seed(seed)
}

/// Draw k ~ Binomial(N, p) and return (p̂, σ). The projection-noise error
/// bar uses p̂ clamped to [1/2N, 1−1/2N] so weighted fits stay defined at
/// p̂ ∈ {0, 1}.
pub fn sample_counts(p_obs: f64, shots: u32, rng: &mut ChaCha12Rng) -> (f64, f64) {
    let n = shots.max(1) as u64;
    let k = Binomial::new(n, p_obs.clamp(0.0, 1.0))
        .expect("valid binomial parameters")
        .sample(rng);
    let p_hat = k as f64 / n as f64;
    (p_hat, projection_sigma(p_hat, shots))
}

/// σ = √(p̂(1−p̂)/N) with the 1/2N clamp applied to p̂ for σ only.
pub fn projection_sigma(p_hat: f64, shots: u32) -> f64 {
    let n = shots.max(1) as f64;
    let p = p_hat.clamp(1.0 / (2.0 * n), 1.0 - 1.0 / (2.0 * n));
    (p * (1.0 - p) / n).sqrt()
}

// ---------------------------------------------------------------------------
// Scans
// ---------------------------------------------------------------------------

/// Which sequence knob a scan sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanVariable {
    /// Beam switch-off time within each transport segment (s).
    TOff,
    /// Value of the first phase-shift element (rad).
    Phase,
    /// Base two-photon detuning (rad/s).
    Frequency,
}

impl ScanVariable {
    pub fn name(&self) -> &'static str {
        match self {
            ScanVariable::TOff => "t_off",
            ScanVariable::Phase => "phase",
            ScanVariable::Frequency => "frequency",
        }
    }

    pub fn unit(&self) -> &'static str {
        match self {
            ScanVariable::TOff => "s",
            ScanVariable::Phase => "rad",
            ScanVariable::Frequency => "rad/s",
        }
    }
}

/// Scan grid and statistics.
#[derive(Debug, Clone, Copy)]
pub struct ScanSpec {
    pub variable: ScanVariable,
    pub start: f64,
    pub stop: f64,
    pub points: usize,
    pub shots: u32,
}

impl ScanSpec {
    pub fn grid(&self) -> Vec<f64> {
        if self.points <= 1 {
            return vec![self.start];
        }
        (0..self.points)
            .map(|k| {
                self.start + (self.stop - self.start) * k as f64 / (self.points - 1) as f64
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points == 0 {
            return Err(Error::invalid("scan grid must be non-empty"));
        }
        if self.shots == 0 {
            return Err(Error::invalid("shots must be ≥ 1"));
        }
        if self.variable == ScanVariable::TOff && (self.start < 0.0 || self.stop < 0.0) {
            return Err(Error::invalid("t_off must be ≥ 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct ScanPoint {
    pub x: f64,
    pub p_hat: f64,
    pub sigma: f64,
    pub n: u32,
}

/// One ion's scan data.
#[derive(Debug, Clone)]
pub struct ScanResult {
    pub variable: String,
    pub unit: String,
    pub ion: String,
    pub seed: u64,
    pub points: Vec<ScanPoint>,
}

impl ScanResult {
    pub fn xs(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.x).collect()
    }

    pub fn ys(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.p_hat).collect()
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.sigma).collect()
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# scan variable={} unit={} ion={} seed={}",
            self.variable, self.unit, self.ion, self.seed
        );
        out.push_str("x,p_hat,sigma,n\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{},{}", p.x, p.p_hat, p.sigma, p.n);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

/// Noiseless scan evaluation: (x, ideal P↑, SPAM-mapped p_obs) per point.
pub type NoiselessScan = Vec<(f64, f64, f64)>;

fn evaluate_point(
    scenario: &ResolvedScenario,
    ion: usize,
    variable: ScanVariable,
    x: f64,
) -> Result<(f64, f64)> {
    let annotate = |e: Error| match e {
        Error::Sequencing { element, message } => Error::Sequencing {
            element,
            message: format!("{message} (scan {} = {x})", variable.name()),
        },
        other => other,
    };
    let elements = scenario.sequence_for(ion, variable, x)?;
    let base = match variable {
        ScanVariable::Frequency => x,
        _ => scenario.base_detuning,
    };
    let config = SequenceConfig { base_detuning: base, ..Default::default() };
    let (_, p_ideal) =
        run_sequence(&QubitState::up(), &elements, &config).map_err(annotate)?;
    let survival = effective_survival(&scenario.spam, &elements);
    let p_obs = apply_spam_survival(p_ideal.clamp(0.0, 1.0), survival, &scenario.spam);
    Ok((p_ideal, p_obs))
}

/// Explicit transfer elements in the sequence replace the count-based
/// transfer term of the SPAM model.
fn effective_survival(spam: &SpamModel, elements: &[PulseElement]) -> f64 {
    let transfers: Vec<f64> = elements
        .iter()
        .filter_map(|e| match e {
            PulseElement::Transfer { fidelity } => Some(*fidelity),
            _ => None,
        })
        .collect();
    if transfers.is_empty() {
        spam.bright_survival()
    } else {
        (1.0 - spam.prep_error) * transfers.iter().product::<f64>()
    }
}

/// Run the scenario's scan for every ion. Scan points are independent; with
/// `threads > 1` they evaluate on a local thread pool, and the counter-based
/// RNG keeps results identical to the serial path.
pub fn run_scan(scenario: &ResolvedScenario, threads: usize) -> Result<Vec<ScanResult>> {
    let spec = scenario
        .scan
        .ok_or_else(|| Error::Config("scenario has no [scan] section".into()))?;
    spec.validate()?;
    scenario.spam.validate()?;
    let grid = spec.grid();
    let mut results = Vec::with_capacity(scenario.n_ions());
    for ion in 0..scenario.n_ions() {
        let eval = |(idx, &x): (usize, &f64)| -> Result<ScanPoint> {
            let (_, p_obs) = evaluate_point(scenario, ion, spec.variable, x)?;
            let mut rng = point_rng(scenario.seed, ion as u64, idx as u64);
            let (p_hat, sigma) = sample_counts(p_obs, spec.shots, &mut rng);
            Ok(ScanPoint { x, p_hat, sigma, n: spec.shots })
        };
        let points: Result<Vec<ScanPoint>> = if threads > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?;
            pool.install(|| {
                use rayon::prelude::*;
                grid.par_iter().enumerate().map(eval).collect()
            })
        } else {
            grid.iter().enumerate().map(eval).collect()
        };
        results.push(ScanResult {
            variable: spec.variable.name().into(),
            unit: spec.variable.unit().into(),
            ion: scenario.ion_name(ion).into(),
            seed: scenario.seed,
            points: points?,
        });
    }
    Ok(results)
}

/// Noiseless version of [`run_scan`]: returns (x, p_ideal, p_obs) per ion.
pub fn run_scan_noiseless(scenario: &ResolvedScenario) -> Result<Vec<NoiselessScan>> {
    let spec = scenario
        .scan
        .ok_or_else(|| Error::Config("scenario has no [scan] section".into()))?;
    spec.validate()?;
    let grid = spec.grid();
    let mut out = Vec::with_capacity(scenario.n_ions());
    for ion in 0..scenario.n_ions() {
        let mut pts = Vec::with_capacity(grid.len());
        for &x in &grid {
            let (p_ideal, p_obs) = evaluate_point(scenario, ion, spec.variable, x)?;
            pts.push((x, p_ideal, p_obs));
        }
        out.push(pts);
    }
    Ok(out)
}

/// Standardised third moment of a dip lineshape: weights are the depth below
/// the baseline (max p). Zero for symmetric lines; the sign tracks which
/// side holds more weight.
pub fn dip_skewness(points: &[(f64, f64)]) -> f64 {
    let baseline = points.iter().map(|&(_, p)| p).fold(f64::NEG_INFINITY, f64::max);
    let wsum: f64 = points.iter().map(|&(_, p)| (baseline - p).max(0.0)).sum();
    if wsum <= 0.0 {
        return 0.0;
    }
    let mean: f64 =
        points.iter().map(|&(x, p)| x * (baseline - p).max(0.0)).sum::<f64>() / wsum;
    let m2: f64 = points
        .iter()
        .map(|&(x, p)| (x - mean).powi(2) * (baseline - p).max(0.0))
        .sum::<f64>()
        / wsum;
    let m3: f64 = points
        .iter()
        .map(|&(x, p)| (x - mean).powi(3) * (baseline - p).max(0.0))
        .sum::<f64>()
        / wsum;
    if m2 <= 0.0 {
        0.0
    } else {
        m3 / m2.powf(1.5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    #[test]
    fn spam_identity_when_error_free() {
        let spam = SpamModel::ideal();
        for &p in &[0.0, 0.3, 1.0] {
            assert_eq!(apply_spam(p, &spam).unwrap(), p);
        }
    }

    #[test]
    fn spam_two_transfer_passes() {
        let spam = SpamModel {
            transfer_infidelity: 0.008,
            transfer_pulses: 2,
            ..SpamModel::ideal()
        };
        let p = apply_spam(1.0, &spam).unwrap();
        assert_relative_eq!(p, 0.992_f64 * 0.992, max_relative = 1e-12);
    }

    #[test]
    fn spam_affine_midpoint() {
        let spam = SpamModel {
            prep_error: 0.01,
            transfer_infidelity: 0.008,
            dark_error: 0.02,
            bright_error: 0.015,
            transfer_pulses: 2,
        };
        let a = apply_spam(1.0, &spam).unwrap() - apply_spam(0.0, &spam).unwrap();
        let b = apply_spam(0.0, &spam).unwrap();
        assert_relative_eq!(apply_spam(0.5, &spam).unwrap(), 0.5 * a + b, max_relative = 1e-12);
    }

    #[test]
    fn spam_monotone_into_unit_interval() {
        let spam = SpamModel {
            prep_error: 0.2,
            transfer_infidelity: 0.3,
            dark_error: 0.4,
            bright_error: 0.45,
            transfer_pulses: 3,
        };
        let mut prev = -1.0;
        for k in 0..=100 {
            let p = apply_spam(k as f64 / 100.0, &spam).unwrap();
            assert!((0.0..=1.0).contains(&p));
            assert!(p >= prev);
            prev = p;
        }
    }

    #[test]
    fn spam_rejects_out_of_range() {
        assert!(apply_spam(1.2, &SpamModel::ideal()).is_err());
        let bad = SpamModel { prep_error: 0.6, ..SpamModel::ideal() };
        assert!(apply_spam(0.5, &bad).is_err());
    }

    #[test]
    fn counts_at_extremes() {
        let mut rng = point_rng(1, 0, 0);
        assert_eq!(sample_counts(0.0, 100, &mut rng).0, 0.0);
        assert_eq!(sample_counts(1.0, 100, &mut rng).0, 1.0);
    }

    #[test]
    fn projection_sigma_at_half() {
        // √(0.25/350) ≈ 0.0267
        assert_relative_eq!(projection_sigma(0.5, 350), 0.026726, max_relative = 1e-4);
        // clamp keeps σ finite at p̂ = 0
        assert!(projection_sigma(0.0, 350) > 0.0);
    }

    #[test]
    fn streams_reproducible_and_order_independent() {
        let mut a = point_rng(99, 2, 17);
        let mut b = point_rng(99, 2, 17);
        assert_eq!(sample_counts(0.37, 350, &mut a), sample_counts(0.37, 350, &mut b));
        // different point index gives a different stream
        let mut c = point_rng(99, 2, 18);
        let draws_a: Vec<f64> = (0..8).map(|_| sample_counts(0.37, 350, &mut a).0).collect();
        let draws_c: Vec<f64> = (0..8).map(|_| sample_counts(0.37, 350, &mut c).0).collect();
        assert_ne!(draws_a, draws_c);
    }

    #[test]
    fn sample_mean_converges() {
        let p = 0.37;
        let shots = 350;
        let reps = 1000;
        let mut sum = 0.0;
        for k in 0..reps {
            let mut rng = point_rng(7, 0, k);
            sum += sample_counts(p, shots, &mut rng).0;
        }
        let mean = sum / reps as f64;
        let sigma = (p * (1.0 - p) / shots as f64).sqrt();
        assert!(
            (mean - p).abs() < 4.0 * sigma / (reps as f64).sqrt(),
            "mean {mean} vs p {p}"
        );
    }

    #[test]
    fn transfer_elements_replace_count_based_spam_term() {
        use crate::qubit::PulseElement;
        // sequence-declared transfer pulses override the model's count
        let spam = SpamModel {
            transfer_infidelity: 0.05,
            transfer_pulses: 4,
            ..SpamModel::ideal()
        };
        let elements = vec![
            PulseElement::Transfer { fidelity: 0.992 },
            PulseElement::Transfer { fidelity: 0.992 },
        ];
        let s = effective_survival(&spam, &elements);
        assert_relative_eq!(s, 0.992 * 0.992, max_relative = 1e-12);
        // without transfer elements the model's count applies
        let s2 = effective_survival(&spam, &[]);
        assert_relative_eq!(s2, 0.95_f64.powi(4), max_relative = 1e-12);
    }

    #[test]
    fn constant_velocity_lineshape_is_symmetric() {
        // α = 0, constant v: the noiseless frequency-scan line is symmetric
        // about its center
        use crate::beam::BeamGeometry;
        use crate::qubit::{PulseElement, Trajectory};
        use crate::scenario::ResolvedScenario;
        let beam =
            BeamGeometry::new(0.0, std::f64::consts::FRAC_PI_4, 36.5e-6, 30e3 * 2.0 * std::f64::consts::PI)
                .unwrap();
        let reach = 8.0 * beam.waist / beam.angle.sin();
        let v = 8.0;
        let el = PulseElement::Transport {
            trajectory: Trajectory::ConstantVelocity {
                z_start: -reach,
                velocity: v,
                duration: 2.0 * reach / v,
            },
            beams: vec![beam],
            beam_off_time: None,
            phase: 0.0,
        };
        let scan = ScanSpec {
            variable: ScanVariable::Frequency,
            start: -2.0 * std::f64::consts::PI * 40e3,
            stop: 2.0 * std::f64::consts::PI * 40e3,
            points: 81,
            shots: 1,
        };
        let scenario = ResolvedScenario::single_ion(vec![el], SpamModel::ideal(), Some(scan), 1);
        let noiseless = run_scan_noiseless(&scenario).unwrap();
        let pts: Vec<(f64, f64)> = noiseless[0].iter().map(|p| (p.0, p.1)).collect();
        assert!(dip_skewness(&pts).abs() < 1e-6, "skew {}", dip_skewness(&pts));
        // and mirrored points agree exactly
        let n = pts.len();
        for k in 0..n / 2 {
            assert_abs_diff_eq!(pts[k].1, pts[n - 1 - k].1, epsilon = 1e-9);
        }
    }

    #[test]
    fn skewness_sign_detects_asymmetry() {
        let sym: Vec<(f64, f64)> =
            (-20..=20).map(|k| (k as f64, 1.0 - (-(k as f64 / 6.0).powi(2)).exp())).collect();
        assert!(dip_skewness(&sym).abs() < 1e-12);
        let asym: Vec<(f64, f64)> = (-20..=20)
            .map(|k| {
                let x = k as f64;
                let w = if x > 0.0 { 9.0 } else { 4.0 };
                (x, 1.0 - (-(x * x) / (2.0 * w)).exp())
            })
            .collect();
        assert!(dip_skewness(&asym) > 0.01);
    }
}
