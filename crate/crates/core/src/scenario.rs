//! Declarative experiment descriptions.
//!
//! A scenario is a TOML document declaring the trap basis, ion species,
//! beams, output filter, SPAM budget, per-ion pulse sequences and the scan
//! to run. Config units are human-scale (µm, kHz, µs, deg, meV) and are
//! converted to SI (and rad/s) on ingest. Angle-valued fields accept
//! `pi`-expressions such as `"pi/2"` or `"3*pi/4"`.

use serde::Deserialize;

use crate::beam::BeamGeometry;
use crate::measure::{ScanSpec, ScanVariable, SpamModel};
use crate::qubit::{PulseElement, Trajectory};
use crate::trap::{load_basis, make_surrogate_basis_with_channels, ElectrodeBasis, IonSpecies};
use crate::waveform::{
    apply_filter, plan_trajectory, realized_trajectory, synthesize_waveform, FilterModel,
};
use crate::{Error, Result};

const TAU: f64 = 2.0 * std::f64::consts::PI;
const UM: f64 = 1e-6;
const US: f64 = 1e-6;

/// Parse an angle that may be a plain number (radians) or a `pi`-expression:
/// `pi`, `-pi/2`, `3*pi/4`, `0.5*pi`, `2pi`.
pub fn parse_angle(text: &str) -> Result<f64> {
    let s: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    if s.is_empty() {
        return Err(Error::Config("empty angle expression".into()));
    }
    let (sign, body) = match s.strip_prefix('-') {
        Some(rest) => (-1.0, rest),
        None => (1.0, s.as_str()),
    };
    if let Some(idx) = body.find("pi") {
        let (coeff_str, rest) = body.split_at(idx);
        let rest = &rest[2..];
        let coeff = if coeff_str.is_empty() {
            1.0
        } else {
            let c = coeff_str.strip_suffix('*').unwrap_or(coeff_str);
            c.parse::<f64>()
                .map_err(|_| Error::Config(format!("bad angle coefficient in `{text}`")))?
        };
        let divisor = if rest.is_empty() {
            1.0
        } else if let Some(d) = rest.strip_prefix('/') {
            let v = d
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad angle divisor in `{text}`")))?;
            if v == 0.0 {
                return Err(Error::Config("angle divisor is zero".into()));
            }
            v
        } else {
            return Err(Error::Config(format!("unrecognised angle expression `{text}`")));
        };
        Ok(sign * coeff * std::f64::consts::PI / divisor)
    } else {
        body.parse::<f64>()
            .map(|v| sign * v)
            .map_err(|_| Error::Config(format!("unrecognised angle expression `{text}`")))
    }
}

/// An angle or plain number that deserialises from either a TOML float or a
/// `pi`-expression string.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Angle(pub f64);

impl<'de> Deserialize<'de> for Angle {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(v) => Ok(Angle(v)),
            Raw::Text(s) => parse_angle(&s).map(Angle).map_err(serde::de::Error::custom),
        }
    }
}

// ---------------------------------------------------------------------------
// Config schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub base_detuning_khz: f64,
    pub basis: Option<BasisConfig>,
    pub ion: Option<IonConfig>,
    #[serde(default)]
    pub beams: Vec<BeamConfig>,
    pub filter: Option<FilterConfig>,
    pub spam: Option<SpamConfig>,
    pub synthesis: Option<SynthesisConfig>,
    #[serde(default, rename = "transport")]
    pub transports: Vec<TransportConfig>,
    #[serde(default)]
    pub ions: Vec<IonSequenceConfig>,
    pub scan: Option<ScanConfig>,
    /// Companion difference-frequency scan for the two-zone pipeline.
    pub frequency_scan: Option<FrequencyScanConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrequencyScanConfig {
    pub start_khz: f64,
    pub stop_khz: f64,
    pub points: usize,
    pub shots: u32,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisConfig {
    #[serde(default = "default_kind")]
    pub kind: String,
    #[serde(default = "default_n_electrodes")]
    pub n_electrodes: usize,
    #[serde(default = "default_pitch")]
    pub pitch_um: f64,
    #[serde(default = "default_width")]
    pub width_um: f64,
    pub span_um: Option<f64>,
    #[serde(default = "default_grid_step")]
    pub grid_step_um: f64,
    #[serde(default = "default_max_channels")]
    pub max_channels: usize,
    pub path: Option<String>,
}

fn default_kind() -> String {
    "surrogate".into()
}
fn default_n_electrodes() -> usize {
    30
}
fn default_pitch() -> f64 {
    120.0
}
fn default_width() -> f64 {
    120.0
}
fn default_grid_step() -> f64 {
    1.0
}
fn default_max_channels() -> usize {
    16
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IonConfig {
    pub mass_kg: f64,
    pub charge_c: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamConfig {
    pub name: String,
    pub center_um: f64,
    #[serde(default = "default_angle_deg")]
    pub angle_deg: f64,
    pub waist_um: f64,
    pub peak_rabi_khz: f64,
    #[serde(default = "default_profile_exponent")]
    pub profile_exponent: u8,
    #[serde(default)]
    pub stark_offset_khz: f64,
    /// "intensity" (default) or "uniform"; see the beam-model docs.
    #[serde(default = "default_stark_exposure")]
    pub stark_exposure: String,
    #[serde(default)]
    pub misalignment_mdeg: f64,
    #[serde(default = "default_wavelength_nm")]
    pub wavelength_nm: f64,
}

fn default_stark_exposure() -> String {
    "intensity".into()
}

fn default_angle_deg() -> f64 {
    45.0
}
fn default_profile_exponent() -> u8 {
    2
}
fn default_wavelength_nm() -> f64 {
    313.0
}

impl BeamConfig {
    pub fn to_geometry(&self) -> Result<BeamGeometry> {
        let stark_exposure = match self.stark_exposure.as_str() {
            "intensity" => crate::beam::StarkExposure::Intensity,
            "uniform" => crate::beam::StarkExposure::Uniform,
            other => {
                return Err(Error::Config(format!(
                    "stark_exposure must be `intensity` or `uniform`, got `{other}`"
                )))
            }
        };
        let b = BeamGeometry {
            center: self.center_um * UM,
            angle: self.angle_deg.to_radians(),
            waist: self.waist_um * UM,
            peak_rabi: TAU * self.peak_rabi_khz * 1e3,
            profile_exponent: self.profile_exponent,
            stark_offset: TAU * self.stark_offset_khz * 1e3,
            stark_exposure,
            alignment_error: (self.misalignment_mdeg * 1e-3).to_radians(),
            wavenumber: TAU / (self.wavelength_nm * 1e-9),
        };
        b.validate()?;
        Ok(b)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub cutoff_khz: f64,
    #[serde(default = "default_order")]
    pub order: usize,
}

fn default_order() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SpamConfig {
    #[serde(default)]
    pub prep_error: f64,
    #[serde(default = "default_transfer_infidelity")]
    pub transfer_infidelity: f64,
    #[serde(default = "default_transfer_pulses")]
    pub transfer_pulses: u32,
    #[serde(default)]
    pub dark_error: f64,
    #[serde(default)]
    pub bright_error: f64,
}

fn default_transfer_infidelity() -> f64 {
    0.008
}
fn default_transfer_pulses() -> u32 {
    2
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisConfig {
    #[serde(default = "default_omega_khz")]
    pub omega_khz: f64,
    #[serde(default = "default_depth_mev")]
    pub depth_mev: f64,
    #[serde(default = "default_sample_rate")]
    pub sample_rate_hz: f64,
    #[serde(default = "default_vmax")]
    pub vmax_v: f64,
    #[serde(default = "default_slew")]
    pub slew_v_per_s: f64,
    #[serde(default = "default_ramp_us")]
    pub ramp_us: f64,
}

fn default_omega_khz() -> f64 {
    2000.0
}
fn default_depth_mev() -> f64 {
    1.0
}
fn default_sample_rate() -> f64 {
    crate::waveform::DEFAULT_SAMPLE_RATE
}
fn default_vmax() -> f64 {
    crate::waveform::DEFAULT_VMAX
}
fn default_slew() -> f64 {
    crate::waveform::DEFAULT_SLEW
}
fn default_ramp_us() -> f64 {
    crate::waveform::DEFAULT_RAMP / US
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            omega_khz: default_omega_khz(),
            depth_mev: default_depth_mev(),
            sample_rate_hz: default_sample_rate(),
            vmax_v: default_vmax(),
            slew_v_per_s: default_slew(),
            ramp_us: default_ramp_us(),
        }
    }
}

/// Standalone transport target for waveform synthesis.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportConfig {
    pub from_um: f64,
    pub to_um: f64,
    pub velocity: f64,
    pub omega_khz: Option<f64>,
    pub depth_mev: Option<f64>,
    pub ramp_us: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IonSequenceConfig {
    pub name: String,
    #[serde(default)]
    pub sequence: Vec<ElementConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ElementConfig {
    Transport {
        from_um: f64,
        to_um: f64,
        velocity: f64,
        beams: Vec<String>,
        phase: Option<Angle>,
        t_off_us: Option<f64>,
        #[serde(default)]
        realized: bool,
    },
    Pulse {
        theta: Angle,
        phase: Option<Angle>,
        #[serde(default)]
        detuning_khz: f64,
        rabi_khz: f64,
    },
    Phase {
        phi: Angle,
    },
    Transfer {
        fidelity: Option<f64>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    pub variable: String,
    pub start: Angle,
    pub stop: Angle,
    pub points: usize,
    pub shots: u32,
}

impl ScanConfig {
    /// Convert to SI: t_off in µs → s, phase in rad, frequency in kHz → rad/s.
    pub fn to_spec(&self) -> Result<ScanSpec> {
        let variable = match self.variable.as_str() {
            "t_off" => ScanVariable::TOff,
            "phase" => ScanVariable::Phase,
            "frequency" => ScanVariable::Frequency,
            other => {
                return Err(Error::Config(format!(
                    "scan variable must be t_off, phase or frequency, got `{other}`"
                )))
            }
        };
        let scale = match variable {
            ScanVariable::TOff => US,
            ScanVariable::Phase => 1.0,
            ScanVariable::Frequency => TAU * 1e3,
        };
        Ok(ScanSpec {
            variable,
            start: self.start.0 * scale,
            stop: self.stop.0 * scale,
            points: self.points,
            shots: self.shots,
        })
    }
}

// ---------------------------------------------------------------------------
// Resolution
// ---------------------------------------------------------------------------

/// A fully resolved, runnable scenario.
#[derive(Debug, Clone)]
pub struct ResolvedScenario {
    pub species: IonSpecies,
    pub beams: Vec<(String, BeamGeometry)>,
    pub spam: SpamModel,
    pub base_detuning: f64,
    pub seed: u64,
    pub scan: Option<ScanSpec>,
    pub ions: Vec<ResolvedIon>,
}

#[derive(Debug, Clone)]
pub struct ResolvedIon {
    pub name: String,
    pub elements: Vec<PulseElement>,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn species(&self) -> Result<IonSpecies> {
        match &self.ion {
            Some(ion) => IonSpecies::new(ion.mass_kg, ion.charge_c),
            None => Ok(IonSpecies::beryllium()),
        }
    }

    pub fn spam_model(&self) -> SpamModel {
        match &self.spam {
            Some(s) => SpamModel {
                prep_error: s.prep_error,
                transfer_infidelity: s.transfer_infidelity,
                dark_error: s.dark_error,
                bright_error: s.bright_error,
                transfer_pulses: s.transfer_pulses,
            },
            None => SpamModel::default(),
        }
    }

    pub fn filter_model(&self) -> Result<Option<FilterModel>> {
        match &self.filter {
            Some(f) => Ok(Some(FilterModel::uniform(f.cutoff_khz * 1e3, f.order)?)),
            None => Ok(None),
        }
    }

    /// Build the electrode basis (required for `synth` and realized
    /// transports).
    pub fn build_basis(&self) -> Result<ElectrodeBasis> {
        let cfg = self
            .basis
            .as_ref()
            .ok_or_else(|| Error::Config("scenario has no [basis] section".into()))?;
        match cfg.kind.as_str() {
            "surrogate" => {
                let span = cfg.span_um.unwrap_or_else(|| {
                    cfg.pitch_um * (cfg.n_electrodes - 1) as f64 / 2.0 + 4.0 * cfg.width_um
                });
                make_surrogate_basis_with_channels(
                    cfg.n_electrodes,
                    cfg.pitch_um * UM,
                    cfg.width_um * UM,
                    span * UM,
                    cfg.grid_step_um * UM,
                    cfg.max_channels,
                )
            }
            "file" => {
                let path = cfg
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::Config("basis kind `file` needs `path`".into()))?;
                load_basis(std::path::Path::new(path), cfg.max_channels)
            }
            other => Err(Error::Config(format!("unknown basis kind `{other}`"))),
        }
    }

    fn beam_by_name(&self, beams: &[(String, BeamGeometry)], name: &str) -> Result<BeamGeometry> {
        beams
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| *b)
            .ok_or_else(|| Error::Config(format!("beam `{name}` is not declared")))
    }

    /// Resolve into runnable sequences. Realized transports synthesize their
    /// waveform here (and pass it through the output filter when one is
    /// configured).
    pub fn resolve(&self) -> Result<ResolvedScenario> {
        let species = self.species()?;
        let mut beams = Vec::new();
        for b in &self.beams {
            beams.push((b.name.clone(), b.to_geometry()?));
        }
        let spam = self.spam_model();
        spam.validate()?;
        let filter = self.filter_model()?;
        let scan = self.scan.as_ref().map(|s| s.to_spec()).transpose()?;
        let needs_basis = self
            .ions
            .iter()
            .flat_map(|i| &i.sequence)
            .any(|e| matches!(e, ElementConfig::Transport { realized: true, .. }));
        let basis = if needs_basis { Some(self.build_basis()?) } else { None };
        let synth = self.synthesis.clone().unwrap_or_default();

        let mut ions = Vec::new();
        for ion_cfg in &self.ions {
            let mut elements = Vec::new();
            for el in &ion_cfg.sequence {
                match el {
                    ElementConfig::Transport {
                        from_um,
                        to_um,
                        velocity,
                        beams: beam_names,
                        phase,
                        t_off_us,
                        realized,
                    } => {
                        let from = from_um * UM;
                        let to = to_um * UM;
                        if *velocity <= 0.0 {
                            return Err(Error::Config(
                                "transport velocity must be positive (direction comes from \
                                 from/to)"
                                    .into(),
                            ));
                        }
                        let signed_v = velocity * (to - from).signum();
                        let trajectory = if *realized {
                            let basis = basis.as_ref().expect("basis built above");
                            let plan = plan_trajectory(
                                from,
                                to,
                                signed_v,
                                TAU * synth.omega_khz * 1e3,
                                synth.depth_mev * 1e-3,
                                synth.sample_rate_hz,
                                synth.ramp_us * US,
                            )?;
                            let made = synthesize_waveform(
                                basis,
                                &plan,
                                &species,
                                synth.vmax_v,
                                synth.slew_v_per_s,
                            )?;
                            let wf = match &filter {
                                Some(f) => apply_filter(&made.waveform, f)?,
                                None => made.waveform,
                            };
                            Trajectory::Realized(realized_trajectory(basis, &wf, &species, from)?)
                        } else {
                            Trajectory::ConstantVelocity {
                                z_start: from,
                                velocity: signed_v,
                                duration: (to - from).abs() / velocity,
                            }
                        };
                        let mut beam_list = Vec::new();
                        for name in beam_names {
                            beam_list.push(self.beam_by_name(&beams, name)?);
                        }
                        elements.push(PulseElement::Transport {
                            trajectory,
                            beams: beam_list,
                            beam_off_time: t_off_us.map(|t| t * US),
                            phase: phase.map(|a| a.0).unwrap_or(0.0),
                        });
                    }
                    ElementConfig::Pulse { theta, phase, detuning_khz, rabi_khz } => {
                        elements.push(PulseElement::Static {
                            theta: theta.0,
                            phase: phase.map(|a| a.0).unwrap_or(0.0),
                            detuning: TAU * detuning_khz * 1e3,
                            rabi: TAU * rabi_khz * 1e3,
                        });
                    }
                    ElementConfig::Phase { phi } => {
                        elements.push(PulseElement::PhaseShift { phi: phi.0 });
                    }
                    ElementConfig::Transfer { fidelity } => {
                        elements.push(PulseElement::Transfer {
                            fidelity: fidelity.unwrap_or(1.0 - spam.transfer_infidelity),
                        });
                    }
                }
            }
            ions.push(ResolvedIon { name: ion_cfg.name.clone(), elements });
        }
        if ions.is_empty() {
            return Err(Error::Config("scenario declares no ions".into()));
        }
        let resolved = ResolvedScenario {
            species,
            beams,
            spam,
            base_detuning: TAU * self.base_detuning_khz * 1e3,
            seed: self.seed,
            scan,
            ions,
        };
        resolved.validate()?;
        Ok(resolved)
    }
}

impl ResolvedScenario {
    /// Minimal programmatic scenario: one ion with the given elements.
    pub fn single_ion(
        elements: Vec<PulseElement>,
        spam: SpamModel,
        scan: Option<ScanSpec>,
        seed: u64,
    ) -> Self {
        Self {
            species: IonSpecies::beryllium(),
            beams: Vec::new(),
            spam,
            base_detuning: 0.0,
            seed,
            scan,
            ions: vec![ResolvedIon { name: "ion1".into(), elements }],
        }
    }

    pub fn n_ions(&self) -> usize {
        self.ions.len()
    }

    pub fn ion_name(&self, ion: usize) -> &str {
        &self.ions[ion].name
    }

    fn validate(&self) -> Result<()> {
        if let Some(spec) = self.scan {
            if spec.variable == ScanVariable::Phase {
                for ion in &self.ions {
                    if !ion
                        .elements
                        .iter()
                        .any(|e| matches!(e, PulseElement::PhaseShift { .. }))
                    {
                        return Err(Error::Config(format!(
                            "phase scan needs a `phase` element in ion `{}`",
                            ion.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// The ion's sequence with the scan variable substituted at value `x`:
    /// `t_off` truncates every transport segment, `phase` replaces the first
    /// phase-shift element, `frequency` is handled by the caller via the
    /// base detuning.
    pub fn sequence_for(
        &self,
        ion: usize,
        variable: ScanVariable,
        x: f64,
    ) -> Result<Vec<PulseElement>> {
        let mut elements = self.ions[ion].elements.clone();
        match variable {
            ScanVariable::TOff => {
                for el in elements.iter_mut() {
                    if let PulseElement::Transport { trajectory, beam_off_time, .. } = el {
                        *beam_off_time =
                            if x < trajectory.duration() { Some(x.max(0.0)) } else { None };
                    }
                }
            }
            ScanVariable::Phase => {
                let shift = elements
                    .iter_mut()
                    .find_map(|e| match e {
                        PulseElement::PhaseShift { phi } => Some(phi),
                        _ => None,
                    })
                    .ok_or_else(|| {
                        Error::Config("phase scan needs a `phase` element".into())
                    })?;
                *shift = x;
            }
            ScanVariable::Frequency => {}
        }
        Ok(elements)
    }

    /// The same scenario with every transport run backwards (positions
    /// mirrored in time, velocities negated). Used for Doppler nulling.
    pub fn reversed(&self) -> Self {
        let mut out = self.clone();
        for ion in out.ions.iter_mut() {
            for el in ion.elements.iter_mut() {
                if let PulseElement::Transport { trajectory, .. } = el {
                    *trajectory = reverse_trajectory(trajectory);
                }
            }
        }
        out
    }
}

fn reverse_trajectory(t: &Trajectory) -> Trajectory {
    match t {
        Trajectory::ConstantVelocity { z_start, velocity, duration } => {
            Trajectory::ConstantVelocity {
                z_start: z_start + velocity * duration,
                velocity: -velocity,
                duration: *duration,
            }
        }
        Trajectory::Realized(rt) => {
            let mut rev = rt.clone();
            rev.position.reverse();
            rev.omega.reverse();
            rev.depth_ev.reverse();
            rev.velocity.reverse();
            for v in rev.velocity.iter_mut() {
                *v = -*v;
            }
            Trajectory::Realized(rev)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn angle_expressions() {
        assert_relative_eq!(parse_angle("pi").unwrap(), PI);
        assert_relative_eq!(parse_angle("pi/2").unwrap(), PI / 2.0);
        assert_relative_eq!(parse_angle("-pi/4").unwrap(), -PI / 4.0);
        assert_relative_eq!(parse_angle("3*pi/4").unwrap(), 3.0 * PI / 4.0);
        assert_relative_eq!(parse_angle("2pi").unwrap(), 2.0 * PI);
        assert_relative_eq!(parse_angle("0.5").unwrap(), 0.5);
        assert_relative_eq!(parse_angle(" 1.5 * pi ").unwrap(), 1.5 * PI);
        assert!(parse_angle("two*pi").is_err());
        assert!(parse_angle("pi/0").is_err());
        assert!(parse_angle("").is_err());
    }

    const DEMO: &str = r#"
seed = 7
base_detuning_khz = 0.0

[[beams]]
name = "b1"
center_um = 0.0
angle_deg = 45.0
waist_um = 56.6
peak_rabi_khz = 11.338

[spam]
transfer_infidelity = 0.008
transfer_pulses = 2

[[ions]]
name = "ion1"

[[ions.sequence]]
type = "transport"
from_um = -300.0
to_um = 300.0
velocity = 0.4388
beams = ["b1"]

[scan]
variable = "t_off"
start = 0.0
stop = 1200.0
points = 40
shots = 350
"#;

    #[test]
    fn demo_scenario_resolves() {
        let cfg = ScenarioConfig::from_toml(DEMO).unwrap();
        let resolved = cfg.resolve().unwrap();
        assert_eq!(resolved.n_ions(), 1);
        assert_eq!(resolved.seed, 7);
        let scan = resolved.scan.unwrap();
        assert_eq!(scan.variable, ScanVariable::TOff);
        assert_relative_eq!(scan.stop, 1200e-6, max_relative = 1e-12);
        // beam converted to SI
        let (_, beam) = &resolved.beams[0];
        assert_relative_eq!(beam.waist, 56.6e-6, max_relative = 1e-12);
        assert_relative_eq!(beam.peak_rabi, TAU * 11338.0, max_relative = 1e-6);
    }

    #[test]
    fn t_off_substitution_truncates_transport() {
        let cfg = ScenarioConfig::from_toml(DEMO).unwrap();
        let resolved = cfg.resolve().unwrap();
        let els = resolved.sequence_for(0, ScanVariable::TOff, 100e-6).unwrap();
        match &els[0] {
            PulseElement::Transport { beam_off_time, .. } => {
                assert_eq!(*beam_off_time, Some(100e-6));
            }
            _ => panic!("expected transport"),
        }
        // beyond the segment: beam stays on (no truncation)
        let els = resolved.sequence_for(0, ScanVariable::TOff, 10.0).unwrap();
        match &els[0] {
            PulseElement::Transport { beam_off_time, .. } => assert_eq!(*beam_off_time, None),
            _ => panic!("expected transport"),
        }
    }

    #[test]
    fn phase_scan_without_phase_element_rejected() {
        let mut cfg = ScenarioConfig::from_toml(DEMO).unwrap();
        cfg.scan.as_mut().unwrap().variable = "phase".into();
        assert!(cfg.resolve().is_err());
    }

    #[test]
    fn unknown_beam_rejected() {
        let bad = DEMO.replace("beams = [\"b1\"]", "beams = [\"nope\"]");
        let cfg = ScenarioConfig::from_toml(&bad).unwrap();
        assert!(cfg.resolve().is_err());
    }

    #[test]
    fn unknown_field_rejected() {
        let bad = format!("{DEMO}\nbogus_key = 1\n");
        assert!(ScenarioConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn reversed_constant_velocity() {
        let cfg = ScenarioConfig::from_toml(DEMO).unwrap();
        let resolved = cfg.resolve().unwrap();
        let rev = resolved.reversed();
        match (&resolved.ions[0].elements[0], &rev.ions[0].elements[0]) {
            (
                PulseElement::Transport { trajectory: fwd, .. },
                PulseElement::Transport { trajectory: bwd, .. },
            ) => {
                let (zf, vf) = fwd.sample(0.0);
                let (zb, vb) = bwd.sample(fwd.duration());
                assert_relative_eq!(zf, zb, max_relative = 1e-9);
                assert_relative_eq!(vf, -vb, max_relative = 1e-12);
            }
            _ => panic!("expected transports"),
        }
    }
}
