//! Voltage-waveform synthesis for well transport, output-filter modelling,
//! realized-well tracking and classical ion dynamics.
//!
//! Synthesis solves, per timestep, a box-constrained linear least-squares
//! problem: match the combined potential to a target quadratic
//! Φ_target(z) = offset + (mω*²/2q)(z−z*)² over a raised-cosine window
//! around each well, with the per-well offset a free nuisance variable,
//! subject to |V| ≤ vmax and per-step slew limits relative to the previous
//! accepted step. Warm starts make consecutive solves cheap. A one-sided
//! depth penalty activates when the realized well is shallower than its
//! target.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::numeric::bvls::{solve_bvls, BvlsError};
use crate::numeric::ode::{integrate, OdeError, OdeOptions};
use crate::numeric::root::brent;
use crate::trap::{ElectrodeBasis, IonSpecies, PotentialOnGrid, ELEMENTARY_CHARGE, WELL_SLOPE_TOL};
use crate::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: f64 = 1e6;
pub const DEFAULT_VMAX: f64 = 10.0;
pub const DEFAULT_SLEW: f64 = 1e6;
pub const DEFAULT_WINDOW_HALF_WIDTH: f64 = 30e-6;
pub const DEFAULT_RAMP: f64 = 5e-6;
pub const DEFAULT_FILTER_CUTOFF: f64 = 50e3;

// ---------------------------------------------------------------------------
// Trajectory plans
// ---------------------------------------------------------------------------

/// Targets for one transported well.
#[derive(Debug, Clone)]
pub struct PlannedWell {
    /// Target minimum position per timestep (m).
    pub positions: Vec<f64>,
    /// Target axial angular frequency (rad/s).
    pub omega: f64,
    /// Target escape depth (eV).
    pub depth_ev: f64,
    /// Ramp duration used when planning (s).
    pub ramp: f64,
}

/// Time-sampled well targets for synthesis.
#[derive(Debug, Clone)]
pub struct TrajectoryPlan {
    pub sample_rate: f64,
    pub timestamps: Vec<f64>,
    pub wells: Vec<PlannedWell>,
    pub window_half_width: f64,
}

impl TrajectoryPlan {
    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn duration(&self) -> f64 {
        *self.timestamps.last().unwrap_or(&0.0)
    }

    /// Time window of the constant-velocity phase of well `w`.
    pub fn constant_window(&self, w: usize) -> (f64, f64) {
        let well = &self.wells[w];
        let t_end = (well.positions.len() - 1) as f64 * self.dt();
        (well.ramp, (t_end - well.ramp).max(well.ramp))
    }

    fn validate(&self) -> Result<()> {
        if self.is_empty() || self.wells.is_empty() {
            return Err(Error::invalid("plan needs at least one timestep and one well"));
        }
        let dt = self.dt();
        for w in self.timestamps.windows(2) {
            if (w[1] - w[0] - dt).abs() > 1e-9 * dt {
                return Err(Error::invalid("plan timestamps must be uniform and increasing"));
            }
        }
        for well in &self.wells {
            if well.positions.len() != self.len() {
                return Err(Error::invalid("each well needs one position per timestep"));
            }
            if well.omega <= 0.0 {
                return Err(Error::invalid("target ω must be positive"));
            }
        }
        // wells ordered and non-crossing with margin 2× the window half-width
        for k in 0..self.len() {
            for pair in 0..self.wells.len().saturating_sub(1) {
                let a = self.wells[pair].positions[k];
                let b = self.wells[pair + 1].positions[k];
                if b - a <= 2.0 * self.window_half_width {
                    return Err(Error::invalid(format!(
                        "wells cross or come within 2× window half-width at step {k}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Constant-velocity transport plan with sine-squared velocity ramps of
/// duration `ramp` at both ends. Total duration is |Δz|/v + ramp; trailing
/// samples hold the end position.
pub fn plan_trajectory(
    z_start: f64,
    z_end: f64,
    velocity: f64,
    omega: f64,
    depth_ev: f64,
    sample_rate: f64,
    ramp: f64,
) -> Result<TrajectoryPlan> {
    if sample_rate <= 0.0 {
        return Err(Error::invalid("sample rate must be positive"));
    }
    if omega <= 0.0 {
        return Err(Error::invalid("target ω must be positive"));
    }
    if ramp < 0.0 {
        return Err(Error::invalid("ramp must be ≥ 0"));
    }
    if z_start == z_end {
        return Ok(TrajectoryPlan {
            sample_rate,
            timestamps: vec![0.0],
            wells: vec![PlannedWell { positions: vec![z_start], omega, depth_ev, ramp: 0.0 }],
            window_half_width: DEFAULT_WINDOW_HALF_WIDTH,
        });
    }
    let dist = (z_end - z_start).abs();
    let sign = (z_end - z_start).signum();
    if velocity == 0.0 || velocity.signum() != sign {
        return Err(Error::invalid("velocity must be nonzero and point from z_start to z_end"));
    }
    let speed = velocity.abs();
    let t_const = dist / speed - ramp;
    if t_const < 0.0 {
        return Err(Error::invalid("ramps longer than the transport itself"));
    }
    if t_const * sample_rate < 10.0 {
        return Err(Error::invalid(format!(
            "sample rate too low: {} samples in the constant segment, need ≥ 10",
            (t_const * sample_rate) as usize
        )));
    }
    let total = dist / speed + ramp;
    let distance_at = |t: f64| -> f64 {
        let t = t.clamp(0.0, total);
        if ramp == 0.0 {
            return speed * t;
        }
        if t <= ramp {
            speed * (t / 2.0 - ramp / (2.0 * std::f64::consts::PI)
                * (std::f64::consts::PI * t / ramp).sin())
        } else if t <= ramp + t_const {
            speed * ramp / 2.0 + speed * (t - ramp)
        } else {
            let tr = total - t;
            dist - speed
                * (tr / 2.0 - ramp / (2.0 * std::f64::consts::PI)
                    * (std::f64::consts::PI * tr / ramp).sin())
        }
    };
    let n = (total * sample_rate).ceil() as usize + 1;
    let dt = 1.0 / sample_rate;
    let timestamps: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
    let positions: Vec<f64> = timestamps.iter().map(|&t| z_start + sign * distance_at(t)).collect();
    Ok(TrajectoryPlan {
        sample_rate,
        timestamps,
        wells: vec![PlannedWell { positions, omega, depth_ev, ramp }],
        window_half_width: DEFAULT_WINDOW_HALF_WIDTH,
    })
}

/// Static hold of one well for `duration`.
pub fn plan_static(
    z: f64,
    omega: f64,
    depth_ev: f64,
    sample_rate: f64,
    duration: f64,
) -> Result<TrajectoryPlan> {
    if sample_rate <= 0.0 || duration < 0.0 {
        return Err(Error::invalid("sample rate must be positive, duration ≥ 0"));
    }
    let n = (duration * sample_rate).ceil().max(1.0) as usize + 1;
    let dt = 1.0 / sample_rate;
    Ok(TrajectoryPlan {
        sample_rate,
        timestamps: (0..n).map(|k| k as f64 * dt).collect(),
        wells: vec![PlannedWell { positions: vec![z; n], omega, depth_ev, ramp: 0.0 }],
        window_half_width: DEFAULT_WINDOW_HALF_WIDTH,
    })
}

/// Merge single-well plans into one simultaneous multi-well plan. All plans
/// must share the sample rate; shorter plans hold their final position.
pub fn merge_plans(plans: &[TrajectoryPlan]) -> Result<TrajectoryPlan> {
    if plans.is_empty() {
        return Err(Error::invalid("no plans to merge"));
    }
    let rate = plans[0].sample_rate;
    let window = plans[0].window_half_width;
    if plans.iter().any(|p| (p.sample_rate - rate).abs() > 1e-9 * rate) {
        return Err(Error::invalid("merged plans must share the sample rate"));
    }
    let n = plans.iter().map(|p| p.len()).max().unwrap();
    let dt = 1.0 / rate;
    let mut wells = Vec::new();
    for p in plans {
        for w in &p.wells {
            let mut positions = w.positions.clone();
            positions.resize(n, *w.positions.last().unwrap());
            wells.push(PlannedWell { positions, ..w.clone() });
        }
    }
    wells.sort_by(|a, b| a.positions[0].partial_cmp(&b.positions[0]).unwrap());
    let merged = TrajectoryPlan {
        sample_rate: rate,
        timestamps: (0..n).map(|k| k as f64 * dt).collect(),
        wells,
        window_half_width: window,
    };
    merged.validate()?;
    Ok(merged)
}

// ---------------------------------------------------------------------------
// Voltage waveforms
// ---------------------------------------------------------------------------

/// Time-sampled per-channel voltages with hard box and slew limits.
#[derive(Debug, Clone)]
pub struct VoltageWaveform {
    pub sample_rate: f64,
    /// samples[k][c]: volts on channel c at timestep k.
    pub samples: Vec<Vec<f64>>,
    pub vmax: f64,
    pub slew: f64,
}

impl VoltageWaveform {
    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn n_channels(&self) -> usize {
        self.samples.first().map(|r| r.len()).unwrap_or(0)
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate
    }

    pub fn duration(&self) -> f64 {
        (self.n_samples().saturating_sub(1)) as f64 * self.dt()
    }

    /// Hard invariant check: |V| ≤ vmax everywhere and |ΔV| ≤ slew·Δt
    /// between consecutive samples (no tolerance).
    pub fn validate(&self) -> Result<()> {
        let max_step = self.slew * self.dt();
        for (k, row) in self.samples.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                if v.abs() > self.vmax {
                    return Err(Error::Synthesis {
                        timestep: k,
                        message: format!("|V| = {} exceeds vmax on channel {c}", v.abs()),
                    });
                }
            }
            if k > 0 {
                for (c, (&v, &p)) in row.iter().zip(&self.samples[k - 1]).enumerate() {
                    if (v - p).abs() > max_step {
                        return Err(Error::Synthesis {
                            timestep: k,
                            message: format!("slew exceeded on channel {c}"),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("t");
        for c in 1..=self.n_channels() {
            let _ = write!(out, ",ch_{c}");
        }
        out.push('\n');
        let dt = self.dt();
        for (k, row) in self.samples.iter().enumerate() {
            let _ = write!(out, "{}", k as f64 * dt);
            for &v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Output filter
// ---------------------------------------------------------------------------

/// Order-n RC low-pass per channel, applied as cascaded exponential
/// recursions with coefficient exp(−2π f_c Δt). DC gain is exactly 1.
#[derive(Debug, Clone)]
pub struct FilterModel {
    /// Per-channel cutoffs (Hz); a single entry broadcasts to all channels.
    pub cutoffs: Vec<f64>,
    pub order: usize,
}

impl FilterModel {
    pub fn uniform(cutoff: f64, order: usize) -> Result<Self> {
        let f = Self { cutoffs: vec![cutoff], order };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cutoffs.is_empty() || self.cutoffs.iter().any(|&f| f <= 0.0) {
            return Err(Error::invalid("filter cutoffs must be positive"));
        }
        if self.order < 1 {
            return Err(Error::invalid("filter order must be ≥ 1"));
        }
        Ok(())
    }

    fn cutoff_for(&self, channel: usize) -> f64 {
        if self.cutoffs.len() == 1 {
            self.cutoffs[0]
        } else {
            self.cutoffs[channel]
        }
    }
}

/// Convolve each channel with the discrete step response of the RC cascade.
/// The initial condition is the first sample (steady state at t ≤ 0).
pub fn apply_filter(waveform: &VoltageWaveform, filter: &FilterModel) -> Result<VoltageWaveform> {
    filter.validate()?;
    if filter.cutoffs.len() != 1 && filter.cutoffs.len() != waveform.n_channels() {
        return Err(Error::invalid("filter needs one cutoff or one per channel"));
    }
    let n = waveform.n_samples();
    let k = waveform.n_channels();
    let dt = waveform.dt();
    let mut out = waveform.samples.clone();
    for c in 0..k {
        let a = (-2.0 * std::f64::consts::PI * filter.cutoff_for(c) * dt).exp();
        for _stage in 0..filter.order {
            let mut y = out[0][c];
            for row in out.iter_mut().take(n).skip(1) {
                y = a * y + (1.0 - a) * row[c];
                row[c] = y;
            }
        }
    }
    Ok(VoltageWaveform { samples: out, ..*waveform })
}

// ---------------------------------------------------------------------------
// Synthesis
// ---------------------------------------------------------------------------

/// Per-well synthesis diagnostics, one entry per timestep.
#[derive(Debug, Clone)]
pub struct WellDiagnostics {
    /// Realized minus target position (m); NaN when no well was realized.
    pub position_error: Vec<f64>,
    /// Relative ω error; NaN when the curvature was unreachable.
    pub omega_error: Vec<f64>,
    /// Unmet depth (eV) after the penalty passes; 0 when satisfied.
    pub depth_shortfall: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SynthesisDiagnostics {
    /// Weighted potential-matching objective per timestep.
    pub objective: Vec<f64>,
    /// KKT residual of each per-timestep solve.
    pub kkt_residual: Vec<f64>,
    pub wells: Vec<WellDiagnostics>,
}

#[derive(Debug, Clone)]
pub struct Synthesis {
    pub waveform: VoltageWaveform,
    pub diagnostics: SynthesisDiagnostics,
}

impl Synthesis {
    /// Largest unmet depth across wells and timesteps (eV).
    pub fn max_depth_shortfall(&self) -> f64 {
        self.diagnostics
            .wells
            .iter()
            .flat_map(|w| w.depth_shortfall.iter())
            .fold(0.0_f64, |a, &v| a.max(v))
    }

    /// True when some timestep failed to realize a well or its curvature.
    pub fn curvature_unreachable(&self) -> bool {
        self.diagnostics
            .wells
            .iter()
            .any(|w| w.omega_error.iter().any(|e| !e.is_finite()))
    }
}

const KKT_TOL: f64 = 1e-8;
const DEPTH_PENALTY_WEIGHT: f64 = 0.3;
const DEPTH_PASSES: usize = 3;

/// Synthesize channel voltages realizing `plan` under box and slew limits.
pub fn synthesize_waveform(
    basis: &ElectrodeBasis,
    plan: &TrajectoryPlan,
    species: &IonSpecies,
    vmax: f64,
    slew: f64,
) -> Result<Synthesis> {
    plan.validate()?;
    if vmax < 0.0 || slew < 0.0 {
        return Err(Error::invalid("vmax and slew must be ≥ 0"));
    }
    let (span_lo, span_hi) = basis.span();
    let hw = plan.window_half_width;
    for well in &plan.wells {
        for &z in &well.positions {
            if z - hw < span_lo || z + hw > span_hi {
                return Err(Error::invalid(format!(
                    "target position {z} m (± window) outside basis span"
                )));
            }
        }
    }

    let n_ch = basis.n_channels();
    let n_wells = plan.wells.len();
    let grid = basis.grid();
    let dt = plan.dt();
    let max_step = slew * dt;

    // per-channel basis rows on the grid
    let mut chan_phi = vec![vec![0.0; grid.len()]; n_ch];
    for (e, &c) in basis.channel_map().iter().enumerate() {
        let row = basis.phi_row(e);
        for (j, &v) in row.iter().enumerate() {
            chan_phi[c][j] += v;
        }
    }

    let mut samples: Vec<Vec<f64>> = Vec::with_capacity(plan.len());
    let mut prev: DVector<f64> = DVector::zeros(n_ch + n_wells);
    let mut diag = SynthesisDiagnostics {
        objective: Vec::with_capacity(plan.len()),
        kkt_residual: Vec::with_capacity(plan.len()),
        wells: (0..n_wells)
            .map(|_| WellDiagnostics {
                position_error: Vec::with_capacity(plan.len()),
                omega_error: Vec::with_capacity(plan.len()),
                depth_shortfall: Vec::with_capacity(plan.len()),
            })
            .collect(),
    };

    for k in 0..plan.len() {
        // window rows
        let mut windows: Vec<(usize, usize, f64)> = Vec::with_capacity(n_wells); // (j0, j1, z*)
        let mut n_rows = 0;
        for well in &plan.wells {
            let z_star = well.positions[k];
            let j0 = grid.partition_point(|&z| z < z_star - hw);
            let j1 = grid.partition_point(|&z| z <= z_star + hw);
            n_rows += j1 - j0;
            windows.push((j0, j1, z_star));
        }

        // active channels: skip channels with no leverage on any window
        let mut col_norm = vec![0.0_f64; n_ch];
        for &(j0, j1, _) in &windows {
            for (c, norm) in col_norm.iter_mut().enumerate() {
                for &v in &chan_phi[c][j0..j1] {
                    *norm += v * v;
                }
            }
        }
        let max_norm = col_norm.iter().fold(0.0_f64, |a, &v| a.max(v));
        let active: Vec<usize> = (0..n_ch)
            .filter(|&c| col_norm[c] > 1e-20 * max_norm.max(1e-300))
            .collect();
        let n_var = active.len() + n_wells;

        let mut a = DMatrix::zeros(n_rows, n_var);
        let mut b = DVector::zeros(n_rows);
        let mut row = 0;
        for (w, well) in plan.wells.iter().enumerate() {
            let (j0, j1, z_star) = windows[w];
            let curv_target = species.mass * well.omega * well.omega / (2.0 * species.charge);
            for j in j0..j1 {
                let dz = grid[j] - z_star;
                let weight =
                    0.5 * (1.0 + (std::f64::consts::PI * dz / hw).cos());
                let sw = weight.sqrt();
                for (col, &c) in active.iter().enumerate() {
                    a[(row, col)] = sw * chan_phi[c][j];
                }
                a[(row, active.len() + w)] = -sw;
                b[row] = sw * curv_target * dz * dz;
                row += 1;
            }
        }

        // bounds: box ∩ slew relative to previous accepted step
        let mut lower = vec![f64::NEG_INFINITY; n_var];
        let mut upper = vec![f64::INFINITY; n_var];
        for (col, &c) in active.iter().enumerate() {
            let (lo, hi) = if k == 0 {
                (-vmax, vmax)
            } else {
                ((prev[c] - max_step).max(-vmax), (prev[c] + max_step).min(vmax))
            };
            if lo > hi {
                return Err(Error::Synthesis {
                    timestep: k,
                    message: format!("slew and box constraints conflict on channel {c}"),
                });
            }
            lower[col] = lo;
            upper[col] = hi;
        }

        let mut warm = DVector::zeros(n_var);
        for (col, &c) in active.iter().enumerate() {
            warm[col] = prev[c];
        }
        for w in 0..n_wells {
            warm[active.len() + w] = prev[n_ch + w];
        }

        let mut solution = solve_bvls(&a, &b, &lower, &upper, Some(&warm), KKT_TOL, 2000)
            .map_err(|e| bvls_error(k, e))?;

        // depth penalty passes: pull the window edges up when the realized
        // well is shallower than its target
        let mut shortfalls = vec![0.0; n_wells];
        for _pass in 0..DEPTH_PASSES {
            let volts = extract_volts(&solution.x, &active, n_ch, k, &samples, max_step, vmax);
            let pot = basis.combine(&volts)?;
            let mut worst: Vec<(usize, f64)> = Vec::new();
            for (w, well) in plan.wells.iter().enumerate() {
                if well.depth_ev <= 0.0 {
                    shortfalls[w] = 0.0;
                    continue;
                }
                let z_star = well.positions[k];
                let depth = local_depth(&pot, species, z_star, hw, grid)?;
                let shortfall = (well.depth_ev - depth).max(0.0);
                shortfalls[w] = shortfall;
                if shortfall > 1e-6 * well.depth_ev {
                    worst.push((w, shortfall));
                }
            }
            if worst.is_empty() {
                break;
            }
            // augment with edge-lift rows: Φ(z*±2hw) − Φ(z*) = depth target
            let extra = 2 * worst.len();
            let mut a2 = DMatrix::zeros(n_rows + extra, n_var);
            a2.view_mut((0, 0), (n_rows, n_var)).copy_from(&a);
            let mut b2 = DVector::zeros(n_rows + extra);
            b2.rows_mut(0, n_rows).copy_from(&b);
            let sw = DEPTH_PENALTY_WEIGHT.sqrt();
            for (i, &(w, _)) in worst.iter().enumerate() {
                let well = &plan.wells[w];
                let z_star = well.positions[k];
                let depth_volts = well.depth_ev * ELEMENTARY_CHARGE / species.charge;
                for (side, zs) in [z_star - 2.0 * hw, z_star + 2.0 * hw].iter().enumerate() {
                    let zs = zs.clamp(span_lo, span_hi);
                    let r = n_rows + 2 * i + side;
                    for (col, &c) in active.iter().enumerate() {
                        a2[(r, col)] =
                            sw * (interp_on(grid, &chan_phi[c], zs) - interp_on(grid, &chan_phi[c], z_star));
                    }
                    b2[r] = sw * depth_volts;
                }
            }
            solution = solve_bvls(&a2, &b2, &lower, &upper, Some(&solution.x), KKT_TOL, 2000)
                .map_err(|e| bvls_error(k, e))?;
        }

        let volts = extract_volts(&solution.x, &active, n_ch, k, &samples, max_step, vmax);

        // diagnostics: realized minimum, curvature and depth per well,
        // measured on the voltages actually emitted
        let pot = basis.combine(&volts)?;
        for (w, well) in plan.wells.iter().enumerate() {
            let z_star = well.positions[k];
            match locate_minimum(&pot, z_star, hw) {
                Some((z_min, curv)) if curv > 0.0 => {
                    let omega = (species.charge * curv / species.mass).sqrt();
                    diag.wells[w].position_error.push(z_min - z_star);
                    diag.wells[w].omega_error.push(omega / well.omega - 1.0);
                }
                _ => {
                    diag.wells[w].position_error.push(f64::NAN);
                    diag.wells[w].omega_error.push(f64::NAN);
                }
            }
            let shortfall = if well.depth_ev > 0.0 && shortfalls[w] > 0.0 {
                (well.depth_ev - local_depth(&pot, species, z_star, hw, grid)?).max(0.0)
            } else {
                shortfalls[w]
            };
            diag.wells[w].depth_shortfall.push(shortfall);
        }
        diag.objective.push(solution.objective);
        diag.kkt_residual.push(solution.kkt_residual);

        for (c, &v) in volts.iter().enumerate() {
            prev[c] = v;
        }
        for w in 0..n_wells {
            prev[n_ch + w] = solution.x[active.len() + w];
        }
        samples.push(volts);
    }

    let waveform = VoltageWaveform { sample_rate: plan.sample_rate, samples, vmax, slew };
    waveform.validate()?;
    Ok(Synthesis { waveform, diagnostics: diag })
}

fn bvls_error(timestep: usize, e: BvlsError) -> Error {
    match e {
        BvlsError::InfeasibleBounds { index } => Error::Synthesis {
            timestep,
            message: format!("infeasible bounds on variable {index}"),
        },
        BvlsError::IterationLimit => Error::Synthesis {
            timestep,
            message: "constrained solve did not converge".into(),
        },
    }
}

/// Channel voltages from the solution vector, exactly clamped into the slew
/// and box constraints so the waveform invariants hold without tolerance.
fn extract_volts(
    x: &DVector<f64>,
    active: &[usize],
    n_ch: usize,
    k: usize,
    samples: &[Vec<f64>],
    max_step: f64,
    vmax: f64,
) -> Vec<f64> {
    let mut volts = vec![0.0; n_ch];
    for (col, &c) in active.iter().enumerate() {
        volts[c] = x[col];
    }
    if k > 0 {
        let prev_row = &samples[k - 1];
        for (c, v) in volts.iter_mut().enumerate() {
            *v = v.clamp(prev_row[c] - max_step, prev_row[c] + max_step);
        }
    } else {
        // inactive channels decay toward zero within the slew budget
        for v in volts.iter_mut() {
            *v = v.clamp(-vmax, vmax);
        }
    }
    for v in volts.iter_mut() {
        *v = v.clamp(-vmax, vmax);
    }
    volts
}

fn interp_on(grid: &[f64], values: &[f64], z: f64) -> f64 {
    let j = grid.partition_point(|&g| g <= z).clamp(1, grid.len() - 1);
    let (z0, z1) = (grid[j - 1], grid[j]);
    let s = ((z - z0) / (z1 - z0)).clamp(0.0, 1.0);
    values[j - 1] * (1.0 - s) + values[j] * s
}

/// Refine the minimum near z* within ± the window half-width.
fn locate_minimum(pot: &PotentialOnGrid<'_>, z_star: f64, hw: f64) -> Option<(f64, f64)> {
    let mut lo = z_star - hw;
    let mut hi = z_star + hw;
    let mut s_lo = pot.slope(lo).ok()?;
    let mut s_hi = pot.slope(hi).ok()?;
    // shrink toward z* if the window brackets more structure than one well
    for _ in 0..30 {
        if s_lo < 0.0 && s_hi > 0.0 {
            break;
        }
        lo = 0.5 * (lo + z_star - 1e-12);
        hi = 0.5 * (hi + z_star + 1e-12);
        if hi - lo < 1e-12 {
            return None;
        }
        s_lo = pot.slope(lo).ok()?;
        s_hi = pot.slope(hi).ok()?;
    }
    if !(s_lo < 0.0 && s_hi > 0.0) {
        return None;
    }
    let root = brent(|z| pot.slope(z).unwrap_or(f64::NAN), lo, hi, 0.0, WELL_SLOPE_TOL, 200).ok()?;
    let curv = pot.curvature(root.x).ok()?;
    Some((root.x, curv))
}

/// Escape depth (eV) of the well nearest z*, with barriers measured out to
/// ±6 window half-widths.
fn local_depth(
    pot: &PotentialOnGrid<'_>,
    species: &IonSpecies,
    z_star: f64,
    hw: f64,
    grid: &[f64],
) -> Result<f64> {
    let Some((z_min, _)) = locate_minimum(pot, z_star, hw) else {
        return Ok(0.0);
    };
    let (span_lo, span_hi) = (grid[0], *grid.last().unwrap());
    let lo = (z_star - 6.0 * hw).max(span_lo);
    let hi = (z_star + 6.0 * hw).min(span_hi);
    let v0 = pot.value(z_min)?;
    let mut left: f64 = f64::NEG_INFINITY;
    let mut right: f64 = f64::NEG_INFINITY;
    let steps = 240;
    for i in 0..=steps {
        let z = lo + (hi - lo) * i as f64 / steps as f64;
        let v = pot.value(z)?;
        if z < z_min {
            left = left.max(v);
        } else if z > z_min {
            right = right.max(v);
        }
    }
    Ok((species.charge * (left.min(right) - v0).max(0.0)) / ELEMENTARY_CHARGE)
}

// ---------------------------------------------------------------------------
// Realized trajectory
// ---------------------------------------------------------------------------

/// Well trajectory actually produced by a waveform.
#[derive(Debug, Clone)]
pub struct RealizedTrajectory {
    pub sample_rate: f64,
    pub timestamps: Vec<f64>,
    pub position: Vec<f64>,
    /// Central-difference velocity (one-sided at the ends).
    pub velocity: Vec<f64>,
    pub omega: Vec<f64>,
    pub depth_ev: Vec<f64>,
}

impl RealizedTrajectory {
    pub fn duration(&self) -> f64 {
        *self.timestamps.last().unwrap_or(&0.0)
    }

    /// Linear interpolation of (position, velocity) at time t (clamped).
    pub fn sample(&self, t: f64) -> (f64, f64) {
        let n = self.timestamps.len();
        if n == 1 {
            return (self.position[0], 0.0);
        }
        let dt = self.timestamps[1] - self.timestamps[0];
        let t = t.clamp(0.0, self.duration());
        let k = ((t / dt) as usize).min(n - 2);
        let s = (t - self.timestamps[k]) / dt;
        (
            self.position[k] * (1.0 - s) + self.position[k + 1] * s,
            self.velocity[k] * (1.0 - s) + self.velocity[k + 1] * s,
        )
    }

    /// Velocity statistics over a time window: (mean, standard deviation).
    pub fn velocity_stats(&self, t_lo: f64, t_hi: f64) -> (f64, f64) {
        let vals: Vec<f64> = self
            .timestamps
            .iter()
            .zip(&self.velocity)
            .filter(|(&t, _)| t >= t_lo && t <= t_hi)
            .map(|(_, &v)| v)
            .collect();
        if vals.is_empty() {
            return (0.0, 0.0);
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        (mean, var.sqrt())
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("t,z,v,omega,depth\n");
        for k in 0..self.timestamps.len() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                self.timestamps[k], self.position[k], self.velocity[k], self.omega[k],
                self.depth_ev[k]
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

/// Track the well minimum through the waveform by continuation from the
/// previous minimum.
pub fn realized_trajectory(
    basis: &ElectrodeBasis,
    waveform: &VoltageWaveform,
    species: &IonSpecies,
    seed_position: f64,
) -> Result<RealizedTrajectory> {
    let n = waveform.n_samples();
    if n == 0 {
        return Err(Error::invalid("empty waveform"));
    }
    let grid = basis.grid();
    let (span_lo, span_hi) = basis.span();
    let mut position = Vec::with_capacity(n);
    let mut omega = Vec::with_capacity(n);
    let mut depth = Vec::with_capacity(n);
    let mut guess = seed_position;
    for k in 0..n {
        let pot = basis.combine(&waveform.samples[k])?;
        let z_min = continue_minimum(&pot, guess, span_lo, span_hi)
            .ok_or(Error::Tracking { timestep: k })?;
        let curv = pot.curvature(z_min)?;
        if curv <= 0.0 {
            return Err(Error::Tracking { timestep: k });
        }
        position.push(z_min);
        omega.push((species.charge * curv / species.mass).sqrt());
        depth.push(local_depth(&pot, species, z_min, DEFAULT_WINDOW_HALF_WIDTH, grid)?);
        guess = z_min;
    }
    let dt = waveform.dt();
    let mut velocity = vec![0.0; n];
    if n >= 2 {
        for k in 1..n - 1 {
            velocity[k] = (position[k + 1] - position[k - 1]) / (2.0 * dt);
        }
        velocity[0] = (position[1] - position[0]) / dt;
        velocity[n - 1] = (position[n - 1] - position[n - 2]) / dt;
    }
    Ok(RealizedTrajectory {
        sample_rate: waveform.sample_rate,
        timestamps: (0..n).map(|k| k as f64 * dt).collect(),
        position,
        velocity,
        omega,
        depth_ev: depth,
    })
}

/// Bracket the slope sign change nearest `guess`, expanding outward.
fn continue_minimum(pot: &PotentialOnGrid<'_>, guess: f64, lo: f64, hi: f64) -> Option<f64> {
    let mut reach = 2e-6;
    for _ in 0..16 {
        let a = (guess - reach).max(lo);
        let b = (guess + reach).min(hi);
        let sa = pot.slope(a).ok()?;
        let sb = pot.slope(b).ok()?;
        if sa < 0.0 && sb > 0.0 {
            let r = brent(|z| pot.slope(z).unwrap_or(f64::NAN), a, b, 0.0, WELL_SLOPE_TOL, 200)
                .ok()?;
            return Some(r.x);
        }
        if sa == 0.0 && sb >= 0.0 {
            return Some(a);
        }
        reach *= 2.0;
        if a == lo && b == hi {
            break;
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Classical ion tracking
// ---------------------------------------------------------------------------

/// Newtonian trajectory of the ion under the waveform's forces.
#[derive(Debug, Clone)]
pub struct IonTrack {
    pub timestamps: Vec<f64>,
    pub position: Vec<f64>,
    pub velocity: Vec<f64>,
    /// max |z_ion − z_well_minimum| over the waveform.
    pub max_deviation: f64,
}

/// Integrate m·z̈ = −q·∂Φ/∂z through the waveform with an adaptive explicit
/// integrator (relative tolerance 1e-9). Voltages are interpolated linearly
/// in time between samples. The deviation is measured against the tracked
/// well minimum at each sample time.
pub fn track_classical_ion(
    basis: &ElectrodeBasis,
    waveform: &VoltageWaveform,
    species: &IonSpecies,
    z0: f64,
    v0: f64,
) -> Result<IonTrack> {
    let realized = realized_trajectory(basis, waveform, species, z0)?;
    let n = waveform.n_samples();
    let dt = waveform.dt();
    let (span_lo, span_hi) = basis.span();
    let opts = OdeOptions { rel_tol: 1e-9, abs_tol: 1e-30, max_steps: 20_000_000 };
    let accel_scale = -species.charge / species.mass;

    let mut position = Vec::with_capacity(n);
    let mut velocity = Vec::with_capacity(n);
    position.push(z0);
    velocity.push(v0);

    let mut state = [z0, v0];
    let mut row_curr = basis.combine(&waveform.samples[0])?;
    for k in 0..n.saturating_sub(1) {
        let row_next = basis.combine(&waveform.samples[k + 1])?;
        let t0 = k as f64 * dt;
        let mut escaped: Option<f64> = None;
        let result = integrate(
            |t, y: &[f64; 2]| {
                let z = y[0];
                if z < span_lo || z > span_hi {
                    if escaped.is_none() {
                        escaped = Some(t);
                    }
                    return [y[1], 0.0];
                }
                let s = ((t - t0) / dt).clamp(0.0, 1.0);
                let slope = row_curr.slope(z).unwrap_or(0.0) * (1.0 - s)
                    + row_next.slope(z).unwrap_or(0.0) * s;
                [y[1], accel_scale * slope]
            },
            t0,
            state,
            t0 + dt,
            &opts,
        );
        if let Some(t) = escaped {
            return Err(Error::Escape { time: t });
        }
        state = result.map_err(|e| match e {
            OdeError::StepLimit => Error::invalid("ion integrator exceeded its step budget"),
            OdeError::StepUnderflow { t } => Error::Escape { time: t },
        })?;
        if state[0] < span_lo || state[0] > span_hi {
            return Err(Error::Escape { time: t0 + dt });
        }
        position.push(state[0]);
        velocity.push(state[1]);
        row_curr = row_next;
    }

    let max_deviation = position
        .iter()
        .zip(&realized.position)
        .map(|(z, zm)| (z - zm).abs())
        .fold(0.0_f64, f64::max);
    Ok(IonTrack {
        timestamps: (0..n).map(|k| k as f64 * dt).collect(),
        position,
        velocity,
        max_deviation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trap::{evaluate_potential, find_wells, make_surrogate_basis};
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    const UM: f64 = 1e-6;
    const TAU: f64 = 2.0 * std::f64::consts::PI;

    fn test_basis() -> ElectrodeBasis {
        make_surrogate_basis(9, 120.0 * UM, 120.0 * UM, 700.0 * UM, 1.0 * UM).unwrap()
    }

    fn be() -> IonSpecies {
        IonSpecies::beryllium()
    }

    #[test]
    fn plan_degenerate_is_single_sample() {
        let p = plan_trajectory(10.0 * UM, 10.0 * UM, 1.0, TAU * 2e6, 1e-3, 1e6, 0.0).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.wells[0].positions[0], 10.0 * UM);
    }

    #[test]
    fn plan_duration_is_distance_over_speed() {
        // 500 µm at 7 m/s without ramps → 71.4 µs (within one sample)
        let rate = 1e7;
        let p =
            plan_trajectory(-250.0 * UM, 250.0 * UM, 7.0, TAU * 2e6, 1e-3, rate, 0.0).unwrap();
        let expect = 500.0 * UM / 7.0;
        assert_abs_diff_eq!(p.duration(), expect, epsilon = 1.0 / rate);
        let end = *p.wells[0].positions.last().unwrap();
        assert_abs_diff_eq!(end, 250.0 * UM, epsilon = 1e-12);
        // ramped: duration = |Δz|/v + ramp
        let p2 =
            plan_trajectory(-250.0 * UM, 250.0 * UM, 7.0, TAU * 2e6, 1e-3, rate, 5e-6).unwrap();
        assert_abs_diff_eq!(p2.duration(), expect + 5e-6, epsilon = 1.0 / rate);
    }

    #[test]
    fn plan_velocity_direction_enforced() {
        assert!(plan_trajectory(0.0, 100.0 * UM, -5.0, TAU * 1e6, 1e-3, 1e6, 0.0).is_err());
        assert!(plan_trajectory(0.0, 100.0 * UM, 0.0, TAU * 1e6, 1e-3, 1e6, 0.0).is_err());
    }

    #[test]
    fn plan_sample_rate_floor() {
        // 100 µm at 10 m/s is 10 µs: 100 kS/s gives 1 constant-segment sample
        let r = plan_trajectory(0.0, 100.0 * UM, 10.0, TAU * 1e6, 1e-3, 1e5, 0.0);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn merged_two_zone_plan_has_two_series() {
        let a = plan_trajectory(-500.0 * UM, -300.0 * UM, 10.7, TAU * 2e6, 1e-3, 1e6, 5e-6)
            .unwrap();
        let b =
            plan_trajectory(300.0 * UM, 500.0 * UM, 4.7, TAU * 2e6, 1e-3, 1e6, 5e-6).unwrap();
        let m = merge_plans(&[a, b]).unwrap();
        assert_eq!(m.wells.len(), 2);
        assert_eq!(m.wells[0].positions.len(), m.wells[1].positions.len());
        assert!(m.wells[0].positions[0] < m.wells[1].positions[0]);
    }

    #[test]
    fn static_synthesis_recovers_targets() {
        let basis = test_basis();
        let omega = TAU * 2e6;
        let plan = plan_static(0.0, omega, 1e-3, 1e5, 2e-5).unwrap();
        let synth = synthesize_waveform(&basis, &plan, &be(), 10.0, 1e6).unwrap();
        synth.waveform.validate().unwrap();
        let wells = find_wells(
            &basis,
            synth.waveform.samples.last().unwrap(),
            &be(),
            (-200.0 * UM, 200.0 * UM),
        )
        .unwrap();
        assert_eq!(wells.len(), 1);
        assert!(wells[0].position.abs() < 0.1 * UM, "z = {}", wells[0].position);
        assert!((wells[0].omega / omega - 1.0).abs() < 5e-3, "ω err");
    }

    #[test]
    fn vmax_zero_gives_flat_waveform_with_diagnostic() {
        let basis = test_basis();
        let plan = plan_static(0.0, TAU * 2e6, 1e-3, 1e5, 1e-5).unwrap();
        let synth = synthesize_waveform(&basis, &plan, &be(), 0.0, 1e6).unwrap();
        assert!(synth
            .waveform
            .samples
            .iter()
            .all(|row| row.iter().all(|&v| v == 0.0)));
        assert!(synth.curvature_unreachable());
    }

    #[test]
    fn transport_synthesis_tracks_plan() {
        let basis = test_basis();
        let omega = TAU * 2e6;
        let plan =
            plan_trajectory(-100.0 * UM, 100.0 * UM, 7.0, omega, 1e-3, 1e6, 5e-6).unwrap();
        let synth = synthesize_waveform(&basis, &plan, &be(), 10.0, 1e6).unwrap();
        let diag = &synth.diagnostics.wells[0];
        let max_pos_err = diag
            .position_error
            .iter()
            .fold(0.0_f64, |a, &e| a.max(e.abs()));
        assert!(max_pos_err < 1.0 * UM, "max position error {max_pos_err}");
        let max_omega_err = diag.omega_error.iter().fold(0.0_f64, |a, &e| a.max(e.abs()));
        assert!(max_omega_err < 0.01, "max ω error {max_omega_err}");
        assert!(synth.diagnostics.kkt_residual.iter().all(|&k| k < 1e-7));
    }

    #[test]
    fn depth_penalty_reports_unreachable_depth() {
        let basis = test_basis();
        // 100 eV cannot fit inside the ±10 V rails with unit-scale lobes
        let plan = plan_static(0.0, TAU * 2e6, 100.0, 1e5, 1e-5).unwrap();
        let synth = synthesize_waveform(&basis, &plan, &be(), 10.0, 1e8).unwrap();
        assert!(synth.max_depth_shortfall() > 0.0);
    }

    #[test]
    fn filter_dc_gain_unity() {
        let w = VoltageWaveform {
            sample_rate: 1e6,
            samples: vec![vec![0.7, -0.3]; 64],
            vmax: 10.0,
            slew: 1e6,
        };
        let f = FilterModel::uniform(50e3, 1).unwrap();
        let out = apply_filter(&w, &f).unwrap();
        for (a, b) in out.samples.iter().flatten().zip(w.samples.iter().flatten()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn filter_step_response_time_constant() {
        let rate = 1e6;
        let fc = 2e3; // f_c·Δt = 0.002 ≪ 1
        let n = 2000;
        let mut samples = vec![vec![0.0]; n];
        for row in samples.iter_mut().skip(1) {
            row[0] = 1.0;
        }
        let w = VoltageWaveform { sample_rate: rate, samples, vmax: 10.0, slew: 1e9 };
        let out = apply_filter(&w, &FilterModel::uniform(fc, 1).unwrap()).unwrap();
        let rc = 1.0 / (TAU * fc);
        let k = (rc * rate).round() as usize;
        let expect = 1.0 - (-1.0_f64).exp();
        assert!((out.samples[k][0] - expect).abs() < 0.02 * expect);
    }

    #[test]
    fn filter_transparent_at_high_cutoff() {
        let rate = 1e6;
        let mut samples = Vec::new();
        for k in 0..128 {
            samples.push(vec![(k as f64 * 0.3).sin()]);
        }
        let w = VoltageWaveform { sample_rate: rate, samples, vmax: 10.0, slew: 1e9 };
        // ≥ 100× Nyquist
        let out = apply_filter(&w, &FilterModel::uniform(100.0 * rate / 2.0, 1).unwrap()).unwrap();
        for (a, b) in out.samples.iter().flatten().zip(w.samples.iter().flatten()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn realized_constant_velocity_is_smooth() {
        let basis = test_basis();
        let plan =
            plan_trajectory(-100.0 * UM, 100.0 * UM, 7.0, TAU * 2e6, 1e-3, 1e6, 5e-6).unwrap();
        let synth = synthesize_waveform(&basis, &plan, &be(), 10.0, 1e6).unwrap();
        let rt = realized_trajectory(&basis, &synth.waveform, &be(), -100.0 * UM).unwrap();
        let (t_lo, t_hi) = plan.constant_window(0);
        let (mean, std) = rt.velocity_stats(t_lo + 2e-6, t_hi - 2e-6);
        assert_relative_eq!(mean, 7.0, max_relative = 0.02);
        assert!(std < 0.02 * mean.abs(), "velocity std {std} vs mean {mean}");

        // filtering at a cutoff comparable to the transit bandwidth makes the
        // velocity strictly ripplier
        let filtered =
            apply_filter(&synth.waveform, &FilterModel::uniform(50e3, 1).unwrap()).unwrap();
        let rt_f = realized_trajectory(&basis, &filtered, &be(), -100.0 * UM).unwrap();
        let (_, std_f) = rt_f.velocity_stats(t_lo + 2e-6, t_hi - 2e-6);
        assert!(std_f > std, "filtered std {std_f} ≤ unfiltered {std}");
    }

    #[test]
    fn realized_static_zero_velocity() {
        let basis = test_basis();
        let plan = plan_static(50.0 * UM, TAU * 2e6, 1e-3, 1e5, 3e-5).unwrap();
        let synth = synthesize_waveform(&basis, &plan, &be(), 10.0, 1e6).unwrap();
        let rt = realized_trajectory(&basis, &synth.waveform, &be(), 50.0 * UM).unwrap();
        assert!(rt.velocity.iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn synthesis_idempotent_on_realized_plan() {
        let basis = test_basis();
        let plan =
            plan_trajectory(-80.0 * UM, 80.0 * UM, 5.0, TAU * 2e6, 1e-3, 1e6, 5e-6).unwrap();
        let s1 = synthesize_waveform(&basis, &plan, &be(), 10.0, 1e6).unwrap();
        let rt = realized_trajectory(&basis, &s1.waveform, &be(), -80.0 * UM).unwrap();
        let replay = TrajectoryPlan {
            sample_rate: plan.sample_rate,
            timestamps: rt.timestamps.clone(),
            wells: vec![PlannedWell {
                positions: rt.position.clone(),
                omega: plan.wells[0].omega,
                depth_ev: plan.wells[0].depth_ev,
                ramp: plan.wells[0].ramp,
            }],
            window_half_width: plan.window_half_width,
        };
        let s2 = synthesize_waveform(&basis, &replay, &be(), 10.0, 1e6).unwrap();
        let rt2 = realized_trajectory(&basis, &s2.waveform, &be(), -80.0 * UM).unwrap();
        let max_dz = rt
            .position
            .iter()
            .zip(&rt2.position)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        assert!(max_dz < 0.1 * UM, "replay deviates by {max_dz}");
    }

    #[test]
    fn two_well_independence() {
        let basis =
            make_surrogate_basis(17, 120.0 * UM, 120.0 * UM, 1100.0 * UM, 1.0 * UM).unwrap();
        let omega = TAU * 2e6;
        let mk = |offset: f64| {
            let a = plan_static(-550.0 * UM, omega, 1e-3, 1e5, 1e-5).unwrap();
            let b = plan_static(550.0 * UM + offset, omega, 1e-3, 1e5, 1e-5).unwrap();
            merge_plans(&[a, b]).unwrap()
        };
        let s0 = synthesize_waveform(&basis, &mk(0.0), &be(), 10.0, 1e7).unwrap();
        let s1 = synthesize_waveform(&basis, &mk(5.0 * UM), &be(), 10.0, 1e7).unwrap();
        let w0 = find_wells(
            &basis,
            s0.waveform.samples.last().unwrap(),
            &be(),
            (-700.0 * UM, -400.0 * UM),
        )
        .unwrap();
        let w1 = find_wells(
            &basis,
            s1.waveform.samples.last().unwrap(),
            &be(),
            (-700.0 * UM, -400.0 * UM),
        )
        .unwrap();
        assert_eq!(w0.len(), 1);
        assert_eq!(w1.len(), 1);
        let cross_talk = (w0[0].position - w1[0].position).abs();
        assert!(cross_talk < 0.1 * UM, "cross-talk {cross_talk}");
    }

    #[test]
    fn classical_ion_rests_at_minimum() {
        let basis = test_basis();
        let plan = plan_static(0.0, TAU * 2e6, 1e-3, 2e3, 1e-3).unwrap();
        let synth = synthesize_waveform(&basis, &plan, &be(), 10.0, 1e6).unwrap();
        let rt = realized_trajectory(&basis, &synth.waveform, &be(), 0.0).unwrap();
        let track =
            track_classical_ion(&basis, &synth.waveform, &be(), rt.position[0], 0.0).unwrap();
        assert!(track.max_deviation < 1e-9, "deviation {}", track.max_deviation);
    }

    #[test]
    fn classical_energy_conserved_in_static_well() {
        let basis = test_basis();
        let plan = plan_static(0.0, TAU * 2e6, 1e-3, 2e3, 1e-3).unwrap();
        let synth = synthesize_waveform(&basis, &plan, &be(), 10.0, 1e6).unwrap();
        let rt = realized_trajectory(&basis, &synth.waveform, &be(), 0.0).unwrap();
        let z_eq = rt.position[0];
        let amp = 0.5 * UM;
        let track =
            track_classical_ion(&basis, &synth.waveform, &be(), z_eq + amp, 0.0).unwrap();
        let species = be();
        let volts = &synth.waveform.samples[0];
        let energy = |z: f64, v: f64| {
            let (pot, _, _) = evaluate_potential(&basis, volts, z).unwrap();
            0.5 * species.mass * v * v + species.charge * pot
        };
        let e_min = energy(z_eq, 0.0);
        let e0 = energy(track.position[0], track.velocity[0]) - e_min;
        let drift = track
            .position
            .iter()
            .zip(&track.velocity)
            .map(|(&z, &v)| ((energy(z, v) - e_min) - e0).abs() / e0)
            .fold(0.0_f64, f64::max);
        assert!(drift < 1e-6, "energy drift {drift}");
    }

    #[test]
    fn adiabatic_transport_small_deviation() {
        let basis = test_basis();
        let plan =
            plan_trajectory(-100.0 * UM, 100.0 * UM, 7.0, TAU * 2e6, 1e-3, 1e6, 5e-6).unwrap();
        let synth = synthesize_waveform(&basis, &plan, &be(), 10.0, 1e6).unwrap();
        let rt = realized_trajectory(&basis, &synth.waveform, &be(), -100.0 * UM).unwrap();
        let track =
            track_classical_ion(&basis, &synth.waveform, &be(), rt.position[0], 0.0).unwrap();
        assert!(track.max_deviation < 1.0 * UM, "deviation {}", track.max_deviation);

        // sudden full-speed start deviates more than the ramped case
        let sudden =
            plan_trajectory(-100.0 * UM, 100.0 * UM, 7.0, TAU * 2e6, 1e-3, 1e6, 0.0).unwrap();
        let synth_s = synthesize_waveform(&basis, &sudden, &be(), 10.0, 1e7).unwrap();
        let rt_s = realized_trajectory(&basis, &synth_s.waveform, &be(), -100.0 * UM).unwrap();
        let track_s =
            track_classical_ion(&basis, &synth_s.waveform, &be(), rt_s.position[0], 0.0).unwrap();
        assert!(track_s.max_deviation > track.max_deviation);
    }

    #[test]
    fn waveform_csv_header() {
        let w = VoltageWaveform {
            sample_rate: 1e6,
            samples: vec![vec![0.1, 0.2]],
            vmax: 10.0,
            slew: 1e6,
        };
        let csv = w.to_csv_string();
        assert!(csv.starts_with("t,ch_1,ch_2\n"));
    }

    proptest::proptest! {
        #[test]
        fn filter_linearity(
            seed in 0u64..500,
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let n = 48;
            let mk = |rng: &mut rand_chacha::ChaCha12Rng| VoltageWaveform {
                sample_rate: 1e6,
                samples: (0..n).map(|_| vec![rng.random_range(-1.0..1.0)]).collect(),
                vmax: 10.0,
                slew: 1e12,
            };
            let w1 = mk(&mut rng);
            let w2 = mk(&mut rng);
            let combo = VoltageWaveform {
                sample_rate: 1e6,
                samples: (0..n)
                    .map(|k| vec![a * w1.samples[k][0] + b * w2.samples[k][0]])
                    .collect(),
                vmax: 10.0,
                slew: 1e12,
            };
            let f = FilterModel::uniform(30e3, 2).unwrap();
            let f1 = apply_filter(&w1, &f).unwrap();
            let f2 = apply_filter(&w2, &f).unwrap();
            let fc = apply_filter(&combo, &f).unwrap();
            for k in 0..n {
                let lin = a * f1.samples[k][0] + b * f2.samples[k][0];
                proptest::prop_assert!((fc.samples[k][0] - lin).abs() < 1e-10);
            }
        }
    }
}
