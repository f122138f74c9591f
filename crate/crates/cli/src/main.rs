//! Command-line front end: parses scenario configs, dispatches experiments
//! and calibrations, and writes CSV/JSON artifacts plus a run manifest.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use iontransit::calibrate::{doppler_null, fit_dip_center, solve_velocity, stark_fidelity};
use iontransit::fit::{
    erf_step_model, fit_curve, gaussian_model, initial_guess, model_by_name, sinusoid_model,
    transit_rabi_model, FitResult,
};
use iontransit::measure::{run_scan, ScanResult, ScanSpec, ScanVariable};
use iontransit::scenario::{parse_angle, ResolvedScenario, ScenarioConfig};
use iontransit::waveform::{
    apply_filter, merge_plans, plan_trajectory, realized_trajectory, synthesize_waveform,
};

#[derive(Parser)]
#[command(name = "iontransit", version, about = "Transport-gate simulation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Scenario config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: `out` next to the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Scan-point parallelism (results are identical for any thread count).
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Chatty progress on stderr.
    #[arg(long)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize transport waveforms and the realized well trajectory.
    Synth(CommonArgs),
    /// Switch-off-time scan through a beam plus a transit-Rabi fit.
    Rabi(CommonArgs),
    /// Two-gate phase scan plus a sinusoid fit.
    Ramsey(CommonArgs),
    /// Two-ion switch-off and difference-frequency scans with erf and
    /// Gaussian fits.
    Parallel(CommonArgs),
    /// Inverse problems: velocity, doppler, stark.
    #[command(subcommand)]
    Calibrate(CalibrateCommand),
    /// Fit a scan CSV with a named model.
    Fit {
        /// Model name: transit_rabi | sinusoid | erf_step | gaussian.
        #[arg(long)]
        model: String,
        /// Input CSV (`x,p_hat,sigma,n` or `x,y,sigma`; `#` comments ok).
        #[arg(long)]
        data: PathBuf,
        /// Output JSON path (default: `<data>.fit.json`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated initial guess (default: heuristic).
        #[arg(long)]
        guess: Option<String>,
    },
}

#[derive(Subcommand)]
enum CalibrateCommand {
    /// Solve the transport velocity for a target rotation angle.
    Velocity {
        #[command(flatten)]
        common: CommonArgs,
        /// Target angle, e.g. `pi/2`.
        #[arg(long)]
        theta: String,
        /// Beam name from the config (default: first beam).
        #[arg(long)]
        beam: Option<String>,
        /// Search bracket `lo,hi` in m/s.
        #[arg(long, default_value = "0.5,60")]
        bracket: String,
    },
    /// Estimate the beam-pair alignment error from forward/reversed
    /// frequency scans.
    Doppler(CommonArgs),
    /// Average gate fidelity under a residual detuning.
    Stark {
        #[command(flatten)]
        common: CommonArgs,
        /// Target angle, e.g. `pi/2`.
        #[arg(long)]
        theta: String,
        /// Residual detuning in kHz.
        #[arg(long)]
        detuning_khz: f64,
        /// Beam name from the config (default: first beam).
        #[arg(long)]
        beam: Option<String>,
    },
}

enum Failure {
    Config(String),
    Numeric(String),
}

impl Failure {
    fn exit_code(&self) -> ExitCode {
        match self {
            Failure::Config(_) => ExitCode::from(2),
            Failure::Numeric(_) => ExitCode::from(3),
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<iontransit::Error> for Failure {
    fn from(e: iontransit::Error) -> Self {
        use iontransit::Error as E;
        match e {
            E::Config(_) | E::Parse { .. } | E::InvalidArgument(_) | E::Io(_) => {
                Failure::Config(e.to_string())
            }
            _ => Failure::Numeric(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Config(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Synth(args) => cmd_synth(&Run::new(&args)?),
        Command::Rabi(args) => cmd_scan_fit(&Run::new(&args)?, Pipeline::Rabi),
        Command::Ramsey(args) => cmd_scan_fit(&Run::new(&args)?, Pipeline::Ramsey),
        Command::Parallel(args) => cmd_parallel(&Run::new(&args)?),
        Command::Calibrate(c) => match c {
            CalibrateCommand::Velocity { common, theta, beam, bracket } => {
                cmd_calibrate_velocity(&Run::new(&common)?, &theta, beam.as_deref(), &bracket)
            }
            CalibrateCommand::Doppler(common) => cmd_calibrate_doppler(&Run::new(&common)?),
            CalibrateCommand::Stark { common, theta, detuning_khz, beam } => {
                cmd_calibrate_stark(&Run::new(&common)?, &theta, detuning_khz, beam.as_deref())
            }
        },
        Command::Fit { model, data, out, guess } => cmd_fit(&model, &data, out, guess.as_deref()),
    }
}

/// One invocation's parsed config, resolved output dir and manifest data.
struct Run {
    config: ScenarioConfig,
    config_sha256: String,
    out_dir: PathBuf,
    seed: u64,
    threads: usize,
    verbose: bool,
}

impl Run {
    fn new(args: &CommonArgs) -> Result<Self, Failure> {
        let raw = std::fs::read(&args.config)?;
        let text = String::from_utf8_lossy(&raw);
        let mut config = ScenarioConfig::from_toml(&text)?;
        if let Some(seed) = args.seed {
            config.seed = seed;
        }
        let digest = Sha256::digest(&raw);
        let config_sha256: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        let out_dir = match &args.out {
            Some(p) => p.clone(),
            None => args
                .config
                .parent()
                .unwrap_or(Path::new("."))
                .join("out"),
        };
        std::fs::create_dir_all(&out_dir)?;
        Ok(Self {
            seed: config.seed,
            config,
            config_sha256,
            out_dir,
            threads: args.threads.max(1),
            verbose: args.verbose,
        })
    }

    fn log(&self, msg: &str) {
        if self.verbose {
            eprintln!("{msg}");
        }
    }

    /// `{config_sha256, seed, tool_version, timestamp}`.
    fn write_manifest(&self) -> Result<(), Failure> {
        let timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let manifest = serde_json::json!({
            "config_sha256": self.config_sha256,
            "seed": self.seed,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "timestamp": timestamp,
        });
        std::fs::write(
            self.out_dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest).expect("serializable"),
        )?;
        Ok(())
    }

    /// Scan CSV with the manifest reference prepended.
    fn write_scan_csv(&self, name: &str, scan: &ScanResult) -> Result<PathBuf, Failure> {
        let path = self.out_dir.join(name);
        let body = format!("# config_sha256={}\n{}", self.config_sha256, scan.to_csv_string());
        std::fs::write(&path, body)?;
        Ok(path)
    }

    /// Fit/report JSON with the manifest reference inserted.
    fn write_json(&self, name: &str, json_text: &str) -> Result<PathBuf, Failure> {
        let mut value: serde_json::Value =
            serde_json::from_str(json_text).expect("well-formed JSON from the library");
        if let Some(obj) = value.as_object_mut() {
            obj.insert(
                "config_sha256".into(),
                serde_json::Value::String(self.config_sha256.clone()),
            );
        }
        let path = self.out_dir.join(name);
        std::fs::write(&path, serde_json::to_string_pretty(&value).expect("serializable"))?;
        Ok(path)
    }

    fn resolved(&self) -> Result<ResolvedScenario, Failure> {
        let mut resolved = self.config.resolve()?;
        resolved.seed = self.seed;
        Ok(resolved)
    }
}

fn cmd_synth(run: &Run) -> Result<(), Failure> {
    let cfg = &run.config;
    if cfg.transports.is_empty() {
        return Err(Failure::Config("synth needs at least one [[transport]] section".into()));
    }
    let basis = cfg.build_basis()?;
    let species = cfg.species()?;
    let synth_cfg = cfg.synthesis.clone().unwrap_or_default();
    let mut plans = Vec::new();
    for t in &cfg.transports {
        let omega = 2.0 * std::f64::consts::PI * t.omega_khz.unwrap_or(synth_cfg.omega_khz) * 1e3;
        let depth = t.depth_mev.unwrap_or(synth_cfg.depth_mev) * 1e-3;
        let ramp = t.ramp_us.unwrap_or(synth_cfg.ramp_us) * 1e-6;
        let signed_v = t.velocity * (t.to_um - t.from_um).signum();
        plans.push(plan_trajectory(
            t.from_um * 1e-6,
            t.to_um * 1e-6,
            signed_v,
            omega,
            depth,
            synth_cfg.sample_rate_hz,
            ramp,
        )?);
    }
    let plan = if plans.len() == 1 { plans.pop().unwrap() } else { merge_plans(&plans)? };
    run.log("synthesizing waveform");
    let synth = synthesize_waveform(&basis, &plan, &species, synth_cfg.vmax_v, synth_cfg.slew_v_per_s)?;
    let write_ref = |name: &str, body: String| -> Result<(), Failure> {
        let text = format!("# config_sha256={}\n{body}", run.config_sha256);
        std::fs::write(run.out_dir.join(name), text)?;
        Ok(())
    };
    write_ref("waveform.csv", synth.waveform.to_csv_string())?;
    let seed_z = plan.wells[0].positions[0];
    let realized = realized_trajectory(&basis, &synth.waveform, &species, seed_z)?;
    write_ref("realized.csv", realized.to_csv_string())?;
    if let Some(filter) = cfg.filter_model()? {
        let filtered = apply_filter(&synth.waveform, &filter)?;
        write_ref("waveform_filtered.csv", filtered.to_csv_string())?;
        let realized_f = realized_trajectory(&basis, &filtered, &species, seed_z)?;
        write_ref("realized_filtered.csv", realized_f.to_csv_string())?;
    }
    let worst = |values: &[f64]| {
        values.iter().filter(|v| v.is_finite()).fold(0.0_f64, |a, &v| a.max(v.abs()))
    };
    let report = serde_json::json!({
        "samples": synth.waveform.n_samples(),
        "channels": synth.waveform.n_channels(),
        "max_position_error_m": synth
            .diagnostics
            .wells
            .iter()
            .map(|w| worst(&w.position_error))
            .fold(0.0_f64, f64::max),
        "max_omega_error": synth
            .diagnostics
            .wells
            .iter()
            .map(|w| worst(&w.omega_error))
            .fold(0.0_f64, f64::max),
        "max_depth_shortfall_ev": synth.max_depth_shortfall(),
        "curvature_unreachable": synth.curvature_unreachable(),
        "max_kkt_residual": worst(&synth.diagnostics.kkt_residual),
    });
    run.write_json("synth_report.json", &report.to_string())?;
    run.write_manifest()?;
    println!("wrote waveform.csv, realized.csv, synth_report.json to {}", run.out_dir.display());
    Ok(())
}

enum Pipeline {
    Rabi,
    Ramsey,
}

fn cmd_scan_fit(run: &Run, pipeline: Pipeline) -> Result<(), Failure> {
    let resolved = run.resolved()?;
    let (expect_var, prefix) = match pipeline {
        Pipeline::Rabi => (ScanVariable::TOff, "rabi"),
        Pipeline::Ramsey => (ScanVariable::Phase, "ramsey"),
    };
    let spec = resolved
        .scan
        .ok_or_else(|| Failure::Config("scenario has no [scan] section".into()))?;
    if spec.variable != expect_var {
        return Err(Failure::Config(format!(
            "{prefix} expects a `{}` scan, config says `{}`",
            expect_var.name(),
            spec.variable.name()
        )));
    }
    run.log("running scan");
    let scans = run_scan(&resolved, run.threads)?;
    let model = match pipeline {
        Pipeline::Rabi => transit_rabi_model(),
        Pipeline::Ramsey => sinusoid_model(),
    };
    for scan in &scans {
        let csv = run.write_scan_csv(&format!("{prefix}_scan_{}.csv", scan.ion), scan)?;
        run.log(&format!("fitting {}", csv.display()));
        let fit = iontransit::fit::fit_scan(&model, scan, None)?;
        run.write_json(&format!("{prefix}_fit_{}.json", scan.ion), &fit.to_json())?;
        print_fit_line(&fit, &scan.ion);
    }
    run.write_manifest()?;
    Ok(())
}

fn cmd_parallel(run: &Run) -> Result<(), Failure> {
    let resolved = run.resolved()?;
    let toff_spec = resolved
        .scan
        .ok_or_else(|| Failure::Config("scenario has no [scan] section".into()))?;
    if toff_spec.variable != ScanVariable::TOff {
        return Err(Failure::Config("parallel expects the [scan] section to sweep t_off".into()));
    }
    let freq_cfg = run
        .config
        .frequency_scan
        .as_ref()
        .ok_or_else(|| Failure::Config("parallel needs a [frequency_scan] section".into()))?;
    let freq_spec = ScanSpec {
        variable: ScanVariable::Frequency,
        start: 2.0 * std::f64::consts::PI * freq_cfg.start_khz * 1e3,
        stop: 2.0 * std::f64::consts::PI * freq_cfg.stop_khz * 1e3,
        points: freq_cfg.points,
        shots: freq_cfg.shots,
    };

    run.log("running switch-off scans");
    let toff_scans = run_scan(&resolved, run.threads)?;
    let erf = erf_step_model();
    for scan in &toff_scans {
        run.write_scan_csv(&format!("toff_scan_{}.csv", scan.ion), scan)?;
        let fit = iontransit::fit::fit_scan(&erf, scan, None)?;
        run.write_json(&format!("toff_fit_{}.json", scan.ion), &fit.to_json())?;
        print_fit_line(&fit, &scan.ion);
    }

    run.log("running frequency scans");
    let mut freq_scenario = resolved.clone();
    freq_scenario.scan = Some(freq_spec);
    let freq_scans = run_scan(&freq_scenario, run.threads)?;
    let gaussian = gaussian_model();
    for scan in &freq_scans {
        run.write_scan_csv(&format!("spectrum_scan_{}.csv", scan.ion), scan)?;
        let fit = iontransit::fit::fit_scan(&gaussian, scan, None)?;
        run.write_json(&format!("spectrum_fit_{}.json", scan.ion), &fit.to_json())?;
        print_fit_line(&fit, &scan.ion);
    }
    if freq_scans.len() == 2 {
        let (c1, s1) = fit_dip_center(&freq_scans[0])?;
        let (c2, s2) = fit_dip_center(&freq_scans[1])?;
        let split = serde_json::json!({
            "center_split_hz": (c2 - c1) / (2.0 * std::f64::consts::PI),
            "combined_sigma_hz":
                (s1 * s1 + s2 * s2).sqrt() / (2.0 * std::f64::consts::PI),
        });
        run.write_json("spectrum_split.json", &split.to_string())?;
    }
    run.write_manifest()?;
    Ok(())
}

fn pick_beam(
    resolved: &ResolvedScenario,
    name: Option<&str>,
) -> Result<iontransit::beam::BeamGeometry, Failure> {
    match name {
        Some(n) => resolved
            .beams
            .iter()
            .find(|(bn, _)| bn == n)
            .map(|(_, b)| *b)
            .ok_or_else(|| Failure::Config(format!("beam `{n}` is not declared"))),
        None => resolved
            .beams
            .first()
            .map(|(_, b)| *b)
            .ok_or_else(|| Failure::Config("scenario declares no beams".into())),
    }
}

fn cmd_calibrate_velocity(
    run: &Run,
    theta: &str,
    beam_name: Option<&str>,
    bracket: &str,
) -> Result<(), Failure> {
    let resolved = run.resolved()?;
    let beam = pick_beam(&resolved, beam_name)?;
    let theta = parse_angle(theta)?;
    let (lo, hi) = bracket
        .split_once(',')
        .and_then(|(a, b)| Some((a.trim().parse::<f64>().ok()?, b.trim().parse::<f64>().ok()?)))
        .ok_or_else(|| Failure::Config(format!("bad bracket `{bracket}`, expected `lo,hi`")))?;
    let cal = solve_velocity(&beam, theta, (lo, hi))?;
    run.write_json("velocity_report.json", &cal.report().to_json())?;
    run.write_manifest()?;
    println!(
        "velocity = {:.4} m/s for θ = {:.4} rad (verified fidelity {:.6})",
        cal.velocity, theta, cal.verified_fidelity
    );
    Ok(())
}

fn cmd_calibrate_doppler(run: &Run) -> Result<(), Failure> {
    let resolved = run.resolved()?;
    let null = doppler_null(&resolved, run.threads)?;
    let mut report: serde_json::Value =
        serde_json::from_str(&null.report().to_json()).expect("well-formed");
    if let Some(obj) = report.as_object_mut() {
        obj.insert("alpha_mdeg".into(), serde_json::json!(null.alpha.to_degrees() * 1e3));
        let centers_hz: Vec<f64> =
            null.centers.iter().map(|c| c / (2.0 * std::f64::consts::PI)).collect();
        obj.insert("centers_hz".into(), serde_json::json!(centers_hz));
    }
    run.write_json("doppler_report.json", &report.to_string())?;
    run.write_manifest()?;
    println!("alignment error = {:.3e} rad ({:.3} mdeg)", null.alpha, null.alpha.to_degrees() * 1e3);
    Ok(())
}

fn cmd_calibrate_stark(
    run: &Run,
    theta: &str,
    detuning_khz: f64,
    beam_name: Option<&str>,
) -> Result<(), Failure> {
    let resolved = run.resolved()?;
    let beam = pick_beam(&resolved, beam_name)?;
    let theta = parse_angle(theta)?;
    let cal = solve_velocity(&beam, theta, (0.5, 100.0))?;
    let delta = 2.0 * std::f64::consts::PI * detuning_khz * 1e3;
    let fidelity = stark_fidelity(&beam, delta, theta, cal.velocity)?;
    let report = serde_json::json!({
        "quantity": "average_fidelity",
        "value": fidelity,
        "unit": "",
        "residual": 1.0 - fidelity,
        "iterations": cal.iterations,
        "method": "basis-state propagation vs ideal rotation",
        "velocity_m_per_s": cal.velocity,
        "detuning_khz": detuning_khz,
    });
    run.write_json("stark_report.json", &report.to_string())?;
    run.write_manifest()?;
    println!("average fidelity = {fidelity:.6} at δ/2π = {detuning_khz} kHz");
    Ok(())
}

fn cmd_fit(
    model_name: &str,
    data: &Path,
    out: Option<PathBuf>,
    guess: Option<&str>,
) -> Result<(), Failure> {
    let model = model_by_name(model_name)?;
    let text = std::fs::read_to_string(data)?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut sigmas = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields[0].parse::<f64>().is_err() {
            continue; // header row
        }
        if fields.len() < 3 {
            return Err(Failure::Config(format!(
                "{}:{}: need at least x,y,sigma columns",
                data.display(),
                lineno + 1
            )));
        }
        let parse = |s: &str| {
            s.parse::<f64>().map_err(|e| {
                Failure::Config(format!("{}:{}: {e}", data.display(), lineno + 1))
            })
        };
        xs.push(parse(fields[0])?);
        ys.push(parse(fields[1])?);
        sigmas.push(parse(fields[2])?);
    }
    let guess_values = match guess {
        Some(g) => g
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Failure::Config(format!("bad guess value `{s}`: {e}")))
            })
            .collect::<Result<Vec<f64>, Failure>>()?,
        None => initial_guess(&model, &xs, &ys)?.0,
    };
    let fit = fit_curve(&model, &xs, &ys, &sigmas, &guess_values)?;
    let out_path = out.unwrap_or_else(|| {
        let mut p = data.to_path_buf();
        p.set_extension("fit.json");
        p
    });
    std::fs::write(&out_path, fit.to_json())?;
    print_fit_line(&fit, &data.display().to_string());
    println!("wrote {}", out_path.display());
    Ok(())
}

fn print_fit_line(fit: &FitResult, label: &str) {
    let params: Vec<String> = fit
        .params
        .iter()
        .map(|p| format!("{}={:.6e}±{:.1e}", p.name, p.value, p.sigma))
        .collect();
    println!(
        "{label}: {} fit {} (χ²_red {:.3}, converged {})",
        fit.model,
        params.join(" "),
        fit.chi2_reduced,
        fit.converged
    );
}
