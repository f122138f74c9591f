//! Axial trap potentials: per-electrode basis functions, superposition,
//! and location/characterisation of confining wells.
//!
//! The basis stores each electrode's potential contribution φᵢ(z) (volts at
//! the ion per volt applied) together with its first two spatial derivatives
//! on a common grid. Electrode geometries are rarely published, so the
//! default is an analytic Gaussian surrogate; measured or simulated bases
//! load from CSV.

use std::fmt::Write as _;
use std::path::Path;

use crate::numeric::root::{brent, RootError};
use crate::{Error, Result};

/// Elementary charge in coulombs; also the J → eV conversion factor.
pub const ELEMENTARY_CHARGE: f64 = 1.602e-19;

/// Ion mass and charge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IonSpecies {
    pub mass: f64,
    pub charge: f64,
}

impl IonSpecies {
    pub fn new(mass: f64, charge: f64) -> Result<Self> {
        if mass <= 0.0 || charge <= 0.0 {
            return Err(Error::invalid("ion mass and charge must be positive"));
        }
        Ok(Self { mass, charge })
    }

    /// ⁹Be⁺.
    pub fn beryllium() -> Self {
        Self { mass: 1.4965e-26, charge: ELEMENTARY_CHARGE }
    }
}

impl Default for IonSpecies {
    fn default() -> Self {
        Self::beryllium()
    }
}

/// A confining potential well.
#[derive(Debug, Clone, Copy)]
pub struct Well {
    /// Location of the minimum (m).
    pub position: f64,
    /// Axial angular frequency ω = √(q Φ″ / m) (rad/s).
    pub omega: f64,
    /// Escape depth (eV): smaller of the barriers to either side.
    pub depth_ev: f64,
    /// Energy curvature q·Φ″ at the minimum (J/m²).
    pub curvature: f64,
}

/// Per-electrode axial basis potentials on a shared grid.
#[derive(Debug, Clone)]
pub struct ElectrodeBasis {
    grid: Vec<f64>,
    /// φ[i][j] = potential of electrode i at grid point j (V/V).
    phi: Vec<Vec<f64>>,
    dphi: Vec<Vec<f64>>,
    d2phi: Vec<Vec<f64>>,
    /// Electrode → drive channel. Surjective onto 0..n_channels.
    channel_map: Vec<usize>,
    n_channels: usize,
}

/// Hermite cubic basis functions.
#[inline]
fn hermite(s: f64) -> (f64, f64, f64, f64) {
    let s2 = s * s;
    let s3 = s2 * s;
    (
        2.0 * s3 - 3.0 * s2 + 1.0,
        s3 - 2.0 * s2 + s,
        -2.0 * s3 + 3.0 * s2,
        s3 - s2,
    )
}

#[inline]
fn hermite_deriv(s: f64) -> (f64, f64, f64, f64) {
    let s2 = s * s;
    (
        6.0 * s2 - 6.0 * s,
        3.0 * s2 - 4.0 * s + 1.0,
        -6.0 * s2 + 6.0 * s,
        3.0 * s2 - 2.0 * s,
    )
}

impl ElectrodeBasis {
    /// Construct from raw arrays, validating the type invariants.
    ///
    /// `channel_map` of `None` selects the identity map folded onto at most
    /// `max_channels` channels (electrode i drives channel i mod K).
    pub fn new(
        grid: Vec<f64>,
        phi: Vec<Vec<f64>>,
        dphi: Vec<Vec<f64>>,
        d2phi: Vec<Vec<f64>>,
        channel_map: Option<Vec<usize>>,
        max_channels: usize,
    ) -> Result<Self> {
        let n = phi.len();
        if n == 0 || grid.len() < 4 {
            return Err(Error::invalid("basis needs ≥ 1 electrode and ≥ 4 grid points"));
        }
        if !grid.windows(2).all(|w| w[1] > w[0]) {
            return Err(Error::invalid("grid must be strictly increasing"));
        }
        for (name, m) in [("phi", &phi), ("dphi", &dphi), ("d2phi", &d2phi)] {
            if m.len() != n || m.iter().any(|row| row.len() != grid.len()) {
                return Err(Error::invalid(format!(
                    "{name} must be {n} × {} (electrodes × grid)",
                    grid.len()
                )));
            }
        }
        let channel_map = channel_map.unwrap_or_else(|| {
            let k = max_channels.max(1);
            (0..n).map(|i| i % k).collect()
        });
        if channel_map.len() != n {
            return Err(Error::invalid("channel_map length must equal n_electrodes"));
        }
        let n_channels = channel_map.iter().max().map(|m| m + 1).unwrap_or(0);
        if n_channels > max_channels {
            return Err(Error::invalid(format!(
                "channel_map uses {n_channels} channels, bound is {max_channels}"
            )));
        }
        // surjectivity onto 0..n_channels
        let mut seen = vec![false; n_channels];
        for &c in &channel_map {
            seen[c] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("channel_map must be surjective onto 0..n_channels"));
        }

        let basis = Self { grid, phi, dphi, d2phi, channel_map, n_channels };
        basis.check_derivatives()?;
        Ok(basis)
    }

    /// Finite-difference consistency of stored first derivatives (1% of the
    /// electrode's derivative scale, interior points).
    fn check_derivatives(&self) -> Result<()> {
        let g = &self.grid;
        for (i, (p, dp)) in self.phi.iter().zip(&self.dphi).enumerate() {
            let scale = dp.iter().fold(0.0_f64, |a, &v| a.max(v.abs()));
            if scale == 0.0 {
                continue;
            }
            for j in 1..g.len() - 1 {
                let fd = (p[j + 1] - p[j - 1]) / (g[j + 1] - g[j - 1]);
                if (fd - dp[j]).abs() > 0.01 * scale {
                    return Err(Error::invalid(format!(
                        "electrode {i}: stored dphi disagrees with finite difference \
                         at grid index {j} ({} vs {fd})",
                        dp[j]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_electrodes(&self) -> usize {
        self.phi.len()
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn channel_map(&self) -> &[usize] {
        &self.channel_map
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn span(&self) -> (f64, f64) {
        (self.grid[0], *self.grid.last().unwrap())
    }

    pub fn grid_step(&self) -> f64 {
        (self.span().1 - self.span().0) / (self.grid.len() - 1) as f64
    }

    pub fn phi_row(&self, electrode: usize) -> &[f64] {
        &self.phi[electrode]
    }

    /// Combine electrode rows under a per-channel voltage vector.
    pub fn combine(&self, voltages: &[f64]) -> Result<PotentialOnGrid<'_>> {
        if voltages.len() != self.n_channels {
            return Err(Error::invalid(format!(
                "voltage vector length {} != channel count {}",
                voltages.len(),
                self.n_channels
            )));
        }
        let m = self.grid.len();
        let mut p = vec![0.0; m];
        let mut dp = vec![0.0; m];
        let mut d2p = vec![0.0; m];
        for (i, &c) in self.channel_map.iter().enumerate() {
            let v = voltages[c];
            if v == 0.0 {
                continue;
            }
            for j in 0..m {
                p[j] += v * self.phi[i][j];
                dp[j] += v * self.dphi[i][j];
                d2p[j] += v * self.d2phi[i][j];
            }
        }
        Ok(PotentialOnGrid { grid: &self.grid, p, dp, d2p })
    }
}

/// A voltage-combined potential sampled on the basis grid, with cubic
/// Hermite interpolation between samples.
///
/// The value interpolant uses (Φ, Φ′) node data; the slope interpolant uses
/// (Φ′, Φ″) node data and the curvature is its exact derivative, so slope
/// and curvature are mutually consistent and the value/slope pair agree to
/// interpolation order.
#[derive(Debug, Clone)]
pub struct PotentialOnGrid<'a> {
    grid: &'a [f64],
    p: Vec<f64>,
    dp: Vec<f64>,
    d2p: Vec<f64>,
}

impl PotentialOnGrid<'_> {
    fn cell(&self, z: f64) -> Result<(usize, f64, f64)> {
        let g = self.grid;
        let (lo, hi) = (g[0], *g.last().unwrap());
        if z < lo || z > hi {
            return Err(Error::OutOfRange { what: "z".into(), value: z });
        }
        let mut k = match g.binary_search_by(|x| x.partial_cmp(&z).unwrap()) {
            Ok(k) => k,
            Err(k) => k - 1,
        };
        if k >= g.len() - 1 {
            k = g.len() - 2;
        }
        let h = g[k + 1] - g[k];
        Ok((k, (z - g[k]) / h, h))
    }

    /// Potential value (V) at z.
    pub fn value(&self, z: f64) -> Result<f64> {
        let (k, s, h) = self.cell(z)?;
        let (h00, h10, h01, h11) = hermite(s);
        Ok(h00 * self.p[k] + h10 * h * self.dp[k] + h01 * self.p[k + 1] + h11 * h * self.dp[k + 1])
    }

    /// Slope dΦ/dz (V/m) at z.
    pub fn slope(&self, z: f64) -> Result<f64> {
        let (k, s, h) = self.cell(z)?;
        let (h00, h10, h01, h11) = hermite(s);
        Ok(h00 * self.dp[k]
            + h10 * h * self.d2p[k]
            + h01 * self.dp[k + 1]
            + h11 * h * self.d2p[k + 1])
    }

    /// Curvature d²Φ/dz² (V/m²) at z, the exact derivative of [`Self::slope`].
    pub fn curvature(&self, z: f64) -> Result<f64> {
        let (k, s, h) = self.cell(z)?;
        let (d00, d10, d01, d11) = hermite_deriv(s);
        Ok((d00 * self.dp[k] + d01 * self.dp[k + 1]) / h
            + d10 * self.d2p[k]
            + d11 * self.d2p[k + 1])
    }

    pub fn node_values(&self) -> (&[f64], &[f64]) {
        (self.grid, &self.p)
    }
}

/// Analytic Gaussian surrogate basis: φᵢ(z) = exp(−(z−zᵢ)²/2w²) with
/// electrode centers spaced by `pitch`, symmetric about z = 0.
pub fn make_surrogate_basis(
    n_electrodes: usize,
    pitch: f64,
    width: f64,
    span: f64,
    grid_step: f64,
) -> Result<ElectrodeBasis> {
    make_surrogate_basis_with_channels(n_electrodes, pitch, width, span, grid_step, usize::MAX)
}

/// Surrogate basis with an explicit channel-count bound (electrode i drives
/// channel i mod bound, matching a K-channel waveform generator fanned out
/// over more electrodes).
pub fn make_surrogate_basis_with_channels(
    n_electrodes: usize,
    pitch: f64,
    width: f64,
    span: f64,
    grid_step: f64,
    max_channels: usize,
) -> Result<ElectrodeBasis> {
    if n_electrodes < 2 {
        return Err(Error::invalid("need at least 2 electrodes"));
    }
    if pitch <= 0.0 || width <= 0.0 || grid_step <= 0.0 || span <= 0.0 {
        return Err(Error::invalid("pitch, width, span and grid_step must be positive"));
    }
    let half_extent = pitch * (n_electrodes - 1) as f64 / 2.0;
    if span < half_extent {
        return Err(Error::invalid(format!(
            "span ±{span} m does not cover electrode centers at ±{half_extent} m"
        )));
    }
    let n_grid = (2.0 * span / grid_step).round() as usize + 1;
    let grid: Vec<f64> = (0..n_grid).map(|j| -span + j as f64 * grid_step).collect();

    let w2 = width * width;
    let mut phi = Vec::with_capacity(n_electrodes);
    let mut dphi = Vec::with_capacity(n_electrodes);
    let mut d2phi = Vec::with_capacity(n_electrodes);
    for i in 0..n_electrodes {
        let zc = -half_extent + i as f64 * pitch;
        let mut p = Vec::with_capacity(n_grid);
        let mut dp = Vec::with_capacity(n_grid);
        let mut d2p = Vec::with_capacity(n_grid);
        for &z in &grid {
            let u = z - zc;
            let e = (-u * u / (2.0 * w2)).exp();
            p.push(e);
            dp.push(-u / w2 * e);
            d2p.push((u * u / w2 - 1.0) / w2 * e);
        }
        phi.push(p);
        dphi.push(dp);
        d2phi.push(d2p);
    }
    ElectrodeBasis::new(grid, phi, dphi, d2phi, None, max_channels)
}

/// Evaluate Φ(z) = Σᵢ V_ch(i) φᵢ(z) and its first two derivatives.
pub fn evaluate_potential(
    basis: &ElectrodeBasis,
    voltages: &[f64],
    z: f64,
) -> Result<(f64, f64, f64)> {
    let pot = basis.combine(voltages)?;
    Ok((pot.value(z)?, pot.slope(z)?, pot.curvature(z)?))
}

/// Slope magnitude below which a stationary point counts as converged (V/m).
pub const WELL_SLOPE_TOL: f64 = 1e-9;

/// All confining wells of q·Φ within `search`, sorted by position.
///
/// Minima are bracketed on the grid (slope sign change − → +) and refined by
/// Brent's method on the interpolated slope. Depth is the smaller of the two
/// escape levels, where the escape level on a side is the highest potential
/// between the minimum and the search-interval edge (the edge value itself
/// when the potential rises monotonically).
pub fn find_wells(
    basis: &ElectrodeBasis,
    voltages: &[f64],
    species: &IonSpecies,
    search: (f64, f64),
) -> Result<Vec<Well>> {
    let pot = basis.combine(voltages)?;
    find_wells_in(&pot, species, search)
}

/// [`find_wells`] on an already-combined potential.
pub fn find_wells_in(
    pot: &PotentialOnGrid<'_>,
    species: &IonSpecies,
    search: (f64, f64),
) -> Result<Vec<Well>> {
    let (grid, p) = pot.node_values();
    let (lo, hi) = search;
    let (glo, ghi) = (grid[0], *grid.last().unwrap());
    if lo < glo || hi > ghi || lo >= hi {
        return Err(Error::OutOfRange { what: "search interval".into(), value: lo });
    }
    let j0 = grid.partition_point(|&z| z < lo);
    let j1 = grid.partition_point(|&z| z <= hi);
    if j1 - j0 < 2 {
        return Ok(Vec::new());
    }

    let mut wells = Vec::new();
    for j in j0..j1 - 1 {
        let s0 = pot.dp[j];
        let s1 = pot.dp[j + 1];
        let crossing = (s0 < 0.0 && s1 > 0.0) || (s0 == 0.0 && s1 > 0.0 && j > j0);
        if !crossing {
            continue;
        }
        let z_min = if s0 == 0.0 {
            grid[j]
        } else {
            match brent(
                |z| pot.slope(z).unwrap_or(f64::NAN),
                grid[j],
                grid[j + 1],
                0.0,
                WELL_SLOPE_TOL,
                200,
            ) {
                Ok(r) => r.x,
                Err(RootError::NotBracketed { .. }) => continue,
                Err(RootError::IterationLimit) => continue,
            }
        };
        let curv_v = pot.curvature(z_min)?;
        if curv_v <= 0.0 {
            continue;
        }
        let curvature = species.charge * curv_v;
        let omega = (curvature / species.mass).sqrt();
        let well_value = pot.value(z_min)?;

        // escape levels: highest node potential between the minimum and each
        // interval edge
        let left_level = p[j0..=j].iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let right_level = p[j + 1..j1].iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let depth_v = left_level.min(right_level) - well_value;
        let depth_ev = (species.charge * depth_v.max(0.0)) / ELEMENTARY_CHARGE;

        wells.push(Well { position: z_min, omega, depth_ev, curvature });
    }
    Ok(wells)
}

// ---------------------------------------------------------------------------
// CSV persistence
// ---------------------------------------------------------------------------

fn float_to_csv(x: f64) -> String {
    // shortest round-trip representation; parses back bit-identically
    let mut s = String::new();
    let _ = write!(s, "{x}");
    s
}

/// Write `z,phi_1,...,phi_N` plus a `<stem>.derivs.csv` companion holding
/// `z,dphi_1,...,d2phi_N`.
pub fn save_basis(basis: &ElectrodeBasis, path: &Path) -> Result<()> {
    let n = basis.n_electrodes();
    let mut main = String::from("z");
    for i in 1..=n {
        let _ = write!(main, ",phi_{i}");
    }
    main.push('\n');
    for (j, &z) in basis.grid.iter().enumerate() {
        main.push_str(&float_to_csv(z));
        for i in 0..n {
            main.push(',');
            main.push_str(&float_to_csv(basis.phi[i][j]));
        }
        main.push('\n');
    }
    std::fs::write(path, main)?;

    let mut dcsv = String::from("z");
    for i in 1..=n {
        let _ = write!(dcsv, ",dphi_{i}");
    }
    for i in 1..=n {
        let _ = write!(dcsv, ",d2phi_{i}");
    }
    dcsv.push('\n');
    for (j, &z) in basis.grid.iter().enumerate() {
        dcsv.push_str(&float_to_csv(z));
        for i in 0..n {
            dcsv.push(',');
            dcsv.push_str(&float_to_csv(basis.dphi[i][j]));
        }
        for i in 0..n {
            dcsv.push(',');
            dcsv.push_str(&float_to_csv(basis.d2phi[i][j]));
        }
        dcsv.push('\n');
    }
    std::fs::write(derivs_path(path), dcsv)?;
    Ok(())
}

fn derivs_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.to_path_buf();
    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    p.set_file_name(format!("{stem}.derivs.csv"));
    p
}

/// Load a basis CSV (see [`save_basis`] for the format). When no derivative
/// companion file exists, first and second derivatives come from central
/// differences (one-sided at the grid ends).
pub fn load_basis(path: &Path, max_channels: usize) -> Result<ElectrodeBasis> {
    let text = std::fs::read_to_string(path)?;
    let pstr = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: pstr.clone(),
        line: 1,
        column: "-".into(),
        message: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"z") || cols.len() < 2 {
        return Err(Error::Parse {
            path: pstr,
            line: 1,
            column: cols.first().unwrap_or(&"").to_string(),
            message: "expected header `z,phi_1,...,phi_N`".into(),
        });
    }
    let n = cols.len() - 1;
    for (i, c) in cols.iter().enumerate().skip(1) {
        let want = format!("phi_{i}");
        if *c != want {
            return Err(Error::Parse {
                path: pstr,
                line: 1,
                column: (*c).into(),
                message: format!("expected column `{want}`"),
            });
        }
    }

    let mut grid = Vec::new();
    let mut phi = vec![Vec::new(); n];
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != n + 1 {
            return Err(Error::Parse {
                path: pstr,
                line: lineno + 1,
                column: "-".into(),
                message: format!("expected {} fields, found {}", n + 1, fields.len()),
            });
        }
        let parse = |s: &str, col: &str, lineno: usize| -> Result<f64> {
            s.parse::<f64>().map_err(|e| Error::Parse {
                path: pstr.clone(),
                line: lineno + 1,
                column: col.into(),
                message: e.to_string(),
            })
        };
        let z = parse(fields[0], "z", lineno)?;
        if let Some(&prev) = grid.last() {
            if z <= prev {
                return Err(Error::Parse {
                    path: pstr,
                    line: lineno + 1,
                    column: "z".into(),
                    message: format!("grid not strictly increasing ({prev} then {z})"),
                });
            }
        }
        grid.push(z);
        for i in 0..n {
            phi[i].push(parse(fields[i + 1], cols[i + 1], lineno)?);
        }
    }

    let dpath = derivs_path(path);
    let (dphi, d2phi) = if dpath.exists() {
        load_derivatives(&dpath, n, grid.len())?
    } else {
        let dphi: Vec<Vec<f64>> = phi.iter().map(|p| central_diff(&grid, p)).collect();
        let d2phi: Vec<Vec<f64>> = dphi.iter().map(|dp| central_diff(&grid, dp)).collect();
        (dphi, d2phi)
    };

    ElectrodeBasis::new(grid, phi, dphi, d2phi, None, max_channels)
}

type DerivativeRows = (Vec<Vec<f64>>, Vec<Vec<f64>>);

fn load_derivatives(path: &Path, n: usize, m: usize) -> Result<DerivativeRows> {
    let text = std::fs::read_to_string(path)?;
    let pstr = path.display().to_string();
    let mut dphi = vec![Vec::with_capacity(m); n];
    let mut d2phi = vec![Vec::with_capacity(m); n];
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 2 * n + 1 {
            return Err(Error::Parse {
                path: pstr,
                line: lineno + 1,
                column: "-".into(),
                message: format!("expected {} fields, found {}", 2 * n + 1, fields.len()),
            });
        }
        for i in 0..n {
            let v = fields[1 + i].parse::<f64>().map_err(|e| Error::Parse {
                path: pstr.clone(),
                line: lineno + 1,
                column: format!("dphi_{}", i + 1),
                message: e.to_string(),
            })?;
            dphi[i].push(v);
            let v2 = fields[1 + n + i].parse::<f64>().map_err(|e| Error::Parse {
                path: pstr.clone(),
                line: lineno + 1,
                column: format!("d2phi_{}", i + 1),
                message: e.to_string(),
            })?;
            d2phi[i].push(v2);
        }
    }
    if dphi[0].len() != m {
        return Err(Error::Parse {
            path: pstr,
            line: 0,
            column: "-".into(),
            message: format!("derivative file has {} rows, basis has {m}", dphi[0].len()),
        });
    }
    Ok((dphi, d2phi))
}

fn central_diff(grid: &[f64], y: &[f64]) -> Vec<f64> {
    let m = y.len();
    let mut d = vec![0.0; m];
    for j in 1..m - 1 {
        d[j] = (y[j + 1] - y[j - 1]) / (grid[j + 1] - grid[j - 1]);
    }
    d[0] = (y[1] - y[0]) / (grid[1] - grid[0]);
    d[m - 1] = (y[m - 1] - y[m - 2]) / (grid[m - 1] - grid[m - 2]);
    d
}
