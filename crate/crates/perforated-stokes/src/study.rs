//! The convergence-study harness: for each particle count N it samples an
//! admissible cloud, solves the mobility forces, assembles the extended
//! N-hole field, solves the limiting Stokes-Brinkman problem, and records
//! L^p gaps, bounded-Lipschitz data distances, bound combinations and
//! diagnostics; plus least-squares rate fits and CSV/JSON/SVG emission.

use crate::brinkman::{
    dirichlet_energy, solve_brinkman_with_stats, BoundaryVelocity, BrinkmanProblem,
};
use crate::cloud::{
    discretize_scalar, discretize_vector, empirical_moments, sample_perturbed_lattice,
    verify_assumptions, DensityField, Domain, LatticeSpec, RadiusLaw, VelocityLaw, SIX_PI,
};
use crate::error::{Error, Result};
use crate::kernels;
use crate::metrics::{dual_holder_distance, lp_distance};
use crate::nstokes::{
    boundary_sup, particle_bc_residual, sample_to_grid, solve_forces, wall_correction,
    CompositeFlow, FlowMode, MobilityMethod,
};
use crate::vec3::Vec3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Full description of a study; the JSON config file mirrors these field
/// names.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub domain_side: f64,
    /// Particle counts; each must be a perfect cube above the
    /// admissibility threshold.
    pub n_list: Vec<usize>,
    pub c0: f64,
    pub r0: f64,
    pub e0: f64,
    pub density: DensityField,
    pub velocity: VelocityLaw,
    pub radius_law: RadiusLaw,
    /// Solver grid resolution k.
    pub grid_resolution: usize,
    /// Cells per side when discretizing the limit density for the measure
    /// distances.
    pub measure_grid: usize,
    pub p_list: Vec<f64>,
    pub alpha_list: Vec<f64>,
    pub solver_tol: f64,
    pub mobility_tol: f64,
    pub mobility_max_iter: usize,
    /// Exponent q > 3 of the flux norm entering the first bound column.
    pub q_exponent: f64,
    pub jitter: f64,
    pub seed: u64,
    pub mode: FlowMode,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            domain_side: 1.0,
            n_list: vec![27, 64, 125, 216, 343],
            c0: 0.45,
            r0: 0.25,
            e0: 1.0,
            density: DensityField::Uniform,
            velocity: VelocityLaw::Constant { v: Vec3::unit_x() },
            radius_law: RadiusLaw::Constant { r: 0.25 },
            grid_resolution: 48,
            measure_grid: 6,
            p_list: vec![1.1, 1.25, 1.4],
            alpha_list: vec![1.0],
            solver_tol: 1e-8,
            mobility_tol: 1e-9,
            mobility_max_iter: 400,
            q_exponent: 4.0,
            jitter: 0.3,
            seed: 7,
            mode: FlowMode::WallCorrected,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        let threshold = (4.0 * self.r0 / self.c0).powf(1.5);
        for &n in &self.n_list {
            let m = (n as f64).cbrt().round() as usize;
            if m * m * m != n {
                return Err(Error::InvalidInput(format!("N = {n} is not a perfect cube")));
            }
            if (n as f64) + 1e-9 < threshold {
                return Err(Error::InvalidInput(format!(
                    "N = {n} below the admissibility threshold {threshold:.3}"
                )));
            }
        }
        if self.r0 < self.radius_law.max() {
            return Err(Error::InvalidInput(format!(
                "r0 = {} below the radius-law maximum {}",
                self.r0,
                self.radius_law.max()
            )));
        }
        for &p in &self.p_list {
            if !(p > 1.0 && p < 1.5) {
                return Err(Error::InvalidInput(format!("p = {p} outside (1, 3/2)")));
            }
        }
        for &a in &self.alpha_list {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::InvalidInput(format!("alpha = {a} outside (0, 1]")));
            }
        }
        if !(self.q_exponent > 3.0) {
            return Err(Error::InvalidInput(format!("q = {} must exceed 3", self.q_exponent)));
        }
        Ok(())
    }

    /// Mean of the radius law, the weight of the limit density.
    pub fn mean_radius(&self) -> f64 {
        match self.radius_law {
            RadiusLaw::Constant { r } => r,
            RadiusLaw::Uniform { lo, hi } => 0.5 * (lo + hi),
        }
    }

    pub fn domain(&self) -> Domain {
        Domain { side_length: self.domain_side, origin: Vec3::ZERO }
    }

    /// Limit density `rho = 6 pi E[r] eta(x)` with `eta` the normalized
    /// placement density (uniform: 1 / L^3 on the whole box; the placement
    /// margin vanishes as N grows).
    pub fn limit_density(&self) -> impl Fn(Vec3) -> f64 + Send + Sync + Clone + use<> {
        let scale = SIX_PI * self.mean_radius();
        let domain = self.domain();
        let density = self.density;
        let eta_norm = match density {
            DensityField::Uniform => domain.side_length.powi(3),
            DensityField::SmoothBump { .. } => {
                // midpoint normalization of the bump shape
                let k = 32;
                let h = domain.side_length / k as f64;
                let mut total = 0.0;
                for i in 0..k {
                    for j in 0..k {
                        for l in 0..k {
                            let x = domain.origin
                                + Vec3::new(
                                    (i as f64 + 0.5) * h,
                                    (j as f64 + 0.5) * h,
                                    (l as f64 + 0.5) * h,
                                );
                            total += density.shape(x) * h * h * h;
                        }
                    }
                }
                total
            }
        };
        move |x: Vec3| scale * density.shape(x) / eta_norm
    }

    /// Limit flux `j = rho(x) V(x)`.
    pub fn limit_flux(&self) -> impl Fn(Vec3) -> Vec3 + Send + Sync + Clone + use<> {
        let rho = self.limit_density();
        let vel = self.velocity;
        let domain = self.domain();
        move |x: Vec3| vel.eval(&domain, x) * rho(x)
    }

    pub fn lattice_spec(&self, n: usize) -> LatticeSpec {
        let m = (n as f64).cbrt().round() as usize;
        LatticeSpec {
            domain: self.domain(),
            m,
            c0: self.c0,
            jitter: self.jitter,
            density: self.density,
            velocity: self.velocity,
            radius_law: self.radius_law,
            e0: Some(self.e0),
            seed: derive_seed(self.seed, n),
        }
    }
}

/// Deterministic per-N seed from the master seed.
pub fn derive_seed(master: u64, n: usize) -> u64 {
    (master ^ (n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// One row of the study: error, distance, bound and diagnostic columns for
/// a single N.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StudyRow {
    pub n: usize,
    /// L^p gaps, one per `p_list` entry.
    pub errors: Vec<f64>,
    /// Density distances, one per `alpha_list` entry.
    pub bl_rho: Vec<f64>,
    /// Flux distances, one per `alpha_list` entry.
    pub bl_j: Vec<f64>,
    pub n_inv_cbrt: f64,
    pub bound_thm1: f64,
    pub bound_thm2: f64,
    pub energy: f64,
    pub bc_residual: f64,
    pub wall_residual: f64,
    pub t_forces_s: f64,
    pub t_brinkman_s: f64,
    pub t_metrics_s: f64,
}

/// Least-squares fit of `log value` against `log N`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
}

/// Ordinary least squares on `(log N, log value)`; needs at least 4 rows of
/// positive values.
pub fn fit_rate(points: &[(f64, f64)]) -> Result<RateFit> {
    if points.len() < 4 {
        return Err(Error::InvalidInput(format!(
            "rate fit needs >= 4 rows, got {}",
            points.len()
        )));
    }
    if let Some((x, y)) = points.iter().find(|(x, y)| !(*x > 0.0) || !(*y > 0.0)) {
        return Err(Error::InvalidInput(format!("nonpositive fit point ({x}, {y})")));
    }
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (lx, ly) = (x.ln(), y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    let sxx_c = sxx - sx * sx / n;
    let slope = (sxy - sx * sy / n) / sxx_c;
    let intercept = (sy - slope * sx) / n;
    let mut ss_res = 0.0;
    for &(x, y) in points {
        let r = y.ln() - (intercept + slope * x.ln());
        ss_res += r * r;
    }
    let stderr = if points.len() > 2 { (ss_res / (n - 2.0) / sxx_c).sqrt() } else { 0.0 };
    Ok(RateFit { slope, intercept, stderr })
}

/// A completed study.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StudyReport {
    pub config: StudyConfig,
    pub rows: Vec<StudyRow>,
    /// Rows that aborted, with the reason.
    pub failures: Vec<(usize, String)>,
    /// Fitted rates per column name (smallest N excluded when 5+ rows).
    pub fits: Vec<(String, RateFit)>,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub crate_version: String,
    pub master_seed: u64,
    /// Rigorous transport bound on the measure-discretization term: total
    /// mass times the half-diagonal of a discretization cell.
    pub discretization_bound: f64,
}

/// Run the full study; rows run concurrently with per-N derived seeds and
/// the outcome is deterministic for a fixed config.
pub fn run_study(config: &StudyConfig) -> Result<StudyReport> {
    config.validate()?;
    let outcomes: Vec<(usize, std::result::Result<StudyRow, String>)> = config
        .n_list
        .par_iter()
        .map(|&n| (n, run_row(config, n).map_err(|e| e.to_string())))
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (n, res) in outcomes {
        match res {
            Ok(row) => rows.push(row),
            Err(msg) => failures.push((n, msg)),
        }
    }
    let fits = compute_fits(config, &rows);
    let mass = SIX_PI * config.mean_radius();
    let cell = config.domain_side / config.measure_grid as f64;
    Ok(StudyReport {
        config: config.clone(),
        rows,
        failures,
        fits,
        provenance: Provenance {
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            master_seed: config.seed,
            discretization_bound: mass * 0.5 * 3.0_f64.sqrt() * cell,
        },
    })
}

fn compute_fits(config: &StudyConfig, rows: &[StudyRow]) -> Vec<(String, RateFit)> {
    let mut fits = Vec::new();
    // exclude the smallest N (pre-asymptotic) when five or more rows exist
    let fit_rows: Vec<&StudyRow> =
        if rows.len() >= 5 { rows.iter().skip(1).collect() } else { rows.iter().collect() };
    let mut add = |name: String, values: Vec<(f64, f64)>| {
        if let Ok(fit) = fit_rate(&values) {
            fits.push((name, fit));
        }
    };
    for (pi, p) in config.p_list.iter().enumerate() {
        add(format!("err_p{p}"), fit_rows.iter().map(|r| (r.n as f64, r.errors[pi])).collect());
    }
    for (ai, a) in config.alpha_list.iter().enumerate() {
        add(
            bl_column_name("bl_rho", *a),
            fit_rows.iter().map(|r| (r.n as f64, r.bl_rho[ai])).collect(),
        );
        add(
            bl_column_name("bl_j", *a),
            fit_rows.iter().map(|r| (r.n as f64, r.bl_j[ai])).collect(),
        );
    }
    fits
}

fn bl_column_name(base: &str, alpha: f64) -> String {
    if alpha == 1.0 {
        base.to_string()
    } else {
        format!("{base}_a{alpha}")
    }
}

fn run_row(config: &StudyConfig, n: usize) -> Result<StudyRow> {
    let cloud = sample_perturbed_lattice(&config.lattice_spec(n))?;
    let report = verify_assumptions(&cloud);
    if !report.all_ok() {
        return Err(Error::InvalidInput(format!(
            "cloud for N = {n} fails the dilution assumptions: {report:?}"
        )));
    }

    let t0 = Instant::now();
    let forces = solve_forces(
        &cloud,
        MobilityMethod::Reflections,
        config.mobility_tol,
        config.mobility_max_iter,
    )?;
    let t_forces_s = t0.elapsed().as_secs_f64();

    let k = config.grid_resolution;
    let t1 = Instant::now();
    let flow = match config.mode {
        FlowMode::WallCorrected => {
            let corr = wall_correction(&cloud, &forces, k, config.solver_tol)?;
            CompositeFlow::wall_corrected(&cloud, forces.clone(), corr)
        }
        FlowMode::FreeSpace => CompositeFlow::free_space(&cloud, forces.clone()),
    };
    let extended = sample_to_grid(&flow, k);

    // limiting Stokes-Brinkman solve (N-independent data; solved per row to
    // keep rows self-contained and the timing column honest)
    let rho_fn = config.limit_density();
    let j_fn = config.limit_flux();
    let problem = BrinkmanProblem::from_fields(
        config.domain(),
        k,
        &rho_fn,
        &j_fn,
        BoundaryVelocity::Zero,
        config.solver_tol,
    )?;
    let (limit_field, _stats) = solve_brinkman_with_stats(&problem)?;
    let t_brinkman_s = t1.elapsed().as_secs_f64();

    let errors: Vec<f64> = config
        .p_list
        .iter()
        .map(|&p| lp_distance(&extended, &limit_field, p))
        .collect::<Result<_>>()?;

    let t2 = Instant::now();
    let (rho_n, j_n) = empirical_moments(&cloud);
    let rho_lim = discretize_scalar(&rho_fn, &config.domain(), config.measure_grid)?;
    let j_lim = discretize_vector(&j_fn, &config.domain(), config.measure_grid)?;
    let mut bl_rho = Vec::new();
    let mut bl_j = Vec::new();
    for &alpha in &config.alpha_list {
        bl_rho.push(dual_holder_distance(&rho_n, &rho_lim, alpha)?.value);
        bl_j.push(dual_holder_distance(&j_n, &j_lim, alpha)?.value);
    }
    let t_metrics_s = t2.elapsed().as_secs_f64();

    let n_inv_cbrt = (n as f64).powf(-1.0 / 3.0);
    let j_q = lq_norm_of_flux(&j_fn, &config.domain(), k, config.q_exponent);
    // bounds use the alpha closest to 1 (the bounded-Lipschitz case)
    let a_idx = config
        .alpha_list
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| (*a - 1.0).abs().partial_cmp(&(*b - 1.0).abs()).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    let bound_thm1 = bl_j[a_idx] + bl_rho[a_idx] + (j_q + config.e0) * n_inv_cbrt;
    let bound_thm2 = bl_j[a_idx] + (bl_rho[a_idx] + n_inv_cbrt).powf(1.0 / 3.0) * config.e0;

    let energy = dirichlet_energy(&extended);
    let bc_residual = particle_bc_residual(&flow).into_iter().fold(0.0_f64, f64::max);
    let wall_residual = boundary_sup(&flow, 8);

    Ok(StudyRow {
        n,
        errors,
        bl_rho,
        bl_j,
        n_inv_cbrt,
        bound_thm1,
        bound_thm2,
        energy,
        bc_residual,
        wall_residual,
        t_forces_s,
        t_brinkman_s,
        t_metrics_s,
    })
}

/// Midpoint `L^q` norm of the limit flux over the solver grid cells.
fn lq_norm_of_flux<J>(j_fn: &J, domain: &Domain, k: usize, q: f64) -> f64
where
    J: Fn(Vec3) -> Vec3,
{
    let h = domain.side_length / k as f64;
    let h3 = h * h * h;
    let mut sum = 0.0;
    for i in 0..k {
        for j in 0..k {
            for l in 0..k {
                let x = domain.origin
                    + Vec3::new((i as f64 + 0.5) * h, (j as f64 + 0.5) * h, (l as f64 + 0.5) * h);
                sum += j_fn(x).norm().powf(q) * h3;
            }
        }
    }
    sum.powf(1.0 / q)
}

/// Output formats for [`emit`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
    Svg,
}

impl std::str::FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Format> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            "svg" => Ok(Format::Svg),
            other => Err(Error::InvalidInput(format!("unknown format {other:?}"))),
        }
    }
}

/// CSV column header for a config.
pub fn csv_header(config: &StudyConfig) -> String {
    let mut cols = vec!["N".to_string()];
    for p in &config.p_list {
        cols.push(format!("err_p{p}"));
    }
    for a in &config.alpha_list {
        cols.push(bl_column_name("bl_rho", *a));
        cols.push(bl_column_name("bl_j", *a));
    }
    cols.extend(
        [
            "n_inv_cbrt",
            "bound_thm1",
            "bound_thm2",
            "energy",
            "bc_residual",
            "wall_residual",
            "t_forces_s",
            "t_brinkman_s",
            "t_metrics_s",
        ]
        .map(String::from),
    );
    cols.join(",")
}

/// Render the report as CSV (one row per N; shortest-round-trip floats, so
/// equal runs give byte-identical non-timing columns).
pub fn csv_string(report: &StudyReport) -> String {
    let mut out = csv_header(&report.config);
    out.push('\n');
    for row in &report.rows {
        let mut fields = vec![row.n.to_string()];
        fields.extend(row.errors.iter().map(|v| v.to_string()));
        for (r, j) in row.bl_rho.iter().zip(&row.bl_j) {
            fields.push(r.to_string());
            fields.push(j.to_string());
        }
        for v in [
            row.n_inv_cbrt,
            row.bound_thm1,
            row.bound_thm2,
            row.energy,
            row.bc_residual,
            row.wall_residual,
        ] {
            fields.push(v.to_string());
        }
        for t in [row.t_forces_s, row.t_brinkman_s, row.t_metrics_s] {
            fields.push(format!("{t:.6}"));
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Write the report in the requested formats, returning the paths.
pub fn emit(report: &StudyReport, out_dir: &Path, formats: &[Format]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for format in formats {
        match format {
            Format::Csv => {
                let path = out_dir.join("study.csv");
                std::fs::write(&path, csv_string(report))?;
                written.push(path);
            }
            Format::Json => {
                let path = out_dir.join("study.json");
                serde_json::to_writer_pretty(std::fs::File::create(&path)?, report)?;
                written.push(path);
            }
            Format::Svg => {
                let path = out_dir.join("study.svg");
                std::fs::write(&path, svg_string(report))?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

/// Log-log plot of the error, bound and reference columns against N, one
/// polyline per column.
pub fn svg_string(report: &StudyReport) -> String {
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    let rows = &report.rows;
    for (pi, p) in report.config.p_list.iter().enumerate() {
        series.push((format!("err_p{p}"), rows.iter().map(|r| (r.n as f64, r.errors[pi])).collect()));
    }
    if !report.config.alpha_list.is_empty() {
        series.push(("bl_rho".into(), rows.iter().map(|r| (r.n as f64, r.bl_rho[0])).collect()));
    }
    series.push(("bound_thm1".into(), rows.iter().map(|r| (r.n as f64, r.bound_thm1)).collect()));
    series.push(("bound_thm2".into(), rows.iter().map(|r| (r.n as f64, r.bound_thm2)).collect()));
    series.push(("n_inv_cbrt".into(), rows.iter().map(|r| (r.n as f64, r.n_inv_cbrt)).collect()));

    let (w, h, margin) = (640.0, 480.0, 60.0);
    let finite: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|(_, pts)| pts.iter().copied())
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &finite {
        x0 = x0.min(x.ln());
        x1 = x1.max(x.ln());
        y0 = y0.min(y.ln());
        y1 = y1.max(y.ln());
    }
    if finite.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if (x1 - x0).abs() < 1e-12 {
        x1 = x0 + 1.0;
    }
    if (y1 - y0).abs() < 1e-12 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| margin + (x.ln() - x0) / (x1 - x0) * (w - 2.0 * margin);
    let sy = |y: f64| h - margin - (y.ln() - y0) / (y1 - y0) * (h - 2.0 * margin);
    let palette = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2"];

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">error and bound columns vs N (log-log)</text>\n",
        w / 2.0
    );
    for (si, (name, pts)) in series.iter().enumerate() {
        let color = palette[si % palette.len()];
        let path: Vec<String> = pts
            .iter()
            .filter(|(x, y)| *x > 0.0 && *y > 0.0)
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if path.is_empty() {
            continue;
        }
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{name}</text>\n",
            w - margin + 4.0,
            30.0 + 14.0 * si as f64
        ));
    }
    svg.push_str(&format!(
        "<line x1=\"{margin}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{margin}\" y1=\"{margin}\" x2=\"{margin}\" y2=\"{}\" stroke=\"black\"/>\n</svg>\n",
        h - margin,
        w - margin,
        h - margin,
        h - margin
    ));
    svg
}

/// One named invariant check of the kernels module.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Run every kernels-module invariant; the `kernel-check` CLI command exits
/// nonzero if any entry fails.
pub fn kernel_check() -> Vec<CheckOutcome> {
    use kernels::*;
    let mut out = Vec::new();
    let mut push = |name: &str, res: Result<(bool, String)>| match res {
        Ok((pass, detail)) => out.push(CheckOutcome { name: name.into(), pass, detail }),
        Err(e) => out.push(CheckOutcome { name: name.into(), pass: false, detail: e.to_string() }),
    };

    push(
        "boundary-exactness",
        (|| {
            let v = Vec3::new(0.4, -0.7, 1.1);
            let coeffs = annulus_coefficients(6.0)?;
            let mut worst = 0.0_f64;
            for dir in [Vec3::unit_x(), Vec3::new(0.6, 0.8, 0.0), Vec3::new(-2.0, 1.0, 2.0)] {
                let d = dir * (1.0 / dir.norm());
                worst = worst.max((exterior_velocity(d * 1.5, v, 1.5)? - v).norm());
                worst = worst.max((annulus_velocity(d * 1.5, v, &coeffs, 1.5)? - v).norm());
                worst = worst.max(annulus_velocity(d * 9.0, v, &coeffs, 1.5)?.norm());
            }
            Ok((worst <= 1e-12 * v.norm(), format!("max boundary defect {worst:.3e}")))
        })(),
    );

    push(
        "divergence-momentum-order",
        (|| {
            let v = Vec3::new(0.8, -0.4, 1.1);
            let coeffs = annulus_coefficients(12.0)?;
            let ext = exterior_flow(v, 1.0);
            let ann = annulus_flow(v, coeffs, 1.0);
            let mut state = 88172645463325252u64;
            let mut next = move || {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state >> 11) as f64 / (1u64 << 53) as f64
            };
            let mut ratios = Vec::new();
            for _ in 0..100 {
                let dir = Vec3::new(next() - 0.5, next() - 0.5, next() - 0.5);
                let dir = dir * (1.0 / dir.norm());
                let x = dir * (1.5 + 8.5 * next());
                for flow in [&ext as &dyn Fn(Vec3) -> Result<FlowSample>, &ann] {
                    let h = 1e-2;
                    let r1 = fd_momentum_residual(flow, x, h)?.norm()
                        + fd_divergence(|y| Ok(flow(y)?.velocity), x, h)?.abs();
                    let r2 = fd_momentum_residual(flow, x, h / 2.0)?.norm()
                        + fd_divergence(|y| Ok(flow(y)?.velocity), x, h / 2.0)?.abs();
                    if r1 > 1e-11 {
                        ratios.push(r1 / r2);
                    }
                }
            }
            let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
            Ok(((3.0..5.0).contains(&mean), format!("mean residual ratio per halving {mean:.2}")))
        })(),
    );

    push(
        "force-transfer",
        (|| {
            let v = Vec3::new(0.4, -1.0, 0.3);
            let r = 1.0;
            let flow = exterior_flow(v, r);
            let base = surface_force(&flow, Vec3::ZERO, r, REFERENCE_QUAD_ORDER)?;
            let mut worst = 0.0_f64;
            for mult in [2.0, 4.0, 8.0] {
                let f = surface_force(&flow, Vec3::ZERO, mult * r, REFERENCE_QUAD_ORDER)?;
                worst = worst.max((f - base).norm() / base.norm());
            }
            Ok((worst <= 1e-6, format!("max relative transfer deviation {worst:.3e}")))
        })(),
    );

    push(
        "force-scaling-identity",
        (|| {
            let v = Vec3::new(0.7, -0.2, 0.4);
            let order = REFERENCE_QUAD_ORDER;
            let coeffs = annulus_coefficients(16.0)?;
            let lhs = surface_force(annulus_flow(v, coeffs, 2.0), Vec3::ZERO, 2.0, order)?
                - surface_force(exterior_flow(v, 2.0), Vec3::ZERO, 2.0, order)?;
            let rhs = (surface_force(annulus_flow(v, coeffs, 1.0), Vec3::ZERO, 1.0, order)?
                - surface_force(exterior_flow(v, 1.0), Vec3::ZERO, 1.0, order)?)
                * 2.0;
            let dev = (lhs - rhs).norm();
            Ok((dev <= 1e-10 * rhs.norm().max(1.0), format!("identity defect {dev:.3e}")))
        })(),
    );

    push(
        "force-difference-rate",
        (|| {
            let v = Vec3::unit_x();
            let f_inf = 6.0 * std::f64::consts::PI;
            let mut pts = Vec::new();
            for r_out in [8.0, 16.0, 32.0, 64.0] {
                let coeffs = annulus_coefficients(r_out)?;
                let f = surface_force(
                    annulus_flow(v, coeffs, 1.0),
                    Vec3::ZERO,
                    1.0,
                    REFERENCE_QUAD_ORDER,
                )?;
                pts.push((r_out, (f.x - f_inf).abs()));
            }
            let fit = fit_rate(&pts)?;
            Ok((
                (-1.15..=-0.85).contains(&fit.slope),
                format!("slope {:.4}", fit.slope),
            ))
        })(),
    );

    push(
        "rotation-equivariance",
        (|| {
            let v = Vec3::new(0.9, -0.3, 0.5);
            let coeffs = annulus_coefficients(6.0)?;
            let x = Vec3::new(1.2, 0.8, -0.6);
            let mut worst = 0.0_f64;
            for (raw_axis, angle) in [
                (Vec3::unit_z(), 0.7_f64),
                (Vec3::new(0.6, 0.8, 0.0), 2.1),
                (Vec3::new(-0.48, 0.6, 0.64), 4.4),
            ] {
                let axis = raw_axis * (1.0 / raw_axis.norm());
                let rot = move |p: Vec3| {
                    p * angle.cos()
                        + axis.cross(p) * angle.sin()
                        + axis * (axis.dot(p) * (1.0 - angle.cos()))
                };
                let u = exterior_velocity(x, v, 1.0)?;
                worst = worst.max((rot(u) - exterior_velocity(rot(x), rot(v), 1.0)?).norm());
                worst = worst.max(
                    (exterior_pressure(x, v, 1.0)? - exterior_pressure(rot(x), rot(v), 1.0)?).abs(),
                );
                let ua = annulus_velocity(x, v, &coeffs, 1.0)?;
                worst = worst.max((rot(ua) - annulus_velocity(rot(x), rot(v), &coeffs, 1.0)?).norm());
            }
            Ok((worst <= 1e-12, format!("max equivariance defect {worst:.3e}")))
        })(),
    );

    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fit_rate_reference_cases() {
        // exact power law N^{-1/3}
        let pts: Vec<(f64, f64)> =
            [27.0, 64.0, 125.0, 216.0].iter().map(|&n: &f64| (n, n.powf(-1.0 / 3.0))).collect();
        let fit = fit_rate(&pts).unwrap();
        assert_abs_diff_eq!(fit.slope, -1.0 / 3.0, epsilon = 1e-12);
        assert!(fit.stderr < 1e-12);

        // constant column
        let pts: Vec<(f64, f64)> = [8.0, 27.0, 64.0, 125.0].iter().map(|&n| (n, 2.5)).collect();
        assert_abs_diff_eq!(fit_rate(&pts).unwrap().slope, 0.0, epsilon = 1e-13);

        // too few rows or nonpositive values
        assert!(fit_rate(&pts[..3]).is_err());
        let bad = vec![(8.0, 1.0), (27.0, -1.0), (64.0, 1.0), (125.0, 1.0)];
        assert!(fit_rate(&bad).is_err());
    }

    #[test]
    fn fit_rate_recovers_slope_under_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let pts: Vec<(f64, f64)> = [27.0, 64.0, 125.0, 216.0, 343.0, 512.0]
            .iter()
            .map(|&n: &f64| {
                let noise = 1.0 + 0.05 * (2.0 * rng.random::<f64>() - 1.0);
                (n, n.powf(-1.0 / 3.0) * noise)
            })
            .collect();
        let fit = fit_rate(&pts).unwrap();
        assert!((fit.slope + 1.0 / 3.0).abs() <= 0.05, "slope {}", fit.slope);
    }

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let config = StudyConfig::default();
        config.validate().unwrap();
        let text = serde_json::to_string_pretty(&config).unwrap();
        let back: StudyConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), serde_json::to_string(&config).unwrap());
    }

    #[test]
    fn config_validation_rejects_bad_inputs() {
        let c = StudyConfig { n_list: vec![30], ..Default::default() };
        assert!(c.validate().is_err()); // not a cube
        let c = StudyConfig { n_list: vec![8], r0: 1.0, ..Default::default() };
        assert!(c.validate().is_err()); // below threshold
        let c = StudyConfig { p_list: vec![1.6], ..Default::default() };
        assert!(c.validate().is_err());
        let c = StudyConfig { alpha_list: vec![0.0], ..Default::default() };
        assert!(c.validate().is_err());
        let c = StudyConfig { q_exponent: 2.0, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn derived_seeds_differ_across_n() {
        let s: Vec<u64> = [27, 64, 125].iter().map(|&n| derive_seed(7, n)).collect();
        assert_ne!(s[0], s[1]);
        assert_ne!(s[1], s[2]);
        assert_eq!(derive_seed(7, 27), derive_seed(7, 27));
    }

    /// Smoke row: N = 27, coarse grid, all columns finite; and the
    /// zero-velocity configuration gives vanishing error columns.
    #[test]
    fn single_row_smoke_and_zero_data() {
        let config = StudyConfig {
            n_list: vec![27],
            grid_resolution: 12,
            measure_grid: 4,
            solver_tol: 1e-7,
            ..Default::default()
        };
        let report = run_study(&config).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert!(report.failures.is_empty(), "{:?}", report.failures);
        let row = &report.rows[0];
        assert!(row.errors.iter().all(|e| e.is_finite() && *e > 0.0));
        assert!(row.bl_rho[0].is_finite() && row.bl_rho[0] > 0.0);
        assert!(row.bound_thm1 > 0.0 && row.bound_thm2 > 0.0);
        assert!(row.energy > 0.0);

        // V0 = 0: the N-hole field, the limit field and all error columns
        // vanish
        let zero_config = StudyConfig {
            n_list: vec![27],
            grid_resolution: 8,
            measure_grid: 4,
            velocity: VelocityLaw::Constant { v: Vec3::ZERO },
            e0: 1.0,
            solver_tol: 1e-7,
            ..Default::default()
        };
        let report = run_study(&zero_config).unwrap();
        assert!(report.failures.is_empty(), "{:?}", report.failures);
        let row = &report.rows[0];
        for e in &row.errors {
            assert_abs_diff_eq!(*e, 0.0, epsilon = 1e-10);
        }
        for b in row.bl_j.iter() {
            assert_abs_diff_eq!(*b, 0.0, epsilon = 1e-10);
        }
        assert_abs_diff_eq!(row.energy, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn csv_and_json_round_trip_and_svg_structure() {
        let config = StudyConfig {
            n_list: vec![27, 64],
            grid_resolution: 8,
            measure_grid: 4,
            solver_tol: 1e-7,
            ..Default::default()
        };
        let report = run_study(&config).unwrap();
        assert!(report.failures.is_empty(), "{:?}", report.failures);
        let dir = tempfile::tempdir().unwrap();
        let files = emit(&report, dir.path(), &[Format::Csv, Format::Json, Format::Svg]).unwrap();
        assert_eq!(files.len(), 3);

        // CSV: pinned header, one line per row
        let csv = std::fs::read_to_string(&files[0]).unwrap();
        let mut lines = csv.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("N,err_p1.1,err_p1.25,err_p1.4,bl_rho,bl_j,n_inv_cbrt,"));
        assert_eq!(lines.count(), 2);

        // JSON: full round trip to an identical report
        let text = std::fs::read_to_string(&files[1]).unwrap();
        let back: StudyReport = serde_json::from_str(&text).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), serde_json::to_string(&report).unwrap());

        // SVG: one polyline per plotted column (3 errors + bl_rho + two
        // bounds + reference)
        let svg = std::fs::read_to_string(&files[2]).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 7);

        // empty report: header-only CSV
        let empty = StudyReport { rows: vec![], ..report.clone() };
        let csv = csv_string(&empty);
        assert_eq!(csv.lines().count(), 1);
    }

    #[test]
    fn identical_config_reproduces_csv_bytes() {
        let config = StudyConfig {
            n_list: vec![27],
            grid_resolution: 8,
            measure_grid: 4,
            solver_tol: 1e-7,
            ..Default::default()
        };
        let a = run_study(&config).unwrap();
        let b = run_study(&config).unwrap();
        let strip_timing = |s: String| -> String {
            s.lines()
                .map(|line| {
                    let fields: Vec<&str> = line.split(',').collect();
                    fields[..fields.len().saturating_sub(3)].join(",")
                })
                .collect::<Vec<_>>()
                .join("\n")
        };
        assert_eq!(strip_timing(csv_string(&a)), strip_timing(csv_string(&b)));
    }

    #[test]
    fn kernel_check_passes_every_invariant() {
        let outcomes = kernel_check();
        assert!(outcomes.len() >= 6);
        for o in &outcomes {
            assert!(o.pass, "kernel invariant {} failed: {}", o.name, o.detail);
        }
    }
}
