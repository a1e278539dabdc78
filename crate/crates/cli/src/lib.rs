//! Command implementations behind the `blowup` binary.
//!
//! Every command reads a [`RunConfig`], writes its outputs under
//! `out_dir`, and returns an [`Outcome`] whose status maps to the process
//! exit code. Point-level work runs in parallel; outputs are always ordered
//! by label.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use blowup_core::bubble::{check_bubble_residual, random_points, BubbleParams};
use blowup_core::corrector::{
    check_solvability, solve_vq, verify_corrector, CorrectorSolution, GridConfig,
};
use blowup_core::energy::{
    compute_phi, residual_slope, validate_ladder, verify_a4_l2_l3_identity, Cutoff,
    EnergyConstants, EpsilonCoupling, IdentityExperiment, PhiOptions, ResidualExperiment,
    ResidualOptions, WeylDenominator,
};
use blowup_core::fit::geometric_ladder;
use blowup_core::geometry::{generate_sample, validate_curvature};
use blowup_core::io::{read_curvature, write_family_csv, write_results_csv};
use blowup_core::quadrature::{angular_moment, key_i2, MomentTable};
use blowup_core::reduction::{
    eval_g, family_table, find_blowup_point, Adjacency, BlowUpFamily, PointCoefficients,
    ReducedFunctional,
};
use blowup_core::{
    CurvaturePoint, DerivativeTensors, Dim, Error, MetricExpansion, ReducedCoefficients,
    RiiConvention,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// A geometric ladder `start, ..., end` with `points` entries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderSpec {
    pub start: f64,
    pub end: f64,
    pub points: usize,
}

impl LadderSpec {
    pub fn values(&self) -> blowup_core::Result<Vec<f64>> {
        geometric_ladder(self.start, self.end, self.points)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub n: usize,
    /// Accept `7 <= n < 11` for exploration.
    pub allow_low_dim: bool,
    /// First seed of the generated battery, also the Monte Carlo seed.
    pub seed: u64,
    /// Size of the generated battery when no curvature file is given.
    pub samples: usize,
    pub sample_scale: f64,
    pub tol_quad: f64,
    pub tol_sym: f64,
    /// Residual bound for the discrete corrector equation.
    pub tol_solver: f64,
    pub grid: GridConfig,
    /// Refinement factor of the corrector grid used by the energy-identity
    /// experiment.
    pub identity_refinement: usize,
    pub delta_ladder: LadderSpec,
    pub residual_ladder: LadderSpec,
    pub eps_ladder: LadderSpec,
    pub residual_samples: u64,
    /// Scale of the synthetic curvature-derivative tensors (0 keeps only the
    /// trace parts fixed by the curvature data).
    pub derivative_scale: f64,
    pub epsilon: EpsilonCoupling,
    pub weyl_denominator: WeylDenominator,
    pub rii_convention: RiiConvention,
    /// Constant in the `c ε` column of the family table.
    pub phi_bound_constant: f64,
    /// Run both slope experiments per point in the pipeline.
    pub run_slopes: bool,
    pub curvature: Option<PathBuf>,
    /// JSON map from label to neighbor labels.
    pub adjacency: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n: 11,
            allow_low_dim: false,
            seed: 1,
            samples: 5,
            sample_scale: 1.0,
            tol_quad: 1e-10,
            tol_sym: 1e-12,
            tol_solver: 1e-8,
            grid: GridConfig::default(),
            identity_refinement: 2,
            delta_ladder: LadderSpec {
                start: 0.01,
                end: 0.32,
                points: 6,
            },
            residual_ladder: LadderSpec {
                start: 3e-4,
                end: 1e-2,
                points: 6,
            },
            eps_ladder: LadderSpec {
                start: 1e-6,
                end: 1e-2,
                points: 5,
            },
            residual_samples: 1 << 17,
            derivative_scale: 1.0,
            epsilon: EpsilonCoupling::Fixed(1e-3),
            weyl_denominator: WeylDenominator::Proof,
            rii_convention: RiiConvention::Summed,
            phi_bound_constant: 1.0,
            run_slopes: true,
            curvature: None,
            adjacency: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> blowup_core::Result<Dim> {
        let dim = Dim::with_policy(self.n, self.allow_low_dim)?;
        for (name, v) in [
            ("tol_quad", self.tol_quad),
            ("tol_sym", self.tol_sym),
            ("tol_solver", self.tol_solver),
            ("sample_scale", self.sample_scale),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Domain(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.derivative_scale >= 0.0) || self.identity_refinement == 0 {
            return Err(Error::Domain(
                "derivative_scale must be >= 0 and identity_refinement >= 1".into(),
            ));
        }
        self.grid.validate()?;
        validate_ladder(&self.delta_ladder.values()?)?;
        validate_ladder(&self.residual_ladder.values()?)?;
        let eps = self.eps_ladder.values()?;
        if eps.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
            return Err(Error::Domain("ε-ladder must lie in (0, 1)".into()));
        }
        Ok(dim)
    }

    pub fn from_json(text: &str) -> blowup_core::Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            Error::Parse(format!(
                "config line {} column {}: {e}",
                e.line(),
                e.column()
            ))
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    fn phi_options(&self) -> PhiOptions {
        PhiOptions {
            weyl_denominator: self.weyl_denominator,
            rii_convention: self.rii_convention,
            ..PhiOptions::default()
        }
    }
}

/// Process exit status.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    /// Validation failure, invariant violation or no admissible point.
    Failure,
    Budget,
    Io,
}

impl Status {
    pub fn code(self) -> i32 {
        match self {
            Self::Pass => 0,
            Self::Failure => 2,
            Self::Budget => 3,
            Self::Io => 4,
        }
    }

    pub fn of(err: &Error) -> Self {
        match err {
            Error::Budget { .. } | Error::Numeric(_) | Error::Poisoned { .. } => Self::Budget,
            Error::Io(_) => Self::Io,
            _ => Self::Failure,
        }
    }

    /// The more severe of two statuses.
    fn worst(self, other: Self) -> Self {
        let rank = |s: Self| match s {
            Self::Pass => 0,
            Self::Failure => 1,
            Self::Budget => 2,
            Self::Io => 3,
        };
        if rank(other) > rank(self) {
            other
        } else {
            self
        }
    }
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub status: Status,
    pub message: String,
    pub files: Vec<PathBuf>,
}

impl Outcome {
    fn from_error(err: &Error) -> Self {
        Self {
            status: Status::of(err),
            message: err.to_string(),
            files: Vec::new(),
        }
    }
}

/// Runs a command body and turns its error into an outcome.
pub fn run(body: impl FnOnce() -> blowup_core::Result<Outcome>) -> Outcome {
    body().unwrap_or_else(|e| Outcome::from_error(&e))
}

fn create(
    dir: &Path,
    name: &str,
    files: &mut Vec<PathBuf>,
) -> blowup_core::Result<BufWriter<File>> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let f = File::create(&path)?;
    files.push(path);
    Ok(BufWriter::new(f))
}

fn write_json<T: Serialize>(
    dir: &Path,
    name: &str,
    value: &T,
    files: &mut Vec<PathBuf>,
) -> blowup_core::Result<()> {
    let mut w = create(dir, name, files)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Io(e.into()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// The curvature file if one is configured, else the generated battery.
pub fn load_points(cfg: &RunConfig) -> blowup_core::Result<(Dim, Vec<CurvaturePoint>)> {
    let dim = cfg.validate()?;
    match &cfg.curvature {
        Some(path) => {
            let f = File::open(path)?;
            let (fdim, mut pts) = read_curvature(std::io::BufReader::new(f), cfg.allow_low_dim)?;
            if fdim.n() != dim.n() {
                return Err(Error::Domain(format!(
                    "curvature file has n = {}, config has n = {}",
                    fdim.n(),
                    dim.n()
                )));
            }
            pts.sort_by(|a, b| a.label.cmp(&b.label));
            Ok((dim, pts))
        }
        None => {
            let pts = (0..cfg.samples as u64)
                .map(|k| generate_sample(dim, cfg.seed + k, cfg.sample_scale))
                .collect::<blowup_core::Result<Vec<_>>>()?;
            Ok((dim, pts))
        }
    }
}

fn metric_expansion(
    cfg: &RunConfig,
    cp: &CurvaturePoint,
    seed: u64,
) -> blowup_core::Result<MetricExpansion> {
    if cfg.derivative_scale == 0.0 {
        Ok(MetricExpansion::new(cp))
    } else {
        MetricExpansion::with_derivatives(
            cp,
            DerivativeTensors::synthetic(cp, seed, cfg.derivative_scale),
        )
    }
}

/// A point dropped from the batch, with the stage that failed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Quarantined {
    pub label: String,
    pub stage: String,
    pub error: String,
    pub status: Status,
}

/// Per-point products of the pipeline.
#[derive(Clone, Debug)]
pub struct PointResult {
    pub coefficients: ReducedCoefficients,
    pub identity: Option<IdentityExperiment>,
    pub residual: Option<ResidualExperiment>,
    /// Slope experiments that errored out.
    pub slope_issues: Vec<Quarantined>,
}

fn stage<T>(label: &str, name: &str, r: blowup_core::Result<T>) -> Result<T, Quarantined> {
    r.map_err(|e| Quarantined {
        label: label.to_string(),
        stage: name.into(),
        error: e.to_string(),
        status: Status::of(&e),
    })
}

fn process_point(
    cfg: &RunConfig,
    consts: &EnergyConstants,
    cp: &CurvaturePoint,
    index: u64,
    slopes: bool,
) -> Result<PointResult, Quarantined> {
    let label = cp.label.as_str();
    stage(
        label,
        "validate",
        validate_curvature(cp, cfg.tol_sym).and_then(|r| r.into_result()),
    )?;
    let sol = stage(label, "solve_vq", solve_vq(cp, &cfg.grid))?;
    check_corrector(&sol, cfg.tol_solver).map_err(|e| Quarantined {
        label: label.into(),
        stage: "verify_corrector".into(),
        error: e.to_string(),
        status: Status::of(&e),
    })?;
    let mut coefficients = stage(
        label,
        "phi",
        compute_phi(cp, &sol, consts, &cfg.phi_options()),
    )?;
    let (mut identity, mut residual) = (None, None);
    let mut slope_issues = Vec::new();
    if slopes {
        // the slope experiments are diagnostics: a failure here is reported
        // but keeps the point in the reduction
        let seed = cfg.seed.wrapping_add(index);
        match stage(label, "metric", metric_expansion(cfg, cp, seed)) {
            Err(q) => slope_issues.push(q),
            Ok(me) => {
                let id = stage(
                    label,
                    "identity",
                    (|| {
                        let fine = solve_vq(cp, &cfg.grid.refined(cfg.identity_refinement))?;
                        verify_a4_l2_l3_identity(
                            cp,
                            &fine,
                            &me,
                            &cfg.delta_ladder.values()?,
                            Cutoff::default(),
                        )
                    })(),
                );
                match id {
                    Ok(id) => {
                        coefficients.slope_identity = id.remainder.slope();
                        identity = Some(id);
                    }
                    Err(q) => slope_issues.push(q),
                }
                let opts = ResidualOptions {
                    n_samples: cfg.residual_samples,
                    seed,
                    epsilon: cfg.epsilon,
                    ..ResidualOptions::default()
                };
                let rs = stage(
                    label,
                    "residual_slope",
                    cfg.residual_ladder
                        .values()
                        .and_then(|d| residual_slope(cp, &sol, &me, &d, &opts)),
                );
                match rs {
                    Ok(rs) => {
                        coefficients.slope_residual = rs.with_corrector.slope();
                        residual = Some(rs);
                    }
                    Err(q) => slope_issues.push(q),
                }
            }
        }
    }
    Ok(PointResult {
        coefficients,
        identity,
        residual,
        slope_issues,
    })
}

fn check_corrector(sol: &CorrectorSolution, tol: f64) -> blowup_core::Result<()> {
    if sol.scale == 0.0 {
        return Ok(());
    }
    let rep = verify_corrector(sol);
    if !rep.passed() || rep.residual > tol {
        return Err(Error::Invariant(format!(
            "corrector checks failed for {:?}: {rep:?}",
            sol.label
        )));
    }
    Ok(())
}

/// Runs every point, in parallel, and splits successes from quarantined
/// points. Both lists come back ordered by label.
pub fn process_batch(
    cfg: &RunConfig,
    consts: &EnergyConstants,
    points: &[CurvaturePoint],
    slopes: bool,
) -> (Vec<PointResult>, Vec<Quarantined>) {
    let results: Vec<Result<PointResult, Quarantined>> = points
        .par_iter()
        .enumerate()
        .map(|(k, cp)| process_point(cfg, consts, cp, k as u64, slopes))
        .collect();
    let mut ok = Vec::new();
    let mut bad = Vec::new();
    for r in results {
        match r {
            Ok(p) => ok.push(p),
            Err(q) => bad.push(q),
        }
    }
    ok.sort_by(|a, b| a.coefficients.label.cmp(&b.coefficients.label));
    bad.sort_by(|a, b| a.label.cmp(&b.label));
    (ok, bad)
}

/// One named suite of the verification battery.
#[derive(Clone, Debug, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub status: Status,
    pub details: serde_json::Value,
}

fn suite(name: &str, r: blowup_core::Result<(bool, serde_json::Value)>) -> SuiteResult {
    match r {
        Ok((passed, details)) => SuiteResult {
            name: name.into(),
            passed,
            status: if passed {
                Status::Pass
            } else {
                Status::Failure
            },
            details,
        },
        Err(e) => SuiteResult {
            name: name.into(),
            passed: false,
            status: Status::of(&e),
            details: serde_json::json!({ "error": e.to_string() }),
        },
    }
}

/// The two moment ratios and the quartic-moment identities at one `n`.
pub fn moment_identities(dim: Dim, tol: f64) -> blowup_core::Result<serde_json::Value> {
    let table = MomentTable::new(dim, tol)?;
    let n = dim.n() as f64;
    let m = dim.m();
    let i = table.integrals;
    let r1 = i.i1 / i.i2;
    let r3 = i.i3 / i.i2;
    let e1 = (r1 / (4.0 * (n - 2.0) / (n + 1.0)) - 1.0).abs();
    let e3 = (r3 / (12.0 / ((n - 2.0) * (n + 1.0))) - 1.0).abs();
    // t^2 z_1^4 and t^2 z_1^2 z_2^2 against D^{-n}: angular monomials times
    // the radial moment
    let radial = table.clone().get(key_i2(dim))?.value;
    let mut a4 = vec![0usize; m];
    a4[0] = 4;
    let mut a22 = vec![0usize; m];
    a22[0] = 2;
    a22[1] = 2;
    let z4 = angular_moment(dim, &a4)? * radial;
    let z22 = angular_moment(dim, &a22)? * radial;
    let e_factor3 = (z4 / z22 / 3.0 - 1.0).abs();
    let e_i2 = (z4 / (3.0 / (n * n - 1.0) * i.i2) - 1.0).abs();
    Ok(serde_json::json!({
        "n": dim.n(),
        "I1_over_I2_rel_error": e1,
        "I3_over_I2_rel_error": e3,
        "quartic_factor3_rel_error": e_factor3,
        "quartic_I2_rel_error": e_i2,
        "max_rel_error": e1.max(e3).max(e_factor3).max(e_i2),
    }))
}

pub const BUBBLE_POINTS: usize = 10_000;
pub const BUBBLE_TOL: f64 = 1e-12;
pub const SOLVABILITY_TOL: f64 = 1e-8;
pub const MOMENT_TOL: f64 = 1e-6;

/// The invariant battery: geometry, bubble and kernel, moments,
/// solvability, corrector and the energy constants.
pub fn cmd_verify(cfg: &RunConfig) -> blowup_core::Result<Outcome> {
    let (dim, points) = load_points(cfg)?;
    let mut suites = Vec::new();
    suites.push(suite(
        "geometry",
        points
            .iter()
            .map(|cp| validate_curvature(cp, cfg.tol_sym))
            .collect::<blowup_core::Result<Vec<_>>>()
            .map(|reps| {
                let failed: Vec<&str> = reps
                    .iter()
                    .filter(|r| !r.passed())
                    .map(|r| r.label.as_str())
                    .collect();
                (
                    failed.is_empty(),
                    serde_json::json!({ "points": reps.len(), "failed": failed }),
                )
            }),
    ));
    suites.push(suite(
        "bubble",
        (|| {
            let pts = random_points(dim, BUBBLE_POINTS, 2.0, cfg.seed);
            let mut worst: f64 = 0.0;
            let mut reports = Vec::new();
            for delta in [1.0, 0.3] {
                let rep = check_bubble_residual(BubbleParams::new(dim, delta)?, &pts)?;
                worst = worst
                    .max(rep.interior_max)
                    .max(rep.boundary_max)
                    .max(rep.kernel_interior_max)
                    .max(rep.kernel_boundary_max);
                reports.push(rep);
            }
            Ok((
                worst <= BUBBLE_TOL,
                serde_json::json!({ "max_residual": worst, "reports": reports }),
            ))
        })(),
    ));
    suites.push(suite(
        "moments",
        moment_identities(dim, cfg.tol_quad).map(|v| {
            (
                v["max_rel_error"].as_f64().unwrap_or(f64::INFINITY) <= MOMENT_TOL,
                v,
            )
        }),
    ));
    suites.push(suite(
        "solvability",
        points
            .iter()
            .map(|cp| check_solvability(cp, cfg.tol_quad))
            .collect::<blowup_core::Result<Vec<_>>>()
            .map(|reps| {
                let worst = reps.iter().map(|r| r.max_abs()).fold(0.0, f64::max);
                (
                    worst <= SOLVABILITY_TOL,
                    serde_json::json!({ "max_abs": worst, "points": reps.len() }),
                )
            }),
    ));
    suites.push(suite(
        "corrector",
        (|| {
            let mut reps = Vec::new();
            let mut ok = true;
            for cp in &points {
                let sol = solve_vq(cp, &cfg.grid)?;
                if sol.scale == 0.0 {
                    continue;
                }
                let rep = verify_corrector(&sol);
                ok &= rep.passed() && rep.residual <= cfg.tol_solver && sol.pairing() <= 0.0;
                reps.push(rep);
            }
            Ok((ok, serde_json::to_value(&reps).unwrap_or_default()))
        })(),
    ));
    suites.push(suite(
        "energy_constants",
        EnergyConstants::new(dim, cfg.tol_quad).map(|c| {
            let ea = (c.a.value / c.a.closed_form - 1.0).abs();
            let eb = (c.b.value / c.b.closed_form - 1.0).abs();
            let ibp = c.a.ibp_defect.abs() / (2.0 * c.a.gradient);
            let ok = ea <= 1e-8 && eb <= 1e-8 && ibp <= 1e-8 && c.a.value > 0.0 && c.b.value > 0.0;
            (ok, serde_json::json!({ "A": c.a, "B": c.b, "A_rel_error": ea, "B_rel_error": eb, "ibp_rel_defect": ibp }))
        }),
    ));
    let status = suites.iter().fold(Status::Pass, |s, x| s.worst(x.status));
    let mut files = Vec::new();
    write_json(
        &cfg.out_dir,
        "verify.json",
        &serde_json::json!({ "n": dim.n(), "suites": suites }),
        &mut files,
    )?;
    let failed: Vec<&str> = suites
        .iter()
        .filter(|s| !s.passed)
        .map(|s| s.name.as_str())
        .collect();
    let message = if failed.is_empty() {
        "all suites passed".to_string()
    } else {
        format!("failed suites: {}", failed.join(", "))
    };
    Ok(Outcome {
        status,
        message,
        files,
    })
}

/// The moment table of `I_1..I_4` as CSV.
pub fn cmd_moments(cfg: &RunConfig) -> blowup_core::Result<Outcome> {
    let dim = cfg.validate()?;
    let table = MomentTable::new(dim, cfg.tol_quad)?;
    let mut files = Vec::new();
    let w = create(&cfg.out_dir, "moments.csv", &mut files)?;
    table.write_csv(w)?;
    Ok(Outcome {
        status: Status::Pass,
        message: format!("{} moments", table.entries().count()),
        files,
    })
}

/// Profile CSV and diagnostics sidecar per point.
pub fn cmd_solve_vq(cfg: &RunConfig) -> blowup_core::Result<Outcome> {
    let (_, points) = load_points(cfg)?;
    let sols: Vec<(String, blowup_core::Result<CorrectorSolution>)> = points
        .par_iter()
        .map(|cp| (cp.label.clone(), solve_vq(cp, &cfg.grid)))
        .collect();
    let mut files = Vec::new();
    let mut status = Status::Pass;
    let mut failed = Vec::new();
    for (label, sol) in sols {
        match sol {
            Ok(sol) => {
                let w = create(&cfg.out_dir, &format!("profile_{label}.csv"), &mut files)?;
                sol.profile.write_csv(w)?;
                write_json(
                    &cfg.out_dir,
                    &format!("profile_{label}.json"),
                    &sol.sidecar_json(),
                    &mut files,
                )?;
                if check_corrector(&sol, cfg.tol_solver).is_err() {
                    status = status.worst(Status::Failure);
                    failed.push(label);
                }
            }
            Err(e) => {
                status = status.worst(Status::of(&e));
                failed.push(format!("{label}: {e}"));
            }
        }
    }
    let message = if failed.is_empty() {
        "all correctors verified".into()
    } else {
        format!("failed: {}", failed.join("; "))
    };
    Ok(Outcome {
        status,
        message,
        files,
    })
}

fn quarantine_status(bad: &[Quarantined]) -> Status {
    bad.iter().fold(Status::Pass, |s, q| s.worst(q.status))
}

/// Results table (no slope experiments) plus the quarantine list.
pub fn cmd_phi(cfg: &RunConfig) -> blowup_core::Result<Outcome> {
    let (dim, points) = load_points(cfg)?;
    let consts = EnergyConstants::new(dim, cfg.tol_quad)?;
    let (ok, bad) = process_batch(cfg, &consts, &points, false);
    let mut files = Vec::new();
    let rows: Vec<ReducedCoefficients> = ok.into_iter().map(|p| p.coefficients).collect();
    write_results_csv(create(&cfg.out_dir, "results.csv", &mut files)?, &rows)?;
    write_json(&cfg.out_dir, "quarantine.json", &bad, &mut files)?;
    Ok(Outcome {
        status: quarantine_status(&bad),
        message: format!("{} point(s), {} quarantined", rows.len(), bad.len()),
        files,
    })
}

/// Reduction report: the chosen point, bracket, stability and notes.
#[derive(Clone, Debug, Serialize)]
pub struct ReductionReport {
    pub n: usize,
    pub b: f64,
    pub family: Option<BlowUpFamily>,
    pub error: Option<String>,
    pub quarantined: Vec<Quarantined>,
    pub notes: Vec<String>,
}

const REDUCTION_NOTES: [&str; 2] = [
    "Stationarity uses dG/dλ = Bγ + 4λ^3 φ, so λ0 = (-Bγ/(4φ))^(1/3) > 0; the shorter reading λ^3 = -γ/φ drops the factor B/4, and a leading minus sign on λ0 would make it negative.",
    "The λλ Hessian entry is 12 λ0^2 φ; an entry of 2φ does not follow from G(λ) = λγB + λ^4 φ.",
];

fn load_adjacency(cfg: &RunConfig) -> blowup_core::Result<Option<Adjacency>> {
    match &cfg.adjacency {
        None => Ok(None),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            let adj: Adjacency = serde_json::from_str(&text).map_err(|e| {
                Error::Parse(format!(
                    "adjacency line {} column {}: {e}",
                    e.line(),
                    e.column()
                ))
            })?;
            Ok(Some(adj))
        }
    }
}

fn reduce(
    dim: Dim,
    consts: &EnergyConstants,
    rows: &[ReducedCoefficients],
    adj: Option<&Adjacency>,
) -> (Option<ReducedFunctional>, blowup_core::Result<BlowUpFamily>) {
    let pts: Vec<PointCoefficients> = rows
        .iter()
        .map(|r| PointCoefficients {
            label: r.label.clone(),
            gamma: r.gamma,
            phi: r.phi,
        })
        .collect();
    if pts.is_empty() {
        return (
            None,
            Err(Error::ConstructionImpossible(
                "every point was quarantined".into(),
            )),
        );
    }
    match ReducedFunctional::new(dim, consts.b.value, pts) {
        Ok(rf) => {
            let fam = find_blowup_point(&rf, adj);
            (Some(rf), fam)
        }
        Err(e) => (None, Err(e)),
    }
}

fn write_reduction(
    cfg: &RunConfig,
    dim: Dim,
    consts: &EnergyConstants,
    fam: &blowup_core::Result<BlowUpFamily>,
    bad: &[Quarantined],
    files: &mut Vec<PathBuf>,
) -> blowup_core::Result<()> {
    let report = ReductionReport {
        n: dim.n(),
        b: consts.b.value,
        family: fam.as_ref().ok().cloned(),
        error: fam.as_ref().err().map(|e| e.to_string()),
        quarantined: bad.to_vec(),
        notes: REDUCTION_NOTES.iter().map(|s| s.to_string()).collect(),
    };
    write_json(&cfg.out_dir, "reduction.json", &report, files)
}

fn write_family(
    cfg: &RunConfig,
    fam: &blowup_core::Result<BlowUpFamily>,
    files: &mut Vec<PathBuf>,
) -> blowup_core::Result<()> {
    let rows = match fam {
        Ok(f) => family_table(f, &cfg.eps_ladder.values()?, cfg.phi_bound_constant)?,
        Err(_) => Vec::new(),
    };
    write_family_csv(create(&cfg.out_dir, "family.csv", files)?, &rows)
}

fn final_status(bad: &[Quarantined], fam: &blowup_core::Result<BlowUpFamily>) -> Status {
    let s = quarantine_status(bad);
    match fam {
        Ok(_) => s,
        Err(e) => s.worst(Status::of(e)),
    }
}

fn family_message(fam: &blowup_core::Result<BlowUpFamily>, bad: &[Quarantined]) -> String {
    match fam {
        Ok(f) => format!(
            "q0 = {}, λ0 = {:.6e}, {} quarantined",
            f.q0,
            f.lambda0,
            bad.len()
        ),
        Err(e) => format!("{e} ({} quarantined)", bad.len()),
    }
}

/// Reduction JSON for the batch.
pub fn cmd_reduce(cfg: &RunConfig) -> blowup_core::Result<Outcome> {
    let (dim, points) = load_points(cfg)?;
    let consts = EnergyConstants::new(dim, cfg.tol_quad)?;
    let (ok, bad) = process_batch(cfg, &consts, &points, false);
    let rows: Vec<ReducedCoefficients> = ok.into_iter().map(|p| p.coefficients).collect();
    let adj = load_adjacency(cfg)?;
    let (_, fam) = reduce(dim, &consts, &rows, adj.as_ref());
    let mut files = Vec::new();
    write_reduction(cfg, dim, &consts, &fam, &bad, &mut files)?;
    Ok(Outcome {
        status: final_status(&bad, &fam),
        message: family_message(&fam, &bad),
        files,
    })
}

/// Family table CSV for the batch.
pub fn cmd_family(cfg: &RunConfig) -> blowup_core::Result<Outcome> {
    let (dim, points) = load_points(cfg)?;
    let consts = EnergyConstants::new(dim, cfg.tol_quad)?;
    let (ok, bad) = process_batch(cfg, &consts, &points, false);
    let rows: Vec<ReducedCoefficients> = ok.into_iter().map(|p| p.coefficients).collect();
    let adj = load_adjacency(cfg)?;
    let (_, fam) = reduce(dim, &consts, &rows, adj.as_ref());
    let mut files = Vec::new();
    write_family(cfg, &fam, &mut files)?;
    Ok(Outcome {
        status: final_status(&bad, &fam),
        message: family_message(&fam, &bad),
        files,
    })
}

fn write_residual_csv<W: Write>(
    out: W,
    rows: &[(String, &ResidualExperiment)],
) -> blowup_core::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
    w.write_record([
        "label",
        "delta",
        "norm",
        "norm_error",
        "norm_without_v",
        "norm_without_v_error",
        "corrector_term",
        "metric_term",
        "cancelled",
        "epsilon",
        "combined_bound",
    ])
    .map_err(err)?;
    for (label, r) in rows {
        for i in 0..r.with_corrector.deltas.len() {
            let c = &r.cancellation[i];
            let mut rec = vec![label.clone()];
            rec.extend(
                [
                    r.with_corrector.deltas[i],
                    r.with_corrector.values[i],
                    r.with_corrector.errors[i],
                    r.without_corrector.values[i],
                    r.without_corrector.errors[i],
                    c.corrector_term,
                    c.metric_term,
                    c.combined,
                    r.epsilon[i],
                    r.combined_bound[i],
                ]
                .map(|v| format!("{v:e}")),
            );
            w.write_record(rec).map_err(err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_identity_csv<W: Write>(
    out: W,
    rows: &[(String, &IdentityExperiment)],
) -> blowup_core::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
    w.write_record(["label", "delta", "A4", "L2", "L3", "remainder"])
        .map_err(err)?;
    for (label, r) in rows {
        for (t, rem) in r.terms.iter().zip(&r.remainder.values) {
            let mut rec = vec![label.clone()];
            rec.extend([t.delta, t.a4, t.l2, t.l3, *rem].map(|v| format!("{v:e}")));
            w.write_record(rec).map_err(err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Residual-slope ladders for every point.
pub fn cmd_residual_slope(cfg: &RunConfig) -> blowup_core::Result<Outcome> {
    let (_, points) = load_points(cfg)?;
    let deltas = cfg.residual_ladder.values()?;
    let runs: Vec<(String, blowup_core::Result<ResidualExperiment>)> = points
        .par_iter()
        .enumerate()
        .map(|(k, cp)| {
            let seed = cfg.seed.wrapping_add(k as u64);
            let r = (|| {
                let sol = solve_vq(cp, &cfg.grid)?;
                let me = metric_expansion(cfg, cp, seed)?;
                let opts = ResidualOptions {
                    n_samples: cfg.residual_samples,
                    seed,
                    epsilon: cfg.epsilon,
                    ..Default::default()
                };
                residual_slope(cp, &sol, &me, &deltas, &opts)
            })();
            (cp.label.clone(), r)
        })
        .collect();
    let mut status = Status::Pass;
    let mut ok = Vec::new();
    let mut notes = Vec::new();
    for (label, r) in &runs {
        match r {
            Ok(x) => {
                if !x.passed() {
                    status = status.worst(Status::Failure);
                    notes.push(format!(
                        "{label}: slope {:?} outside range",
                        x.with_corrector.slope()
                    ));
                }
                ok.push((label.clone(), x));
            }
            Err(e) => {
                status = status.worst(Status::of(e));
                notes.push(format!("{label}: {e}"));
            }
        }
    }
    let mut files = Vec::new();
    write_residual_csv(create(&cfg.out_dir, "residual_slope.csv", &mut files)?, &ok)?;
    let message = if notes.is_empty() {
        format!("{} ladder(s) in range", ok.len())
    } else {
        notes.join("; ")
    };
    Ok(Outcome {
        status,
        message,
        files,
    })
}

/// `G(λ, q)` on a λ grid for each admissible point.
fn write_g_curves<W: Write>(
    out: W,
    rf: &ReducedFunctional,
    fam: &BlowUpFamily,
) -> blowup_core::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
    w.write_record(["label", "lambda", "G"]).map_err(err)?;
    let hi = fam.bracket.1;
    for p in rf.points() {
        for k in 1..=64 {
            let l = hi * k as f64 / 64.0;
            let g = eval_g(rf, l, &p.label)?;
            w.write_record([p.label.clone(), format!("{l:e}"), format!("{g:e}")])
                .map_err(err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load, validate, solve, assemble φ, reduce and build the family.
pub fn cmd_pipeline(cfg: &RunConfig) -> blowup_core::Result<Outcome> {
    let (dim, points) = load_points(cfg)?;
    let consts = EnergyConstants::new(dim, cfg.tol_quad)?;
    let (ok, mut bad) = process_batch(cfg, &consts, &points, cfg.run_slopes);
    // a failed slope experiment quarantines nothing but is reported
    let mut slope_failures = Vec::new();
    for p in &ok {
        if let Some(id) = &p.identity {
            if id.remainder.status == blowup_core::energy::SlopeStatus::Fail {
                slope_failures.push(format!(
                    "{}: identity slope {:?}",
                    p.coefficients.label,
                    id.remainder.slope()
                ));
            }
        }
        if let Some(r) = &p.residual {
            if !r.passed() {
                slope_failures.push(format!(
                    "{}: residual slope {:?}",
                    p.coefficients.label,
                    r.with_corrector.slope()
                ));
            }
        }
    }
    let rows: Vec<ReducedCoefficients> = ok.iter().map(|p| p.coefficients.clone()).collect();
    let adj = load_adjacency(cfg)?;
    let (rf, fam) = reduce(dim, &consts, &rows, adj.as_ref());
    let mut files = Vec::new();
    write_results_csv(create(&cfg.out_dir, "results.csv", &mut files)?, &rows)?;
    write_reduction(cfg, dim, &consts, &fam, &bad, &mut files)?;
    write_family(cfg, &fam, &mut files)?;
    if let (Some(rf), Ok(f)) = (&rf, &fam) {
        write_g_curves(create(&cfg.out_dir, "g_curves.csv", &mut files)?, rf, f)?;
    }
    if cfg.run_slopes {
        let res: Vec<(String, &ResidualExperiment)> = ok
            .iter()
            .filter_map(|p| {
                p.residual
                    .as_ref()
                    .map(|r| (p.coefficients.label.clone(), r))
            })
            .collect();
        write_residual_csv(
            create(&cfg.out_dir, "residual_slope.csv", &mut files)?,
            &res,
        )?;
        let ids: Vec<(String, &IdentityExperiment)> = ok
            .iter()
            .filter_map(|p| {
                p.identity
                    .as_ref()
                    .map(|r| (p.coefficients.label.clone(), r))
            })
            .collect();
        write_identity_csv(
            create(&cfg.out_dir, "identity_slope.csv", &mut files)?,
            &ids,
        )?;
    }
    bad.sort_by(|a, b| a.label.cmp(&b.label));
    write_json(&cfg.out_dir, "quarantine.json", &bad, &mut files)?;
    let issues: Vec<&Quarantined> = ok.iter().flat_map(|p| &p.slope_issues).collect();
    let mut status = final_status(&bad, &fam);
    let mut message = family_message(&fam, &bad);
    if cfg.run_slopes {
        write_json(&cfg.out_dir, "slope_issues.json", &issues, &mut files)?;
    }
    for q in &issues {
        status = status.worst(q.status);
        message.push_str(&format!("; {} {}: {}", q.label, q.stage, q.error));
    }
    if !slope_failures.is_empty() {
        status = status.worst(Status::Failure);
        message.push_str(&format!("; slope failures: {}", slope_failures.join(", ")));
    }
    Ok(Outcome {
        status,
        message,
        files,
    })
}
