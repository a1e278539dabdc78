//! Acceptance suite. Runs each criterion at its stated tolerance, prints one
//! PASS/FAIL line per criterion and fails if any criterion fails.
//!
//! Run alone with `cargo test -p blowup-cli --test acceptance`.

use std::fs;
use std::path::Path;
use std::time::Instant;

use blowup_cli::{cmd_pipeline, moment_identities, RunConfig, Status};
use blowup_core::bubble::{check_bubble_residual, random_points, BubbleParams};
use blowup_core::corrector::{
    check_solvability, far_field_change, self_convergence, solve_vq, verify_corrector, GridConfig,
};
use blowup_core::energy::{
    compute_a, compute_b, compute_g_terms, compute_phi, mc_g2, mc_g3, residual_slope,
    verify_a4_l2_l3_identity, Cutoff, EnergyConstants, PhiOptions, ResidualOptions, SlopeStatus,
    BOUNDARY_PANELS, IDENTITY_MIN_SLOPE, NO_CORRECTOR_SLOPE_RANGE, RESIDUAL_SLOPE_RANGE,
};
use blowup_core::fit::geometric_ladder;
use blowup_core::geometry::generate_sample;
use blowup_core::reduction::{
    critical_lambda, eval_g, family_table, find_blowup_point, g_greater, golden_section_max_by,
    PointCoefficients, ReducedFunctional,
};
use blowup_core::{CurvaturePoint, DerivativeTensors, Dim, MetricExpansion};

type Check = Result<String, String>;

fn dims() -> impl Iterator<Item = Dim> {
    (11..=15).map(|n| Dim::new(n).unwrap())
}

fn ensure(ok: bool, msg: String) -> Check {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

/// The standard battery: the first five generated samples at `n`.
fn battery(d: Dim, count: u64) -> Vec<CurvaturePoint> {
    (1..=count)
        .map(|s| generate_sample(d, s, 1.0).unwrap())
        .collect()
}

fn moments() -> Check {
    let mut worst: f64 = 0.0;
    for d in dims() {
        let v = moment_identities(d, 1e-10).map_err(e)?;
        worst = worst.max(v["max_rel_error"].as_f64().unwrap());
    }
    ensure(
        worst <= 1e-6,
        format!("max relative error {worst:.2e} over n = 11..15 (tol 1e-6)"),
    )
}

fn bubble() -> Check {
    let mut worst: f64 = 0.0;
    for d in dims() {
        let pts = random_points(d, 10_000, 2.0, 42 + d.n() as u64);
        for delta in [1.0, 0.1, 10.0] {
            let r =
                check_bubble_residual(BubbleParams::new(d, delta).map_err(e)?, &pts).map_err(e)?;
            worst = worst
                .max(r.interior_max)
                .max(r.boundary_max)
                .max(r.kernel_interior_max)
                .max(r.kernel_boundary_max);
        }
    }
    ensure(
        worst <= 1e-12,
        format!("max residual {worst:.2e} at 1e4 points per n (tol 1e-12)"),
    )
}

fn solvability() -> Check {
    let d = Dim::new(11).unwrap();
    let mut worst: f64 = 0.0;
    for s in 0..20 {
        let cp = generate_sample(d, 1000 + s, 1.0).map_err(e)?;
        worst = worst.max(check_solvability(&cp, 1e-10).map_err(e)?.max_abs());
    }
    ensure(
        worst <= 1e-8,
        format!("max |∫ RHS j_b| {worst:.2e} on 20 samples (tol 1e-8)"),
    )
}

fn corrector() -> Check {
    let base = GridConfig {
        nt: 80,
        nr: 80,
        ..GridConfig::default()
    };
    let study = self_convergence(Dim::new(11).unwrap(), &base).map_err(e)?;
    let mut failures = Vec::new();
    let mut worst_decay: f64 = 0.0;
    let mut max_pairing = f64::NEG_INFINITY;
    let mut count = 0;
    for n in [11, 13, 15] {
        let d = Dim::new(n).unwrap();
        for s in 0..20 {
            let cp = generate_sample(d, 2000 + s, 1.0).map_err(e)?;
            let sol = solve_vq(&cp, &GridConfig::default()).map_err(e)?;
            let rep = verify_corrector(&sol);
            if let Some(x) = rep.decay_exponent {
                worst_decay = worst_decay.max((x - rep.decay_target).abs());
            }
            max_pairing = max_pairing.max(sol.pairing());
            if !rep.passed() || sol.pairing() > 0.0 {
                failures.push(format!("n={n} {}", cp.label));
            }
            count += 1;
        }
    }
    let mut far: f64 = 0.0;
    for cp in battery(Dim::new(11).unwrap(), 3) {
        far = far.max(far_field_change(&cp, &GridConfig::default()).map_err(e)?);
    }
    let msg = format!(
        "order {:.3} (>= 1.9); {count} solves, worst decay offset {worst_decay:.3} (<= 0.5), max pairing {max_pairing:.2e} (<= 0), \
         far-field change {:.3}% (<= 1%), failing: {failures:?}",
        study.order,
        100.0 * far
    );
    ensure(
        study.order >= 1.9 && failures.is_empty() && far <= 0.01,
        msg,
    )
}

fn energy() -> Check {
    let mut worst_ab: f64 = 0.0;
    for d in dims() {
        let a = compute_a(d, 1e-10).map_err(e)?;
        let b = compute_b(d, BOUNDARY_PANELS).map_err(e)?;
        worst_ab = worst_ab
            .max((a.value / a.closed_form - 1.0).abs())
            .max((b.value / b.closed_form - 1.0).abs());
    }
    let d = Dim::new(11).unwrap();
    let consts = EnergyConstants::new(d, 1e-10).map_err(e)?;
    let mut worst_z: f64 = 0.0;
    for cp in battery(d, 2) {
        let seed = cp.label[1..].parse::<u64>().unwrap();
        let me =
            MetricExpansion::with_derivatives(&cp, DerivativeTensors::synthetic(&cp, seed, 1.0))
                .map_err(e)?;
        let g = compute_g_terms(&cp, consts.i2);
        let z2 = mc_g2(&me, 10_000_000, seed).map_err(e)?.z_score(g.g2);
        let z3 = mc_g3(&me, 10_000_000, seed + 100).map_err(e)?.z_score(g.g3);
        worst_z = worst_z.max(z2.abs()).max(z3.abs());
    }
    let mut max_phi = f64::NEG_INFINITY;
    let mut count = 0;
    for n in [11, 13, 15] {
        let d = Dim::new(n).unwrap();
        let consts = EnergyConstants::new(d, 1e-10).map_err(e)?;
        for cp in battery(d, 10) {
            let sol = solve_vq(&cp, &GridConfig::default()).map_err(e)?;
            let rc = compute_phi(&cp, &sol, &consts, &PhiOptions::default()).map_err(e)?;
            max_phi = max_phi.max(rc.phi);
            count += 1;
        }
    }
    ensure(
        worst_ab <= 1e-8 && worst_z <= 3.0 && max_phi <= 0.0,
        format!(
            "A, B relative error {worst_ab:.2e} (<= 1e-8); G2/G3 worst |z| {worst_z:.2} at 1e7 samples (<= 3); \
             max φ {max_phi:.3e} over {count} points (<= 0)"
        ),
    )
}

fn slopes() -> Check {
    let d = Dim::new(11).unwrap();
    let cfg = RunConfig::default();
    let id_ladder = cfg.delta_ladder.values().map_err(e)?;
    let res_ladder = cfg.residual_ladder.values().map_err(e)?;
    let mut rows = Vec::new();
    let mut ok = true;
    for cp in battery(d, cfg.samples as u64) {
        let seed = cp.label[1..].parse::<u64>().unwrap();
        let me =
            MetricExpansion::with_derivatives(&cp, DerivativeTensors::synthetic(&cp, seed, 1.0))
                .map_err(e)?;
        let fine = solve_vq(&cp, &cfg.grid.refined(cfg.identity_refinement)).map_err(e)?;
        let id =
            verify_a4_l2_l3_identity(&cp, &fine, &me, &id_ladder, Cutoff::default()).map_err(e)?;
        let sol = solve_vq(&cp, &cfg.grid).map_err(e)?;
        let opts = ResidualOptions {
            n_samples: cfg.residual_samples,
            seed,
            ..ResidualOptions::default()
        };
        let rs = residual_slope(&cp, &sol, &me, &res_ladder, &opts).map_err(e)?;
        let si = id.remainder.slope().unwrap_or(f64::NAN);
        let sv = rs.with_corrector.slope().unwrap_or(f64::NAN);
        let s0 = rs.without_corrector.slope().unwrap_or(f64::NAN);
        ok &= si >= IDENTITY_MIN_SLOPE
            && id.remainder.status == SlopeStatus::Pass
            && (RESIDUAL_SLOPE_RANGE.0..=RESIDUAL_SLOPE_RANGE.1).contains(&sv)
            && (NO_CORRECTOR_SLOPE_RANGE.0..=NO_CORRECTOR_SLOPE_RANGE.1).contains(&s0)
            && rs.passed();
        rows.push(format!(
            "{} identity {si:.2} residual {sv:.2} no-V {s0:.2}",
            cp.label
        ));
    }
    ensure(
        ok,
        format!(
            "identity >= 4.5, residual in [2.7, 3.3], no-V in [1.7, 2.3]: {}",
            rows.join("; ")
        ),
    )
}

fn reduction() -> Check {
    let d = Dim::new(11).unwrap();
    let consts = EnergyConstants::new(d, 1e-10).map_err(e)?;
    let mut pts = Vec::new();
    for cp in battery(d, 5) {
        let sol = solve_vq(&cp, &GridConfig::default()).map_err(e)?;
        let rc = compute_phi(&cp, &sol, &consts, &PhiOptions::default()).map_err(e)?;
        pts.push(PointCoefficients {
            label: rc.label,
            gamma: rc.gamma,
            phi: rc.phi,
        });
    }
    let rf = ReducedFunctional::new(d, consts.b.value, pts.clone()).map_err(e)?;
    let (mut worst_golden, mut worst_value): (f64, f64) = (0.0, 0.0);
    for p in rf.points() {
        let c = critical_lambda(&rf, &p.label).map_err(e)?;
        let lam = golden_section_max_by(
            g_greater(&rf, &p.label).map_err(e)?,
            1e-3 * c.lambda,
            1e3 * c.lambda,
            1e-15,
        );
        worst_golden = worst_golden.max((lam / c.lambda - 1.0).abs());
        let g = eval_g(&rf, c.lambda, &p.label).map_err(e)?;
        worst_value = worst_value.max((g / (0.75 * rf.b * p.gamma * c.lambda) - 1.0).abs());
    }
    let fam = find_blowup_point(&rf, None).map_err(e)?;
    let mut invariant = true;
    for c in [1e-3, 0.5, 7.0, 1e3] {
        let scaled: Vec<_> = pts
            .iter()
            .map(|p| PointCoefficients {
                label: p.label.clone(),
                gamma: c * p.gamma,
                phi: c * p.phi,
            })
            .collect();
        let f = find_blowup_point(&ReducedFunctional::new(d, rf.b, scaled).map_err(e)?, None)
            .map_err(e)?;
        invariant &= f.q0 == fam.q0;
    }
    let eps = geometric_ladder(1e-2, 1e-8, 9).map_err(e)?;
    let rows = family_table(&fam, &eps, 1.0).map_err(e)?;
    let half = (d.n() as f64 - 2.0) / 2.0;
    let delta_exact = rows
        .iter()
        .all(|r| r.delta == fam.lambda0 * r.epsilon.cbrt());
    let worst_peak = rows
        .iter()
        .map(|r| (r.peak * r.delta.powf(half) - 1.0).abs())
        .fold(0.0, f64::max);
    ensure(
        worst_golden <= 1e-10 && worst_value <= 1e-12 && invariant && delta_exact && worst_peak <= 4.0 * f64::EPSILON,
        format!(
            "golden section vs closed form {worst_golden:.1e} (<= 1e-10); G(λ*) vs 3/4 Bγλ* {worst_value:.1e} (<= 1e-12); \
             argmax invariant {invariant}; δ = λ0 ε^(1/3) bitwise {delta_exact}; |peak δ^((n-2)/2) - 1| {worst_peak:.1e} (<= 4 ulp)"
        ),
    )
}

fn read_dir(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|f| {
            let f = f.unwrap();
            (
                f.file_name().to_string_lossy().into_owned(),
                fs::read(f.path()).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(e)?;
    let mut runs = Vec::new();
    for (k, threads) in [1usize, 3].into_iter().enumerate() {
        let cfg = RunConfig {
            samples: 3,
            residual_samples: 1 << 15,
            identity_refinement: 1,
            out_dir: tmp.path().join(format!("run{k}")),
            ..RunConfig::default()
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(e)?;
        let out = pool.install(|| cmd_pipeline(&cfg)).map_err(e)?;
        if out.status == Status::Io {
            return Err(out.message);
        }
        runs.push(read_dir(&cfg.out_dir));
    }
    let names: Vec<&str> = runs[0].iter().map(|(n, _)| n.as_str()).collect();
    ensure(
        runs[0] == runs[1] && !names.is_empty(),
        format!(
            "{} files byte-identical across 1 and 3 threads: {names:?}",
            names.len()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Check); 8] = [
        ("moment identities", moments),
        ("bubble and kernel exactness", bubble),
        ("solvability", solvability),
        ("corrector", corrector),
        ("energy identities", energy),
        ("expansion slopes", slopes),
        ("reduction", reduction),
        ("end-to-end determinism", determinism),
    ];
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let r = f();
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(msg) => println!("criterion {} {name}: PASS ({secs:.1} s) {msg}", k + 1),
            Err(msg) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({secs:.1} s) {msg}", k + 1);
            }
        }
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
