use blowup_core::bubble::{
    check_bubble_residual, eval_u, random_points, BubbleParams, HalfSpacePoint,
};
use blowup_core::corrector::map_to_ball;
use blowup_core::energy::{assemble_phi, PhiOptions};
use blowup_core::fit::{geometric_ladder, loglog_fit};
use blowup_core::geometry::{eval_metric_inverse, generate_sample, validate_curvature};
use blowup_core::quadrature::{mc_halfspace, Proposal};
use blowup_core::reduction::{
    critical_lambda, eval_g, family_table, find_blowup_point, g_greater, golden_section_max,
    golden_section_max_by, PointCoefficients, ReducedFunctional,
};
use blowup_core::{DerivativeTensors, Dim, MetricExpansion};
use proptest::prelude::*;

fn dim() -> impl Strategy<Value = Dim> {
    (11usize..=15).prop_map(|n| Dim::new(n).unwrap())
}

/// Tables of admissible points with distinct labels.
fn table() -> impl Strategy<Value = Vec<PointCoefficients>> {
    prop::collection::vec((0.05f64..5.0, -5.0f64..-1e-3), 1..8).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(k, (gamma, phi))| PointCoefficients {
                label: format!("p{k:02}"),
                gamma,
                phi,
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn generated_samples_satisfy_every_identity(d in dim(), seed in 0u64..10_000, scale in 0.1f64..3.0) {
        let cp = generate_sample(d, seed, scale).unwrap();
        let rep = validate_curvature(&cp, 1e-12).unwrap();
        prop_assert!(rep.passed(), "{:?}", rep.failures());
    }

    #[test]
    fn metric_inverse_is_symmetric_and_flat_at_origin(seed in 0u64..1_000, h in 1e-3f64..0.05) {
        let d = Dim::new(11).unwrap();
        let cp = generate_sample(d, seed, 1.0).unwrap();
        let me = MetricExpansion::with_derivatives(&cp, DerivativeTensors::synthetic(&cp, seed, 1.0)).unwrap();
        let origin = HalfSpacePoint::new(0.0, vec![0.0; d.m()]).unwrap();
        let g0 = eval_metric_inverse(&me, &origin).unwrap();
        for i in 0..d.n() {
            for j in 0..d.n() {
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((g0[(i, j)] - want).abs() <= f64::EPSILON);
            }
        }
        let y = HalfSpacePoint::new(h, vec![h / 3.0; d.m()]).unwrap();
        let g = eval_metric_inverse(&me, &y).unwrap();
        prop_assert_eq!(g.asymmetry(), 0.0);
    }

    #[test]
    fn bubble_and_kernels_are_exact(d in dim(), seed in 0u64..1_000, delta in 0.1f64..10.0) {
        let pts = random_points(d, 200, 2.0, seed);
        let rep = check_bubble_residual(BubbleParams::new(d, delta).unwrap(), &pts).unwrap();
        prop_assert!(rep.passes(1e-12), "{rep:?}");
    }

    #[test]
    fn inversion_sends_boundary_to_sphere(z in prop::collection::vec(-50.0f64..50.0, 10)) {
        let p = HalfSpacePoint::new(0.0, z).unwrap();
        let xi = map_to_ball(&p);
        // centre -e_n/2, radius 1/2
        let mut r2 = 0.0;
        for (k, x) in xi.iter().enumerate() {
            let c = if k + 1 == xi.len() { -0.5 } else { 0.0 };
            r2 += (x - c) * (x - c);
        }
        prop_assert!((r2.sqrt() - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn phi_assembly_is_linear(
        p in -1.0f64..0.0, r in -50.0f64..50.0, w in 0.0f64..50.0, c in 0.1f64..10.0,
    ) {
        let d = Dim::new(11).unwrap();
        let o = PhiOptions::default();
        let (i2, i4) = (1.4e-4, 1.5e-2);
        let base = assemble_phi(d, p, r, w, i2, i4, &o).total();
        let scaled = assemble_phi(d, c * p, c * r, c * w, i2, i4, &o).total();
        prop_assert!((scaled - c * base).abs() <= 1e-13 * (c * base).abs().max(1e-300) + 1e-18);
        let split = assemble_phi(d, p, 0.0, 0.0, i2, i4, &o).total()
            + assemble_phi(d, 0.0, r, 0.0, i2, i4, &o).total()
            + assemble_phi(d, 0.0, 0.0, w, i2, i4, &o).total();
        prop_assert!((split - base).abs() <= 1e-14 * (p.abs() + r.abs() + w.abs()));
    }

    #[test]
    fn critical_scale_is_a_strict_maximum(pts in table(), b in 1e-3f64..1.0) {
        let rf = ReducedFunctional::new(Dim::new(11).unwrap(), b, pts.clone()).unwrap();
        for p in &pts {
            let c = critical_lambda(&rf, &p.label).unwrap();
            let scale = b * p.gamma;
            prop_assert!(c.dg.abs() <= 1e-12 * scale.max(1.0));
            let g = |l: f64| eval_g(&rf, l, &p.label).unwrap();
            prop_assert!(g(c.lambda) > g(0.5 * c.lambda));
            prop_assert!(g(c.lambda) > g(2.0 * c.lambda));
            prop_assert!(((g(c.lambda) - 0.75 * scale * c.lambda) / (0.75 * scale * c.lambda)).abs() <= 1e-12);
            let golden = golden_section_max_by(g_greater(&rf, &p.label).unwrap(), 0.25 * c.lambda, 4.0 * c.lambda, 1e-14);
            prop_assert!(((golden - c.lambda) / c.lambda).abs() <= 1e-10);
            // plain value comparisons only get to about sqrt(eps)
            let coarse = golden_section_max(g, 0.25 * c.lambda, 4.0 * c.lambda, 1e-12);
            prop_assert!(((coarse - c.lambda) / c.lambda).abs() <= 1e-6);
            prop_assert!(c.d2g < 0.0);
        }
    }

    #[test]
    fn argmax_ignores_joint_rescaling(pts in table(), b in 1e-3f64..1.0, c in 1e-3f64..1e3) {
        let d = Dim::new(11).unwrap();
        let scaled: Vec<_> = pts
            .iter()
            .map(|p| PointCoefficients { label: p.label.clone(), gamma: c * p.gamma, phi: c * p.phi })
            .collect();
        let f0 = find_blowup_point(&ReducedFunctional::new(d, b, pts).unwrap(), None).unwrap();
        let f1 = find_blowup_point(&ReducedFunctional::new(d, b, scaled).unwrap(), None).unwrap();
        prop_assert_eq!(f0.q0, f1.q0);
        prop_assert!(((f1.lambda0 - f0.lambda0) / f0.lambda0).abs() <= 1e-14);
    }

    #[test]
    fn family_rows_follow_the_scaling(pts in table(), b in 1e-3f64..1.0) {
        let d = Dim::new(13).unwrap();
        let fam = find_blowup_point(&ReducedFunctional::new(d, b, pts).unwrap(), None).unwrap();
        let eps = geometric_ladder(1e-2, 1e-8, 7).unwrap();
        let rows = family_table(&fam, &eps, 1.0).unwrap();
        for w in rows.windows(2) {
            prop_assert!(w[1].delta < w[0].delta);
            prop_assert!(w[1].peak > w[0].peak);
        }
        for r in &rows {
            prop_assert_eq!(r.delta, fam.lambda0 * r.epsilon.cbrt());
            let unit = r.peak * r.delta.powf(5.5);
            prop_assert!((unit - 1.0).abs() <= 4.0 * f64::EPSILON, "peak·δ^(n-2)/2 = {unit}");
        }
    }

    #[test]
    fn monte_carlo_is_deterministic_in_seed(seed in 0u64..1_000) {
        let d = Dim::new(11).unwrap();
        let f = |p: &HalfSpacePoint| eval_u(d, p).powi(3);
        let a = mc_halfspace(d, f, 4_000, seed, Proposal::default()).unwrap();
        let b = mc_halfspace(d, f, 4_000, seed, Proposal::default()).unwrap();
        prop_assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        prop_assert!(a.std_error > 0.0);
    }
}

#[test]
fn bubble_decays_like_the_fundamental_solution() {
    for n in 11..=15 {
        let d = Dim::new(n).unwrap();
        let rho = geometric_ladder(1e2, 1e4, 9).unwrap();
        let dir = [0.3, 0.7];
        let u: Vec<f64> = rho
            .iter()
            .map(|r| {
                let mut z = vec![0.0; d.m()];
                z[0] = r * dir[1];
                eval_u(d, &HalfSpacePoint::new(r * dir[0], z).unwrap())
            })
            .collect();
        let fit = loglog_fit(&rho, &u).unwrap();
        assert!(
            (fit.slope + (n as f64 - 2.0)).abs() < 0.05,
            "n = {n}: slope {}",
            fit.slope
        );
    }
}
