use blowup_core::corrector::{
    check_solvability, far_field_change, self_convergence, solve_vq, verify_corrector, GridConfig,
};
use blowup_core::geometry::generate_sample;
use blowup_core::{CurvaturePoint, Dim};

#[test]
fn solvability_holds_on_random_samples() {
    for n in [11, 13, 15] {
        let d = Dim::new(n).unwrap();
        for seed in 0..8 {
            let cp = generate_sample(d, seed, 1.0).unwrap();
            let rep = check_solvability(&cp, 1e-10).unwrap();
            assert!(rep.max_abs() <= 1e-8, "n = {n}, seed {seed}: {rep:?}");
        }
    }
}

#[test]
fn corrector_passes_its_checks() {
    for n in [11, 13, 15] {
        let d = Dim::new(n).unwrap();
        for seed in 0..4 {
            let cp = generate_sample(d, 100 + seed, 1.0).unwrap();
            let sol = solve_vq(&cp, &GridConfig::default()).unwrap();
            let rep = verify_corrector(&sol);
            assert!(rep.passed(), "n = {n}, seed {seed}: {rep:?}");
            assert!(sol.pairing() <= 0.0);
        }
    }
}

#[test]
fn corrector_is_linear_in_the_second_fundamental_form() {
    let d = Dim::new(11).unwrap();
    let cp = generate_sample(d, 3, 1.0).unwrap();
    let mut twice = cp.clone();
    twice.s = cp.s.scaled(2.0);
    let a = solve_vq(&cp, &GridConfig::default()).unwrap();
    let b = solve_vq(&twice, &GridConfig::default()).unwrap();
    let r = b.pairing() / a.pairing();
    assert!((r - 4.0).abs() < 1e-10, "pairing ratio {r}");
}

#[test]
fn zero_second_fundamental_form_gives_zero_corrector() {
    let d = Dim::new(12).unwrap();
    let cp = CurvaturePoint::flat(d, 1.0, "flat");
    let sol = solve_vq(&cp, &GridConfig::default()).unwrap();
    assert_eq!(sol.pairing(), 0.0);
    assert_eq!(sol.scale, 0.0);
}

#[test]
fn coarse_self_convergence_and_far_field() {
    let d = Dim::new(11).unwrap();
    let study = self_convergence(
        d,
        &GridConfig {
            nt: 40,
            nr: 40,
            ..GridConfig::default()
        },
    )
    .unwrap();
    assert!(study.order >= 1.9, "order {}", study.order);
    let cp = generate_sample(d, 5, 1.0).unwrap();
    let change = far_field_change(&cp, &GridConfig::default()).unwrap();
    assert!(change <= 0.01, "far-field change {change}");
}
