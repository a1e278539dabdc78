use blowup_core::bubble::HalfSpacePoint;
use blowup_core::fit::{geometric_ladder, loglog_fit};
use blowup_core::geometry::{
    det_minus_one, generate_sample, validate_curvature, weyl_norm_consistency,
};
use blowup_core::{DerivativeTensors, Dim, Error, MetricExpansion, RiiConvention};

#[test]
fn low_dimensions_need_the_exploration_flag() {
    assert!(matches!(Dim::new(10), Err(Error::Domain(_))));
    assert!(Dim::with_policy(7, true).unwrap().is_exploratory());
    assert!(Dim::with_policy(6, true).is_err());
    assert_eq!(Dim::new(11).unwrap().m(), 10);
}

#[test]
fn weyl_laplacian_conventions() {
    let d = Dim::new(11).unwrap();
    for seed in 0..5 {
        let cp = generate_sample(d, seed, 1.0).unwrap();
        let summed = weyl_norm_consistency(&cp, RiiConvention::Summed);
        assert_eq!(summed, -cp.wbar2 / 6.0);
        assert!(
            (weyl_norm_consistency(&cp, RiiConvention::PerIndex) - 10.0 * summed).abs()
                <= 1e-14 * summed.abs()
        );
        assert!((cp.rbar.norm2() - cp.wbar2).abs() <= 1e-12 * cp.wbar2);
    }
}

#[test]
fn corrupted_sample_is_rejected() {
    let d = Dim::new(11).unwrap();
    let mut cp = generate_sample(d, 9, 1.0).unwrap();
    cp.s[(0, 1)] += 1e-3;
    let rep = validate_curvature(&cp, 1e-12).unwrap();
    assert!(!rep.passed());
    assert!(matches!(rep.into_result(), Err(Error::Validation(_))));
}

#[test]
fn determinant_deviation_is_high_order() {
    let d = Dim::new(11).unwrap();
    let hs = geometric_ladder(1e-1, 1e-3, 7).unwrap();
    for seed in 0..3 {
        let cp = generate_sample(d, seed, 1.0).unwrap();
        let me =
            MetricExpansion::with_derivatives(&cp, DerivativeTensors::synthetic(&cp, seed, 1.0))
                .unwrap();
        let dir: Vec<f64> = (0..d.n()).map(|k| 1.0 + 0.1 * k as f64).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        let dev: Vec<f64> = hs
            .iter()
            .map(|h| {
                let y: Vec<f64> = dir.iter().map(|x| h * x / norm).collect();
                let p = HalfSpacePoint::new(y[d.m()], y[..d.m()].to_vec()).unwrap();
                det_minus_one(&me, &p).unwrap().abs()
            })
            .collect();
        let fit = loglog_fit(&hs, &dev).unwrap();
        assert!(
            fit.slope >= 3.0,
            "seed {seed}: |det - 1| slope {}",
            fit.slope
        );
        eprintln!("seed {seed}: |det - 1| ~ h^{:.2}", fit.slope);
    }
}
