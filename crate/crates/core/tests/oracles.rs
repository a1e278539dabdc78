//! Frozen reference values computed with 20-digit mpmath quadrature, fully
//! independent of the Beta-function closed forms used by the library.

use blowup_core::energy::{compute_a, compute_b, BOUNDARY_PANELS};
use blowup_core::quadrature::{sphere_area, MomentTable};
use blowup_core::reduction::{critical_lambda, PointCoefficients, ReducedFunctional};
use blowup_core::Dim;

/// `n, I1, I2, I3, I4, A, B` with `I_k` already multiplied by the area of
/// `S^{n-2}`.
const TABLE: [(usize, [f64; 6]); 5] = [
    (
        11,
        [
            4.3370136732607916e-4,
            1.4456712244202639e-4,
            1.6063013604669598e-5,
            1.517954785641277e-2,
            9.1077287138476623e-3,
            2.2769321784619156e-2,
        ],
    ),
    (
        12,
        [
            1.0348948791345715e-4,
            3.3634083571873573e-5,
            3.1046846374037144e-6,
            4.5535374681921145e-3,
            3.556275130116982e-3,
            8.6931169847304004e-3,
        ],
    ),
    (
        13,
        [
            2.5231722767471457e-5,
            8.0282754260136454e-6,
            6.255799033257386e-7,
            1.3625130294434587e-3,
            1.3246654452922515e-3,
            3.1791970687014036e-3,
        ],
    ),
    (
        14,
        [
            6.2068710127331092e-6,
            1.9396471914790966e-6,
            1.2930981276527311e-7,
            4.034466158276521e-4,
            4.7267710020044447e-4,
            1.1172367822919597e-3,
        ],
    ),
    (
        15,
        [
            1.5285800666278749e-6,
            4.7033232819319228e-7,
            2.7134557395761093e-8,
            1.1770066513034637e-4,
            1.6213867135302816e-4,
            3.7832356649039904e-4,
        ],
    ),
];

fn rel(a: f64, b: f64) -> f64 {
    ((a - b) / b).abs()
}

#[test]
fn moments_match_frozen_quadrature() {
    for (n, v) in TABLE {
        let t = MomentTable::new(Dim::new(n).unwrap(), 1e-10).unwrap();
        let got = [
            t.integrals.i1,
            t.integrals.i2,
            t.integrals.i3,
            t.integrals.i4,
        ];
        for (k, (g, want)) in got.iter().zip(&v[..4]).enumerate() {
            assert!(
                rel(*g, *want) < 1e-9,
                "n = {n}, I{} = {g:e}, oracle {want:e}",
                k + 1
            );
        }
    }
}

#[test]
fn a_and_b_match_frozen_quadrature() {
    for (n, v) in TABLE {
        let dim = Dim::new(n).unwrap();
        let a = compute_a(dim, 1e-10).unwrap();
        let b = compute_b(dim, BOUNDARY_PANELS).unwrap();
        assert!(rel(a.value, v[4]) < 1e-8, "n = {n}: A = {:e}", a.value);
        assert!(
            rel(a.closed_form, v[4]) < 1e-12,
            "n = {n}: closed A = {:e}",
            a.closed_form
        );
        assert!(rel(b.value, v[5]) < 1e-12, "n = {n}: B = {:e}", b.value);
        assert!(rel(b.closed_form, v[5]) < 1e-12);
        assert!(a.value > 0.0 && b.value > 0.0);
    }
}

#[test]
fn sphere_areas() {
    // |S^2| = 4π, |S^9| = 2π^5/4!
    let pi = std::f64::consts::PI;
    assert!(rel(sphere_area(2), 4.0 * pi) < 1e-14);
    assert!(rel(sphere_area(9), 2.0 * pi.powi(5) / 24.0) < 1e-14);
}

#[test]
fn critical_scale_matches_frozen_value() {
    // B at n = 11, γ = 1, φ = -1/80: λ* = (20 B)^{1/3}, from mpmath
    let b = 2.2769321784619156e-2;
    let rf = ReducedFunctional::new(
        Dim::new(11).unwrap(),
        b,
        vec![PointCoefficients {
            label: "q".into(),
            gamma: 1.0,
            phi: -0.0125,
        }],
    )
    .unwrap();
    let c = critical_lambda(&rf, "q").unwrap();
    assert!(
        rel(c.lambda, 0.76935485157745505) < 1e-14,
        "λ* = {}",
        c.lambda
    );
    assert!(rel(c.value, 0.75 * b * c.lambda) < 1e-15);
}
