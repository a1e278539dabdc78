//! Exact integrals over the unit sphere `S^{d-1}` in `R^d`.
//!
//! Products of quadratic forms use the Gaussian moment trick: for a standard
//! normal `x`, `E[prod x^T A_k x]` has a closed form in traces and equals
//! `E|x|^{2k}` times the sphere average, with `E|x|^{2k} = d(d+2)...(d+2k-2)`.

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::geometry::Dim;
use crate::linalg::{Matrix, Tensor4};

/// Surface area of the unit `m`-sphere `S^m` in `R^{m+1}`.
pub fn sphere_area(m: usize) -> f64 {
    let h = (m as f64 + 1.0) / 2.0;
    2.0 * (h * std::f64::consts::PI.ln() - ln_gamma(h)).exp()
}

/// `int_{S^{d-1}} prod theta_i^{alpha_i}` for any multi-index.
pub fn monomial_integral(alpha: &[usize]) -> f64 {
    if alpha.iter().any(|a| a % 2 == 1) {
        return 0.0;
    }
    let d = alpha.len() as f64;
    let total: usize = alpha.iter().sum();
    let mut lg = -ln_gamma((total as f64 + d) / 2.0);
    for &a in alpha {
        lg += ln_gamma((a as f64 + 1.0) / 2.0);
    }
    2.0 * lg.exp()
}

/// `int_{S^{n-2}} theta^alpha` for patterns of total degree at most four.
pub fn angular_moment(dim: Dim, pattern: &[usize]) -> Result<f64> {
    if pattern.len() != dim.m() {
        return Err(Error::Structural(format!(
            "pattern has {} exponents, expected {}",
            pattern.len(),
            dim.m()
        )));
    }
    let degree: usize = pattern.iter().sum();
    if degree > 4 {
        return Err(Error::Unsupported(format!(
            "angular pattern of degree {degree} (at most 4)"
        )));
    }
    Ok(monomial_integral(pattern))
}

fn rising(d: usize, k: usize) -> f64 {
    (0..k).map(|j| (d + 2 * j) as f64).product()
}

/// `int_S theta^T A theta`.
pub fn quad_moment_1(a: &Matrix) -> f64 {
    let d = a.dim();
    sphere_area(d - 1) * a.trace() / d as f64
}

/// `int_S (theta^T A theta)(theta^T B theta)` for symmetric `A, B`.
pub fn quad_moment_2(a: &Matrix, b: &Matrix) -> f64 {
    let d = a.dim();
    let g = a.trace() * b.trace() + 2.0 * a.inner(b);
    sphere_area(d - 1) * g / rising(d, 2)
}

/// `int_S (theta^T A theta)(theta^T B theta)(theta^T C theta)` for symmetric matrices.
pub fn quad_moment_3(a: &Matrix, b: &Matrix, c: &Matrix) -> f64 {
    let d = a.dim();
    let (ta, tb, tc) = (a.trace(), b.trace(), c.trace());
    let g = ta * tb * tc
        + 2.0 * (ta * b.inner(c) + tb * a.inner(c) + tc * a.inner(b))
        + 8.0 * a.matmul(b).inner(c);
    sphere_area(d - 1) * g / rising(d, 3)
}

/// `int_S T_abcd theta_a theta_b theta_c theta_d`.
pub fn quartic_contraction(t: &Tensor4) -> f64 {
    let d = t.dim();
    let mut acc = 0.0;
    for a in 0..d {
        for b in 0..d {
            acc += t[(a, a, b, b)] + t[(a, b, a, b)] + t[(a, b, b, a)];
        }
    }
    sphere_area(d - 1) * acc / rising(d, 2)
}

/// `<Y^2> = int_{S^{n-2}} (S_ij theta_i theta_j)^2 = 2 |S|^2 omega/(m(m+2))`
/// for traceless `S`.
pub fn harmonic_norm2(s: &Matrix) -> f64 {
    quad_moment_2(s, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn low_spheres() {
        assert!((sphere_area(0) - 2.0).abs() < 1e-14);
        assert!((sphere_area(1) - 2.0 * PI).abs() < 1e-13);
        assert!((sphere_area(2) - 4.0 * PI).abs() < 1e-13);
    }

    #[test]
    fn monomials_match_low_dimensional_calculus() {
        // on S^1: int cos^2 = pi, int cos^2 sin^2 = pi/4
        assert!((monomial_integral(&[2, 0]) - PI).abs() < 1e-13);
        assert!((monomial_integral(&[2, 2]) - PI / 4.0).abs() < 1e-13);
        // on S^2: int x^2 = 4 pi/3
        assert!((monomial_integral(&[2, 0, 0]) - 4.0 * PI / 3.0).abs() < 1e-13);
        assert_eq!(monomial_integral(&[1, 1, 0]), 0.0);
    }
}
