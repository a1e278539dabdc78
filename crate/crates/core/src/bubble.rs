//! The standard half-space bubble `U(z,t) = ((1+t)^2 + |z|^2)^{-(n-2)/2}`,
//! its rescalings, closed-form derivatives and the kernel of the
//! linearized boundary problem.
//!
//! Points are stored as `(z, t)` with `z` in `R^{n-1}`; gradients and
//! Hessians use the same ordering, with `t` last.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fit::{loglog_fit, LinearFit};
use crate::geometry::Dim;
use crate::linalg::Matrix;

/// A point `(z, t)` of the closed upper half-space.
#[derive(Clone, Debug, PartialEq)]
pub struct HalfSpacePoint {
    pub t: f64,
    pub z: Vec<f64>,
}

impl HalfSpacePoint {
    pub fn new(t: f64, z: Vec<f64>) -> Result<Self> {
        if !(t >= 0.0) || !t.is_finite() || z.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain(format!("not a half-space point: t = {t}")));
        }
        Ok(Self { t, z })
    }

    pub fn r(&self) -> f64 {
        self.z.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// `(1+t)^2 + |z|^2`.
    pub fn denom(&self) -> f64 {
        (1.0 + self.t).powi(2) + self.z.iter().map(|x| x * x).sum::<f64>()
    }

    fn check_dim(&self, dim: Dim) -> Result<()> {
        if self.z.len() != dim.m() {
            return Err(Error::Structural(format!(
                "point has {} tangential coordinates, expected {}",
                self.z.len(),
                dim.m()
            )));
        }
        Ok(())
    }
}

/// Random points for residual checks: `t` exponential with the given scale
/// (a quarter of them exactly on `t = 0`), `z` Gaussian with the same scale.
pub fn random_points(dim: Dim, count: usize, scale: f64, seed: u64) -> Vec<HalfSpacePoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| {
            let t: f64 = if k % 4 == 0 {
                0.0
            } else {
                scale * rng.sample::<f64, _>(Exp1)
            };
            let z = (0..dim.m())
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            HalfSpacePoint { t, z }
        })
        .collect()
}

/// Concentration parameter of `U_delta(y) = delta^{-(n-2)/2} U(y/delta)`.
#[derive(Clone, Copy, Debug)]
pub struct BubbleParams {
    pub dim: Dim,
    pub delta: f64,
}

impl BubbleParams {
    pub fn new(dim: Dim, delta: f64) -> Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::Domain(format!(
                "delta must be positive, got {delta}"
            )));
        }
        Ok(Self { dim, delta })
    }
}

/// Gradient (length `n`) and Hessian (`n x n`) with `t` as the last coordinate.
#[derive(Clone, Debug)]
pub struct UDerivs {
    pub grad: Vec<f64>,
    pub hessian: Matrix,
}

pub fn eval_u(dim: Dim, p: &HalfSpacePoint) -> f64 {
    let n = dim.n() as f64;
    p.denom().powf(-(n - 2.0) / 2.0)
}

/// Closed-form first and second derivatives of `U`.
pub fn eval_u_derivs(dim: Dim, p: &HalfSpacePoint) -> UDerivs {
    let n = dim.n();
    let nf = n as f64;
    let d = p.denom();
    let dn2 = d.powf(-nf / 2.0);
    let dn2p = dn2 / d;
    // y_a with the t-slot shifted by one, as it enters D
    let mut w = p.z.clone();
    w.push(1.0 + p.t);
    let grad: Vec<f64> = w.iter().map(|wa| (2.0 - nf) * wa * dn2).collect();
    let hessian = Matrix::from_fn(n, |a, b| {
        let diag = if a == b { (2.0 - nf) * dn2 } else { 0.0 };
        diag + nf * (nf - 2.0) * w[a] * w[b] * dn2p
    });
    UDerivs { grad, hessian }
}

/// `U_delta` at `p`.
pub fn eval_u_delta(params: BubbleParams, p: &HalfSpacePoint) -> f64 {
    let n = params.dim.n() as f64;
    let d = params.delta;
    let q = HalfSpacePoint {
        t: p.t / d,
        z: p.z.iter().map(|x| x / d).collect(),
    };
    d.powf(-(n - 2.0) / 2.0) * eval_u(params.dim, &q)
}

/// Derivatives of `U_delta` by the chain rule.
pub fn eval_u_delta_derivs(params: BubbleParams, p: &HalfSpacePoint) -> UDerivs {
    let n = params.dim.n() as f64;
    let d = params.delta;
    let q = HalfSpacePoint {
        t: p.t / d,
        z: p.z.iter().map(|x| x / d).collect(),
    };
    let base = eval_u_derivs(params.dim, &q);
    let amp = d.powf(-(n - 2.0) / 2.0);
    UDerivs {
        grad: base.grad.iter().map(|g| amp * g / d).collect(),
        hessian: base.hessian.scaled(amp / (d * d)),
    }
}

/// Radial factors with `d^2 U / dz_i dz_j = z_i z_j A + delta_ij B`:
/// `A = u_rr/r^2 - u_r/r^3 = n(n-2) D^{-(n+2)/2}` and `B = u_r/r = -(n-2) D^{-n/2}`.
pub fn radial_factors(dim: Dim, t: f64, r: f64) -> (f64, f64) {
    let n = dim.n() as f64;
    let d = (1.0 + t).powi(2) + r * r;
    let dn2 = d.powf(-n / 2.0);
    (n * (n - 2.0) * dn2 / d, -(n - 2.0) * dn2)
}

/// Polynomial prefactor of a kernel element `j_b = phi(z,t) D^{-n/2}`.
struct KernelPoly {
    phi: f64,
    grad: Vec<f64>,
    lap: f64,
}

fn kernel_poly(dim: Dim, b: usize, p: &HalfSpacePoint) -> Result<KernelPoly> {
    let n = dim.n();
    let nf = n as f64;
    if b == 0 || b > n {
        return Err(Error::Domain(format!("kernel index {b} outside 1..={n}")));
    }
    let mut grad = vec![0.0; n];
    if b < n {
        grad[b - 1] = 2.0 - nf;
        Ok(KernelPoly {
            phi: (2.0 - nf) * p.z[b - 1],
            grad,
            lap: 0.0,
        })
    } else {
        // (n-2)/2 U + y.grad U with y_n = t works out to this prefactor
        let c = (nf - 2.0) / 2.0;
        let r2: f64 = p.z.iter().map(|x| x * x).sum();
        for (g, zi) in grad.iter_mut().zip(&p.z) {
            *g = -2.0 * c * zi;
        }
        grad[n - 1] = -2.0 * c * p.t;
        Ok(KernelPoly {
            phi: c * (1.0 - p.t * p.t - r2),
            grad,
            lap: -2.0 * c * nf,
        })
    }
}

/// The kernel element `j_b`, `b` in `1..=n`: `j_i = dU/dz_i` for `i < n` and
/// `j_n = (n-2)/2 U + z.grad_z U + t dU/dt`.
pub fn eval_kernel(dim: Dim, b: usize, p: &HalfSpacePoint) -> Result<f64> {
    p.check_dim(dim)?;
    let kp = kernel_poly(dim, b, p)?;
    let nf = dim.n() as f64;
    Ok(kp.phi * p.denom().powf(-nf / 2.0))
}

/// Laplacian of `j_b` split into its three analytic pieces. Returns
/// `(sum, sum of magnitudes)`.
fn kernel_laplacian_terms(dim: Dim, b: usize, p: &HalfSpacePoint) -> Result<(f64, f64)> {
    let kp = kernel_poly(dim, b, p)?;
    let nf = dim.n() as f64;
    let s = nf / 2.0;
    let d = p.denom();
    let ds = d.powf(-s);
    let ds1 = ds / d;
    let mut w = p.z.clone();
    w.push(1.0 + p.t);
    // grad D^{-s} = -2 s D^{-s-1} w, lap D^{-s} = 4 s (s + 1 - n/2) D^{-s-1}
    let t1 = kp.lap * ds;
    let t2 = 2.0 * crate::linalg::dot(&kp.grad, &w) * (-2.0 * s) * ds1;
    let t3 = kp.phi * 4.0 * s * (s + 1.0 - nf / 2.0) * ds1;
    Ok((t1 + t2 + t3, t1.abs() + t2.abs() + t3.abs()))
}

/// `d j_b/dt + n U^{2/(n-2)} j_b` at `(z, 0)`, with its term magnitudes.
fn kernel_boundary_terms(dim: Dim, b: usize, z: &[f64]) -> Result<(f64, f64)> {
    let nf = dim.n() as f64;
    let p = HalfSpacePoint {
        t: 0.0,
        z: z.to_vec(),
    };
    let kp = kernel_poly(dim, b, &p)?;
    let d = p.denom();
    let ds = d.powf(-nf / 2.0);
    let dt = kp.grad[dim.n() - 1] * ds - nf * kp.phi * ds / d;
    let react = nf * kp.phi * ds / d;
    Ok((dt + react, dt.abs() + react.abs()))
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct ResidualReport {
    pub n: usize,
    pub delta: f64,
    pub points: usize,
    /// Largest `|trace Hessian| / sum |Hessian_aa|` over samples with `t > 0`.
    pub interior_max: f64,
    /// Largest relative `|dU/dt + (n-2) U^{n/(n-2)}|` at `(z, 0)`.
    pub boundary_max: f64,
    /// Same two checks for the kernel `j_1..j_n` (only at `delta = 1`).
    pub kernel_interior_max: f64,
    pub kernel_boundary_max: f64,
}

impl ResidualReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.interior_max <= tol
            && self.boundary_max <= tol
            && self.kernel_interior_max <= tol
            && self.kernel_boundary_max <= tol
    }
}

fn rel(v: f64, scale: f64) -> f64 {
    if scale > 0.0 {
        v.abs() / scale
    } else {
        v.abs()
    }
}

/// Interior harmonicity at samples with `t > 0`; the nonlinear boundary
/// identity at each sample's projection `(z, 0)`. Residuals are relative to
/// the magnitudes of the cancelling terms.
pub fn check_bubble_residual(
    params: BubbleParams,
    samples: &[HalfSpacePoint],
) -> Result<ResidualReport> {
    let dim = params.dim;
    let n = dim.n();
    let nf = n as f64;
    let mut rep = ResidualReport {
        n,
        delta: params.delta,
        points: samples.len(),
        ..Default::default()
    };
    let kernel = params.delta == 1.0;
    for p in samples {
        p.check_dim(dim)?;
        if p.t > 0.0 {
            let h = eval_u_delta_derivs(params, p).hessian;
            let tr = h.trace();
            let mag: f64 = (0..n).map(|a| h[(a, a)].abs()).sum();
            rep.interior_max = rep.interior_max.max(rel(tr, mag));
            if kernel {
                for b in 1..=n {
                    let (s, m) = kernel_laplacian_terms(dim, b, p)?;
                    rep.kernel_interior_max = rep.kernel_interior_max.max(rel(s, m));
                }
            }
        }
        let q = HalfSpacePoint {
            t: 0.0,
            z: p.z.clone(),
        };
        let u = eval_u_delta(params, &q);
        let ut = eval_u_delta_derivs(params, &q).grad[n - 1];
        let nl = (nf - 2.0) * u.powf(nf / (nf - 2.0));
        rep.boundary_max = rep.boundary_max.max(rel(ut + nl, ut.abs() + nl.abs()));
        if kernel {
            for b in 1..=n {
                let (s, m) = kernel_boundary_terms(dim, b, &q.z)?;
                rep.kernel_boundary_max = rep.kernel_boundary_max.max(rel(s, m));
            }
        }
    }
    Ok(rep)
}

/// Log-log fit of `U` along the ray through `dir` (a unit vector in `R^n`,
/// `t` last, `t`-component nonnegative) for `rho` in `[rho_min, rho_max]`.
pub fn fit_decay_exponent(
    dim: Dim,
    dir: &[f64],
    rho_min: f64,
    rho_max: f64,
    points: usize,
) -> Result<LinearFit> {
    let n = dim.n();
    if dir.len() != n || dir[n - 1] < 0.0 {
        return Err(Error::Domain(
            "ray direction must lie in the closed half-space".into(),
        ));
    }
    let mut xs = Vec::with_capacity(points);
    let mut ys = Vec::with_capacity(points);
    for k in 0..points {
        let rho = rho_min * (rho_max / rho_min).powf(k as f64 / (points - 1) as f64);
        let p = HalfSpacePoint {
            t: rho * dir[n - 1],
            z: dir[..n - 1].iter().map(|d| rho * d).collect(),
        };
        xs.push(rho);
        ys.push(eval_u(dim, &p));
    }
    loglog_fit(&xs, &ys)
}
