//! The second-order corrector `v_q`.
//!
//! The source `[R̄ z z/3 + S t^2] : d^2 U` collapses pointwise to
//! `t^2 A(t,r) z^T S z`, a single degree-2 spherical harmonic in `z`. Writing
//! `v = psi(t,r) Y(theta)` with `Y = theta^T Ŝ theta` and `Ŝ = S/|S|` turns the
//! `n`-dimensional problem into one 2D problem on the quarter plane:
//!
//! `-(psi_tt + psi_rr + (n-2)/r psi_r - 2(n-1)/r^2 psi) = |S| t^2 r^2 A`
//!
//! with `psi_t = -n/(1+r^2) psi` on `t = 0`, `psi = 0` on the axis and a
//! Robin condition matching `rho^{4-n}` decay on the outer edges.
//!
//! The kernel of the linearized problem lives in the `l = 0` and `l = 1`
//! channels, so the `l = 2` operator is invertible and no deflation is done;
//! the solver checks the smallest eigenvalue of the scaled system instead.

use std::io::Write;

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

use crate::bubble::{eval_kernel, eval_u_derivs, radial_factors, HalfSpacePoint};
use crate::error::{Error, Result};
use crate::fit::{geometric_ladder, loglog_fit};
use crate::geometry::{ricci, CurvaturePoint, Dim, MetricExpansion};
use crate::linalg::{dot, Matrix};
use crate::quadrature::sphere::{harmonic_norm2, monomial_integral, quad_moment_1, sphere_area};
use crate::quadrature::{csv_err, quarter_plane};

/// A degree-2 harmonic `Y(theta) = S_ij theta_i theta_j` on `S^{n-2}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarmonicPattern {
    pub s: Matrix,
}

impl HarmonicPattern {
    pub const DEGREE: usize = 2;

    pub fn new(s: Matrix) -> Result<Self> {
        let scale = s.max_abs().max(f64::MIN_POSITIVE);
        if s.trace().abs() > 1e-12 * scale * s.dim() as f64 {
            return Err(Error::Domain(format!(
                "harmonic pattern must be traceless, trace = {:e}",
                s.trace()
            )));
        }
        if s.asymmetry() > 1e-12 * scale {
            return Err(Error::Domain("harmonic pattern must be symmetric".into()));
        }
        Ok(Self { s })
    }

    /// `l(l + n - 3)` at `l = 2`, i.e. `2(n-1)`.
    pub fn eigenvalue(dim: Dim) -> f64 {
        2.0 * (dim.n() as f64 - 1.0)
    }

    /// `z^T S z`, which is `r^2 Y(theta)`.
    pub fn eval_z(&self, z: &[f64]) -> f64 {
        self.s.quad(z)
    }

    /// `int_{S^{n-2}} Y`.
    pub fn angular_mean(&self) -> f64 {
        quad_moment_1(&self.s)
    }

    /// `<Y^2> = int_{S^{n-2}} Y^2`.
    pub fn norm2(&self) -> f64 {
        harmonic_norm2(&self.s)
    }

    pub fn is_zero(&self) -> bool {
        self.s.max_abs() == 0.0
    }
}

/// The source `t^2 r^2 A(t,r)` of the reduced problem.
#[derive(Clone, Copy, Debug)]
pub struct RadialSource {
    pub dim: Dim,
}

impl RadialSource {
    pub fn a(&self, t: f64, r: f64) -> f64 {
        radial_factors(self.dim, t, r).0
    }

    pub fn eval(&self, t: f64, r: f64) -> f64 {
        t * t * r * r * self.a(t, r)
    }
}

/// Splits the source into its harmonic pattern and radial factor. The
/// pattern is `S` itself (not normalized).
pub fn reduce_rhs(cp: &CurvaturePoint) -> Result<(HarmonicPattern, RadialSource)> {
    cp.check_shapes()?;
    Ok((
        HarmonicPattern::new(cp.s.clone())?,
        RadialSource { dim: cp.dim },
    ))
}

/// The source evaluated literally: `[M/3 + S t^2]_ij d_ij U` with `M` built
/// from `R̄`.
pub fn rhs_direct(me: &MetricExpansion, p: &HalfSpacePoint) -> f64 {
    let m = me.dim.m();
    let h = eval_u_derivs(me.dim, p).hessian;
    let mut br = me.tangential_quadratic(&p.z).scaled(1.0 / 3.0);
    br.add_scaled(p.t * p.t, &me.s);
    let mut acc = 0.0;
    for i in 0..m {
        for j in 0..m {
            acc += br[(i, j)] * h[(i, j)];
        }
    }
    acc
}

/// The reduced form `t^2 A(t,r) z^T S z`.
pub fn rhs_reduced(pattern: &HarmonicPattern, src: &RadialSource, p: &HalfSpacePoint) -> f64 {
    p.t * p.t * src.a(p.t, p.r()) * pattern.eval_z(&p.z)
}

/// `int RHS j_b` for `b = 1..n`.
#[derive(Clone, Debug, Serialize)]
pub struct SolvabilityReport {
    pub label: String,
    pub values: Vec<f64>,
}

impl SolvabilityReport {
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }
}

/// Pairings of the source with the kernel. Tangential `b` reduce to odd
/// sphere monomials; `b = n` to a 2D integral times the angular mean of the
/// source's angular factor.
pub fn check_solvability(cp: &CurvaturePoint, tol: f64) -> Result<SolvabilityReport> {
    cp.check_shapes()?;
    let dim = cp.dim;
    let m = dim.m();
    let nf = dim.n() as f64;
    let ric = ricci(&cp.rbar);
    // sum_jk S_jk int theta_i theta_j theta_k and the R̄ analogue vanish term by term
    let mut values = Vec::with_capacity(dim.n());
    for i in 0..m {
        let mut acc = 0.0;
        for j in 0..m {
            for k in 0..m {
                let mut alpha = vec![0usize; m];
                alpha[i] += 1;
                alpha[j] += 1;
                alpha[k] += 1;
                let ang = monomial_integral(&alpha);
                acc += (cp.s[(j, k)] + ric[(j, k)]) * ang;
            }
        }
        values.push(acc);
    }
    // j_n is radial in z, and the sphere integral of the source is
    // omega tr S t^2 (A r^2 + m B)/m + omega tr Ric r^2 B/(3m)
    let omega = sphere_area(m - 1);
    let mean_s = omega * cp.s.trace() / m as f64;
    let mean_ric = omega * ric.trace() / m as f64;
    if mean_s == 0.0 && mean_ric == 0.0 {
        values.push(0.0);
    } else {
        let jn = |t: f64, r: f64| {
            let p = HalfSpacePoint {
                t,
                z: {
                    let mut z = vec![0.0; m];
                    z[0] = r;
                    z
                },
            };
            eval_kernel(dim, dim.n(), &p).unwrap_or(0.0)
        };
        let rs = |t: f64, r: f64| {
            let (a, b) = radial_factors(dim, t, r);
            (t * t * (a * r * r + m as f64 * b), r * r / 3.0 * b)
        };
        let c1 = quarter_plane(
            |t, r| rs(t, r).0 * jn(t, r) * r.powf(nf - 2.0),
            tol.max(1e-12),
            4_000_000,
        )?;
        let c2 = quarter_plane(
            |t, r| rs(t, r).1 * jn(t, r) * r.powf(nf - 2.0),
            tol.max(1e-12),
            4_000_000,
        )?;
        values.push(mean_s * c1.value + mean_ric * c2.value);
    }
    Ok(SolvabilityReport {
        label: cp.label.clone(),
        values,
    })
}

/// Grid of the reduced solve. Both axes use `x = scale * s/(1-s)` with
/// uniform steps in `s`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub t_max: f64,
    pub r_max: f64,
    pub nt: usize,
    pub nr: usize,
    pub scale: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            t_max: 100.0,
            r_max: 100.0,
            nt: 160,
            nr: 160,
            scale: 1.0,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.t_max > 0.0
            && self.r_max > 0.0
            && self.scale > 0.0
            && self.nt >= 4
            && self.nr >= 4;
        if !ok || !self.t_max.is_finite() || !self.r_max.is_finite() {
            return Err(Error::Domain(format!("invalid grid {self:?}")));
        }
        Ok(())
    }

    /// Same domain, `k` times as many cells per axis.
    pub fn refined(&self, k: usize) -> Self {
        Self {
            nt: self.nt * k,
            nr: self.nr * k,
            ..*self
        }
    }

    fn s_max(&self, x_max: f64) -> f64 {
        x_max / (self.scale + x_max)
    }

    fn to_phys(&self, s: f64) -> f64 {
        self.scale * s / (1.0 - s)
    }

    fn to_mapped(&self, x: f64) -> f64 {
        x / (self.scale + x)
    }

    /// `dx/ds`.
    fn jac(&self, s: f64) -> f64 {
        self.scale / ((1.0 - s) * (1.0 - s))
    }

    /// `d^2x/ds^2`.
    fn jac_prime(&self, s: f64) -> f64 {
        2.0 * self.scale / (1.0 - s).powi(3)
    }
}

/// A field on the tensor grid of a [`GridConfig`].
#[derive(Clone, Debug)]
pub struct Profile2D {
    grid: GridConfig,
    t: Vec<f64>,
    r: Vec<f64>,
    ht: f64,
    hr: f64,
    values: Vec<f64>,
    /// Exponent of the power law used beyond the grid.
    pub far_exponent: f64,
    d: NodalDerivs,
}

#[derive(Clone, Debug, Default)]
struct NodalDerivs {
    t: Vec<f64>,
    r: Vec<f64>,
    tt: Vec<f64>,
    tr: Vec<f64>,
    rr: Vec<f64>,
}

/// `psi` and its derivatives in physical `(t, r)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ProfileSample {
    pub psi: f64,
    pub psi_t: f64,
    pub psi_r: f64,
    pub psi_tt: f64,
    pub psi_tr: f64,
    pub psi_rr: f64,
}

impl ProfileSample {
    fn scaled(self, c0: f64, c1: f64, c2: f64) -> Self {
        Self {
            psi: c0 * self.psi,
            psi_t: c1 * self.psi_t,
            psi_r: c1 * self.psi_r,
            psi_tt: c2 * self.psi_tt,
            psi_tr: c2 * self.psi_tr,
            psi_rr: c2 * self.psi_rr,
        }
    }
}

/// Four-point Gauss-Legendre rule on `[-1, 1]`.
const GL4: [(f64, f64); 4] = [
    (-0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
    (-0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
    (0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
    (0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
];

fn d1(v: &[f64], k: usize, h: f64) -> f64 {
    let n = v.len() - 1;
    if k == 0 {
        (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * h)
    } else if k == n {
        (3.0 * v[n] - 4.0 * v[n - 1] + v[n - 2]) / (2.0 * h)
    } else {
        (v[k + 1] - v[k - 1]) / (2.0 * h)
    }
}

fn d2(v: &[f64], k: usize, h: f64) -> f64 {
    let n = v.len() - 1;
    if k == 0 {
        (2.0 * v[0] - 5.0 * v[1] + 4.0 * v[2] - v[3]) / (h * h)
    } else if k == n {
        (2.0 * v[n] - 5.0 * v[n - 1] + 4.0 * v[n - 2] - v[n - 3]) / (h * h)
    } else {
        (v[k + 1] - 2.0 * v[k] + v[k - 1]) / (h * h)
    }
}

impl Profile2D {
    pub fn zeros(grid: GridConfig, far_exponent: f64) -> Result<Self> {
        grid.validate()?;
        let n = (grid.nt + 1) * (grid.nr + 1);
        Self::from_values(grid, vec![0.0; n], far_exponent)
    }

    /// Builds a profile from nodal values in row-major `(t, r)` order.
    pub fn from_values(grid: GridConfig, values: Vec<f64>, far_exponent: f64) -> Result<Self> {
        grid.validate()?;
        let (nt, nr) = (grid.nt, grid.nr);
        if values.len() != (nt + 1) * (nr + 1) {
            return Err(Error::Structural(format!(
                "profile has {} values, grid needs {}",
                values.len(),
                (nt + 1) * (nr + 1)
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite profile value".into()));
        }
        let ht = grid.s_max(grid.t_max) / nt as f64;
        let hr = grid.s_max(grid.r_max) / nr as f64;
        let t = (0..=nt).map(|i| grid.to_phys(i as f64 * ht)).collect();
        let r = (0..=nr).map(|j| grid.to_phys(j as f64 * hr)).collect();
        let mut p = Self {
            grid,
            t,
            r,
            ht,
            hr,
            values,
            far_exponent,
            d: NodalDerivs::default(),
        };
        for i in 0..=nt {
            p.values[i * (nr + 1)] = 0.0;
        }
        p.d = p.nodal_derivs();
        Ok(p)
    }

    pub fn grid(&self) -> &GridConfig {
        &self.grid
    }

    pub fn t_nodes(&self) -> &[f64] {
        &self.t
    }

    pub fn r_nodes(&self) -> &[f64] {
        &self.r
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * (self.grid.nr + 1) + j]
    }

    fn nodal_derivs(&self) -> NodalDerivs {
        let (nt, nr) = (self.grid.nt, self.grid.nr);
        let w = nr + 1;
        let n = (nt + 1) * w;
        let mut ds = NodalDerivs {
            t: vec![0.0; n],
            r: vec![0.0; n],
            tt: vec![0.0; n],
            tr: vec![0.0; n],
            rr: vec![0.0; n],
        };
        // mapped derivatives first
        let mut s_t = vec![0.0; n];
        let mut col = vec![0.0; nt + 1];
        for j in 0..=nr {
            for i in 0..=nt {
                col[i] = self.values[i * w + j];
            }
            for i in 0..=nt {
                s_t[i * w + j] = d1(&col, i, self.ht);
                ds.tt[i * w + j] = d2(&col, i, self.ht);
            }
        }
        for i in 0..=nt {
            let row = &self.values[i * w..(i + 1) * w];
            let trow = &s_t[i * w..(i + 1) * w];
            for j in 0..=nr {
                ds.r[i * w + j] = d1(row, j, self.hr);
                ds.rr[i * w + j] = d2(row, j, self.hr);
                ds.tr[i * w + j] = d1(trow, j, self.hr);
            }
        }
        ds.t = s_t;
        // chain rule to physical coordinates
        let g = self.grid;
        for i in 0..=nt {
            let st = i as f64 * self.ht;
            let (jt, jt1) = (g.jac(st), g.jac_prime(st));
            for j in 0..=nr {
                let sr = j as f64 * self.hr;
                let (jr, jr1) = (g.jac(sr), g.jac_prime(sr));
                let k = i * w + j;
                let (pt, pr) = (ds.t[k], ds.r[k]);
                ds.tt[k] = (ds.tt[k] - pt * jt1 / jt) / (jt * jt);
                ds.rr[k] = (ds.rr[k] - pr * jr1 / jr) / (jr * jr);
                ds.tr[k] /= jt * jr;
                ds.t[k] = pt / jt;
                ds.r[k] = pr / jr;
            }
        }
        ds
    }

    fn bilinear(&self, field: &[f64], i: usize, j: usize, a: f64, b: f64) -> f64 {
        let w = self.grid.nr + 1;
        let f00 = field[i * w + j];
        let f01 = field[i * w + j + 1];
        let f10 = field[(i + 1) * w + j];
        let f11 = field[(i + 1) * w + j + 1];
        (1.0 - a) * ((1.0 - b) * f00 + b * f01) + a * ((1.0 - b) * f10 + b * f11)
    }

    fn inside(&self, t: f64, r: f64) -> ProfileSample {
        let g = self.grid;
        let st = (g.to_mapped(t) / self.ht).min(g.nt as f64);
        let sr = (g.to_mapped(r) / self.hr).min(g.nr as f64);
        let i = (st.floor() as usize).min(g.nt - 1);
        let j = (sr.floor() as usize).min(g.nr - 1);
        let (a, b) = (st - i as f64, sr - j as f64);
        let f = |v: &[f64]| self.bilinear(v, i, j, a, b);
        ProfileSample {
            psi: f(&self.values),
            psi_t: f(&self.d.t),
            psi_r: f(&self.d.r),
            psi_tt: f(&self.d.tt),
            psi_tr: f(&self.d.tr),
            psi_rr: f(&self.d.rr),
        }
    }

    /// Interpolated sample at physical `(t, r)`.
    ///
    /// Below the first off-axis node the profile is continued as
    /// `c(t) r^2`; beyond the grid it is continued homogeneously with
    /// degree `far_exponent` along rays from the origin.
    pub fn eval(&self, t: f64, r: f64) -> ProfileSample {
        let g = self.grid;
        let s = (t / g.t_max).max(r / g.r_max);
        if s > 1.0 {
            let k = self.far_exponent;
            return self
                .eval(t / s, r / s)
                .scaled(s.powf(k), s.powf(k - 1.0), s.powf(k - 2.0));
        }
        let r1 = self.r[1];
        if r < r1 {
            let edge = self.inside(t, r1);
            let c = edge.psi / (r1 * r1);
            let ct = edge.psi_t / (r1 * r1);
            let ctt = edge.psi_tt / (r1 * r1);
            return ProfileSample {
                psi: c * r * r,
                psi_t: ct * r * r,
                psi_r: 2.0 * c * r,
                psi_tt: ctt * r * r,
                psi_tr: 2.0 * ct * r,
                psi_rr: 2.0 * c,
            };
        }
        self.inside(t, r)
    }

    pub fn value(&self, t: f64, r: f64) -> f64 {
        self.eval(t, r).psi
    }

    /// Bilinear interpolation of an arbitrary nodal field on this grid, zero
    /// outside.
    pub fn interpolate_field(&self, field: &[f64], t: f64, r: f64) -> f64 {
        let g = self.grid;
        if t > g.t_max || r > g.r_max || field.len() != self.values.len() {
            return 0.0;
        }
        let st = (g.to_mapped(t) / self.ht).min(g.nt as f64);
        let sr = (g.to_mapped(r) / self.hr).min(g.nr as f64);
        let i = (st.floor() as usize).min(g.nt - 1);
        let j = (sr.floor() as usize).min(g.nr - 1);
        self.bilinear(field, i, j, st - i as f64, sr - j as f64)
    }

    /// Visits the 4x4 Gauss points of every grid cell with the physical area
    /// weight `dt dr`.
    pub fn for_each_gauss_point(&self, mut f: impl FnMut(f64, f64, f64)) {
        let g = self.grid;
        for i in 0..g.nt {
            for j in 0..g.nr {
                for (xa, wa) in GL4 {
                    let st = (i as f64 + 0.5 + 0.5 * xa) * self.ht;
                    let t = g.to_phys(st);
                    let jt = g.jac(st) * 0.5 * wa * self.ht;
                    for (xb, wb) in GL4 {
                        let sr = (j as f64 + 0.5 + 0.5 * xb) * self.hr;
                        f(t, g.to_phys(sr), jt * g.jac(sr) * 0.5 * wb * self.hr);
                    }
                }
            }
        }
    }

    /// Gauss points on the `t = 0` edge with weight `dr`.
    pub fn for_each_boundary_gauss_point(&self, mut f: impl FnMut(f64, f64)) {
        let g = self.grid;
        for j in 0..g.nr {
            for (xb, wb) in GL4 {
                let sr = (j as f64 + 0.5 + 0.5 * xb) * self.hr;
                f(g.to_phys(sr), g.jac(sr) * 0.5 * wb * self.hr);
            }
        }
    }

    /// CSV with columns `t,r,psi`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "r", "psi"]).map_err(csv_err)?;
        for (i, t) in self.t.iter().enumerate() {
            for (j, r) in self.r.iter().enumerate() {
                w.write_record([t.to_string(), r.to_string(), self.at(i, j).to_string()])
                    .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Numbers recorded alongside a corrector solve.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CorrectorDiagnostics {
    /// `|K psi - b|_inf / |b|_inf` of the assembled system.
    pub residual: f64,
    /// Smallest eigenvalue of the Jacobi-scaled system matrix.
    pub min_eigenvalue: f64,
    /// Mean fitted log-log decay exponent of `psi` along rays.
    pub decay_exponent: Option<f64>,
    pub decay_rays: Vec<f64>,
    /// `int_{S^{n-2}} Y`.
    pub angular_mean: f64,
    /// `int_{dR^n_+} U^{n/(n-2)} v`.
    pub boundary_orthogonality: f64,
    /// `int v j_b`, `b = 1..n`.
    pub kernel_orthogonality: Vec<f64>,
    /// `int v Delta v`.
    pub pairing: f64,
    pub grid: GridConfig,
    pub solver: String,
}

/// `v_q = scale * psi(t,r) * Ŷ(theta)` with `psi` solved for the
/// normalized pattern.
#[derive(Clone, Debug)]
pub struct CorrectorSolution {
    pub dim: Dim,
    pub label: String,
    pub profile: Profile2D,
    /// Normalized pattern `Ŝ = S/|S|` (zero when `S = 0`).
    pub pattern: HarmonicPattern,
    /// `|S|_F`, already folded into the profile.
    pub scale: f64,
    pub diagnostics: CorrectorDiagnostics,
    /// Strong-form residual of the discrete equation at the nodes.
    residual_field: Vec<f64>,
}

/// Value and Cartesian derivatives of `v` at one point, `t` last.
#[derive(Clone, Debug)]
pub struct VDerivs {
    pub v: f64,
    pub grad: Vec<f64>,
    pub hessian: Matrix,
}

impl CorrectorSolution {
    pub fn eval(&self, p: &HalfSpacePoint) -> f64 {
        let r = p.r();
        if r == 0.0 {
            return 0.0;
        }
        self.profile.value(p.t, r) * self.pattern.eval_z(&p.z) / (r * r)
    }

    /// `v`, its gradient and Hessian, with `v = phi(t,r) q(z)`,
    /// `phi = psi/r^2`, `q = z^T Ŝ z`.
    pub fn eval_derivs(&self, p: &HalfSpacePoint) -> VDerivs {
        let m = self.dim.m();
        let n = self.dim.n();
        let r = p.r();
        let s = &self.pattern.s;
        let q = s.quad(&p.z);
        let sz = s.matvec(&p.z);
        let (phi, phi_t, phi_r, phi_tt, phi_tr, phi_rr);
        let r1 = self.profile.r[1];
        let ps = self.profile.eval(p.t, r.max(0.0));
        if r < r1 {
            // psi = c r^2 exactly in this band
            let c = self.profile.eval(p.t, r1);
            let k = 1.0 / (r1 * r1);
            phi = c.psi * k;
            phi_t = c.psi_t * k;
            phi_tt = c.psi_tt * k;
            phi_r = 0.0;
            phi_tr = 0.0;
            phi_rr = 0.0;
        } else {
            let (r2, r3, r4) = (r * r, r * r * r, r * r * r * r);
            phi = ps.psi / r2;
            phi_t = ps.psi_t / r2;
            phi_tt = ps.psi_tt / r2;
            phi_r = ps.psi_r / r2 - 2.0 * ps.psi / r3;
            phi_tr = ps.psi_tr / r2 - 2.0 * ps.psi_t / r3;
            phi_rr = ps.psi_rr / r2 - 4.0 * ps.psi_r / r3 + 6.0 * ps.psi / r4;
        }
        let mut grad = vec![0.0; n];
        let mut hess = Matrix::zeros(n);
        let (a1, a2) = if r > 0.0 {
            (phi_r / r, phi_rr / (r * r) - phi_r / (r * r * r))
        } else {
            (0.0, 0.0)
        };
        let tr_over = if r > 0.0 { phi_tr / r } else { 0.0 };
        for i in 0..m {
            grad[i] = a1 * p.z[i] * q + 2.0 * phi * sz[i];
            for j in 0..m {
                let mut h = a2 * p.z[i] * p.z[j] * q
                    + a1 * (2.0 * p.z[i] * sz[j] + 2.0 * p.z[j] * sz[i])
                    + 2.0 * phi * s[(i, j)];
                if i == j {
                    h += a1 * q;
                }
                hess[(i, j)] = h;
            }
            let ht = tr_over * p.z[i] * q + 2.0 * phi_t * sz[i];
            hess[(i, m)] = ht;
            hess[(m, i)] = ht;
        }
        grad[m] = phi_t * q;
        hess[(m, m)] = phi_tt * q;
        VDerivs {
            v: phi * q,
            grad,
            hessian: hess,
        }
    }

    /// `Delta v`, taken from the equation plus the interpolated discrete
    /// residual rather than by differencing `psi` twice.
    pub fn laplacian(&self, p: &HalfSpacePoint) -> f64 {
        let r = p.r();
        if r == 0.0 || self.scale == 0.0 {
            return 0.0;
        }
        let a = radial_factors(self.dim, p.t, r).0;
        let q = self.pattern.eval_z(&p.z);
        let res = self.profile.interpolate_field(&self.residual_field, p.t, r);
        -self.scale * p.t * p.t * a * q + res * q / (r * r)
    }

    pub fn pairing(&self) -> f64 {
        self.diagnostics.pairing
    }

    /// Diagnostics sidecar `{residual, decay_exponent, pairing, grid}`.
    pub fn sidecar_json(&self) -> serde_json::Value {
        serde_json::json!({
            "residual": self.diagnostics.residual,
            "decay_exponent": self.diagnostics.decay_exponent,
            "pairing": self.diagnostics.pairing,
            "grid": self.diagnostics.grid,
        })
    }
}

/// Assembled reduced system for one grid.
struct System {
    n_unknowns: usize,
    triplets: Vec<Triplet<usize, usize, f64>>,
    load: Vec<f64>,
    /// Quadrature weight of each unknown in `int . r^{n-2} dt dr`.
    weight: Vec<f64>,
}

/// Conservative discretization of the reduced energy
/// `int (psi_t^2 + psi_r^2 + mu psi^2/r^2) r^{n-2} - n int_{t=0} psi^2 r^{n-2}/(1+r^2)
/// - int_outer kappa psi^2 r^{n-2}` in mapped coordinates. Unknowns are every
/// node off the axis.
fn assemble(dim: Dim, grid: &GridConfig, source_scale: f64) -> System {
    let (nt, nr) = (grid.nt, grid.nr);
    let nf = dim.n() as f64;
    let c = nf - 2.0;
    let mu = HarmonicPattern::eigenvalue(dim);
    let ht = grid.s_max(grid.t_max) / nt as f64;
    let hr = grid.s_max(grid.r_max) / nr as f64;
    let idx = |i: usize, j: usize| i * nr + (j - 1);
    let wt = |i: usize| if i == 0 || i == nt { 0.5 * ht } else { ht };
    let wr = |j: usize| if j == nr { 0.5 * hr } else { hr };
    let t_at = |i: usize| grid.to_phys(i as f64 * ht);
    let r_at = |j: usize| grid.to_phys(j as f64 * hr);
    let n_unknowns = (nt + 1) * nr;
    let mut diag = vec![0.0; n_unknowns];
    let mut off: Vec<Triplet<usize, usize, f64>> = Vec::with_capacity(4 * n_unknowns);
    let mut edge = |a: Option<usize>, b: usize, k: f64, diag: &mut Vec<f64>| {
        diag[b] += k;
        if let Some(a) = a {
            diag[a] += k;
            off.push(Triplet::new(a, b, -k));
            off.push(Triplet::new(b, a, -k));
        }
    };
    // t-edges
    for j in 1..=nr {
        let rj = r_at(j);
        let jr = grid.jac(j as f64 * hr);
        for i in 0..nt {
            let jt = grid.jac((i as f64 + 0.5) * ht);
            let k = wr(j) * rj.powf(c) * jr / jt / ht;
            edge(Some(idx(i, j)), idx(i + 1, j), k, &mut diag);
        }
    }
    // r-edges, including the edge to the axis node (psi = 0 there)
    for i in 0..=nt {
        let jt = grid.jac(i as f64 * ht);
        for j in 0..nr {
            let sm = (j as f64 + 0.5) * hr;
            let k = wt(i) * grid.to_phys(sm).powf(c) * jt / grid.jac(sm) / hr;
            let a = if j == 0 { None } else { Some(idx(i, j)) };
            edge(a, idx(i, j + 1), k, &mut diag);
        }
    }
    let mut load = vec![0.0; n_unknowns];
    let mut weight = vec![0.0; n_unknowns];
    let src = RadialSource { dim };
    let kappa_coef = 4.0 - nf;
    for i in 0..=nt {
        let ti = t_at(i);
        let jt = grid.jac(i as f64 * ht);
        for j in 1..=nr {
            let rj = r_at(j);
            let jr = grid.jac(j as f64 * hr);
            let k = idx(i, j);
            let w = wt(i) * wr(j) * rj.powf(c) * jt * jr;
            weight[k] = w;
            diag[k] += w * mu / (rj * rj);
            load[k] = source_scale * w * src.eval(ti, rj);
            if i == 0 {
                diag[k] -= wr(j) * nf / (1.0 + rj * rj) * rj.powf(c) * jr;
            }
            let rho2 = ti * ti + rj * rj;
            if i == nt {
                diag[k] -= kappa_coef * ti / rho2 * wr(j) * rj.powf(c) * jr;
            }
            if j == nr {
                diag[k] -= kappa_coef * rj / rho2 * wt(i) * rj.powf(c) * jt;
            }
        }
    }
    let mut triplets = off;
    triplets.extend(diag.iter().enumerate().map(|(k, d)| Triplet::new(k, k, *d)));
    System {
        n_unknowns,
        triplets,
        load,
        weight,
    }
}

fn matvec(tr: &[Triplet<usize, usize, f64>], x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for t in tr {
        y[t.row] += t.val * x[t.col];
    }
    y
}

enum Factor {
    Llt(faer::sparse::linalg::solvers::Llt<usize, f64>),
    Lu(faer::sparse::linalg::solvers::Lu<usize, f64>),
}

impl Factor {
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let rhs = Mat::<f64>::from_fn(b.len(), 1, |i, _| b[i]);
        let x = match self {
            Factor::Llt(f) => f.solve(&rhs),
            Factor::Lu(f) => f.solve(&rhs),
        };
        (0..b.len()).map(|i| x[(i, 0)]).collect()
    }

    fn name(&self) -> &'static str {
        match self {
            Factor::Llt(_) => "cholesky",
            Factor::Lu(_) => "lu",
        }
    }
}

/// Solution of the reduced system plus a few solver facts.
struct RawSolve {
    psi: Vec<f64>,
    residual: f64,
    residual_field: Vec<f64>,
    min_eigenvalue: f64,
    pairing_integral: f64,
    solver: &'static str,
}

fn solve_system(sys: &System) -> Result<RawSolve> {
    let n = sys.n_unknowns;
    let mut dg = vec![0.0; n];
    for t in &sys.triplets {
        if t.row == t.col {
            dg[t.row] += t.val;
        }
    }
    if dg.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::Numeric(
            "reduced system has a nonpositive diagonal entry".into(),
        ));
    }
    let sc: Vec<f64> = dg.iter().map(|d| 1.0 / d.sqrt()).collect();
    let scaled: Vec<Triplet<usize, usize, f64>> = sys
        .triplets
        .iter()
        .map(|t| Triplet::new(t.row, t.col, t.val * sc[t.row] * sc[t.col]))
        .collect();
    let a = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &scaled)
        .map_err(|e| Error::Numeric(format!("sparse assembly failed: {e:?}")))?;
    let factor = match a.sp_cholesky(Side::Lower) {
        Ok(l) => Factor::Llt(l),
        Err(_) => Factor::Lu(
            a.sp_lu()
                .map_err(|e| Error::Numeric(format!("sparse LU failed: {e:?}")))?,
        ),
    };
    let bs: Vec<f64> = sys.load.iter().zip(&sc).map(|(b, s)| b * s).collect();
    let mut y = factor.solve(&bs);
    // one step of iterative refinement
    let ay = matvec(&scaled, &y);
    let rr: Vec<f64> = bs.iter().zip(&ay).map(|(b, a)| b - a).collect();
    let dy = factor.solve(&rr);
    y.iter_mut().zip(&dy).for_each(|(a, b)| *a += b);
    let psi: Vec<f64> = y.iter().zip(&sc).map(|(y, s)| y * s).collect();
    let kpsi = matvec(&sys.triplets, &psi);
    let res: Vec<f64> = kpsi.iter().zip(&sys.load).map(|(k, b)| k - b).collect();
    let bmax = sys.load.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
    let rmax = res.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
    let residual = if bmax > 0.0 { rmax / bmax } else { rmax };
    // the strong-form residual -L psi - f = (K psi - b)/weight
    let residual_field = res
        .iter()
        .zip(&sys.weight)
        .map(|(r, w)| if *w > 0.0 { r / w } else { 0.0 })
        .collect();
    // inverse iteration for the smallest eigenvalue of the scaled matrix
    let mut x: Vec<f64> = (0..n)
        .map(|k| 1.0 + ((k * 7919) % 97) as f64 / 97.0)
        .collect();
    let mut lam = f64::NAN;
    for _ in 0..40 {
        let nx = dot(&x, &x).sqrt();
        x.iter_mut().for_each(|v| *v /= nx);
        let z = factor.solve(&x);
        let rq = dot(&x, &z);
        let new = 1.0 / rq;
        let done = (new - lam).abs() <= 1e-10 * new.abs();
        lam = new;
        x = z;
        if done {
            break;
        }
    }
    let pairing_integral = dot(&psi, &sys.load);
    Ok(RawSolve {
        psi,
        residual,
        residual_field,
        min_eigenvalue: lam,
        pairing_integral,
        solver: factor.name(),
    })
}

/// Smallest eigenvalue allowed for the scaled `l = 2` system.
pub const MIN_EIGENVALUE: f64 = 1e-6;

/// Nodal values of `psi` for a unit pattern at source strength `scale`.
fn solve_profile(dim: Dim, grid: &GridConfig, scale: f64) -> Result<(Profile2D, RawSolve)> {
    grid.validate()?;
    let sys = assemble(dim, grid, scale);
    let raw = solve_system(&sys)?;
    let (nt, nr) = (grid.nt, grid.nr);
    let mut vals = vec![0.0; (nt + 1) * (nr + 1)];
    let mut resf = vec![0.0; (nt + 1) * (nr + 1)];
    for i in 0..=nt {
        for j in 1..=nr {
            vals[i * (nr + 1) + j] = raw.psi[i * nr + j - 1];
            resf[i * (nr + 1) + j] = raw.residual_field[i * nr + j - 1];
        }
    }
    let profile = Profile2D::from_values(*grid, vals, 4.0 - dim.n() as f64)?;
    Ok((
        profile,
        RawSolve {
            residual_field: resf,
            ..raw
        },
    ))
}

/// Ray directions used for decay fits, as angles from the `t` axis.
pub const DECAY_RAYS: [f64; 5] = [0.35, 0.6, 0.8, 1.0, 1.2];

/// Fits along rays leaving the bubble centre `(t, r) = (-1, 0)`, where the
/// profile's far field is closest to a pure power.
fn decay_fit(profile: &Profile2D) -> (Option<f64>, Vec<f64>) {
    let g = profile.grid();
    let hi = 0.5 * g.t_max.min(g.r_max);
    let lo = 10.0_f64.min(hi / 4.0);
    let Ok(rhos) = geometric_ladder(lo, hi, 12) else {
        return (None, Vec::new());
    };
    let mut slopes = Vec::new();
    for &ang in &DECAY_RAYS {
        let vals: Vec<f64> = rhos
            .iter()
            .map(|rho| profile.value((rho * ang.cos() - 1.0).max(0.0), rho * ang.sin()))
            .collect();
        let sign = vals[0].signum();
        if vals.iter().any(|v| v.signum() != sign || *v == 0.0) {
            continue;
        }
        let abs: Vec<f64> = vals.iter().map(|v| v.abs()).collect();
        if let Ok(fit) = loglog_fit(&rhos, &abs) {
            slopes.push(fit.slope);
        }
    }
    if slopes.is_empty() {
        return (None, slopes);
    }
    (
        Some(slopes.iter().sum::<f64>() / slopes.len() as f64),
        slopes,
    )
}

/// Solves for `v_q` on the given grid and fills the diagnostics.
pub fn solve_vq(cp: &CurvaturePoint, grid: &GridConfig) -> Result<CorrectorSolution> {
    let (pattern, _) = reduce_rhs(cp)?;
    grid.validate()?;
    let dim = cp.dim;
    let scale = cp.s.frob2().sqrt();
    if scale == 0.0 {
        let profile = Profile2D::zeros(*grid, 4.0 - dim.n() as f64)?;
        let diagnostics = CorrectorDiagnostics {
            residual: 0.0,
            min_eigenvalue: f64::NAN,
            decay_exponent: None,
            decay_rays: Vec::new(),
            angular_mean: 0.0,
            boundary_orthogonality: 0.0,
            kernel_orthogonality: vec![0.0; dim.n()],
            pairing: 0.0,
            grid: *grid,
            solver: "none".into(),
        };
        let zeros = vec![0.0; profile.values().len()];
        return Ok(CorrectorSolution {
            dim,
            label: cp.label.clone(),
            profile,
            pattern,
            scale,
            diagnostics,
            residual_field: zeros,
        });
    }
    let unit = HarmonicPattern::new(cp.s.scaled(1.0 / scale))?;
    let (profile, raw) = solve_profile(dim, grid, scale)?;
    if !(raw.min_eigenvalue >= MIN_EIGENVALUE) {
        return Err(Error::Numeric(format!(
            "reduced l = 2 system is nearly singular: smallest scaled eigenvalue {:e}",
            raw.min_eigenvalue
        )));
    }
    let y2 = unit.norm2();
    let angular_mean = unit.angular_mean();
    let (decay_exponent, decay_rays) = decay_fit(&profile);
    let kernel_orthogonality = kernel_pairings(&unit, dim);
    let diagnostics = CorrectorDiagnostics {
        residual: raw.residual,
        min_eigenvalue: raw.min_eigenvalue,
        decay_exponent,
        decay_rays,
        angular_mean,
        // the boundary trace of v is psi(0,r) Y: its integral against a
        // radial weight is the angular mean of Y times a radial integral
        boundary_orthogonality: 0.0,
        kernel_orthogonality,
        pairing: -y2 * raw.pairing_integral,
        grid: *grid,
        solver: raw.solver.into(),
    };
    Ok(CorrectorSolution {
        dim,
        label: cp.label.clone(),
        profile,
        pattern: unit,
        scale,
        diagnostics,
        residual_field: raw.residual_field,
    })
}

/// Angular factors of `int v j_b`: odd monomials for tangential `b`, the mean
/// of `Y` for `b = n`.
fn kernel_pairings(pattern: &HarmonicPattern, dim: Dim) -> Vec<f64> {
    let m = dim.m();
    let mut out = Vec::with_capacity(dim.n());
    for i in 0..m {
        let mut acc = 0.0;
        for j in 0..m {
            for k in 0..m {
                let mut alpha = vec![0usize; m];
                alpha[i] += 1;
                alpha[j] += 1;
                alpha[k] += 1;
                acc += pattern.s[(j, k)] * monomial_integral(&alpha);
            }
        }
        out.push(acc);
    }
    out.push(0.0);
    out
}

/// Outcome of the checks on one corrector.
#[derive(Clone, Debug, Serialize)]
pub struct VerificationReport {
    pub label: String,
    pub decay_exponent: Option<f64>,
    pub decay_target: f64,
    pub decay_ok: bool,
    pub angular_mean: f64,
    pub orthogonality_ok: bool,
    pub boundary_orthogonality: f64,
    pub pairing: f64,
    pub pairing_ok: bool,
    pub residual: f64,
    pub residual_ok: bool,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.decay_ok && self.orthogonality_ok && self.pairing_ok && self.residual_ok
    }
}

/// Residual threshold of the discrete solve.
pub const RESIDUAL_TOL: f64 = 1e-8;

pub fn verify_corrector(sol: &CorrectorSolution) -> VerificationReport {
    let d = &sol.diagnostics;
    let target = 4.0 - sol.dim.n() as f64;
    let zero = sol.scale == 0.0;
    let decay_ok = zero || d.decay_exponent.is_some_and(|e| (e - target).abs() <= 0.5);
    let orthogonality_ok =
        d.angular_mean.abs() <= 1e-14 && d.kernel_orthogonality.iter().all(|v| v.abs() <= 1e-14);
    let boundary_orthogonality = if d.angular_mean.abs() <= 1e-14 {
        0.0
    } else {
        f64::NAN
    };
    let pairing_ok = d.pairing <= 1e-8 * sol.scale * sol.scale;
    VerificationReport {
        label: sol.label.clone(),
        decay_exponent: d.decay_exponent,
        decay_target: target,
        decay_ok,
        angular_mean: d.angular_mean,
        orthogonality_ok,
        boundary_orthogonality,
        pairing: d.pairing,
        pairing_ok,
        residual: d.residual,
        residual_ok: d.residual <= RESIDUAL_TOL,
    }
}

/// Three-grid self-convergence study.
#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceStudy {
    pub grids: [GridConfig; 3],
    /// Max difference between successive grids on the coarse nodes.
    pub differences: [f64; 2],
    pub order: f64,
    pub pairings: [f64; 3],
}

/// Solves the unit-pattern problem on `grid`, `2 grid` and `4 grid` and
/// estimates the observed order from nodal differences.
pub fn self_convergence(dim: Dim, grid: &GridConfig) -> Result<ConvergenceStudy> {
    let grids = [*grid, grid.refined(2), grid.refined(4)];
    let mut sols = Vec::with_capacity(3);
    for g in &grids {
        sols.push(solve_profile(dim, g, 1.0)?);
    }
    let (nt, nr) = (grid.nt, grid.nr);
    let diff = |a: &Profile2D, b: &Profile2D, ka: usize, kb: usize| {
        let mut d: f64 = 0.0;
        for i in 0..=nt {
            for j in 0..=nr {
                d = d.max((a.at(i * ka, j * ka) - b.at(i * kb, j * kb)).abs());
            }
        }
        d
    };
    let e1 = diff(&sols[0].0, &sols[1].0, 1, 2);
    let e2 = diff(&sols[1].0, &sols[2].0, 2, 4);
    Ok(ConvergenceStudy {
        grids,
        differences: [e1, e2],
        order: (e1 / e2).log2(),
        pairings: [
            sols[0].1.pairing_integral,
            sols[1].1.pairing_integral,
            sols[2].1.pairing_integral,
        ],
    })
}

/// Far-field insensitivity: relative change of the pairing when both outer
/// extents are doubled at the same mapped resolution.
pub fn far_field_change(cp: &CurvaturePoint, grid: &GridConfig) -> Result<f64> {
    let a = solve_vq(cp, grid)?;
    let big = GridConfig {
        t_max: 2.0 * grid.t_max,
        r_max: 2.0 * grid.r_max,
        ..*grid
    };
    let b = solve_vq(cp, &big)?;
    let pa = a.pairing();
    if pa == 0.0 {
        return Ok(b.pairing().abs());
    }
    Ok(((b.pairing() - pa) / pa).abs())
}

/// The inversion `F(y) = (y', y_n + 1)/(|y'|^2 + (y_n+1)^2) - e_n` from the
/// closed half-space onto the ball of radius 1/2 centred at `-e_n/2`.
pub fn map_to_ball(p: &HalfSpacePoint) -> Vec<f64> {
    let s = 1.0 + p.t;
    let den = p.z.iter().map(|x| x * x).sum::<f64>() + s * s;
    let mut out: Vec<f64> = p.z.iter().map(|x| x / den).collect();
    out.push(s / den - 1.0);
    out
}

/// Inverse of [`map_to_ball`]: `y = w/|w|^2 - e_n` with `w = xi + e_n`.
pub fn map_from_ball(xi: &[f64]) -> Result<HalfSpacePoint> {
    let n = xi.len();
    if n < 2 {
        return Err(Error::Structural(
            "ball point needs at least two coordinates".into(),
        ));
    }
    let mut w = xi.to_vec();
    w[n - 1] += 1.0;
    let w2: f64 = w.iter().map(|x| x * x).sum();
    if w2 == 0.0 {
        return Err(Error::Domain(
            "the point -e_n is the image of infinity".into(),
        ));
    }
    let z: Vec<f64> = w[..n - 1].iter().map(|x| x / w2).collect();
    let t = w[n - 1] / w2 - 1.0;
    if t < -1e-12 {
        return Err(Error::Domain(format!(
            "point lies outside the closed ball (t = {t:e})"
        )));
    }
    HalfSpacePoint::new(t.max(0.0), z)
}

/// `f_q` at a ball point: the source times `U^{-(n+2)/(n-2)}` at the
/// preimage.
pub fn eval_fq(me: &MetricExpansion, xi: &[f64]) -> Result<f64> {
    if xi.len() != me.dim.n() {
        return Err(Error::Structural(format!(
            "ball point has {} coordinates, expected {}",
            xi.len(),
            me.dim.n()
        )));
    }
    let y = map_from_ball(xi)?;
    let n = me.dim.n() as f64;
    Ok(rhs_direct(me, &y) * y.denom().powf((n + 2.0) / 2.0))
}

/// Largest `|f_q(F(y))|/(1+|y|)^4` over the sampled rays and radii.
pub fn fq_growth_ratio(me: &MetricExpansion, dirs: &[Vec<f64>], radii: &[f64]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for d in dirs {
        let nd = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        for &rho in radii {
            let y: Vec<f64> = d.iter().map(|x| rho * x / nd).collect();
            let (z, t) = y.split_at(y.len() - 1);
            let p = HalfSpacePoint::new(t[0].abs(), z.to_vec())?;
            let xi = map_to_ball(&p);
            let f = eval_fq(me, &xi)?;
            if !f.is_finite() {
                return Err(Error::Numeric(format!("f_q not finite at |y| = {rho}")));
            }
            worst = worst.max(f.abs() / (1.0 + rho).powi(4));
        }
    }
    Ok(worst)
}
