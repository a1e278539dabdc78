//! Reduced-energy coefficients `A`, `B`, `G_1..G_3`, the leading coefficient
//! `phi(q)`, and two δ-ladder experiments that measure the remainders of the
//! energy and residual expansions.
//!
//! Lengths in the experiments are in bubble units `x = y/δ`; the cutoff is
//! `χ(δ|x|)` with a fixed radius in `y`.

use serde::{Deserialize, Serialize};

use crate::bubble::{eval_u, eval_u_derivs, HalfSpacePoint};
use crate::corrector::{CorrectorSolution, ProfileSample};
use crate::error::{Error, Result};
use crate::fit::{linear_fit, LinearFit};
use crate::geometry::{CurvaturePoint, Dim, MetricExpansion, RiiConvention};
use crate::linalg::{Matrix, Tensor4};
use crate::quadrature::sphere::{quad_moment_1, quad_moment_2, quad_moment_3, quartic_contraction};
use crate::quadrature::{
    beta, boundary_radial, boundary_radial_closed, mc_halfspace, mc_halfspace_multi, moment,
    sphere_area, MCEstimate, MomentKey, MomentTable, Proposal,
};

/// Which denominator the Weyl term of `phi` carries: `96(n-1)^2` (as the
/// term comes out of the expansion) or `96(n-1)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeylDenominator {
    #[default]
    Proof,
    Statement,
}

impl WeylDenominator {
    fn power(self) -> i32 {
        match self {
            Self::Proof => 2,
            Self::Statement => 1,
        }
    }
}

/// Coefficient `c` with Weyl term `c |W̄|^2 I_4`.
///
/// The term is `(n-2)/(16(n-1)^k) * sum_i d_ii R̄ * I_4`, where the sum is
/// read per the Rii convention. Summed with `k = 2` gives
/// `-(n-2)/(96(n-1)^2)`.
pub fn weyl_coefficient(dim: Dim, den: WeylDenominator, rii: RiiConvention) -> f64 {
    let n = dim.n() as f64;
    let lap = match rii {
        RiiConvention::Summed => -1.0 / 6.0,
        RiiConvention::PerIndex => -(n - 1.0) / 6.0,
    };
    (n - 2.0) / (16.0 * (n - 1.0).powi(den.power())) * lap
}

/// Coefficient of `R_{nn,nn} I_2` in `phi`.
pub fn rnnnn_coefficient(dim: Dim) -> f64 {
    let n = dim.n() as f64;
    (n - 2.0) * (n - 8.0) / (4.0 * (n * n - 1.0))
}

/// `A = 1/2 int |grad U|^2 - (n-2)^2/(2(n-1)) int_{t=0} U^{2(n-1)/(n-2)}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ATerms {
    /// `1/2 int |grad U|^2`.
    pub gradient: f64,
    /// `int_{t=0} U^{2(n-1)/(n-2)}`.
    pub boundary: f64,
    pub value: f64,
    /// Beta form `(n-2)/(2(n-1)) omega 1/2 B((n-1)/2, (n-1)/2)`.
    pub closed_form: f64,
    /// `int |grad U|^2 - (n-2) int_{t=0} U^{2(n-1)/(n-2)}`, zero by the
    /// divergence theorem.
    pub ibp_defect: f64,
}

/// Panels of the composite K15 rule for one-dimensional boundary integrals.
pub const BOUNDARY_PANELS: usize = 64;

pub fn compute_a(dim: Dim, tol: f64) -> Result<ATerms> {
    let n = dim.n() as f64;
    let omega = sphere_area(dim.m() - 1);
    // |grad U|^2 = (n-2)^2 D^{1-n}
    let grad2 = (n - 2.0).powi(2) * omega * moment(dim, MomentKey::new(n - 1.0, 0, 0), tol)?.value;
    let boundary = omega * boundary_radial(dim, 0, n - 1.0, BOUNDARY_PANELS);
    let gradient = 0.5 * grad2;
    let value = gradient - (n - 2.0).powi(2) / (2.0 * (n - 1.0)) * boundary;
    let closed_form =
        (n - 2.0) / (2.0 * (n - 1.0)) * omega * 0.5 * beta((n - 1.0) / 2.0, (n - 1.0) / 2.0);
    Ok(ATerms {
        gradient,
        boundary,
        value,
        closed_form,
        ibp_defect: grad2 - (n - 2.0) * boundary,
    })
}

/// `B = 1/2 int_{t=0} U^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BTerms {
    pub value: f64,
    /// The same integral with twice the panels.
    pub refined: f64,
    /// `omega/4 B((n-1)/2, (n-3)/2)`.
    pub closed_form: f64,
}

pub fn compute_b(dim: Dim, panels: usize) -> Result<BTerms> {
    let n = dim.n() as f64;
    if dim.n() < 5 {
        return Err(Error::Domain(format!("B diverges for n = {}", dim.n())));
    }
    let omega = sphere_area(dim.m() - 1);
    let q = n - 2.0;
    let value = 0.5 * omega * boundary_radial(dim, 0, q, panels);
    let refined = 0.5 * omega * boundary_radial(dim, 0, q, 2 * panels);
    let closed_form = 0.5 * omega * boundary_radial_closed(dim, 0, q)?;
    Ok(BTerms {
        value,
        refined,
        closed_form,
    })
}

/// Dimension-only constants shared by every boundary point.
#[derive(Clone, Debug)]
pub struct EnergyConstants {
    pub dim: Dim,
    pub a: ATerms,
    pub b: BTerms,
    pub i2: f64,
    pub i4: f64,
}

impl EnergyConstants {
    pub fn new(dim: Dim, tol: f64) -> Result<Self> {
        let table = MomentTable::new(dim, tol)?;
        Self::from_table(dim, &table, tol)
    }

    pub fn from_table(dim: Dim, table: &MomentTable, tol: f64) -> Result<Self> {
        Ok(Self {
            dim,
            a: compute_a(dim, tol)?,
            b: compute_b(dim, BOUNDARY_PANELS)?,
            i2: table.integrals.i2,
            i4: table.integrals.i4,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GTerms {
    pub g1: f64,
    pub g2: f64,
    pub g3: f64,
}

/// `G_1 = 0`, `G_2 = (n-2)^2/(n^2-1) I_2 D_2`,
/// `G_3 = 6(n-2)/(n^2-1) I_2 |S|^2`.
pub fn compute_g_terms(cp: &CurvaturePoint, i2: f64) -> GTerms {
    let n = cp.dim.n() as f64;
    let k = n * n - 1.0;
    GTerms {
        g1: 0.0,
        g2: (n - 2.0).powi(2) / k * i2 * cp.d2,
        g3: 6.0 * (n - 2.0) / k * i2 * cp.s_norm2(),
    }
}

/// Monte Carlo of `1/2 int R_{ninj,kl} t^2 z_k z_l d_iU d_jU` over the
/// half-space, for the paired representation of the second derivatives.
pub fn mc_g2(me: &MetricExpansion, n_samples: u64, seed: u64) -> Result<MCEstimate> {
    let n = me.dim.n() as f64;
    let pairs = &me.derivs.second;
    mc_halfspace(
        me.dim,
        |p| {
            let d = p.denom();
            let s: f64 = pairs.iter().map(|(a, b)| a.quad(&p.z) * b.quad(&p.z)).sum();
            (n - 2.0).powi(2) * p.t * p.t * s * d.powf(-n)
        },
        n_samples,
        seed,
        Proposal::default(),
    )
}

/// Monte Carlo of `sum_i 1/12 (R_{nini,nn} + 8 (S^2)_ii) int t^4 (d_i U)^2`.
pub fn mc_g3(me: &MetricExpansion, n_samples: u64, seed: u64) -> Result<MCEstimate> {
    let n = me.dim.n() as f64;
    let m = me.dim.m();
    let s2 = me.s.matmul(&me.s);
    let c: Vec<f64> = (0..m)
        .map(|i| (me.derivs.normal_second[(i, i)] + 8.0 * s2[(i, i)]) / 12.0)
        .collect();
    mc_halfspace(
        me.dim,
        |p| {
            let d = p.denom();
            let s: f64 = c.iter().zip(&p.z).map(|(ci, zi)| ci * zi * zi).sum();
            (n - 2.0).powi(2) * p.t.powi(4) * s * d.powf(-n)
        },
        n_samples,
        seed,
        Proposal::default(),
    )
}

/// Options for assembling `phi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhiOptions {
    pub weyl_denominator: WeylDenominator,
    pub rii_convention: RiiConvention,
    /// Relative slack for the sign check, against the sum of `|summand|`.
    pub sign_tol: f64,
}

impl Default for PhiOptions {
    fn default() -> Self {
        Self {
            weyl_denominator: WeylDenominator::Proof,
            rii_convention: RiiConvention::Summed,
            sign_tol: 1e-10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhiSummands {
    /// `1/2 int v Δv`.
    pub half_pairing: f64,
    pub rnnnn_term: f64,
    pub weyl_term: f64,
}

impl PhiSummands {
    pub fn total(&self) -> f64 {
        self.half_pairing + self.rnnnn_term + self.weyl_term
    }
}

/// Everything the reduced functional needs from one boundary point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedCoefficients {
    pub label: String,
    pub n: usize,
    pub gamma: f64,
    pub a: f64,
    pub b: f64,
    pub i2: f64,
    pub i4: f64,
    pub g2: f64,
    pub g3: f64,
    /// `int v Δv`.
    pub pairing: f64,
    pub phi: f64,
    pub summands: PhiSummands,
    pub slope_residual: Option<f64>,
    pub slope_identity: Option<f64>,
}

/// Assembles `phi` from its three summands without any solver input.
pub fn assemble_phi(
    dim: Dim,
    pairing: f64,
    rnnnn: f64,
    wbar2: f64,
    i2: f64,
    i4: f64,
    opts: &PhiOptions,
) -> PhiSummands {
    PhiSummands {
        half_pairing: 0.5 * pairing,
        rnnnn_term: rnnnn_coefficient(dim) * rnnnn * i2,
        weyl_term: weyl_coefficient(dim, opts.weyl_denominator, opts.rii_convention) * wbar2 * i4,
    }
}

/// `phi(q)` with its summands; fails when `phi` comes out positive.
pub fn compute_phi(
    cp: &CurvaturePoint,
    sol: &CorrectorSolution,
    consts: &EnergyConstants,
    opts: &PhiOptions,
) -> Result<ReducedCoefficients> {
    if sol.dim != cp.dim || consts.dim != cp.dim {
        return Err(Error::Structural(
            "corrector, constants and point disagree on n".into(),
        ));
    }
    let sigma = cp.s_norm2().sqrt();
    if (sol.scale - sigma).abs() > 1e-12 * sigma.max(1.0) {
        return Err(Error::Domain(format!(
            "corrector for {:?} does not match point {:?}",
            sol.label, cp.label
        )));
    }
    let summands = assemble_phi(
        cp.dim,
        sol.pairing(),
        cp.rnnnn,
        cp.wbar2,
        consts.i2,
        consts.i4,
        opts,
    );
    let phi = summands.total();
    let mag = summands.half_pairing.abs() + summands.rnnnn_term.abs() + summands.weyl_term.abs();
    if phi > opts.sign_tol * mag {
        return Err(Error::Invariant(format!(
            "phi = {phi:e} > 0 at {:?} (pairing term {:e}, Rnnnn term {:e}, Weyl term {:e})",
            cp.label, summands.half_pairing, summands.rnnnn_term, summands.weyl_term
        )));
    }
    let g = compute_g_terms(cp, consts.i2);
    Ok(ReducedCoefficients {
        label: cp.label.clone(),
        n: cp.dim.n(),
        gamma: cp.gamma,
        a: consts.a.value,
        b: consts.b.value,
        i2: consts.i2,
        i4: consts.i4,
        g2: g.g2,
        g3: g.g3,
        pairing: sol.pairing(),
        phi,
        summands,
        slope_residual: None,
        slope_identity: None,
    })
}

/// Smooth radial cutoff: 1 on `[0, R/2]`, 0 on `[R, inf)`, built from
/// `exp(-1/x)` so it is `C^inf`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cutoff {
    pub radius: f64,
}

impl Default for Cutoff {
    fn default() -> Self {
        Self { radius: 1.0 }
    }
}

impl Cutoff {
    /// `(χ, χ', χ'')` at distance `s`.
    pub fn eval(&self, s: f64) -> (f64, f64, f64) {
        let half = 0.5 * self.radius;
        if s <= half {
            return (1.0, 0.0, 0.0);
        }
        if s >= self.radius {
            return (0.0, 0.0, 0.0);
        }
        let u = (s - half) / half;
        let v = 1.0 - u;
        // h(u) = 1/(1 + exp(e)), e = 1/u - 1/v, and χ = 1 - h
        let e = 1.0 / u - 1.0 / v;
        let h = if e > 0.0 {
            (-e).exp() / (1.0 + (-e).exp())
        } else {
            1.0 / (1.0 + e.exp())
        };
        if e.abs() > 600.0 {
            return (1.0 - h, 0.0, 0.0);
        }
        let hh = 0.25 / (0.5 * e).cosh().powi(2); // h (1 - h)
        let e1 = -1.0 / (u * u) - 1.0 / (v * v);
        let e2 = 2.0 / (u * u * u) - 2.0 / (v * v * v);
        let h1 = -hh * e1;
        let h2 = -(h1 * (1.0 - 2.0 * h) * e1 + hh * e2);
        let k = 1.0 / half;
        (1.0 - h, -h1 * k, -h2 * k * k)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlopeStatus {
    Pass,
    Fail,
    /// Nothing to measure (no curvature source).
    Degenerate,
}

/// One δ-ladder with a log-log fit of `|value|` against δ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeExperiment {
    pub deltas: Vec<f64>,
    pub values: Vec<f64>,
    /// One-sigma errors of `values` (zero for deterministic quadrature).
    pub errors: Vec<f64>,
    pub fit: Option<LinearFit>,
    pub status: SlopeStatus,
}

impl SlopeExperiment {
    fn fitted(deltas: Vec<f64>, values: Vec<f64>, errors: Vec<f64>) -> Result<Self> {
        let lx: Vec<f64> = deltas.iter().map(|d| d.ln()).collect();
        if values.iter().any(|v| !(v.abs() > 0.0) || !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "slope ladder has zero or non-finite entries: {values:?}"
            )));
        }
        let ly: Vec<f64> = values.iter().map(|v| v.abs().ln()).collect();
        let sig: Vec<f64> = values
            .iter()
            .zip(&errors)
            .map(|(v, e)| e / v.abs())
            .collect();
        let weighted = sig.iter().all(|s| *s > 0.0);
        let fit = linear_fit(&lx, &ly, if weighted { Some(&sig) } else { None })?;
        Ok(Self {
            deltas,
            values,
            errors,
            fit: Some(fit),
            status: SlopeStatus::Pass,
        })
    }

    fn degenerate(deltas: Vec<f64>, values: Vec<f64>) -> Self {
        let errors = vec![0.0; values.len()];
        Self {
            deltas,
            values,
            errors,
            fit: None,
            status: SlopeStatus::Degenerate,
        }
    }

    pub fn slope(&self) -> Option<f64> {
        self.fit.map(|f| f.slope)
    }
}

/// At least five points spanning at least 1.5 decades.
pub fn validate_ladder(deltas: &[f64]) -> Result<()> {
    if deltas.len() < 5 || deltas.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
        return Err(Error::Domain(format!(
            "δ-ladder needs >= 5 positive points, got {deltas:?}"
        )));
    }
    let lo = deltas.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = deltas.iter().cloned().fold(0.0, f64::max);
    if (hi / lo).log10() < 1.5 - 1e-12 {
        return Err(Error::Domain(format!(
            "δ-ladder spans {:.3} decades, need 1.5",
            (hi / lo).log10()
        )));
    }
    Ok(())
}

/// Slope floor of the energy-identity experiment.
pub const IDENTITY_MIN_SLOPE: f64 = 4.5;
/// No part of the two-sigma band may fall below this.
pub const IDENTITY_BAND_FLOOR: f64 = 4.2;
pub const RESIDUAL_SLOPE_RANGE: (f64, f64) = (2.7, 3.3);
/// Accepted slope range when the corrector is left out.
pub const NO_CORRECTOR_SLOPE_RANGE: (f64, f64) = (1.7, 2.3);

/// The three δ-dependent pieces at one δ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityTerms {
    pub delta: f64,
    pub a4: f64,
    pub l2: f64,
    pub l3: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityExperiment {
    pub terms: Vec<IdentityTerms>,
    pub pairing: f64,
    /// `A4 + L2 + L3 - δ^4 pairing/2` against δ.
    pub remainder: SlopeExperiment,
    /// δ^4 coefficient of `A4 + L2 + L3` from a quadratic fit in δ of the
    /// ladder values divided by δ^4.
    pub c4: f64,
    /// `|c4 - pairing/2| / |pairing/2|`.
    pub c4_rel_error: f64,
}

/// Angular factors `(α, β)` of `int_S θ^T T ∇_z v` with `∇_z v` written
/// through `ψ_r` and `ψ/r`: `α ψ_r + β ψ/r`.
fn tangential_factors(t: &Matrix, sh: &Matrix) -> (f64, f64) {
    let a = quad_moment_2(t, sh);
    let b = quad_moment_1(&t.matmul(sh).sym_part());
    (a, 2.0 * b - 2.0 * a)
}

/// `int_S (Ŝθ)^T M(θ) (Ŝθ)` with `M_ij(θ) = R̄_ikjl θ_k θ_l`.
fn weyl_pattern_moment(rbar: &Tensor4, sh: &Matrix) -> f64 {
    let m = sh.dim();
    let mut x = Tensor4::zeros(m);
    for a in 0..m {
        for k in 0..m {
            for j in 0..m {
                for l in 0..m {
                    x[(a, k, j, l)] = (0..m).map(|i| sh[(i, a)] * rbar[(i, k, j, l)]).sum();
                }
            }
        }
    }
    let t = Tensor4::from_fn(m, |a, k, b, l| {
        (0..m).map(|j| sh[(j, b)] * x[(a, k, j, l)]).sum()
    });
    quartic_contraction(&t)
}

/// δ^4 coefficient of `y = c4 δ^4 + c5 δ^5 + c6 δ^6` by least squares on `y/δ^4`.
fn quartic_leading(deltas: &[f64], ys: &[f64]) -> f64 {
    let mut a = [[0.0; 3]; 3];
    let mut rhs = [0.0; 3];
    for (d, y) in deltas.iter().zip(ys) {
        let basis = [1.0, *d, d * d];
        let w = y / d.powi(4);
        for i in 0..3 {
            rhs[i] += basis[i] * w;
            for j in 0..3 {
                a[i][j] += basis[i] * basis[j];
            }
        }
    }
    // Gaussian elimination, 3x3
    for c in 0..3 {
        let piv = (c..3)
            .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
            .unwrap_or(c);
        a.swap(c, piv);
        rhs.swap(c, piv);
        for r in c + 1..3 {
            let f = a[r][c] / a[c][c];
            for k in c..3 {
                a[r][k] -= f * a[c][k];
            }
            rhs[r] -= f * rhs[c];
        }
    }
    let mut x = [0.0; 3];
    for c in (0..3).rev() {
        let s: f64 = (c + 1..3).map(|k| a[c][k] * x[k]).sum();
        x[c] = (rhs[c] - s) / a[c][c];
    }
    x[0]
}

/// Energy-identity experiment: the boundary term `A4`, the metric cross
/// term `L2` and the corrector energy `L3`, each reduced to `(t, r)` and
/// integrated over the corrector grid, truncated at δ^6.
pub fn verify_a4_l2_l3_identity(
    cp: &CurvaturePoint,
    sol: &CorrectorSolution,
    me: &MetricExpansion,
    deltas: &[f64],
    cutoff: Cutoff,
) -> Result<IdentityExperiment> {
    validate_ladder(deltas)?;
    let dim = cp.dim;
    let n = dim.n() as f64;
    let c = n - 2.0;
    let g = sol.profile.grid();
    let reach = g.t_max.min(g.r_max);
    let dmin = deltas.iter().cloned().fold(f64::INFINITY, f64::min);
    if cutoff.radius / dmin > reach {
        return Err(Error::Domain(format!(
            "cutoff support |x| < {:.3} leaves the corrector grid (reach {reach})",
            cutoff.radius / dmin
        )));
    }
    let pairing = sol.pairing();
    if sol.scale == 0.0 {
        let terms: Vec<IdentityTerms> = deltas
            .iter()
            .map(|&delta| IdentityTerms {
                delta,
                a4: 0.0,
                l2: 0.0,
                l3: 0.0,
            })
            .collect();
        return Ok(IdentityExperiment {
            terms,
            pairing,
            remainder: SlopeExperiment::degenerate(deltas.to_vec(), vec![0.0; deltas.len()]),
            c4: 0.0,
            c4_rel_error: 0.0,
        });
    }
    let sigma = sol.scale;
    let sh = &sol.pattern.s;
    let sh2 = sh.matmul(sh);
    let y2 = quad_moment_2(sh, sh);
    let y3 = quad_moment_3(sh, sh, sh);
    let q_s_s2 = quad_moment_2(sh, &sh2);
    let q_s3 = quad_moment_1(&sh2.matmul(sh).sym_part());
    let j1 = weyl_pattern_moment(&me.rbar, sh);
    let mu = 2.0 * (n - 1.0);
    let (al_s, be_s) = tangential_factors(sh, sh);
    let (al_t, be_t) = tangential_factors(&me.derivs.normal, sh);
    let c4m = me.derivs.normal_second.add(&me.s.matmul(&me.s).scaled(8.0));
    let (al_c, be_c) = tangential_factors(&c4m, sh);
    let (mut al_p, mut be_p) = (0.0, 0.0);
    for (a, b) in &me.derivs.second {
        let q3 = quad_moment_3(sh, a, b);
        al_p += 2.0 * q3;
        be_p += 2.0 * quad_moment_2(&a.matmul(sh).sym_part(), b)
            + 2.0 * quad_moment_2(&b.matmul(sh).sym_part(), a)
            - 4.0 * q3;
    }
    let p_exp = 2.0 * (n - 1.0) / (n - 2.0);

    // profile samples at the Gauss points, shared by the whole ladder
    let mut pts: Vec<(f64, f64, f64, ProfileSample)> = Vec::new();
    sol.profile
        .for_each_gauss_point(|t, r, w| pts.push((t, r, w * r.powf(c), sol.profile.eval(t, r))));
    let mut bpts: Vec<(f64, f64, f64)> = Vec::new();
    sol.profile.for_each_boundary_gauss_point(|r, w| {
        bpts.push((r, w * r.powf(c), sol.profile.value(0.0, r)))
    });

    let mut terms = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let (mut l2_4, mut l2_5, mut l2_6, mut l3_4, mut l3_6) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (t, r, w, s) in &pts {
            let (t, r, w) = (*t, *r, *w);
            let rho = (t * t + r * r).sqrt();
            let (chi, dchi, _) = cutoff.eval(delta * rho);
            if chi == 0.0 && dchi == 0.0 {
                continue;
            }
            let (cr, ct) = if rho > 0.0 {
                (delta * dchi * r / rho, delta * dchi * t / rho)
            } else {
                (0.0, 0.0)
            };
            let d = (1.0 + t).powi(2) + r * r;
            let u = d.powf(-(n - 2.0) / 2.0);
            let ur = -(n - 2.0) * r * d.powf(-n / 2.0);
            let tu_r = ur * chi + u * cr;
            let tp = s.psi * chi;
            let tp_r = s.psi_r * chi + s.psi * cr;
            let tp_t = s.psi_t * chi + s.psi * ct;
            let pr = tp / r;
            let t2 = t * t;
            l2_4 += w * t2 * tu_r * sigma * (al_s * tp_r + be_s * pr);
            l2_5 += w * t2 * t / 3.0 * tu_r * (al_t * tp_r + be_t * pr);
            l2_6 += w
                * tu_r
                * (t2 / 3.0 * sigma * r * tp * j1
                    + 0.5 * t2 * r * r * (al_p * tp_r + be_p * pr)
                    + t2 * t2 / 12.0 * (al_c * tp_r + be_c * pr));
            l3_4 += 0.5 * w * y2 * (tp_t * tp_t + tp_r * tp_r + mu * pr * pr);
            let g = tp_r - 2.0 * pr;
            l3_6 += 0.5
                * w
                * (4.0 / 3.0 * tp * tp * j1
                    + sigma * t2 * (g * g * y3 + 4.0 * g * pr * q_s_s2 + 4.0 * pr * pr * q_s3));
        }
        let (mut a4_4, mut a4_6) = (0.0, 0.0);
        for (r, w, psi) in &bpts {
            let (chi, _, _) = cutoff.eval(delta * r);
            if chi == 0.0 {
                continue;
            }
            let cp_ = chi.powf(p_exp);
            let base = 1.0 + r * r;
            a4_4 += w * cp_ * psi * psi / base;
            a4_6 += w * cp_ * psi * psi * psi * base.powf((n - 4.0) / 2.0);
        }
        let d4 = delta.powi(4);
        let a4 = -0.5 * n * y2 * d4 * a4_4 - n / (3.0 * (n - 2.0)) * y3 * d4 * delta * delta * a4_6;
        let l2 = d4 * (l2_4 + delta * l2_5 + delta * delta * l2_6);
        let l3 = d4 * (l3_4 + delta * delta * l3_6);
        terms.push(IdentityTerms { delta, a4, l2, l3 });
    }
    let totals: Vec<f64> = terms.iter().map(|x| x.a4 + x.l2 + x.l3).collect();
    let rem: Vec<f64> = totals
        .iter()
        .zip(deltas)
        .map(|(v, d)| v - 0.5 * d.powi(4) * pairing)
        .collect();
    let c4 = quartic_leading(deltas, &totals);
    let half = 0.5 * pairing;
    let mut remainder = SlopeExperiment::fitted(deltas.to_vec(), rem, vec![0.0; deltas.len()])?;
    if let Some(fit) = remainder.fit {
        let (lo, _) = fit.band(2.0);
        remainder.status = if fit.slope >= IDENTITY_MIN_SLOPE && lo >= IDENTITY_BAND_FLOOR {
            SlopeStatus::Pass
        } else {
            SlopeStatus::Fail
        };
    }
    Ok(IdentityExperiment {
        terms,
        pairing,
        remainder,
        c4,
        c4_rel_error: (c4 - half).abs() / half.abs(),
    })
}

/// How ε follows δ in the combined residual bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum EpsilonCoupling {
    Fixed(f64),
    /// `ε = δ^3`.
    TiedCubic,
}

impl EpsilonCoupling {
    pub fn at(&self, delta: f64) -> f64 {
        match self {
            Self::Fixed(e) => *e,
            Self::TiedCubic => delta.powi(3),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualOptions {
    pub n_samples: u64,
    pub seed: u64,
    pub cutoff: Cutoff,
    pub epsilon: EpsilonCoupling,
    /// Largest accepted relative standard error of any ladder norm.
    pub max_rel_error: f64,
}

impl Default for ResidualOptions {
    fn default() -> Self {
        Self {
            n_samples: 1 << 17,
            seed: 0,
            cutoff: Cutoff::default(),
            epsilon: EpsilonCoupling::Fixed(0.0),
            max_rel_error: 0.1,
        }
    }
}

/// Per-δ norms of the two pieces whose sum the corrector cancels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CancellationRow {
    pub delta: f64,
    /// `‖Δ(δ^2 χ v)‖`.
    pub corrector_term: f64,
    /// `‖δ^2 (H_2 : ∂^2 W + d_2 · ∇W)‖`.
    pub metric_term: f64,
    /// Norm of the sum.
    pub combined: f64,
}

impl CancellationRow {
    /// The sum is at least a factor δ below the smaller piece.
    pub fn cancels(&self) -> bool {
        self.combined <= self.delta * self.corrector_term.min(self.metric_term)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualExperiment {
    /// `‖Δ_g (W + δ^2 V)‖` in `L^{2n/(n+2)}`.
    pub with_corrector: SlopeExperiment,
    /// The same without `V`.
    pub without_corrector: SlopeExperiment,
    pub cancellation: Vec<CancellationRow>,
    /// `‖U(0, ·)‖` in `L^{2(n-1)/n}` of the boundary.
    pub boundary_norm: f64,
    pub epsilon: Vec<f64>,
    /// `‖R‖ + ε δ |γ| ‖U(0, ·)‖`.
    pub combined_bound: Vec<f64>,
    pub combined_fit: Option<LinearFit>,
}

impl ResidualExperiment {
    pub fn passed(&self) -> bool {
        self.with_corrector.status != SlopeStatus::Fail
            && self.without_corrector.status != SlopeStatus::Fail
            && (self.with_corrector.status == SlopeStatus::Degenerate
                || self.cancellation.iter().all(|c| c.cancels()))
    }
}

/// Number of MC outputs per ladder point.
const RES_OUT: usize = 5;

/// `sum_ab H_ab X_ab` over the tangential block of an `n x n` matrix.
fn contract(h: &Matrix, x: &Matrix) -> f64 {
    let m = h.dim();
    let mut acc = 0.0;
    for a in 0..m {
        for b in 0..m {
            acc += h[(a, b)] * x[(a, b)];
        }
    }
    acc
}

/// Residual of the approximate solution in the rescaled metric, measured by
/// importance-sampled Monte Carlo on a δ-ladder. All ladder points share
/// the draws.
pub fn residual_slope(
    cp: &CurvaturePoint,
    sol: &CorrectorSolution,
    me: &MetricExpansion,
    deltas: &[f64],
    opts: &ResidualOptions,
) -> Result<ResidualExperiment> {
    validate_ladder(deltas)?;
    let dim = cp.dim;
    let n = dim.n();
    let m = dim.m();
    let nf = n as f64;
    let q = 2.0 * nf / (nf + 2.0);
    let k = deltas.len();
    let cutoff = opts.cutoff;
    let integrand = |p: &HalfSpacePoint, out: &mut [f64]| {
        let mut x = p.z.clone();
        x.push(p.t);
        let rho = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rho == 0.0 {
            return;
        }
        let u = eval_u(dim, p);
        let ud = eval_u_derivs(dim, p);
        let vd = sol.eval_derivs(p);
        let lap_v = sol.laplacian(p);
        let lap_u = ud.hessian.trace();
        let dev = me.deviation(&p.z, p.t);
        let div = me.divergence(&p.z, p.t);
        let hs = [&dev.h2, &dev.h3, &dev.h4];
        let ds = [&div.d2, &div.d3, &div.d4];
        for (li, &delta) in deltas.iter().enumerate() {
            let (chi, c1, c2) = cutoff.eval(delta * rho);
            if chi == 0.0 && c1 == 0.0 {
                continue;
            }
            let gc: Vec<f64> = x.iter().map(|xa| delta * c1 * xa / rho).collect();
            let hc = Matrix::from_fn(n, |a, b| {
                let xx = x[a] * x[b] / (rho * rho);
                delta * delta * c2 * xx + delta * c1 * ((if a == b { 1.0 } else { 0.0 }) - xx) / rho
            });
            let lap_c = delta * delta * c2 + delta * c1 * (nf - 1.0) / rho;
            // w = χ f for f = U + c δ^2 v
            let parts = |f: f64, gf: &[f64], hf: &Matrix, lapf: f64| {
                let gw: Vec<f64> = (0..n).map(|a| chi * gf[a] + f * gc[a]).collect();
                let hw = Matrix::from_fn(n, |a, b| {
                    chi * hf[(a, b)] + gc[a] * gf[b] + gf[a] * gc[b] + f * hc[(a, b)]
                });
                let gdot: f64 = (0..n).map(|a| gc[a] * gf[a]).sum();
                let lapw = chi * lapf + 2.0 * gdot + f * lap_c;
                (gw, hw, lapw)
            };
            let metric = |gw: &[f64], hw: &Matrix, from: usize| -> f64 {
                let mut acc = 0.0;
                let mut dk = delta.powi(2);
                for kk in 0..3 {
                    if kk >= from {
                        let dv: f64 = (0..m).map(|a| ds[kk][a] * gw[a]).sum();
                        acc += dk * (contract(hs[kk], hw) + dv);
                    }
                    dk *= delta;
                }
                acc
            };
            let d2 = delta * delta;
            let fv = u + d2 * vd.v;
            let gfv: Vec<f64> = (0..n).map(|a| ud.grad[a] + d2 * vd.grad[a]).collect();
            let hfv = ud.hessian.add(&vd.hessian.scaled(d2));
            let (gw, hw, lapw) = parts(fv, &gfv, &hfv, lap_u + d2 * lap_v);
            let r_v = lapw + metric(&gw, &hw, 0);
            let (gw0, hw0, lapw0) = parts(u, &ud.grad, &ud.hessian, lap_u);
            let r_0 = lapw0 + metric(&gw0, &hw0, 0);
            // Δ(δ^2 χ v) and the δ^2 metric term acting on χU
            let (_, _, lapcv) = parts(vd.v, &vd.grad, &vd.hessian, lap_v);
            let a_term = d2 * lapcv;
            let dv2: f64 = (0..m).map(|a| ds[0][a] * gw0[a]).sum();
            let b_term = d2 * (contract(hs[0], &hw0) + dv2);
            let o = &mut out[li * RES_OUT..(li + 1) * RES_OUT];
            o[0] = r_v.abs().powf(q);
            o[1] = r_0.abs().powf(q);
            o[2] = a_term.abs().powf(q);
            o[3] = b_term.abs().powf(q);
            o[4] = (a_term + b_term).abs().powf(q);
        }
    };
    let est = mc_halfspace_multi(
        dim,
        integrand,
        RES_OUT * k,
        opts.n_samples,
        opts.seed,
        Proposal::default(),
    )?;
    let norm = |e: &MCEstimate| -> (f64, f64) {
        let mean = e.mean.max(0.0);
        if mean == 0.0 {
            return (0.0, 0.0);
        }
        let v = mean.powf(1.0 / q);
        (v, v * e.std_error / (q * mean))
    };
    let mut with_v = (Vec::new(), Vec::new());
    let mut without_v = (Vec::new(), Vec::new());
    let mut cancellation = Vec::new();
    for (li, &delta) in deltas.iter().enumerate() {
        let e = &est[li * RES_OUT..(li + 1) * RES_OUT];
        let (a, sa) = norm(&e[0]);
        let (b, sb) = norm(&e[1]);
        with_v.0.push(a);
        with_v.1.push(sa);
        without_v.0.push(b);
        without_v.1.push(sb);
        cancellation.push(CancellationRow {
            delta,
            corrector_term: norm(&e[2]).0,
            metric_term: norm(&e[3]).0,
            combined: norm(&e[4]).0,
        });
    }
    let omega = sphere_area(m - 1);
    let qb = 2.0 * (nf - 1.0) / nf;
    let boundary_norm =
        (omega * boundary_radial(dim, 0, (nf - 2.0) * qb / 2.0, BOUNDARY_PANELS)).powf(1.0 / qb);
    let epsilon: Vec<f64> = deltas.iter().map(|d| opts.epsilon.at(*d)).collect();
    let combined_bound: Vec<f64> = (0..k)
        .map(|i| with_v.0[i] + epsilon[i] * deltas[i] * cp.gamma.abs() * boundary_norm)
        .collect();

    let degenerate = cp.s_norm2() == 0.0;
    let check = |vals: &[f64], errs: &[f64]| -> Result<()> {
        for (v, e) in vals.iter().zip(errs) {
            if *v > 0.0 && e / v > opts.max_rel_error {
                return Err(Error::Budget {
                    msg: format!(
                        "residual norm relative standard error {:.3} above {}",
                        e / v,
                        opts.max_rel_error
                    ),
                    best: *v,
                    error: *e,
                });
            }
        }
        Ok(())
    };
    let (with_corrector, without_corrector, combined_fit) = if degenerate {
        (
            SlopeExperiment::degenerate(deltas.to_vec(), with_v.0),
            SlopeExperiment::degenerate(deltas.to_vec(), without_v.0),
            None,
        )
    } else {
        check(&with_v.0, &with_v.1)?;
        check(&without_v.0, &without_v.1)?;
        let mut a = SlopeExperiment::fitted(deltas.to_vec(), with_v.0, with_v.1)?;
        let mut b = SlopeExperiment::fitted(deltas.to_vec(), without_v.0, without_v.1)?;
        let inside = |s: Option<f64>, (lo, hi): (f64, f64)| s.is_some_and(|s| s >= lo && s <= hi);
        a.status = if inside(a.slope(), RESIDUAL_SLOPE_RANGE) {
            SlopeStatus::Pass
        } else {
            SlopeStatus::Fail
        };
        b.status = if inside(b.slope(), NO_CORRECTOR_SLOPE_RANGE) {
            SlopeStatus::Pass
        } else {
            SlopeStatus::Fail
        };
        let lx: Vec<f64> = deltas.iter().map(|d| d.ln()).collect();
        let ly: Vec<f64> = combined_bound.iter().map(|v| v.ln()).collect();
        (a, b, linear_fit(&lx, &ly, None).ok())
    };
    Ok(ResidualExperiment {
        with_corrector,
        without_corrector,
        cancellation,
        boundary_norm,
        epsilon,
        combined_bound,
        combined_fit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cutoff_is_a_smooth_step() {
        let c = Cutoff { radius: 2.0 };
        assert_eq!(c.eval(0.5), (1.0, 0.0, 0.0));
        assert_eq!(c.eval(2.5), (0.0, 0.0, 0.0));
        // derivatives against central differences
        for s in [1.1, 1.3, 1.5, 1.7, 1.9] {
            let h = 1e-5;
            let (f, f1, f2) = c.eval(s);
            let (fp, f1p, _) = c.eval(s + h);
            let (fm, f1m, _) = c.eval(s - h);
            assert!((f1 - (fp - fm) / (2.0 * h)).abs() < 1e-6, "s = {s}");
            assert!((f2 - (f1p - f1m) / (2.0 * h)).abs() < 1e-5, "s = {s}");
            assert!((0.0..=1.0).contains(&f));
        }
        let (mid, _, _) = c.eval(1.5);
        assert!((mid - 0.5).abs() < 1e-14);
    }

    #[test]
    fn quartic_leading_recovers_polynomial() {
        let ds = [0.01, 0.02, 0.05, 0.1, 0.2, 0.3];
        let ys: Vec<f64> = ds
            .iter()
            .map(|d: &f64| 2.0 * d.powi(4) - 3.0 * d.powi(5) + 0.5 * d.powi(6))
            .collect();
        assert!((quartic_leading(&ds, &ys) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn ladder_rules() {
        assert!(validate_ladder(&[0.01, 0.02, 0.05, 0.1, 0.32]).is_ok());
        assert!(validate_ladder(&[0.01, 0.02, 0.05, 0.1, 0.3]).is_err());
        assert!(validate_ladder(&[0.01, 0.02, 0.05, 0.1]).is_err());
        assert!(validate_ladder(&[0.1, 0.2, 0.3, 0.5, 1.0]).is_err());
    }
}
