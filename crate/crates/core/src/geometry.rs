//! Curvature data at a boundary point in conformal Fermi coordinates.
//!
//! Tangential indices run over `0..m` with `m = n - 1`. The boundary
//! curvature `Rbar[(a,b,c,d)]` stores `R̄_{abcd}` densely; the normal
//! curvature block is the symmetric matrix `S_ij = R_{ninj}`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bubble::HalfSpacePoint;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Tensor4};

/// Manifold dimension. The construction needs `n >= 11`; an exploratory
/// mode admits `n >= 7` and carries a flag so reports can warn about it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dim {
    n: usize,
    exploratory: bool,
}

impl Dim {
    pub const MIN: usize = 11;
    pub const MIN_EXPLORATORY: usize = 7;

    pub fn new(n: usize) -> Result<Self> {
        if n < Self::MIN {
            return Err(Error::Domain(format!(
                "dimension {n} is below {}; enable low-dimension exploration to go down to {}",
                Self::MIN,
                Self::MIN_EXPLORATORY
            )));
        }
        Ok(Self {
            n,
            exploratory: false,
        })
    }

    /// Accepts `7 <= n`. For `n < 11` the returned value is marked exploratory.
    pub fn exploratory(n: usize) -> Result<Self> {
        if n < Self::MIN_EXPLORATORY {
            return Err(Error::Domain(format!(
                "dimension {n} is below {}",
                Self::MIN_EXPLORATORY
            )));
        }
        Ok(Self {
            n,
            exploratory: n < Self::MIN,
        })
    }

    pub fn with_policy(n: usize, allow_low_dim: bool) -> Result<Self> {
        if allow_low_dim {
            Self::exploratory(n)
        } else {
            Self::new(n)
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of tangential coordinates, `n - 1`.
    pub fn m(&self) -> usize {
        self.n - 1
    }

    pub fn is_exploratory(&self) -> bool {
        self.exploratory
    }
}

/// How the second derivative of the boundary scalar curvature is read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiiConvention {
    /// `sum_i d_ii R̄ = -|W̄|^2/6`.
    #[default]
    Summed,
    /// Each `d_ii R̄ = -|W̄|^2/6`, so the sum is `-(n-1)|W̄|^2/6`.
    PerIndex,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvaturePoint {
    pub dim: Dim,
    pub rbar: Tensor4,
    pub s: Matrix,
    /// `R_{ninj,ij}`.
    pub d2: f64,
    /// `R_{nn,nn}`.
    pub rnnnn: f64,
    /// `|W̄|^2`.
    pub wbar2: f64,
    pub gamma: f64,
    pub label: String,
}

impl CurvaturePoint {
    /// All curvature zero.
    pub fn flat(dim: Dim, gamma: f64, label: impl Into<String>) -> Self {
        let m = dim.m();
        Self {
            dim,
            rbar: Tensor4::zeros(m),
            s: Matrix::zeros(m),
            d2: 0.0,
            rnnnn: 0.0,
            wbar2: 0.0,
            gamma,
            label: label.into(),
        }
    }

    /// `sum_{i,s} S_is^2`.
    pub fn s_norm2(&self) -> f64 {
        self.s.frob2()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let m = self.dim.m();
        if self.rbar.dim() != m || self.s.dim() != m {
            return Err(Error::Structural(format!(
                "point {:?}: Rbar is {}^4 and S is {}x{}, expected {m} for n = {}",
                self.label,
                self.rbar.dim(),
                self.s.dim(),
                self.s.dim(),
                self.dim.n()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct IdentityCheck {
    pub name: String,
    /// Largest absolute violation.
    pub absolute: f64,
    /// Violation divided by the size of the data it is computed from.
    pub relative: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ValidationReport {
    pub label: String,
    pub tol: f64,
    pub checks: Vec<IdentityCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&IdentityCheck> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    /// Converts a failing report into a validation error naming each identity.
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            return Ok(self);
        }
        let names: Vec<String> = self
            .failures()
            .iter()
            .map(|c| format!("{} (relative {:.3e})", c.name, c.relative))
            .collect();
        Err(Error::Validation(format!(
            "point {:?}: {}",
            self.label,
            names.join(", ")
        )))
    }
}

fn push_check(checks: &mut Vec<IdentityCheck>, name: &str, absolute: f64, scale: f64, tol: f64) {
    let relative = if scale > 0.0 {
        absolute / scale
    } else {
        absolute
    };
    checks.push(IdentityCheck {
        name: name.to_string(),
        absolute,
        relative,
        passed: relative <= tol && absolute.is_finite(),
    });
}

/// Checks the algebraic identities of the curvature data. Shape mismatch is
/// an error; identity violations are recorded in the report.
pub fn validate_curvature(cp: &CurvaturePoint, tol_sym: f64) -> Result<ValidationReport> {
    cp.check_shapes()?;
    let m = cp.dim.m();
    let r = &cp.rbar;
    let rscale = r.max_abs();
    let (mut anti1, mut anti2, mut pair, mut bianchi) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for a in 0..m {
        for b in 0..m {
            for c in 0..m {
                for d in 0..m {
                    let v = r[(a, b, c, d)];
                    anti1 = anti1.max((v + r[(b, a, c, d)]).abs());
                    anti2 = anti2.max((v + r[(a, b, d, c)]).abs());
                    pair = pair.max((v - r[(c, d, a, b)]).abs());
                    bianchi = bianchi.max((v + r[(a, c, d, b)] + r[(a, d, b, c)]).abs());
                }
            }
        }
    }
    let mut ricci = 0.0f64;
    for i in 0..m {
        for j in 0..m {
            let tr: f64 = (0..m).map(|k| r[(i, k, k, j)]).sum();
            ricci = ricci.max(tr.abs());
        }
    }
    let sscale = cp.s.max_abs();
    let s2 = cp.s_norm2();
    let w = weyl_part(r)?;
    let w2 = w.norm2();

    let mut checks = Vec::new();
    push_check(
        &mut checks,
        "Rbar antisymmetric in first pair",
        anti1,
        rscale,
        tol_sym,
    );
    push_check(
        &mut checks,
        "Rbar antisymmetric in second pair",
        anti2,
        rscale,
        tol_sym,
    );
    push_check(&mut checks, "Rbar pair symmetry", pair, rscale, tol_sym);
    push_check(
        &mut checks,
        "Rbar first Bianchi identity",
        bianchi,
        rscale,
        tol_sym,
    );
    push_check(
        &mut checks,
        "Rbar Ricci trace vanishes",
        ricci,
        rscale,
        tol_sym,
    );
    push_check(
        &mut checks,
        "S symmetric",
        cp.s.asymmetry(),
        sscale,
        tol_sym,
    );
    push_check(
        &mut checks,
        "S traceless",
        cp.s.trace().abs(),
        sscale,
        tol_sym,
    );
    push_check(
        &mut checks,
        "Rnnnn = -2 |S|^2",
        (cp.rnnnn + 2.0 * s2).abs(),
        cp.rnnnn.abs().max(2.0 * s2),
        tol_sym,
    );
    push_check(
        &mut checks,
        "Wbar2 nonnegative",
        (-cp.wbar2).max(0.0),
        cp.wbar2.abs(),
        tol_sym,
    );
    push_check(
        &mut checks,
        "Wbar2 equals |Weyl(Rbar)|^2",
        (cp.wbar2 - w2).abs(),
        cp.wbar2.abs().max(w2),
        tol_sym,
    );
    let finite = [cp.d2, cp.rnnnn, cp.wbar2, cp.gamma]
        .iter()
        .all(|v| v.is_finite());
    push_check(
        &mut checks,
        "scalars finite",
        if finite { 0.0 } else { f64::INFINITY },
        1.0,
        tol_sym,
    );
    Ok(ValidationReport {
        label: cp.label.clone(),
        tol: tol_sym,
        checks,
    })
}

/// `Ric_bd = sum_a R_abad`.
pub fn ricci(r: &Tensor4) -> Matrix {
    let m = r.dim();
    Matrix::from_fn(m, |b, d| (0..m).map(|a| r[(a, b, a, d)]).sum())
}

/// Kulkarni-Nomizu product of two symmetric matrices.
pub fn kulkarni_nomizu(h: &Matrix, k: &Matrix) -> Tensor4 {
    Tensor4::from_fn(h.dim(), |a, b, c, d| {
        h[(a, c)] * k[(b, d)] + h[(b, d)] * k[(a, c)]
            - h[(a, d)] * k[(b, c)]
            - h[(b, c)] * k[(a, d)]
    })
}

/// Weyl part of an algebraic curvature tensor.
pub fn weyl_part(r: &Tensor4) -> Result<Tensor4> {
    let m = r.dim();
    if m < 3 {
        return Err(Error::Domain(format!(
            "Weyl part needs at least 3 dimensions, got {m}"
        )));
    }
    let ric = ricci(r);
    let s = ric.trace();
    let g = Matrix::identity(m);
    let mf = m as f64;
    let kn_rg = kulkarni_nomizu(&ric, &g);
    let kn_gg = kulkarni_nomizu(&g, &g);
    let c1 = 1.0 / (mf - 2.0);
    let c2 = s / (2.0 * (mf - 1.0) * (mf - 2.0));
    Ok(Tensor4::from_fn(m, |a, b, c, d| {
        r[(a, b, c, d)] - c1 * kn_rg[(a, b, c, d)] + c2 * kn_gg[(a, b, c, d)]
    }))
}

/// Projects an arbitrary rank-4 array onto the algebraic curvature tensors:
/// antisymmetrize both pairs, symmetrize under pair exchange, then remove the
/// totally antisymmetric Bianchi component.
pub fn project_curvature(p: &Tensor4) -> Tensor4 {
    let m = p.dim();
    let a = Tensor4::from_fn(m, |i, j, k, l| {
        0.25 * (p[(i, j, k, l)] - p[(j, i, k, l)] - p[(i, j, l, k)] + p[(j, i, l, k)])
    });
    let b = Tensor4::from_fn(m, |i, j, k, l| 0.5 * (a[(i, j, k, l)] + a[(k, l, i, j)]));
    Tensor4::from_fn(m, |i, j, k, l| {
        b[(i, j, k, l)] - (b[(i, j, k, l)] + b[(i, k, l, j)] + b[(i, l, j, k)]) / 3.0
    })
}

fn random_traceless_symmetric(rng: &mut ChaCha8Rng, m: usize, scale: f64) -> Matrix {
    let g = Matrix::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut s = g.sym_part();
    let tr = s.trace() / m as f64;
    for i in 0..m {
        s[(i, i)] -= tr;
    }
    s.scaled(scale)
}

/// Deterministic synthetic curvature point satisfying every identity.
pub fn generate_sample(dim: Dim, seed: u64, scale: f64) -> Result<CurvaturePoint> {
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(Error::Domain(format!(
            "scale must be nonnegative and finite, got {scale}"
        )));
    }
    let m = dim.m();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw = Tensor4::zeros(m);
    for v in raw.raw_mut() {
        *v = rng.sample(StandardNormal);
    }
    let rbar = weyl_part(&project_curvature(&raw))?.scaled(scale);
    let s = random_traceless_symmetric(&mut rng, m, scale);
    let d2 = scale * rng.sample::<f64, _>(StandardNormal);
    let gamma = rng.random_range(0.5..1.5);
    let wbar2 = weyl_part(&rbar)?.norm2();
    let rnnnn = -2.0 * s.frob2();
    Ok(CurvaturePoint {
        dim,
        rbar,
        s,
        d2,
        rnnnn,
        wbar2,
        gamma,
        label: format!("s{seed:04}"),
    })
}

/// The summed second derivative of the boundary scalar curvature implied by
/// the Weyl norm, under the chosen reading of the repeated index.
pub fn weyl_norm_consistency(cp: &CurvaturePoint, convention: RiiConvention) -> f64 {
    match convention {
        RiiConvention::Summed => -cp.wbar2 / 6.0,
        RiiConvention::PerIndex => -(cp.dim.m() as f64) * cp.wbar2 / 6.0,
    }
}

/// Derivative tensors entering the metric expansion beyond the curvature
/// values themselves. Derivatives of `R̄` are not carried (taken as zero).
#[derive(Clone, Debug, PartialEq)]
pub struct DerivativeTensors {
    /// `R_{ninj,k}` for each tangential `k`.
    pub first: Vec<Matrix>,
    /// `R_{ninj,n}`.
    pub normal: Matrix,
    /// `R_{ninj,kl} = sum_r (A_r)_ij (B_r)_kl + (B_r)_ij (A_r)_kl`.
    pub second: Vec<(Matrix, Matrix)>,
    /// `R_{ninj,nk}` for each tangential `k`.
    pub normal_mixed: Vec<Matrix>,
    /// `R_{ninj,nn}`; its trace is `R_{nn,nn}`.
    pub normal_second: Matrix,
}

impl DerivativeTensors {
    /// Zero derivatives except `R_{ninj,nn} = (R_{nn,nn}/(n-1)) I`, which is
    /// the isotropic choice compatible with the trace identity.
    pub fn minimal(cp: &CurvaturePoint) -> Self {
        let m = cp.dim.m();
        Self {
            first: vec![Matrix::zeros(m); m],
            normal: Matrix::zeros(m),
            second: Vec::new(),
            normal_mixed: vec![Matrix::zeros(m); m],
            normal_second: Matrix::identity(m).scaled(cp.rnnnn / m as f64),
        }
    }

    /// Random derivative tensors with every trace the Fermi gauge forces to
    /// vanish removed, `sum_ij R_{ninj,ij} = D2`, and trace of `R_{ninj,nn}`
    /// equal to `R_{nn,nn}`.
    pub fn synthetic(cp: &CurvaturePoint, seed: u64, scale: f64) -> Self {
        let m = cp.dim.m();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_de71_a7e5_0001);
        let first = (0..m)
            .map(|_| random_traceless_symmetric(&mut rng, m, scale))
            .collect();
        let normal = random_traceless_symmetric(&mut rng, m, scale);
        let mut second: Vec<(Matrix, Matrix)> = (0..2)
            .map(|_| {
                let a = random_traceless_symmetric(&mut rng, m, 1.0);
                let noise = random_traceless_symmetric(&mut rng, m, 0.5);
                (a.clone(), a.add(&noise))
            })
            .collect();
        let c: f64 = second.iter().map(|(a, b)| 2.0 * a.inner(b)).sum();
        let k = if c.abs() > 0.0 { cp.d2 / c } else { 0.0 };
        for (_, b) in second.iter_mut() {
            *b = b.scaled(k);
        }
        let normal_mixed = (0..m)
            .map(|_| random_traceless_symmetric(&mut rng, m, scale))
            .collect();
        let mut normal_second = random_traceless_symmetric(&mut rng, m, scale);
        for i in 0..m {
            normal_second[(i, i)] += cp.rnnnn / m as f64;
        }
        Self {
            first,
            normal,
            second,
            normal_mixed,
            normal_second,
        }
    }

    /// `sum_ij R_{ninj,ij}` of the paired representation.
    pub fn d2(&self) -> f64 {
        self.second.iter().map(|(a, b)| 2.0 * a.inner(b)).sum()
    }

    /// `sum_kl R_{ninj,kl} z_k z_l`.
    pub fn second_quadratic(&self, z: &[f64]) -> Matrix {
        let m = z.len();
        let mut out = Matrix::zeros(m);
        for (a, b) in &self.second {
            out.add_scaled(b.quad(z), a);
            out.add_scaled(a.quad(z), b);
        }
        out
    }
}

/// Inverse-metric expansion through fourth order. Tangential block only;
/// the normal row and column are exactly those of the identity.
#[derive(Clone, Debug)]
pub struct MetricExpansion {
    pub dim: Dim,
    pub rbar: Tensor4,
    pub s: Matrix,
    pub derivs: DerivativeTensors,
    s2: Matrix,
}

/// Homogeneous pieces of `g^{ij} - delta_ij` at one point.
#[derive(Clone, Debug)]
pub struct Deviation {
    pub h2: Matrix,
    pub h3: Matrix,
    pub h4: Matrix,
}

impl Deviation {
    pub fn total(&self) -> Matrix {
        self.h2.add(&self.h3).add(&self.h4)
    }
}

/// `sum_i d/dz_i` of each homogeneous piece.
#[derive(Clone, Debug)]
pub struct DeviationDivergence {
    pub d2: Vec<f64>,
    pub d3: Vec<f64>,
    pub d4: Vec<f64>,
}

impl MetricExpansion {
    pub fn new(cp: &CurvaturePoint) -> Self {
        Self::with_derivatives(cp, DerivativeTensors::minimal(cp)).expect("minimal derivatives fit")
    }

    pub fn with_derivatives(cp: &CurvaturePoint, derivs: DerivativeTensors) -> Result<Self> {
        cp.check_shapes()?;
        let m = cp.dim.m();
        let ok = derivs.first.len() == m
            && derivs.normal_mixed.len() == m
            && derivs
                .first
                .iter()
                .chain(&derivs.normal_mixed)
                .all(|x| x.dim() == m)
            && derivs.normal.dim() == m
            && derivs.normal_second.dim() == m
            && derivs
                .second
                .iter()
                .all(|(a, b)| a.dim() == m && b.dim() == m);
        if !ok {
            return Err(Error::Structural(
                "derivative tensors do not match the dimension".into(),
            ));
        }
        Ok(Self {
            dim: cp.dim,
            rbar: cp.rbar.clone(),
            s: cp.s.clone(),
            s2: cp.s.matmul(&cp.s),
            derivs,
        })
    }

    /// `M_ij = sum_kl R̄_ikjl z_k z_l`.
    pub fn tangential_quadratic(&self, z: &[f64]) -> Matrix {
        let m = self.dim.m();
        let r = &self.rbar;
        let mut out = Matrix::zeros(m);
        for i in 0..m {
            for j in 0..=i {
                let mut acc = 0.0;
                for k in 0..m {
                    if z[k] == 0.0 {
                        continue;
                    }
                    let mut inner = 0.0;
                    for l in 0..m {
                        inner += r[(i, k, j, l)] * z[l];
                    }
                    acc += z[k] * inner;
                }
                out[(i, j)] = acc;
                out[(j, i)] = acc;
            }
        }
        out
    }

    /// `d M / d z_p` for each `p`.
    fn tangential_quadratic_grad(&self, z: &[f64]) -> Vec<Matrix> {
        let m = self.dim.m();
        let r = &self.rbar;
        (0..m)
            .map(|p| {
                Matrix::from_fn(m, |i, j| {
                    (0..m)
                        .map(|l| (r[(i, p, j, l)] + r[(i, l, j, p)]) * z[l])
                        .sum()
                })
            })
            .collect()
    }

    pub fn deviation(&self, z: &[f64], t: f64) -> Deviation {
        let m = self.dim.m();
        let mm = self.tangential_quadratic(z);
        let t2 = t * t;
        let mut h2 = mm.scaled(1.0 / 3.0);
        h2.add_scaled(t2, &self.s);

        let mut h3 = Matrix::zeros(m);
        for (k, dk) in self.derivs.first.iter().enumerate() {
            if z[k] != 0.0 {
                h3.add_scaled(z[k] * t2, dk);
            }
        }
        h3.add_scaled(t2 * t / 3.0, &self.derivs.normal);

        let ms = mm.matmul(&self.s);
        let mut h4 = mm.matmul(&mm).scaled(1.0 / 15.0);
        h4.add_scaled(0.5 * t2, &self.derivs.second_quadratic(z));
        h4.add_scaled(t2 / 6.0, &ms);
        h4.add_scaled(t2 / 6.0, &ms.transpose());
        for (k, dk) in self.derivs.normal_mixed.iter().enumerate() {
            if z[k] != 0.0 {
                h4.add_scaled(z[k] * t2 * t / 3.0, dk);
            }
        }
        let t4 = t2 * t2 / 12.0;
        h4.add_scaled(t4, &self.derivs.normal_second);
        h4.add_scaled(8.0 * t4, &self.s2);
        Deviation { h2, h3, h4 }
    }

    /// Analytic `sum_i d_i H_ij` of each homogeneous piece.
    pub fn divergence(&self, z: &[f64], t: f64) -> DeviationDivergence {
        let m = self.dim.m();
        let mm = self.tangential_quadratic(z);
        let dm = self.tangential_quadratic_grad(z);
        let t2 = t * t;
        // sum_i d_i M_ij
        let div_m: Vec<f64> = (0..m)
            .map(|j| (0..m).map(|i| dm[i][(i, j)]).sum())
            .collect();
        let d2: Vec<f64> = div_m.iter().map(|v| v / 3.0).collect();

        let d3: Vec<f64> = (0..m)
            .map(|j| (0..m).map(|i| self.derivs.first[i][(i, j)]).sum::<f64>() * t2)
            .collect();

        // sum_i d_i (X Y)_ij = sum_{i,s} (d_i X_is) Y_sj + X_is d_i Y_sj
        let div_prod =
            |x: &Matrix, dx: Option<&[Matrix]>, y: &Matrix, dy: Option<&[Matrix]>| -> Vec<f64> {
                (0..m)
                    .map(|j| {
                        let mut acc = 0.0;
                        for i in 0..m {
                            for s in 0..m {
                                if let Some(dx) = dx {
                                    acc += dx[i][(i, s)] * y[(s, j)];
                                }
                                if let Some(dy) = dy {
                                    acc += x[(i, s)] * dy[i][(s, j)];
                                }
                            }
                        }
                        acc
                    })
                    .collect()
            };
        let mm2 = div_prod(&mm, Some(&dm), &mm, Some(&dm));
        let ms = div_prod(&mm, Some(&dm), &self.s, None);
        let sm = div_prod(&self.s, None, &mm, Some(&dm));
        let mut quad = vec![0.0; m];
        for (a, b) in &self.derivs.second {
            let abz = a.matvec(&b.matvec(z));
            let baz = b.matvec(&a.matvec(z));
            for j in 0..m {
                quad[j] += abz[j] + baz[j];
            }
        }
        let nk: Vec<f64> = (0..m)
            .map(|j| (0..m).map(|i| self.derivs.normal_mixed[i][(i, j)]).sum())
            .collect();
        let d4 = (0..m)
            .map(|j| mm2[j] / 15.0 + (quad[j] + (ms[j] + sm[j]) / 6.0) * t2 + nk[j] * t2 * t / 3.0)
            .collect();
        DeviationDivergence { d2, d3, d4 }
    }
}

/// Full `n x n` truncated inverse metric at `y`, with positive definiteness checked.
pub fn eval_metric_inverse(me: &MetricExpansion, y: &HalfSpacePoint) -> Result<Matrix> {
    let n = me.dim.n();
    let m = me.dim.m();
    if y.z.len() != m {
        return Err(Error::Structural(format!(
            "point has {} tangential coordinates, expected {m}",
            y.z.len()
        )));
    }
    // averaging makes the result bit-symmetric whatever the summation order
    let h = me.deviation(&y.z, y.t).total().sym_part();
    let g = Matrix::from_fn(n, |i, j| {
        if i < m && j < m {
            h[(i, j)] + if i == j { 1.0 } else { 0.0 }
        } else if i == j {
            1.0
        } else {
            0.0
        }
    });
    let lmin = g.sym_eigenvalues()?.first().copied().unwrap_or(1.0);
    if !(lmin >= 1e-8) {
        return Err(Error::Domain(format!(
            "truncated metric not positive definite at |y| = {:.3e} (min eigenvalue {lmin:.3e})",
            (y.r().powi(2) + y.t * y.t).sqrt()
        )));
    }
    Ok(g)
}

/// `det(g^{ij}) - 1` computed without cancellation from the eigenvalues of
/// the deviation.
pub fn det_minus_one(me: &MetricExpansion, y: &HalfSpacePoint) -> Result<f64> {
    eval_metric_inverse(me, y)?;
    let h = me.deviation(&y.z, y.t).total();
    let ev = h.sym_eigenvalues()?;
    Ok(ev.iter().map(|l| l.ln_1p()).sum::<f64>().exp_m1())
}
