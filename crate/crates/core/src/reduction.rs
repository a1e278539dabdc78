//! The reduced functional `G(λ, q) = λ γ(q) B + λ^4 φ(q)` on a finite table
//! of boundary points: critical scales, the blow-up point and the family
//! `δ = λ_0 ε^{1/3}`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Dim;
use crate::linalg::Matrix;

/// `(γ, φ)` at one boundary point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCoefficients {
    pub label: String,
    pub gamma: f64,
    pub phi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedFunctional {
    pub n: usize,
    pub b: f64,
    /// Sorted by label, labels unique.
    points: Vec<PointCoefficients>,
}

impl ReducedFunctional {
    pub fn new(dim: Dim, b: f64, mut points: Vec<PointCoefficients>) -> Result<Self> {
        if !(b > 0.0) {
            return Err(Error::Domain(format!("B must be positive, got {b}")));
        }
        if points.is_empty() {
            return Err(Error::Domain(
                "reduced functional needs at least one point".into(),
            ));
        }
        points.sort_by(|a, b| a.label.cmp(&b.label));
        for w in points.windows(2) {
            if w[0].label == w[1].label {
                return Err(Error::Domain(format!(
                    "duplicate point label {:?}",
                    w[0].label
                )));
            }
        }
        if let Some(p) = points
            .iter()
            .find(|p| p.phi > 0.0 || !p.phi.is_finite() || !p.gamma.is_finite())
        {
            return Err(Error::Domain(format!(
                "point {:?} has phi = {} (must be finite and <= 0)",
                p.label, p.phi
            )));
        }
        Ok(Self {
            n: dim.n(),
            b,
            points,
        })
    }

    pub fn points(&self) -> &[PointCoefficients] {
        &self.points
    }

    pub fn point(&self, label: &str) -> Result<&PointCoefficients> {
        self.points
            .binary_search_by(|p| p.label.as_str().cmp(label))
            .map(|i| &self.points[i])
            .map_err(|_| Error::UnknownLabel(label.to_string()))
    }
}

/// `G(λ, q)`.
pub fn eval_g(rf: &ReducedFunctional, lambda: f64, label: &str) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!("λ must be positive, got {lambda}")));
    }
    let p = rf.point(label)?;
    Ok(g_value(rf.b, p.gamma, p.phi, lambda))
}

fn g_value(b: f64, gamma: f64, phi: f64, lambda: f64) -> f64 {
    lambda * gamma * b + lambda.powi(4) * phi
}

/// The critical scale at one point and the derivatives there.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalScale {
    pub lambda: f64,
    /// `G(λ*) = 3/4 B γ λ*`.
    pub value: f64,
    /// `∂G/∂λ` at λ*, evaluated directly.
    pub dg: f64,
    /// `12 λ*^2 φ`.
    pub d2g: f64,
}

/// `λ* = (-B γ / (4 φ))^{1/3}` from `∂G/∂λ = B γ + 4 λ^3 φ`.
pub fn critical_lambda(rf: &ReducedFunctional, label: &str) -> Result<CriticalScale> {
    let p = rf.point(label)?;
    critical_for(rf.b, p)
}

fn critical_for(b: f64, p: &PointCoefficients) -> Result<CriticalScale> {
    if !(p.gamma > 0.0) {
        return Err(Error::NoCriticalPoint {
            label: p.label.clone(),
            reason: format!("γ = {} is not positive", p.gamma),
        });
    }
    if !(p.phi < 0.0) {
        return Err(Error::NoCriticalPoint {
            label: p.label.clone(),
            reason: format!("φ = {} is not negative", p.phi),
        });
    }
    let lambda = (-b * p.gamma / (4.0 * p.phi)).cbrt();
    Ok(CriticalScale {
        lambda,
        value: 0.75 * b * p.gamma * lambda,
        dg: b * p.gamma + 4.0 * lambda.powi(3) * p.phi,
        d2g: 12.0 * lambda * lambda * p.phi,
    })
}

/// Golden-section maximization of a unimodal `f` on `[a, b]`.
///
/// Comparing values limits the location to about `sqrt(eps)` relative; see
/// [`golden_section_max_by`] for a sharper comparison.
pub fn golden_section_max(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    golden_section_max_by(|c, d| f(c) > f(d), a, b, tol)
}

/// Golden-section maximization driven by `greater(c, d)`, true when
/// `f(c) > f(d)`.
pub fn golden_section_max_by(
    greater: impl Fn(f64, f64) -> bool,
    mut a: f64,
    mut b: f64,
    tol: f64,
) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    while (b - a).abs() > tol * (a.abs() + b.abs()).max(f64::MIN_POSITIVE) {
        if greater(c, d) {
            b = d;
            d = c;
            c = b - inv_phi * (b - a);
        } else {
            a = c;
            c = d;
            d = a + inv_phi * (b - a);
        }
        if b - a <= f64::EPSILON * b.abs() {
            break;
        }
    }
    0.5 * (a + b)
}

/// Sign-exact comparison of `G(c, q)` and `G(d, q)` through
/// `G(c) - G(d) = (c - d) (B γ + φ (c + d)(c^2 + d^2))`.
pub fn g_greater(rf: &ReducedFunctional, label: &str) -> Result<impl Fn(f64, f64) -> bool> {
    let p = rf.point(label)?;
    let (bg, phi) = (rf.b * p.gamma, p.phi);
    Ok(move |c: f64, d: f64| (c - d) * (bg + phi * (c + d) * (c * c + d * d)) > 0.0)
}

/// Status of the `q` direction at the chosen point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QStability {
    /// Largest value in the table, no neighborhood supplied.
    DiscreteArgmax,
    /// Strictly above every supplied neighbor.
    NeighborhoodMax,
    /// Some neighbor is at least as large.
    NotStrict,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stability {
    /// `∂²G/∂λ² < 0` at λ_0.
    pub max_in_lambda: bool,
    pub q: QStability,
}

/// A point left out of the maximization, with the reason.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Excluded {
    pub label: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlowUpFamily {
    pub n: usize,
    pub lambda0: f64,
    pub q0: String,
    /// `(min λ*/2, 2 max λ*)` over admissible points.
    pub bracket: (f64, f64),
    /// `G(λ_0, q_0)`.
    pub value: f64,
    pub d2g_lambda: f64,
    pub stability: Stability,
    pub excluded: Vec<Excluded>,
}

/// Neighbor lists by label.
pub type Adjacency = BTreeMap<String, Vec<String>>;

/// Maximizes `q -> G(λ*(q), q)` over the admissible points. Ties go to the
/// smallest label.
pub fn find_blowup_point(
    rf: &ReducedFunctional,
    neighbors: Option<&Adjacency>,
) -> Result<BlowUpFamily> {
    let mut excluded = Vec::new();
    let mut crit: Vec<(&PointCoefficients, CriticalScale)> = Vec::new();
    for p in rf.points() {
        match critical_for(rf.b, p) {
            Ok(c) => crit.push((p, c)),
            Err(e) => excluded.push(Excluded {
                label: p.label.clone(),
                reason: e.to_string(),
            }),
        }
    }
    let mut best: Option<(&PointCoefficients, CriticalScale)> = None;
    for (p, c) in &crit {
        if best.is_none_or(|(_, b)| c.value > b.value) {
            best = Some((p, *c));
        }
    }
    let Some((p0, c0)) = best else {
        return Err(Error::ConstructionImpossible(format!(
            "no point with γ > 0 and φ < 0 among {} point(s)",
            rf.points().len()
        )));
    };
    let lo = crit
        .iter()
        .map(|(_, c)| c.lambda)
        .fold(f64::INFINITY, f64::min);
    let hi = crit.iter().map(|(_, c)| c.lambda).fold(0.0, f64::max);
    let q = match neighbors.and_then(|adj| adj.get(&p0.label)) {
        None => QStability::DiscreteArgmax,
        Some(list) => {
            let mut strict = true;
            for l in list {
                let other = rf.point(l)?;
                let v = critical_for(rf.b, other)
                    .map(|c| c.value)
                    .unwrap_or(f64::NEG_INFINITY);
                if v >= c0.value {
                    strict = false;
                }
            }
            if strict {
                QStability::NeighborhoodMax
            } else {
                QStability::NotStrict
            }
        }
    };
    Ok(BlowUpFamily {
        n: rf.n,
        lambda0: c0.lambda,
        q0: p0.label.clone(),
        bracket: (0.5 * lo, 2.0 * hi),
        value: c0.value,
        d2g_lambda: c0.d2g,
        stability: Stability {
            max_in_lambda: c0.d2g < 0.0,
            q,
        },
        excluded,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyRow {
    pub epsilon: f64,
    pub delta: f64,
    /// `δ^{-(n-2)/2}`.
    pub peak: f64,
    /// `c ε`, the size of the remainder term up to the unknown constant `c`.
    pub phi_bound: f64,
}

/// One row per ε with `δ = λ_0 ε^{1/3}`.
pub fn family_table(
    fam: &BlowUpFamily,
    eps: &[f64],
    bound_constant: f64,
) -> Result<Vec<FamilyRow>> {
    let n = fam.n as f64;
    eps.iter()
        .map(|&e| {
            if !(e > 0.0 && e < 1.0) {
                return Err(Error::Domain(format!("ε must lie in (0, 1), got {e}")));
            }
            let delta = fam.lambda0 * e.cbrt();
            Ok(FamilyRow {
                epsilon: e,
                delta,
                peak: delta.powf(-(n - 2.0) / 2.0),
                phi_bound: bound_constant * e,
            })
        })
        .collect()
}

/// `γ` and `φ` sampled on a regular grid in `d` boundary coordinates,
/// row-major with the last coordinate fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QGrid {
    pub shape: Vec<usize>,
    pub spacing: Vec<f64>,
    pub gamma: Vec<f64>,
    pub phi: Vec<f64>,
}

impl QGrid {
    fn flat(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.shape)
            .fold(0, |acc, (i, s)| acc * s + i)
    }

    fn validate(&self) -> Result<()> {
        let total: usize = self.shape.iter().product();
        if self.shape.is_empty()
            || self.spacing.len() != self.shape.len()
            || self.gamma.len() != total
            || self.phi.len() != total
            || self.spacing.iter().any(|h| !(*h > 0.0))
        {
            return Err(Error::Structural(
                "q-grid arrays do not match its shape".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianClass {
    NegativeDefinite,
    Indefinite,
    /// The centre touches the grid boundary.
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HessianReport {
    pub class: HessianClass,
    /// `(1+d) x (1+d)` with λ first; empty when inconclusive.
    pub hessian: Vec<Vec<f64>>,
    pub d2g_lambda_fd: f64,
    pub d2g_lambda_closed: f64,
    /// `∂²G/∂λ∂q_k`, reported, not asserted.
    pub mixed: Vec<f64>,
    pub q_block_eigenvalues: Vec<f64>,
}

/// Finite-difference Hessian of `G` in `(λ, q)` at `(λ_0, centre)`.
pub fn hessian_check(
    b: f64,
    lambda0: f64,
    grid: &QGrid,
    centre: &[usize],
) -> Result<HessianReport> {
    grid.validate()?;
    let d = grid.shape.len();
    if centre.len() != d || centre.iter().zip(&grid.shape).any(|(c, s)| *c >= *s) {
        return Err(Error::Domain("centre index outside the q-grid".into()));
    }
    let c0 = grid.flat(centre);
    let (g0, p0) = (grid.gamma[c0], grid.phi[c0]);
    let d2_closed = 12.0 * lambda0 * lambda0 * p0;
    let h = 1e-3 * lambda0;
    let g = |l: f64, gm: f64, ph: f64| g_value(b, gm, ph, l);
    let d2_fd =
        (g(lambda0 + h, g0, p0) - 2.0 * g(lambda0, g0, p0) + g(lambda0 - h, g0, p0)) / (h * h);
    if centre
        .iter()
        .zip(&grid.shape)
        .any(|(c, s)| *c == 0 || *c + 1 == *s)
    {
        return Ok(HessianReport {
            class: HessianClass::Inconclusive,
            hessian: Vec::new(),
            d2g_lambda_fd: d2_fd,
            d2g_lambda_closed: d2_closed,
            mixed: Vec::new(),
            q_block_eigenvalues: Vec::new(),
        });
    }
    let at = |offs: &[(usize, i64)]| -> (f64, f64) {
        let mut idx = centre.to_vec();
        for &(k, o) in offs {
            idx[k] = (idx[k] as i64 + o) as usize;
        }
        let f = grid.flat(&idx);
        (grid.gamma[f], grid.phi[f])
    };
    let gq = |offs: &[(usize, i64)]| {
        let (gm, ph) = at(offs);
        g(lambda0, gm, ph)
    };
    let mut hm = Matrix::zeros(d + 1);
    hm[(0, 0)] = d2_closed;
    let mut mixed = Vec::with_capacity(d);
    for k in 0..d {
        let hk = grid.spacing[k];
        let (gp, pp) = at(&[(k, 1)]);
        let (gmn, pm) = at(&[(k, -1)]);
        let dgam = (gp - gmn) / (2.0 * hk);
        let dphi = (pp - pm) / (2.0 * hk);
        let mx = b * dgam + 4.0 * lambda0.powi(3) * dphi;
        mixed.push(mx);
        hm[(0, k + 1)] = mx;
        hm[(k + 1, 0)] = mx;
        for l in 0..d {
            let hl = grid.spacing[l];
            let v = if k == l {
                (gq(&[(k, 1)]) - 2.0 * gq(&[]) + gq(&[(k, -1)])) / (hk * hk)
            } else {
                (gq(&[(k, 1), (l, 1)]) - gq(&[(k, 1), (l, -1)]) - gq(&[(k, -1), (l, 1)])
                    + gq(&[(k, -1), (l, -1)]))
                    / (4.0 * hk * hl)
            };
            hm[(k + 1, l + 1)] = v;
        }
    }
    let qblock = Matrix::from_fn(d, |i, j| hm[(i + 1, j + 1)]);
    let q_eigs = qblock.sym_eigenvalues()?;
    let full = hm.sym_eigenvalues()?;
    let class = if full.iter().all(|e| *e < 0.0) {
        HessianClass::NegativeDefinite
    } else {
        HessianClass::Indefinite
    };
    Ok(HessianReport {
        class,
        hessian: hm.to_rows(),
        d2g_lambda_fd: d2_fd,
        d2g_lambda_closed: d2_closed,
        mixed,
        q_block_eigenvalues: q_eigs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rf(points: &[(&str, f64, f64)]) -> ReducedFunctional {
        let pts = points
            .iter()
            .map(|(l, g, p)| PointCoefficients {
                label: l.to_string(),
                gamma: *g,
                phi: *p,
            })
            .collect();
        ReducedFunctional::new(Dim::new(11).unwrap(), 2.0, pts).unwrap()
    }

    #[test]
    fn g_arithmetic() {
        let f = rf(&[("a", 1.0, -1.0)]);
        assert_eq!(eval_g(&f, 1.0, "a").unwrap(), 1.0);
        assert!(eval_g(&f, 1e-12, "a").unwrap().abs() < 1e-11);
        assert!(eval_g(&f, 1e3, "a").unwrap() < -1e11);
        assert!(matches!(eval_g(&f, 1.0, "zz"), Err(Error::UnknownLabel(_))));
    }

    #[test]
    fn critical_closed_form() {
        let f = rf(&[("a", 1.0, -1.0), ("b", 8.0, -1.0)]);
        let c = critical_lambda(&f, "a").unwrap();
        assert!((c.lambda - 0.5f64.cbrt()).abs() < 1e-15);
        assert!((c.lambda - 0.793_700_526).abs() < 1e-9);
        let c8 = critical_lambda(&f, "b").unwrap();
        assert!((c8.lambda / c.lambda - 2.0).abs() < 1e-14);
    }

    #[test]
    fn nonnegative_phi_has_no_critical_point() {
        let f = rf(&[("a", 1.0, 0.0), ("b", -1.0, -1.0)]);
        assert!(matches!(
            critical_lambda(&f, "a"),
            Err(Error::NoCriticalPoint { .. })
        ));
        assert!(matches!(
            critical_lambda(&f, "b"),
            Err(Error::NoCriticalPoint { .. })
        ));
        assert!(matches!(
            find_blowup_point(&f, None),
            Err(Error::ConstructionImpossible(_))
        ));
    }

    #[test]
    fn ties_go_to_smallest_label() {
        let f = rf(&[("q2", 1.0, -1.0), ("q1", 1.0, -1.0)]);
        assert_eq!(find_blowup_point(&f, None).unwrap().q0, "q1");
    }
}
