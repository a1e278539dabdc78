//! Half-space integrals reduced to the `(t, r)` quarter plane.
//!
//! An integrand that is radial in `z` times a polynomial becomes
//! `omega_{n-2} * M(p, a, b)` with
//! `M(p, a, b) = int int t^a r^b r^{n-2} ((1+t)^2 + r^2)^{-p} dr dt`.

pub mod mc;
mod rules;
pub mod sphere;

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::geometry::Dim;

pub use mc::{mc_halfspace, mc_halfspace_multi, mc_sphere, MCEstimate, Proposal};
pub use rules::{adaptive_2d, composite_k15, gk15, half_line_k15, Cubature};
pub use sphere::{angular_moment, monomial_integral, sphere_area};

/// Default evaluation budget of one moment computation.
pub const DEFAULT_MAX_EVALS: usize = 4_000_000;

pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

pub fn beta(a: f64, b: f64) -> f64 {
    ln_beta(a, b).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentKey {
    pub p: f64,
    pub a: u32,
    pub b: u32,
}

impl MomentKey {
    pub fn new(p: f64, a: u32, b: u32) -> Self {
        Self { p, a, b }
    }

    /// Integrable iff `2p > a + b + n`.
    pub fn check(&self, dim: Dim) -> Result<()> {
        let need = (self.a + self.b) as f64 + dim.n() as f64;
        if !(2.0 * self.p > need) {
            return Err(Error::Domain(format!(
                "M(p={}, a={}, b={}) diverges for n = {}: need 2p > {need}",
                self.p,
                self.a,
                self.b,
                dim.n()
            )));
        }
        Ok(())
    }

    fn sort_key(&self) -> (u64, u32, u32) {
        (self.p.to_bits(), self.a, self.b)
    }

    /// Exponent `a + b + n - 2p` of the power-law tail.
    fn tail_exponent(&self, dim: Dim) -> f64 {
        (self.a + self.b) as f64 + dim.n() as f64 - 2.0 * self.p
    }
}

/// Beta-function closed form of `M(p, a, b)`:
/// `1/2 B((c+1)/2, p-(c+1)/2) B(a+1, 2p-a-b-n)` with `c = b + n - 2`.
pub fn moment_closed_form(dim: Dim, key: MomentKey) -> Result<f64> {
    key.check(dim)?;
    let c1 = (key.b + dim.n() as u32 - 1) as f64;
    let a1 = key.a as f64 + 1.0;
    Ok(0.5 * (ln_beta(c1 / 2.0, key.p - c1 / 2.0) + ln_beta(a1, -key.tail_exponent(dim))).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentValue {
    pub value: f64,
    /// Cubature error estimate plus the analytic tail bound.
    pub error: f64,
    pub truncation: f64,
    pub evaluations: usize,
}

/// Upper bound on the integral outside `[0,T]^2`, valid for every `T > 0`.
fn tail_bound(dim: Dim, key: MomentKey, t_cut: f64) -> f64 {
    let n = dim.n() as f64;
    let e = key.tail_exponent(dim);
    let c1 = key.b as f64 + n - 1.0;
    let a1 = key.a as f64 + 1.0;
    let br = beta(c1 / 2.0, key.p - c1 / 2.0);
    let bt = beta(a1 / 2.0, key.p - a1 / 2.0);
    0.5 * (br + bt) * t_cut.powf(e) / (-e)
}

/// Adaptive cubature of `M(p, a, b)` to relative tolerance `tol`.
pub fn moment(dim: Dim, key: MomentKey, tol: f64) -> Result<MomentValue> {
    moment_with_budget(dim, key, tol, DEFAULT_MAX_EVALS)
}

pub fn moment_with_budget(
    dim: Dim,
    key: MomentKey,
    tol: f64,
    max_evals: usize,
) -> Result<MomentValue> {
    key.check(dim)?;
    if !(tol > 0.0) {
        return Err(Error::Domain(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let n = dim.n() as f64;
    let (a, c, p) = (key.a as i32, key.b as f64 + n - 2.0, key.p);
    let f = |t: f64, r: f64| t.powi(a) * r.powf(c) * ((1.0 + t).powi(2) + r * r).powf(-p);
    // mapped integrand on the unit square: t = s/(1-s), r = u/(1-u)
    let mapped = |s: f64, u: f64| {
        let (os, ou) = (1.0 - s, 1.0 - u);
        f(s / os, u / ou) / (os * os * ou * ou)
    };
    // rough lower bound for the magnitude from the unit box
    let rough = adaptive_2d(
        mapped,
        (0.0, 0.5),
        (0.0, 0.5),
        |v| 1e-3 * v.abs(),
        max_evals,
    )?;
    let lower = 0.5 * rough.value;
    let e = key.tail_exponent(dim);
    let c1 = key.b as f64 + n - 1.0;
    let a1 = key.a as f64 + 1.0;
    let coef = 0.5 * (beta(c1 / 2.0, p - c1 / 2.0) + beta(a1 / 2.0, p - a1 / 2.0)) / (-e);
    let target_tail = tol / 10.0 * lower;
    let t_cut = (target_tail / coef).powf(1.0 / e).max(1.0);
    let truncation = tail_bound(dim, key, t_cut);
    let edge = t_cut / (1.0 + t_cut);
    let quad_tol = tol / 10.0;
    let cub = adaptive_2d(
        mapped,
        (0.0, edge),
        (0.0, edge),
        |v| quad_tol * v.abs(),
        max_evals,
    )
    .map_err(|err| match err {
        Error::Budget { best, error, .. } => Error::Budget {
            msg: format!(
                "M(p={}, a={}, b={}) at n = {} did not reach relative tolerance {tol:e}",
                p,
                key.a,
                key.b,
                dim.n()
            ),
            best,
            error: error + truncation,
        },
        other => other,
    })?;
    let error = cub.error + truncation;
    if error > tol * cub.value.abs() {
        return Err(Error::Budget {
            msg: format!(
                "M(p={}, a={}, b={}) error estimate above tolerance {tol:e}",
                p, key.a, key.b
            ),
            best: cub.value,
            error,
        });
    }
    Ok(MomentValue {
        value: cub.value,
        error,
        truncation,
        evaluations: cub.evaluations,
    })
}

/// `int_0^inf int_0^inf f(t, r) dr dt` on the compactified unit square,
/// adaptive to relative tolerance `rel_tol`.
pub fn quarter_plane(
    f: impl Fn(f64, f64) -> f64,
    rel_tol: f64,
    max_evals: usize,
) -> Result<Cubature> {
    let mapped = |s: f64, u: f64| {
        let (os, ou) = (1.0 - s, 1.0 - u);
        f(s / os, u / ou) / (os * os * ou * ou)
    };
    adaptive_2d(
        mapped,
        (0.0, 1.0),
        (0.0, 1.0),
        |v| rel_tol * v.abs(),
        max_evals,
    )
}

/// `int_0^inf r^{b+n-2} (1+r^2)^{-q} dr` by composite K15 on the mapped half-line.
pub fn boundary_radial(dim: Dim, b: u32, q: f64, panels: usize) -> f64 {
    let c = b as f64 + dim.n() as f64 - 2.0;
    half_line_k15(|r| r.powf(c) * (1.0 + r * r).powf(-q), panels)
}

/// Closed form of [`boundary_radial`]: `1/2 B((c+1)/2, q-(c+1)/2)`.
pub fn boundary_radial_closed(dim: Dim, b: u32, q: f64) -> Result<f64> {
    let c1 = b as f64 + dim.n() as f64 - 1.0;
    if !(q > c1 / 2.0) {
        return Err(Error::Domain(format!(
            "boundary integral diverges: q = {q}"
        )));
    }
    Ok(0.5 * beta(c1 / 2.0, q - c1 / 2.0))
}

/// The four curvature moments, each already multiplied by `omega_{n-2}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentIntegrals {
    pub i1: f64,
    pub i2: f64,
    pub i3: f64,
    pub i4: f64,
}

pub fn key_i1(dim: Dim) -> MomentKey {
    MomentKey::new(dim.n() as f64 - 2.0, 2, 0)
}
pub fn key_i2(dim: Dim) -> MomentKey {
    MomentKey::new(dim.n() as f64, 2, 4)
}
pub fn key_i3(dim: Dim) -> MomentKey {
    MomentKey::new(dim.n() as f64, 4, 2)
}
pub fn key_i4(dim: Dim) -> MomentKey {
    MomentKey::new(dim.n() as f64 - 2.0, 0, 2)
}

/// Write-once cache of moments for one dimension.
#[derive(Clone, Debug)]
pub struct MomentTable {
    pub dim: Dim,
    pub tol: f64,
    pub omega: f64,
    entries: BTreeMap<(u64, u32, u32), (MomentKey, MomentValue)>,
    pub integrals: MomentIntegrals,
}

impl MomentTable {
    /// Computes `I_1..I_4` eagerly.
    pub fn new(dim: Dim, tol: f64) -> Result<Self> {
        let mut t = Self {
            dim,
            tol,
            omega: sphere_area(dim.n() - 2),
            entries: BTreeMap::new(),
            integrals: MomentIntegrals {
                i1: 0.0,
                i2: 0.0,
                i3: 0.0,
                i4: 0.0,
            },
        };
        let w = t.omega;
        t.integrals = MomentIntegrals {
            i1: w * t.get(key_i1(dim))?.value,
            i2: w * t.get(key_i2(dim))?.value,
            i3: w * t.get(key_i3(dim))?.value,
            i4: w * t.get(key_i4(dim))?.value,
        };
        Ok(t)
    }

    /// Cached value, computing it on first request.
    pub fn get(&mut self, key: MomentKey) -> Result<MomentValue> {
        if let Some((_, v)) = self.entries.get(&key.sort_key()) {
            return Ok(*v);
        }
        let v = moment(self.dim, key, self.tol)?;
        self.entries.insert(key.sort_key(), (key, v));
        Ok(v)
    }

    pub fn entries(&self) -> impl Iterator<Item = &(MomentKey, MomentValue)> {
        self.entries.values()
    }

    /// CSV with columns `n,p,a,b,value,error`, ordered by key.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["n", "p", "a", "b", "value", "error"])
            .map_err(csv_err)?;
        for (k, v) in self.entries.values() {
            w.write_record([
                self.dim.n().to_string(),
                k.p.to_string(),
                k.a.to_string(),
                k.b.to_string(),
                format!("{:e}", v.value),
                format!("{:e}", v.error),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}
