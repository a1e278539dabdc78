//! Importance-sampled Monte Carlo over the half-space and over spheres.
//!
//! Work is cut into fixed-size batches. Batch `k` draws from a ChaCha8
//! stream derived from `(seed, k)`, batches may run on any thread, and the
//! per-batch sums are merged in batch order, so results do not depend on
//! scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::bubble::HalfSpacePoint;
use crate::error::{Error, Result};
use crate::geometry::Dim;

use super::sphere::sphere_area;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MCEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_samples: u64,
    pub seed: u64,
}

impl MCEstimate {
    /// `|mean - reference|` in units of the standard error.
    pub fn z_score(&self, reference: f64) -> f64 {
        let d = (self.mean - reference).abs();
        if self.std_error > 0.0 {
            d / self.std_error
        } else if d == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

/// Product proposal: half-Cauchy in `t`, multivariate Student-t in `z`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub t_scale: f64,
    pub z_scale: f64,
    pub z_dof: f64,
}

impl Default for Proposal {
    fn default() -> Self {
        Self {
            t_scale: 1.0,
            z_scale: 0.7,
            z_dof: 3.0,
        }
    }
}

impl Proposal {
    fn draw(&self, rng: &mut ChaCha8Rng, chi: &ChiSquared<f64>, m: usize) -> HalfSpacePoint {
        let u: f64 = rng.random();
        let t = self.t_scale * (0.5 * std::f64::consts::PI * u).tan();
        let w = (chi.sample(rng) / self.z_dof).sqrt();
        let z = (0..m)
            .map(|_| self.z_scale * rng.sample::<f64, _>(StandardNormal) / w)
            .collect();
        HalfSpacePoint { t, z }
    }

    fn ln_density(&self, p: &HalfSpacePoint, ln_norm_z: f64) -> f64 {
        let m = p.z.len() as f64;
        let r2: f64 = p.z.iter().map(|x| x * x).sum();
        let lt = (2.0 / (std::f64::consts::PI * self.t_scale)).ln()
            - (p.t / self.t_scale).powi(2).ln_1p();
        let lz = ln_norm_z
            - 0.5 * (self.z_dof + m) * (r2 / (self.z_dof * self.z_scale * self.z_scale)).ln_1p();
        lt + lz
    }

    fn ln_norm_z(&self, m: usize) -> f64 {
        let mf = m as f64;
        let nu = self.z_dof;
        ln_gamma(0.5 * (nu + mf))
            - ln_gamma(0.5 * nu)
            - 0.5 * mf * (nu * std::f64::consts::PI).ln()
            - mf * self.z_scale.ln()
    }
}

/// Samples per batch. Part of the determinism contract: changing it changes
/// the draws.
pub const BATCH: u64 = 1 << 14;

#[derive(Clone, Copy, Default)]
struct Moments {
    count: u64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    fn merge(self, other: Self) -> Self {
        if self.count == 0 {
            return other;
        }
        if other.count == 0 {
            return self;
        }
        let n = (self.count + other.count) as f64;
        let d = other.mean - self.mean;
        Self {
            count: self.count + other.count,
            mean: self.mean + d * other.count as f64 / n,
            m2: self.m2 + other.m2 + d * d * self.count as f64 * other.count as f64 / n,
        }
    }

    fn estimate(&self, seed: u64) -> MCEstimate {
        let var = if self.count > 1 {
            self.m2 / (self.count - 1) as f64
        } else {
            0.0
        };
        MCEstimate {
            mean: self.mean,
            std_error: (var / self.count as f64).sqrt(),
            n_samples: self.count,
            seed,
        }
    }
}

fn batch_rng(seed: u64, batch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(batch);
    rng
}

fn run_batches<F>(n_samples: u64, per_batch: F) -> Result<Moments>
where
    F: Fn(u64, u64) -> Result<Moments> + Sync,
{
    if n_samples == 0 {
        return Err(Error::Domain(
            "Monte Carlo needs at least one sample".into(),
        ));
    }
    let batches = n_samples.div_ceil(BATCH);
    let parts: Vec<Result<Moments>> = (0..batches)
        .into_par_iter()
        .map(|k| {
            let size = BATCH.min(n_samples - k * BATCH);
            per_batch(k, size)
        })
        .collect();
    let mut total = Moments::default();
    for p in parts {
        total = total.merge(p?);
    }
    Ok(total)
}

/// Several integrands evaluated on the same draws. Returns one estimate per
/// component of the integrand's output.
pub fn mc_halfspace_multi<F>(
    dim: Dim,
    integrand: F,
    outputs: usize,
    n_samples: u64,
    seed: u64,
    proposal: Proposal,
) -> Result<Vec<MCEstimate>>
where
    F: Fn(&HalfSpacePoint, &mut [f64]) + Sync,
{
    if n_samples == 0 {
        return Err(Error::Domain(
            "Monte Carlo needs at least one sample".into(),
        ));
    }
    let m = dim.m();
    let chi =
        ChiSquared::new(proposal.z_dof).map_err(|e| Error::Domain(format!("bad proposal: {e}")))?;
    let ln_norm_z = proposal.ln_norm_z(m);
    let batches = n_samples.div_ceil(BATCH);
    let parts: Vec<Result<Vec<Moments>>> = (0..batches)
        .into_par_iter()
        .map(|k| {
            let size = BATCH.min(n_samples - k * BATCH);
            let mut rng = batch_rng(seed, k);
            let mut acc = vec![Moments::default(); outputs];
            let mut buf = vec![0.0; outputs];
            for _ in 0..size {
                let p = proposal.draw(&mut rng, &chi, m);
                let w = (-proposal.ln_density(&p, ln_norm_z)).exp();
                buf.iter_mut().for_each(|b| *b = 0.0);
                integrand(&p, &mut buf);
                for (a, f) in acc.iter_mut().zip(&buf) {
                    let v = f * w;
                    if !v.is_finite() {
                        let mut point = p.z.clone();
                        point.push(p.t);
                        return Err(Error::Poisoned { point });
                    }
                    a.push(v);
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = vec![Moments::default(); outputs];
    for p in parts {
        for (t, b) in total.iter_mut().zip(p?) {
            *t = t.merge(b);
        }
    }
    Ok(total.iter().map(|t| t.estimate(seed)).collect())
}

/// `int_{R^n_+} f` by importance sampling.
pub fn mc_halfspace<F>(
    dim: Dim,
    integrand: F,
    n_samples: u64,
    seed: u64,
    proposal: Proposal,
) -> Result<MCEstimate>
where
    F: Fn(&HalfSpacePoint) -> f64 + Sync,
{
    let est = mc_halfspace_multi(
        dim,
        |p, out: &mut [f64]| out[0] = integrand(p),
        1,
        n_samples,
        seed,
        proposal,
    )?;
    Ok(est[0])
}

/// `int_{S^{d-1}} f` with uniform directions.
pub fn mc_sphere<F>(d: usize, integrand: F, n_samples: u64, seed: u64) -> Result<MCEstimate>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let area = sphere_area(d - 1);
    let mom = run_batches(n_samples, |k, size| {
        let mut rng = batch_rng(seed, k);
        let mut acc = Moments::default();
        let mut x = vec![0.0; d];
        for _ in 0..size {
            for v in x.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            x.iter_mut().for_each(|v| *v /= r);
            let f = area * integrand(&x);
            if !f.is_finite() {
                return Err(Error::Poisoned { point: x.clone() });
            }
            acc.push(f);
        }
        Ok(acc)
    })?;
    Ok(mom.estimate(seed))
}
