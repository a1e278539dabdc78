//! Least-squares line fits used by every slope and decay experiment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope from the residual variance.
    pub slope_stderr: f64,
}

impl LinearFit {
    /// Two-sided band `slope +/- k * stderr`.
    pub fn band(&self, k: f64) -> (f64, f64) {
        (
            self.slope - k * self.slope_stderr,
            self.slope + k * self.slope_stderr,
        )
    }
}

/// Ordinary least squares `y = a + b x`, optionally weighted by `1/sigma^2`.
pub fn linear_fit(xs: &[f64], ys: &[f64], sigma: Option<&[f64]>) -> Result<LinearFit> {
    let k = xs.len();
    if k < 2 || ys.len() != k || sigma.is_some_and(|s| s.len() != k) {
        return Err(Error::Domain(format!(
            "line fit needs matching inputs of length >= 2, got {k}"
        )));
    }
    let w: Vec<f64> = match sigma {
        Some(s) => s
            .iter()
            .map(|v| if *v > 0.0 { 1.0 / (v * v) } else { 1.0 })
            .collect(),
        None => vec![1.0; k],
    };
    let sw: f64 = w.iter().sum();
    let mx = xs.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() / sw;
    let my = ys.iter().zip(&w).map(|(y, w)| y * w).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in 0..k {
        sxx += w[i] * (xs[i] - mx).powi(2);
        sxy += w[i] * (xs[i] - mx) * (ys[i] - my);
    }
    if sxx <= 0.0 {
        return Err(Error::Domain("line fit with degenerate abscissae".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_stderr = if k > 2 {
        let ss: f64 = (0..k)
            .map(|i| w[i] * (ys[i] - intercept - slope * xs[i]).powi(2))
            .sum();
        let scale = if sigma.is_some() {
            (ss / (k - 2) as f64).max(1.0)
        } else {
            ss / (k - 2) as f64
        };
        (scale / sxx).sqrt()
    } else {
        0.0
    };
    Ok(LinearFit {
        slope,
        intercept,
        slope_stderr,
    })
}

/// Fit of `ln y` against `ln x`. All values must be positive.
pub fn loglog_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.iter().chain(ys).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Domain(
            "log-log fit needs positive finite data".into(),
        ));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    linear_fit(&lx, &ly, None)
}

/// Geometric ladder of `points` values from `start` to `end` inclusive.
pub fn geometric_ladder(start: f64, end: f64, points: usize) -> Result<Vec<f64>> {
    if !(start > 0.0 && end > 0.0) || points < 2 {
        return Err(Error::Domain(
            "ladder needs positive endpoints and >= 2 points".into(),
        ));
    }
    Ok((0..points)
        .map(|k| start * (end / start).powf(k as f64 / (points - 1) as f64))
        .collect())
}
