//! Gauss-Kronrod 7/15 rule and the adaptive drivers built on it.

use std::collections::BinaryHeap;

use crate::error::{Error, Result};

/// Kronrod abscissae on `[-1, 1]`, nonnegative half, descending.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
/// Gauss weights for the abscissae `XGK[1], XGK[3], XGK[5], XGK[7]`.
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// The 15 nodes on `[-1, 1]` with Kronrod and Gauss weights (Gauss weight 0
/// where the node is Kronrod-only).
pub(crate) fn nodes() -> [(f64, f64, f64); 15] {
    let mut out = [(0.0, 0.0, 0.0); 15];
    let mut k = 0;
    for i in 0..7 {
        let wg = if i % 2 == 1 { WG[i / 2] } else { 0.0 };
        out[k] = (-XGK[i], WGK[i], wg);
        out[k + 1] = (XGK[i], WGK[i], wg);
        k += 2;
    }
    out[14] = (0.0, WGK[7], WG[3]);
    out
}

/// One K15 panel on `[a, b]`: `(kronrod, |kronrod - gauss|)`.
pub fn gk15(f: &mut impl FnMut(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut k = 0.0;
    let mut g = 0.0;
    for (x, wk, wg) in nodes() {
        let v = f(c + h * x);
        k += wk * v;
        g += wg * v;
    }
    (k * h, (k - g).abs() * h)
}

/// Composite K15 with `panels` equal panels on `[a, b]`.
pub fn composite_k15(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let h = (b - a) / panels as f64;
    (0..panels)
        .map(|i| gk15(&mut f, a + i as f64 * h, a + (i + 1) as f64 * h).0)
        .sum()
}

/// `int_0^inf f(x) dx` through `x = s/(1-s)`, composite K15 on `[0, 1)`.
/// The rule never samples `s = 1`.
pub fn half_line_k15(f: impl Fn(f64) -> f64, panels: usize) -> f64 {
    composite_k15(
        |s| {
            let om = 1.0 - s;
            f(s / om) / (om * om)
        },
        0.0,
        1.0,
        panels,
    )
}

#[derive(Clone, Copy, Debug)]
pub struct Cubature {
    pub value: f64,
    pub error: f64,
    pub evaluations: usize,
}

struct Rect {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Rect {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Rect {}
impl PartialOrd for Rect {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Rect {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn tensor_gk(f: &impl Fn(f64, f64) -> f64, x0: f64, x1: f64, y0: f64, y1: f64) -> Rect {
    let nd = nodes();
    let (cx, hx) = (0.5 * (x0 + x1), 0.5 * (x1 - x0));
    let (cy, hy) = (0.5 * (y0 + y1), 0.5 * (y1 - y0));
    let mut k = 0.0;
    let mut g = 0.0;
    for (xa, wka, wga) in nd {
        let x = cx + hx * xa;
        for (yb, wkb, wgb) in nd {
            let v = f(x, cy + hy * yb);
            k += wka * wkb * v;
            g += wga * wgb * v;
        }
    }
    let area = hx * hy;
    Rect {
        x0,
        x1,
        y0,
        y1,
        value: k * area,
        error: (k - g).abs() * area,
    }
}

/// Globally adaptive tensor-product GK15 cubature on a rectangle. Splits the
/// worst rectangle into four until the summed error estimate is at most
/// `abs_tol`, or fails with a budget error once `max_evals` is exceeded.
pub fn adaptive_2d(
    f: impl Fn(f64, f64) -> f64,
    (x0, x1): (f64, f64),
    (y0, y1): (f64, f64),
    abs_tol: impl Fn(f64) -> f64,
    max_evals: usize,
) -> Result<Cubature> {
    const PER_RECT: usize = 225;
    let mut heap = BinaryHeap::new();
    // start from a 4x4 split so that the first estimate is not a single panel
    let nx = 4;
    for i in 0..nx {
        for j in 0..nx {
            let xa = x0 + (x1 - x0) * i as f64 / nx as f64;
            let xb = x0 + (x1 - x0) * (i + 1) as f64 / nx as f64;
            let ya = y0 + (y1 - y0) * j as f64 / nx as f64;
            let yb = y0 + (y1 - y0) * (j + 1) as f64 / nx as f64;
            heap.push(tensor_gk(&f, xa, xb, ya, yb));
        }
    }
    let mut evals = nx * nx * PER_RECT;
    let mut value: f64 = heap.iter().map(|r| r.value).sum();
    let mut error: f64 = heap.iter().map(|r| r.error).sum();
    loop {
        if !value.is_finite() {
            return Err(Error::Numeric("non-finite value in cubature".into()));
        }
        if error <= abs_tol(value) {
            // resum to shed drift from the running updates
            let value: f64 = heap.iter().map(|r| r.value).sum();
            let error: f64 = heap.iter().map(|r| r.error).sum();
            return Ok(Cubature {
                value,
                error,
                evaluations: evals,
            });
        }
        if evals + 4 * PER_RECT > max_evals {
            return Err(Error::Budget {
                msg: format!("cubature needed more than {max_evals} evaluations"),
                best: value,
                error,
            });
        }
        let worst = heap.pop().expect("heap is never empty");
        value -= worst.value;
        error -= worst.error;
        let xm = 0.5 * (worst.x0 + worst.x1);
        let ym = 0.5 * (worst.y0 + worst.y1);
        for (xa, xb) in [(worst.x0, xm), (xm, worst.x1)] {
            for (ya, yb) in [(worst.y0, ym), (ym, worst.y1)] {
                let r = tensor_gk(&f, xa, xb, ya, yb);
                value += r.value;
                error += r.error;
                heap.push(r);
            }
        }
        error = error.max(0.0);
        evals += 4 * PER_RECT;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k15_is_exact_for_degree_23() {
        let (v, _) = gk15(&mut |x: f64| x.powi(22) + x.powi(23), -1.0, 1.0);
        assert!((v - 2.0 / 23.0).abs() < 1e-14);
    }

    #[test]
    fn gauss_part_is_exact_for_degree_13() {
        let mut g = 0.0;
        for (x, _, wg) in nodes() {
            g += wg * x.powi(12);
        }
        assert!((g - 2.0 / 13.0).abs() < 1e-14);
        let wsum: f64 = nodes().iter().map(|n| n.1).sum();
        assert!((wsum - 2.0).abs() < 1e-14);
    }

    #[test]
    fn half_line_exponential() {
        let v = half_line_k15(|x| (-x).exp(), 16);
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adaptive_gaussian_bump() {
        let c = adaptive_2d(
            |x, y| (-(x * x + y * y)).exp(),
            (0.0, 6.0),
            (0.0, 6.0),
            |v| 1e-12 * v.abs(),
            10_000_000,
        )
        .unwrap();
        assert!((c.value - std::f64::consts::PI / 4.0).abs() < 1e-11);
    }
}
