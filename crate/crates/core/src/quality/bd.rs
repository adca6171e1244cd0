//! Bjontegaard delta rate and PSNR.
//!
//! Each curve is fitted with a least-squares cubic and the mean gap over the
//! overlapping interval is taken from the exact antiderivative. When the
//! cubic misses a sample by more than [`FIT_TOLERANCE`], a shape-preserving
//! piecewise cubic Hermite interpolant is used for that curve instead.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::rd::RdCurve;
use crate::error::{Error, Result};

pub const FIT_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BdMode {
    /// Average rate difference in percent at equal PSNR.
    Rate,
    /// Average PSNR difference in dB at equal rate.
    Psnr,
}

/// A fitted one-dimensional curve.
#[derive(Clone, Debug, PartialEq)]
pub enum Fit {
    /// Cubic in the normalized variable `(x - center) / scale`, lowest power first.
    Cubic { coef: [f64; 4], center: f64, scale: f64 },
    /// Piecewise cubic Hermite through the knots with the given slopes.
    Pchip { x: Vec<f64>, y: Vec<f64>, slope: Vec<f64> },
}

impl Fit {
    pub fn new(x: &[f64], y: &[f64]) -> Result<Self> {
        if x.len() != y.len() || x.len() < 4 {
            return Err(Error::Fit(format!("need at least 4 points, got {}", x.len())));
        }
        let (lo, hi) = min_max(x);
        let center = 0.5 * (lo + hi);
        let scale = (0.5 * (hi - lo)).max(f64::MIN_POSITIVE);
        let a = DMatrix::from_fn(x.len(), 4, |i, j| ((x[i] - center) / scale).powi(j as i32));
        let coef = a
            .clone()
            .svd(true, true)
            .solve(&DVector::from_column_slice(y), 1e-14)
            .map_err(|e| Error::Fit(e.to_string()))?;
        let cubic = Fit::Cubic { coef: [coef[0], coef[1], coef[2], coef[3]], center, scale };
        let residual = x.iter().zip(y).map(|(&xi, &yi)| (cubic.eval(xi) - yi).abs()).fold(0.0, f64::max);
        if residual <= FIT_TOLERANCE {
            return Ok(cubic);
        }
        Fit::pchip(x, y)
    }

    /// Fritsch-Carlson monotone Hermite interpolant.
    pub fn pchip(x: &[f64], y: &[f64]) -> Result<Self> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
        let xs: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
        let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        if xs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Fit("abscissae must be distinct".into()));
        }
        let n = xs.len();
        let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
        let d: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / h[i]).collect();
        let mut m = vec![0.0; n];
        for k in 1..n - 1 {
            if d[k - 1] * d[k] > 0.0 {
                let w1 = 2.0 * h[k] + h[k - 1];
                let w2 = h[k] + 2.0 * h[k - 1];
                m[k] = (w1 + w2) / (w1 / d[k - 1] + w2 / d[k]);
            }
        }
        m[0] = end_slope(h[0], h[1], d[0], d[1]);
        m[n - 1] = end_slope(h[n - 2], h[n - 3], d[n - 2], d[n - 3]);
        Ok(Fit::Pchip { x: xs, y: ys, slope: m })
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Fit::Cubic { coef, center, scale } => {
                let u = (t - center) / scale;
                coef[0] + u * (coef[1] + u * (coef[2] + u * coef[3]))
            }
            Fit::Pchip { x, y, slope } => {
                let k = x.partition_point(|&v| v <= t).clamp(1, x.len() - 1) - 1;
                hermite(x[k], x[k + 1], y[k], y[k + 1], slope[k], slope[k + 1], t)
            }
        }
    }

    /// Exact integral over `[a, b]`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        match self {
            Fit::Cubic { coef, center, scale } => {
                let anti = |t: f64| {
                    let u = (t - center) / scale;
                    scale * u * (coef[0] + u * (coef[1] / 2.0 + u * (coef[2] / 3.0 + u * coef[3] / 4.0)))
                };
                anti(b) - anti(a)
            }
            Fit::Pchip { x, .. } => {
                // Simpson's rule is exact for each cubic piece.
                let mut cuts = vec![a];
                cuts.extend(x.iter().copied().filter(|&v| v > a && v < b));
                cuts.push(b);
                cuts.windows(2)
                    .map(|w| {
                        let (l, r) = (w[0], w[1]);
                        (r - l) / 6.0 * (self.eval(l) + 4.0 * self.eval(0.5 * (l + r)) + self.eval(r))
                    })
                    .sum()
            }
        }
    }
}

fn end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let m = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if m.signum() != d0.signum() {
        0.0
    } else if d0.signum() != d1.signum() && m.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        m
    }
}

fn hermite(x0: f64, x1: f64, y0: f64, y1: f64, m0: f64, m1: f64, t: f64) -> f64 {
    let h = x1 - x0;
    let s = (t - x0) / h;
    let (s2, s3) = (s * s, s * s * s);
    (2.0 * s3 - 3.0 * s2 + 1.0) * y0 + (s3 - 2.0 * s2 + s) * h * m0 + (-2.0 * s3 + 3.0 * s2) * y1 + (s3 - s2) * h * m1
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Fits and overlap used by [`bd_delta`], exposed for inspection.
pub struct BdFits {
    pub anchor: Fit,
    pub test: Fit,
    pub lo: f64,
    pub hi: f64,
}

pub fn bd_fits(anchor: &RdCurve, test: &RdCurve, mode: BdMode) -> Result<BdFits> {
    let log_rate = |c: &RdCurve| c.rates().iter().map(|r| r.log10()).collect::<Vec<_>>();
    let (xa, ya, xt, yt) = match mode {
        BdMode::Psnr => (log_rate(anchor), anchor.psnrs(), log_rate(test), test.psnrs()),
        BdMode::Rate => (anchor.psnrs(), log_rate(anchor), test.psnrs(), log_rate(test)),
    };
    let (a_lo, a_hi) = min_max(&xa);
    let (t_lo, t_hi) = min_max(&xt);
    let (lo, hi) = (a_lo.max(t_lo), a_hi.min(t_hi));
    if !(hi > lo) {
        return Err(Error::Domain("curves do not overlap".into()));
    }
    Ok(BdFits { anchor: Fit::new(&xa, &ya)?, test: Fit::new(&xt, &yt)?, lo, hi })
}

/// BD-rate (percent) or BD-PSNR (dB) of `test` relative to `anchor`.
pub fn bd_delta(anchor: &RdCurve, test: &RdCurve, mode: BdMode) -> Result<f64> {
    let f = bd_fits(anchor, test, mode)?;
    let gap = (f.test.integral(f.lo, f.hi) - f.anchor.integral(f.lo, f.hi)) / (f.hi - f.lo);
    Ok(match mode {
        BdMode::Psnr => gap,
        BdMode::Rate => (10f64.powf(gap) - 1.0) * 100.0,
    })
}
