//! Monotone rational-quadratic splines on `[0, 2π]`.
//!
//! On bin `k` with knots `(x_k, y_k)`, `(x_{k+1}, y_{k+1})`, knot
//! derivatives `δ_k`, `δ_{k+1}`, slope `s = (y_{k+1} − y_k)/(x_{k+1} − x_k)`
//! and `ξ = (x − x_k)/(x_{k+1} − x_k)`:
//!
//! ```text
//! f(x) = y_k + (y_{k+1} − y_k)·(s ξ² + δ_k ξ(1−ξ)) / (s + (δ_{k+1} + δ_k − 2s) ξ(1−ξ))
//! ```

use std::f64::consts::TAU;

use crate::error::{contract, Result};

pub const DEFAULT_BINS: usize = 8;
/// Smallest bin width or height, as a fraction of the domain.
pub const MIN_BIN: f64 = 1e-3;
pub const MIN_DERIVATIVE: f64 = 1e-3;
/// `−ln 2π`, the log density of the uniform base distribution.
pub const LOG_BASE_DENSITY: f64 = -1.837_877_066_409_345_5;

/// Offset added to raw derivative outputs so that a zero raw value maps to
/// a knot derivative of exactly one.
pub fn derivative_shift() -> f64 {
    (1.0 - MIN_DERIVATIVE).exp_m1().ln()
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn bins_from_logits(raw: &[f64]) -> Vec<f64> {
    let k = raw.len() as f64;
    let m = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = raw.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| TAU * (MIN_BIN + (1.0 - k * MIN_BIN) * v / z)).collect()
}

fn knots(sizes: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(sizes.len() + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for s in &sizes[..sizes.len() - 1] {
        acc += s;
        out.push(acc);
    }
    out.push(TAU);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplineParams {
    xs: Vec<f64>,
    ys: Vec<f64>,
    deltas: Vec<f64>,
}

/// Position inside one bin.
struct Local {
    k: usize,
    xi: f64,
    s: f64,
}

impl SplineParams {
    /// Checks `x_1 = y_1 = 0`, `x_{K+1} = y_{K+1} = 2π`, strict monotonicity
    /// and positive derivatives.
    pub fn new(xs: Vec<f64>, ys: Vec<f64>, deltas: Vec<f64>) -> Result<Self> {
        let k1 = xs.len();
        if k1 < 2 || ys.len() != k1 || deltas.len() != k1 {
            return Err(contract("spline needs K+1 ≥ 2 knots and one derivative per knot"));
        }
        if xs[0] != 0.0 || ys[0] != 0.0 || xs[k1 - 1] != TAU || ys[k1 - 1] != TAU {
            return Err(contract("spline knots must span [0, 2π]"));
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) || ys.windows(2).any(|w| w[1] <= w[0]) {
            return Err(contract("spline knots must be strictly increasing"));
        }
        if deltas.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(contract("spline derivatives must be positive"));
        }
        Ok(Self { xs, ys, deltas })
    }

    /// Uniform knots with unit derivatives: `f(x) = x`.
    pub fn identity(bins: usize) -> Self {
        build_spline(&vec![0.0; 3 * bins + 1], bins).expect("valid length")
    }

    pub fn bins(&self) -> usize {
        self.xs.len() - 1
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    fn check_domain(v: f64) -> Result<()> {
        if (0.0..=TAU).contains(&v) {
            Ok(())
        } else {
            Err(contract(format!("{v} lies outside the spline domain [0, 2π]")))
        }
    }

    fn bin_of(knots: &[f64], v: f64) -> usize {
        (knots.partition_point(|&k| k <= v).max(1) - 1).min(knots.len() - 2)
    }

    fn local(&self, x: f64) -> Local {
        let k = Self::bin_of(&self.xs, x);
        let w = self.xs[k + 1] - self.xs[k];
        let h = self.ys[k + 1] - self.ys[k];
        Local { k, xi: (x - self.xs[k]) / w, s: h / w }
    }

    /// `(f(x), log f′(x))`.
    pub fn forward(&self, x: f64) -> Result<(f64, f64)> {
        Self::check_domain(x)?;
        let Local { k, xi, s } = self.local(x);
        let (d0, d1) = (self.deltas[k], self.deltas[k + 1]);
        let h = self.ys[k + 1] - self.ys[k];
        let t = xi * (1.0 - xi);
        let den = s + (d1 + d0 - 2.0 * s) * t;
        let y = self.ys[k] + h * (s * xi * xi + d0 * t) / den;
        let dnum = s * s * (d1 * xi * xi + 2.0 * s * t + d0 * (1.0 - xi) * (1.0 - xi));
        Ok((y, dnum.ln() - 2.0 * den.ln()))
    }

    /// Solves `f(x) = y` by the quadratic formula on the bin containing `y`.
    pub fn inverse(&self, y: f64) -> Result<f64> {
        Self::check_domain(y)?;
        let k = Self::bin_of(&self.ys, y);
        let w = self.xs[k + 1] - self.xs[k];
        let h = self.ys[k + 1] - self.ys[k];
        let s = h / w;
        let (d0, d1) = (self.deltas[k], self.deltas[k + 1]);
        let dy = y - self.ys[k];
        let c2 = d1 + d0 - 2.0 * s;
        let a = h * (s - d0) + dy * c2;
        let b = h * d0 - dy * c2;
        let c = -s * dy;
        let disc = (b * b - 4.0 * a * c).max(0.0);
        let xi = (2.0 * c / (-b - disc.sqrt())).clamp(0.0, 1.0);
        let xi = if xi.is_nan() { 0.0 } else { xi };
        Ok(self.xs[k] + xi * w)
    }

    /// `log p(x) = −log 2π + log f′(x)` under a uniform base density.
    pub fn log_density(&self, x: f64) -> Result<f64> {
        Ok(LOG_BASE_DENSITY + self.forward(x)?.1)
    }
}

/// Builds spline parameters from `3K + 1` raw outputs: `K` width logits,
/// `K` height logits and `K + 1` derivative pre-activations.
pub fn build_spline(raw: &[f64], bins: usize) -> Result<SplineParams> {
    if bins == 0 || raw.len() != 3 * bins + 1 {
        return Err(contract(format!(
            "spline with {bins} bins needs {} raw values, got {}",
            3 * bins + 1,
            raw.len()
        )));
    }
    let xs = knots(&bins_from_logits(&raw[..bins]));
    let ys = knots(&bins_from_logits(&raw[bins..2 * bins]));
    let shift = derivative_shift();
    let deltas = raw[2 * bins..]
        .iter()
        .map(|&r| softplus(r + shift) + MIN_DERIVATIVE)
        .collect();
    SplineParams::new(xs, ys, deltas)
}
