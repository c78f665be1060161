//! Small scalar solvers shared across modules.

use crate::error::{PotError, Result};

/// Root of `f` on `[lo, hi]` by bisection with secant acceleration.
pub fn find_root(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> Result<f64> {
    let mut flo = f(lo);
    let fhi = f(hi);
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo.signum() == fhi.signum() || !flo.is_finite() || !fhi.is_finite() {
        return Err(PotError::Numeric(format!(
            "root not bracketed on [{lo}, {hi}] (f = {flo}, {fhi})"
        )));
    }
    let mut fh = fhi;
    for _ in 0..300 {
        let secant = hi - fh * (hi - lo) / (fh - flo);
        let mid = 0.5 * (lo + hi);
        let x = if secant > lo && secant < hi && (secant - mid).abs() < 0.5 * (hi - lo) {
            secant
        } else {
            mid
        };
        let fx = f(x);
        if fx == 0.0 || (hi - lo) < tol {
            return Ok(x);
        }
        if fx.signum() == flo.signum() {
            lo = x;
            flo = fx;
        } else {
            hi = x;
            fh = fx;
        }
        if (hi - lo) < tol {
            return Ok(0.5 * (lo + hi));
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Exponential tilt `w_i e^{theta x_i}` (normalized) whose mean of `x` is `target`.
///
/// Minimizes relative entropy to `w` under the mean constraint; solved by
/// damped Newton on `theta` after rescaling `x` to unit spread.
pub fn tilt_to_mean(w: &[f64], x: &[f64], target: f64) -> Result<Vec<f64>> {
    let (xmin, xmax) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    if !(target > xmin && target < xmax) {
        return Err(PotError::Numeric(format!(
            "tilt target {target} outside the support [{xmin}, {xmax}]"
        )));
    }
    let scale = xmax - xmin;
    let z: Vec<f64> = x.iter().map(|v| (v - target) / scale).collect();
    let lw: Vec<f64> = w.iter().map(|v| v.ln()).collect();
    let tilted = |theta: f64| -> (Vec<f64>, f64, f64) {
        let l: Vec<f64> = lw.iter().zip(&z).map(|(a, b)| a + theta * b).collect();
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        let mean: f64 = p.iter().zip(&z).map(|(a, b)| a * b).sum();
        let var: f64 = p.iter().zip(&z).map(|(a, b)| a * (b - mean).powi(2)).sum();
        (p, mean, var)
    };
    let mut theta = 0.0;
    let (mut p, mut mean, mut var) = tilted(theta);
    for _ in 0..200 {
        if mean.abs() < 1e-15 {
            break;
        }
        let mut step = -mean / var.max(1e-300);
        loop {
            let (p2, m2, v2) = tilted(theta + step);
            if m2.abs() < mean.abs() || step.abs() < 1e-300 {
                theta += step;
                p = p2;
                mean = m2;
                var = v2;
                break;
            }
            step *= 0.5;
        }
    }
    if mean.abs() > 1e-12 {
        return Err(PotError::Numeric(format!("tilt did not reach mean {target}")));
    }
    Ok(p)
}
