//! Option pricing, smile interpolation, Breeden-Litzenberger densities and
//! variance strips.
//!
//! Rates and dividends are zero throughout, so every price is undiscounted and
//! the forward of an SPX maturity equals spot.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{check_finite, PotError, Result};

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn check_black_inputs(forward: f64, strike: f64, vol: f64, tau: f64) -> Result<()> {
    check_finite("forward", forward)?;
    check_finite("strike", strike)?;
    check_finite("vol", vol)?;
    check_finite("tau", tau)?;
    if forward <= 0.0 || strike <= 0.0 || tau <= 0.0 {
        return Err(PotError::Input(format!(
            "forward, strike and tau must be positive (F={forward}, K={strike}, tau={tau})"
        )));
    }
    if vol < 0.0 {
        return Err(PotError::Input(format!("negative vol {vol}")));
    }
    Ok(())
}

/// Undiscounted Black-76 price.
pub fn black_price(forward: f64, strike: f64, vol: f64, tau: f64, is_call: bool) -> Result<f64> {
    check_black_inputs(forward, strike, vol, tau)?;
    Ok(black_unchecked(forward, strike, vol, tau, is_call))
}

pub(crate) fn black_unchecked(forward: f64, strike: f64, vol: f64, tau: f64, is_call: bool) -> f64 {
    let sd = vol * tau.sqrt();
    if sd <= 0.0 {
        return if is_call {
            (forward - strike).max(0.0)
        } else {
            (strike - forward).max(0.0)
        };
    }
    let d1 = (forward / strike).ln() / sd + 0.5 * sd;
    let d2 = d1 - sd;
    let p = if is_call {
        forward * norm_cdf(d1) - strike * norm_cdf(d2)
    } else {
        strike * norm_cdf(-d2) - forward * norm_cdf(-d1)
    };
    p.max(0.0)
}

/// Forward delta of a call, `N(d1)`. Degenerates to a step at zero vol.
pub fn black_call_delta(forward: f64, strike: f64, vol: f64, tau: f64) -> f64 {
    let sd = vol * tau.sqrt();
    if sd <= 0.0 {
        return if forward > strike {
            1.0
        } else if forward < strike {
            0.0
        } else {
            0.5
        };
    }
    norm_cdf((forward / strike).ln() / sd + 0.5 * sd)
}

/// Black vega, `dPrice/dvol`; identical for calls and puts.
pub fn black_vega(forward: f64, strike: f64, vol: f64, tau: f64) -> f64 {
    let sd = vol * tau.sqrt();
    if sd <= 0.0 {
        return 0.0;
    }
    let d1 = (forward / strike).ln() / sd + 0.5 * sd;
    forward * norm_pdf(d1) * tau.sqrt()
}

/// Implied Black vol, inverted by safeguarded Newton inside a bisection bracket.
pub fn implied_vol(price: f64, forward: f64, strike: f64, tau: f64, is_call: bool) -> Result<f64> {
    check_black_inputs(forward, strike, 0.0, tau)?;
    check_finite("price", price)?;
    let intrinsic = if is_call {
        (forward - strike).max(0.0)
    } else {
        (strike - forward).max(0.0)
    };
    let cap = if is_call { forward } else { strike };
    let tol = 1e-14 * cap.max(1.0);
    if price < intrinsic - tol || price > cap + tol {
        return Err(PotError::Inversion(format!(
            "price {price} outside [{intrinsic}, {cap}]"
        )));
    }
    if price <= intrinsic + tol {
        return Ok(0.0);
    }
    if price >= cap - tol {
        return Err(PotError::Inversion(format!("price {price} at the upper bound {cap}")));
    }
    let f = |s: f64| black_unchecked(forward, strike, s, tau, is_call) - price;
    let mut lo = 0.0;
    let mut hi = 1.0;
    while f(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > 1e4 {
            return Err(PotError::Inversion(format!("no vol reproduces price {price}")));
        }
    }
    let mut s = 0.5 * (lo + hi);
    for _ in 0..200 {
        let fs = f(s);
        if fs.abs() <= 1e-13 * cap.max(1.0) {
            return Ok(s);
        }
        if fs < 0.0 {
            lo = s;
        } else {
            hi = s;
        }
        let vega = black_vega(forward, strike, s, tau);
        let newton = if vega > 0.0 { s - fs / vega } else { f64::NAN };
        s = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo < 1e-15 * hi.max(1.0) {
            return Ok(s);
        }
    }
    Ok(s)
}

/// Implied-vol smile for one expiry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolSmile {
    pub expiry: f64,
    pub forward: f64,
    pub strikes: Vec<f64>,
    pub vols: Vec<f64>,
}

impl VolSmile {
    pub fn new(expiry: f64, forward: f64, strikes: Vec<f64>, vols: Vec<f64>) -> Result<Self> {
        let s = VolSmile { expiry, forward, strikes, vols };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.strikes.len() != self.vols.len() {
            return Err(PotError::Input("strikes and vols differ in length".into()));
        }
        if self.strikes.len() < 3 {
            return Err(PotError::Input(format!(
                "smile needs at least 3 strikes, got {}",
                self.strikes.len()
            )));
        }
        if !(self.expiry > 0.0 && self.forward > 0.0) {
            return Err(PotError::Input("smile expiry and forward must be positive".into()));
        }
        if self.strikes.windows(2).any(|w| !(w[1] > w[0])) || self.strikes[0] <= 0.0 {
            return Err(PotError::Input("smile strikes must be positive and strictly increasing".into()));
        }
        if self.vols.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(PotError::Input("smile vols must be strictly positive".into()));
        }
        Ok(())
    }

    pub fn interpolator(&self) -> MonotoneCubic {
        MonotoneCubic::new(&self.strikes, &self.vols)
    }

    pub fn with_forward(&self, forward: f64) -> VolSmile {
        VolSmile { forward, ..self.clone() }
    }

    /// Same smile with every vol moved by `shift`.
    pub fn shifted(&self, shift: f64) -> VolSmile {
        VolSmile {
            vols: self.vols.iter().map(|v| v + shift).collect(),
            ..self.clone()
        }
    }

    pub fn price(&self, strike: f64, is_call: bool) -> f64 {
        black_unchecked(self.forward, strike, smile_eval(self, strike), self.expiry, is_call)
    }
}

/// Fritsch-Carlson monotone cubic Hermite interpolant with flat extrapolation.
#[derive(Debug, Clone)]
pub struct MonotoneCubic {
    x: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl MonotoneCubic {
    pub fn new(x: &[f64], y: &[f64]) -> Self {
        let n = x.len();
        let d: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / (x[k + 1] - x[k])).collect();
        let mut m = vec![0.0; n];
        m[0] = d[0];
        m[n - 1] = d[n - 2];
        for k in 1..n - 1 {
            m[k] = if d[k - 1] * d[k] > 0.0 { 0.5 * (d[k - 1] + d[k]) } else { 0.0 };
        }
        for k in 0..n - 1 {
            if d[k] == 0.0 {
                m[k] = 0.0;
                m[k + 1] = 0.0;
                continue;
            }
            let a = m[k] / d[k];
            let b = m[k + 1] / d[k];
            let r = a * a + b * b;
            if r > 9.0 {
                let t = 3.0 / r.sqrt();
                m[k] = t * a * d[k];
                m[k + 1] = t * b * d[k];
            }
        }
        MonotoneCubic { x: x.to_vec(), y: y.to_vec(), m }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        if t <= self.x[0] {
            return self.y[0];
        }
        if t >= self.x[n - 1] {
            return self.y[n - 1];
        }
        let k = self.x.partition_point(|&xi| xi <= t) - 1;
        let h = self.x[k + 1] - self.x[k];
        let s = (t - self.x[k]) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        h00 * self.y[k] + h10 * h * self.m[k] + h01 * self.y[k + 1] + h11 * h * self.m[k + 1]
    }
}

/// Interpolated vol at `strike`.
pub fn smile_eval(smile: &VolSmile, strike: f64) -> f64 {
    smile.interpolator().eval(strike)
}

/// A discrete probability law on an ascending grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalLaw {
    pub grid: Vec<f64>,
    pub weights: Vec<f64>,
}

impl MarginalLaw {
    pub fn new(grid: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if grid.len() != weights.len() || grid.is_empty() {
            return Err(PotError::Input("law grid and weights differ in length".into()));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(PotError::Input("law grid must be strictly increasing".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(PotError::Input("law weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(PotError::Input(format!("law weights sum to {total}")));
        }
        Ok(MarginalLaw { grid, weights })
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.grid.iter().zip(&self.weights).map(|(x, w)| w * f(*x)).sum()
    }

    pub fn mean(&self) -> f64 {
        self.expect(|x| x)
    }

    /// Price of `E[(X-K)^+]` or `E[(K-X)^+]` under the law.
    pub fn option_price(&self, strike: f64, is_call: bool) -> f64 {
        if is_call {
            self.expect(|x| (x - strike).max(0.0))
        } else {
            self.expect(|x| (strike - x).max(0.0))
        }
    }
}

/// Normalize nonnegative weights in place to unit mass.
pub(crate) fn normalize(w: &mut [f64]) {
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
}

const CLIP_TOL: f64 = 1e-10;

/// Breeden-Litzenberger law of the smile's underlying on `grid`.
///
/// Masses are second differences of undiscounted calls, chosen so that the
/// linear interpolant of the discrete law's call prices agrees with the market
/// at every interior node.
pub fn bl_density(smile: &VolSmile, grid: &[f64]) -> Result<MarginalLaw> {
    let n = grid.len();
    if n < 2 {
        return Err(PotError::Grid("density grid needs at least two points".into()));
    }
    let interp = smile.interpolator();
    let calls: Vec<f64> = grid
        .iter()
        .map(|&k| black_unchecked(smile.forward, k, interp.eval(k), smile.expiry, true))
        .collect();
    let slopes: Vec<f64> = (0..n - 1)
        .map(|i| (calls[i + 1] - calls[i]) / (grid[i + 1] - grid[i]))
        .collect();
    let mut w = vec![0.0; n];
    w[0] = 1.0 + slopes[0];
    for i in 1..n - 1 {
        w[i] = slopes[i] - slopes[i - 1];
    }
    w[n - 1] = -slopes[n - 2];
    for (i, x) in w.iter_mut().enumerate() {
        if !x.is_finite() {
            return Err(PotError::Numeric(format!("non-finite density mass at node {i}")));
        }
        if *x < -CLIP_TOL {
            return Err(PotError::Arbitrage(format!(
                "negative density {x:.3e} at strike {}",
                grid[i]
            )));
        }
        *x = x.max(0.0);
    }
    normalize(&mut w);
    MarginalLaw::new(grid.to_vec(), w)
}

fn check_strip(smile: &VolSmile) -> Result<()> {
    if smile.strikes.len() < 3 || smile.strikes.len() != smile.vols.len() {
        return Err(PotError::Input("a strip needs at least 3 quoted strikes".into()));
    }
    if smile.vols.iter().any(|v| !(*v >= 0.0)) {
        return Err(PotError::Input("strip vols must be nonnegative".into()));
    }
    Ok(())
}

const STRIP_POINTS: usize = 4001;
const STRIP_WIDTH_SD: f64 = 12.0;

/// Trapezoid over log-moneyness `x = ln(K/F)` on a symmetric grid through 0.
fn strip_integral(smile: &VolSmile, f: impl Fn(f64, f64) -> f64) -> f64 {
    let vmax = smile.vols.iter().cloned().fold(0.0, f64::max);
    let width = STRIP_WIDTH_SD * vmax * smile.expiry.sqrt();
    if width <= 0.0 {
        return 0.0;
    }
    let interp = smile.interpolator();
    let h = 2.0 * width / (STRIP_POINTS - 1) as f64;
    let mut acc = 0.0;
    for i in 0..STRIP_POINTS {
        let x = -width + h * i as f64;
        let k = smile.forward * x.exp();
        let wt = if i == 0 || i == STRIP_POINTS - 1 { 0.5 } else { 1.0 };
        acc += wt * f(k, interp.eval(k)) * k;
    }
    acc * h
}

fn otm(smile: &VolSmile, k: f64, vol: f64) -> f64 {
    black_unchecked(smile.forward, k, vol, smile.expiry, k >= smile.forward)
}

/// Annualized variance-swap strike of an SPX smile, `(2/T) int OTM(K)/K^2 dK`.
pub fn log_contract_var(smile: &VolSmile) -> Result<f64> {
    check_strip(smile)?;
    let integral = strip_integral(smile, |k, vol| otm(smile, k, vol) / (k * k));
    Ok(2.0 * integral / smile.expiry)
}

/// Derivative of [`log_contract_var`] under a parallel vol shift.
pub fn log_contract_vega(smile: &VolSmile) -> Result<f64> {
    check_strip(smile)?;
    let (f, t) = (smile.forward, smile.expiry);
    let integral = strip_integral(smile, |k, vol| black_vega(f, k, vol, t) / (k * k));
    Ok(2.0 * integral / t)
}

/// Derivative of [`log_contract_var`] in the forward, vols fixed at strikes.
pub fn log_contract_delta(smile: &VolSmile) -> Result<f64> {
    check_strip(smile)?;
    let (f, t) = (smile.forward, smile.expiry);
    let integral = strip_integral(smile, |k, vol| otm_delta(f, k, vol, t) / (k * k));
    Ok(2.0 * integral / t)
}

/// Forward delta of the out-of-the-money option; averaged at `k == f`.
fn otm_delta(f: f64, k: f64, vol: f64, t: f64) -> f64 {
    let d = black_call_delta(f, k, vol, t);
    if k > f {
        d
    } else if k < f {
        d - 1.0
    } else {
        d - 0.5
    }
}

/// `E[V^2]` implied by a VIX smile: `F^2 + 2 int_0^F P dK + 2 int_F^inf C dK`.
pub fn vix_strip_var(smile: &VolSmile) -> Result<f64> {
    check_strip(smile)?;
    let integral = strip_integral(smile, |k, vol| otm(smile, k, vol));
    Ok(smile.forward * smile.forward + 2.0 * integral)
}

/// Derivative of [`vix_strip_var`] in the forward with vols held at fixed strikes.
pub fn vix_strip_delta(smile: &VolSmile) -> Result<f64> {
    check_strip(smile)?;
    let f = smile.forward;
    let t = smile.expiry;
    // the integrand jumps by one at the forward node
    let integral = strip_integral(smile, |k, vol| otm_delta(f, k, vol, t));
    Ok(2.0 * f + 2.0 * integral)
}

/// One market observation: SPX smiles at two maturities, the VIX smile at the
/// first maturity, the VIX future and the SPX/VIX basis.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketSnapshot {
    pub spx_spot: f64,
    pub spx_smile_t1: VolSmile,
    pub spx_smile_t2: VolSmile,
    pub vix_smile: VolSmile,
    pub vix_future: f64,
    pub basis: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmileQuotes {
    pub strikes: Vec<f64>,
    pub vols: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotSmiles {
    pub spx_t1: SmileQuotes,
    pub spx_t2: SmileQuotes,
    pub vix: SmileQuotes,
}

/// On-disk layout of a snapshot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotFile {
    pub spot: f64,
    pub t1: f64,
    pub t2: f64,
    pub smiles: SnapshotSmiles,
    pub vix_future: f64,
    #[serde(default)]
    pub basis: f64,
}

impl MarketSnapshot {
    pub fn new(
        spx_spot: f64,
        spx_smile_t1: VolSmile,
        spx_smile_t2: VolSmile,
        vix_smile: VolSmile,
        vix_future: f64,
        basis: f64,
    ) -> Result<Self> {
        let s = MarketSnapshot { spx_spot, spx_smile_t1, spx_smile_t2, vix_smile, vix_future, basis };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        check_finite("spot", self.spx_spot)?;
        check_finite("basis", self.basis)?;
        if self.spx_spot <= 0.0 {
            return Err(PotError::Input("spot must be positive".into()));
        }
        self.spx_smile_t1.validate()?;
        self.spx_smile_t2.validate()?;
        self.vix_smile.validate()?;
        if !(self.t1() < self.t2()) {
            return Err(PotError::Input(format!("t1 {} must precede t2 {}", self.t1(), self.t2())));
        }
        if !(self.vix_future > 0.0) {
            return Err(PotError::Input("vix_future must be positive".into()));
        }
        Ok(())
    }

    pub fn t1(&self) -> f64 {
        self.spx_smile_t1.expiry
    }

    pub fn t2(&self) -> f64 {
        self.spx_smile_t2.expiry
    }

    /// Forward-start period `T2 - T1` in years.
    pub fn tau(&self) -> f64 {
        self.t2() - self.t1()
    }

    pub fn from_file(f: SnapshotFile) -> Result<Self> {
        let smile = |q: SmileQuotes, t: f64, fwd: f64| VolSmile::new(t, fwd, q.strikes, q.vols);
        MarketSnapshot::new(
            f.spot,
            smile(f.smiles.spx_t1, f.t1, f.spot)?,
            smile(f.smiles.spx_t2, f.t2, f.spot)?,
            smile(f.smiles.vix, f.t1, f.vix_future)?,
            f.vix_future,
            f.basis,
        )
    }

    pub fn to_file(&self) -> SnapshotFile {
        let q = |s: &VolSmile| SmileQuotes { strikes: s.strikes.clone(), vols: s.vols.clone() };
        SnapshotFile {
            spot: self.spx_spot,
            t1: self.t1(),
            t2: self.t2(),
            smiles: SnapshotSmiles {
                spx_t1: q(&self.spx_smile_t1),
                spx_t2: q(&self.spx_smile_t2),
                vix: q(&self.vix_smile),
            },
            vix_future: self.vix_future,
            basis: self.basis,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: SnapshotFile = serde_json::from_str(text).map_err(|e| {
            PotError::Input(format!("snapshot JSON at line {} column {}: {e}", e.line(), e.column()))
        })?;
        MarketSnapshot::from_file(f)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("snapshot serializes")
    }
}

/// Annualized forward variance over `[t1, t2]` implied by the SPX strips, net of basis.
pub fn forward_variance(snapshot: &MarketSnapshot) -> Result<f64> {
    let v1 = log_contract_var(&snapshot.spx_smile_t1)?;
    let v2 = log_contract_var(&snapshot.spx_smile_t2)?;
    let fv = forward_variance_from(v1, snapshot.t1(), v2, snapshot.t2()) - snapshot.basis;
    if fv < 0.0 {
        return Err(PotError::Arbitrage(format!("negative forward variance {fv}")));
    }
    Ok(fv)
}

pub fn forward_variance_from(var1: f64, t1: f64, var2: f64, t2: f64) -> f64 {
    (var2 * t2 - var1 * t1) / (t2 - t1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn log_contract_greeks_match_finite_differences() {
        let k: Vec<f64> = (0..36).map(|i| 100.0 * (-0.4 + 0.02 * i as f64).exp()).collect();
        let vols: Vec<f64> = k.iter().map(|x| 0.18 - 0.2 * (x / 100.0f64).ln() + 0.4 * (x / 100.0f64).ln().powi(2)).collect();
        let sm = VolSmile::new(60.0 / 365.0, 100.0, k, vols).unwrap();
        let h = 1e-4;
        let fd_vega = (log_contract_var(&sm.shifted(h)).unwrap() - log_contract_var(&sm.shifted(-h)).unwrap()) / (2.0 * h);
        let fd_delta = (log_contract_var(&sm.with_forward(100.0 + h)).unwrap()
            - log_contract_var(&sm.with_forward(100.0 - h)).unwrap())
            / (2.0 * h);
        assert!((log_contract_vega(&sm).unwrap() / fd_vega - 1.0).abs() < 1e-4);
        assert!((log_contract_delta(&sm).unwrap() / fd_delta - 1.0).abs() < 1e-3, "{} {fd_delta}", log_contract_delta(&sm).unwrap());
    }

    fn flat(t: f64, f: f64, vol: f64, lo: f64, hi: f64, n: usize) -> VolSmile {
        let strikes: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
        VolSmile::new(t, f, strikes, vec![vol; n]).unwrap()
    }

    #[test]
    fn atm_price_matches_high_precision_value() {
        // d1 = 0.1, d2 = -0.1; 100 * (2 N(0.1) - 1) = 7.965567455405804
        let p = black_price(100.0, 100.0, 0.2, 1.0, true).unwrap();
        assert!((p - 7.965567455405804).abs() < 1e-12, "{p}");
        assert!((p - 7.9656).abs() < 1e-4);
    }

    #[test]
    fn zero_vol_atm_is_worthless() {
        assert_eq!(black_price(100.0, 100.0, 0.0, 1.0, true).unwrap(), 0.0);
    }

    #[test]
    fn rejects_non_finite_inputs() {
        assert!(matches!(black_price(f64::NAN, 100.0, 0.2, 1.0, true), Err(PotError::Input(_))));
        assert!(matches!(black_price(100.0, 100.0, f64::INFINITY, 1.0, true), Err(PotError::Input(_))));
    }

    #[test]
    fn implied_vol_examples() {
        assert!((implied_vol(7.9656, 100.0, 100.0, 1.0, true).unwrap() - 0.2).abs() < 1e-4);
        assert_eq!(implied_vol(5.0, 105.0, 100.0, 1.0, true).unwrap(), 0.0);
        assert!(matches!(
            implied_vol(101.0, 100.0, 100.0, 1.0, true),
            Err(PotError::Inversion(_))
        ));
        assert!(matches!(
            implied_vol(4.0, 105.0, 100.0, 1.0, true),
            Err(PotError::Inversion(_))
        ));
    }

    proptest! {
        #[test]
        fn put_call_parity(f in 1.0f64..500.0, k in 1.0f64..500.0, vol in 0.0f64..3.0, t in 0.01f64..5.0) {
            let c = black_price(f, k, vol, t, true).unwrap();
            let p = black_price(f, k, vol, t, false).unwrap();
            prop_assert!((c - p - (f - k)).abs() <= 1e-12 * f.max(k));
            prop_assert!(c >= 0.0 && p >= 0.0);
        }

        #[test]
        fn implied_vol_inverts_price(f in 50.0f64..150.0, k in 50.0f64..150.0, vol in 0.05f64..1.5,
                                     t in 0.05f64..2.0, is_call in any::<bool>()) {
            let p = black_price(f, k, vol, t, is_call).unwrap();
            let intrinsic = if is_call { (f - k).max(0.0) } else { (k - f).max(0.0) };
            // skip prices with no time value left to resolve
            prop_assume!(p - intrinsic > 1e-8);
            let iv = implied_vol(p, f, k, t, is_call).unwrap();
            let back = black_price(f, k, iv, t, is_call).unwrap();
            prop_assert!((back - p).abs() <= 1e-10, "{} vs {}", back, p);
        }
    }

    #[test]
    fn smile_eval_examples() {
        let s = VolSmile::new(1.0, 100.0, vec![90.0, 100.0, 110.0], vec![0.25, 0.21, 0.18]).unwrap();
        assert_eq!(smile_eval(&s, 100.0), 0.21);
        assert_eq!(smile_eval(&s, 90.0), 0.25);
        assert_eq!(smile_eval(&s, 50.0), 0.25);
        assert_eq!(smile_eval(&s, 500.0), 0.18);
        let two = MonotoneCubic::new(&[90.0, 110.0], &[0.25, 0.15]);
        assert!((two.eval(100.0) - 0.20).abs() < 1e-15);
    }

    #[test]
    fn monotone_data_gives_monotone_interpolant() {
        let s = VolSmile::new(1.0, 100.0, vec![80.0, 90.0, 100.0, 101.0, 120.0], vec![0.4, 0.3, 0.2, 0.199, 0.1])
            .unwrap();
        let mut prev = f64::INFINITY;
        for i in 0..=400 {
            let v = smile_eval(&s, 75.0 + 50.0 * i as f64 / 400.0);
            assert!(v <= prev + 1e-15);
            prev = v;
        }
    }

    fn lognormal_pdf(x: f64, f: f64, vol: f64, t: f64) -> f64 {
        let sd = vol * t.sqrt();
        let z = ((x / f).ln() + 0.5 * sd * sd) / sd;
        norm_pdf(z) / (x * sd)
    }

    fn log_grid(f: f64, sd: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| f * (-5.0 * sd + 10.0 * sd * i as f64 / (n - 1) as f64).exp()).collect()
    }

    fn max_pdf_error(n: usize) -> f64 {
        let smile = flat(1.0, 100.0, 0.2, 20.0, 400.0, 5);
        let grid = log_grid(100.0, 0.2, n);
        let law = bl_density(&smile, &grid).unwrap();
        (1..n - 1)
            .map(|i| {
                let width = 0.5 * (grid[i + 1] - grid[i - 1]);
                (law.weights[i] / width - lognormal_pdf(grid[i], 100.0, 0.2, 1.0)).abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn bl_density_of_flat_smile_is_lognormal() {
        let err = max_pdf_error(200);
        assert!(err <= 1e-3, "{err}");
        let law = bl_density(&flat(1.0, 100.0, 0.2, 20.0, 400.0, 5), &log_grid(100.0, 0.2, 200)).unwrap();
        assert!((law.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((law.mean() / 100.0 - 1.0).abs() < 1e-3);
    }

    #[test]
    fn bl_density_refines() {
        let coarse = max_pdf_error(101);
        let fine = max_pdf_error(201);
        assert!(fine <= 0.5 * coarse, "{coarse} -> {fine}");
    }

    #[test]
    fn bl_density_rejects_butterfly_arbitrage() {
        let smile = VolSmile::new(1.0, 100.0, vec![90.0, 95.0, 100.0, 105.0, 110.0], vec![0.2, 0.2, 0.9, 0.2, 0.2])
            .unwrap();
        let grid: Vec<f64> = (0..81).map(|i| 80.0 + 0.5 * i as f64).collect();
        assert!(matches!(bl_density(&smile, &grid), Err(PotError::Arbitrage(_))));
    }

    #[test]
    fn flat_strip_recovers_sigma_squared() {
        let s = flat(0.25, 100.0, 0.2, 50.0, 150.0, 41);
        let v = log_contract_var(&s).unwrap();
        assert!((v / 0.04 - 1.0).abs() < 1e-2, "{v}");
        let doubled = log_contract_var(&s.shifted(0.2)).unwrap();
        assert!((doubled / v - 4.0).abs() < 4e-2);
    }

    #[test]
    fn strip_is_stable_under_refinement_on_the_smile() {
        let s = VolSmile::new(0.1, 100.0, vec![80.0, 90.0, 100.0, 110.0, 120.0], vec![0.3, 0.25, 0.2, 0.18, 0.17])
            .unwrap();
        let mut strikes = vec![];
        let mut vols = vec![];
        for i in 0..=40 {
            let k = 80.0 + i as f64;
            strikes.push(k);
            vols.push(smile_eval(&s, k));
        }
        let fine = VolSmile::new(0.1, 100.0, strikes, vols).unwrap();
        let a = log_contract_var(&s).unwrap();
        let b = log_contract_var(&fine).unwrap();
        assert!((a - b).abs() <= 1e-4, "{a} {b}");
    }

    #[test]
    fn zero_vol_vix_strip_is_forward_squared() {
        let s = VolSmile { expiry: 0.1, forward: 0.2, strikes: vec![0.1, 0.2, 0.3], vols: vec![0.0; 3] };
        assert_eq!(vix_strip_var(&s).unwrap(), 0.2 * 0.2);
        assert_eq!(vix_strip_delta(&s).unwrap(), 2.0 * 0.2);
        let short = VolSmile { strikes: vec![0.1, 0.2], vols: vec![0.5; 2], ..s };
        assert!(matches!(vix_strip_var(&short), Err(PotError::Input(_))));
    }

    #[test]
    fn vix_strip_matches_lognormal_second_moment() {
        let s = flat(30.0 / 365.0, 0.2, 0.9, 0.05, 0.8, 16);
        let v = vix_strip_var(&s).unwrap();
        let exact = 0.04 * (0.81f64 * 30.0 / 365.0).exp();
        assert!((v / exact - 1.0).abs() < 1e-6, "{v} {exact}");
    }

    #[test]
    fn strip_delta_matches_bump_of_forward() {
        let s = VolSmile::new(30.0 / 365.0, 0.2, vec![0.1, 0.15, 0.2, 0.3, 0.4], vec![0.6, 0.7, 0.85, 1.0, 1.1])
            .unwrap();
        let h = 1e-5;
        let up = vix_strip_var(&s.with_forward(0.2 + h)).unwrap();
        let dn = vix_strip_var(&s.with_forward(0.2 - h)).unwrap();
        let fd = (up - dn) / (2.0 * h);
        let d = vix_strip_delta(&s).unwrap();
        assert!((d / fd - 1.0).abs() < 1e-4, "{d} {fd}");
    }

    fn snap(v1: f64, v2: f64, basis: f64) -> MarketSnapshot {
        let t1 = 30.0 / 365.0;
        let t2 = 60.0 / 365.0;
        MarketSnapshot::new(
            100.0,
            flat(t1, 100.0, v1, 50.0, 150.0, 41),
            flat(t2, 100.0, v2, 50.0, 150.0, 41),
            flat(t1, 0.2, 0.8, 0.1, 0.4, 7),
            0.2,
            basis,
        )
        .unwrap()
    }

    #[test]
    fn forward_variance_examples() {
        let s = snap(0.2, 0.2, 0.0);
        assert!((forward_variance(&s).unwrap() / 0.04 - 1.0).abs() < 1e-2);
        let b = snap(0.2, 0.22, 0.003);
        let with = forward_variance(&b).unwrap();
        let without = forward_variance(&snap(0.2, 0.22, 0.0)).unwrap();
        assert!((with - without + 0.003).abs() < 1e-15);
        let direct = forward_variance_from(0.04, 30.0 / 365.0, 0.0484, 60.0 / 365.0);
        assert!((direct - 0.0568).abs() < 1e-6, "{direct}");
    }

    #[test]
    fn snapshot_validation() {
        let s = snap(0.2, 0.2, 0.0);
        let mut f = s.to_file();
        f.t2 = f.t1;
        assert!(MarketSnapshot::from_file(f).is_err());
        let mut f = s.to_file();
        f.vix_future = 0.0;
        assert!(MarketSnapshot::from_file(f).is_err());
        let back = MarketSnapshot::from_json(&s.to_json()).unwrap();
        assert_eq!(back, s);
        assert!(matches!(MarketSnapshot::from_json("{ not json"), Err(PotError::Input(_))));
    }
}
