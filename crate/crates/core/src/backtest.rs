//! Synthetic SPX/VIX markets and the hedging experiment.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate, CalibConfig, CalibratedModel};
use crate::dr::{dr_greeks, dr_roll};
use crate::error::{PotError, Result};
use crate::market::{
    black_call_delta, black_price, forward_variance, forward_variance_from, log_contract_var, smile_eval, vix_strip_var,
    MarketSnapshot, VolSmile,
};
use crate::numerics::find_root;
use crate::payoff::{delta_levels, strike_for_delta, Payoff};
use crate::perturb::{smile_skew, BumpKind, ScenarioSpec, SsrParams};

/// Quadratic-in-log-moneyness SPX smile, `atm + skew x + curv x^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpxSmileParams {
    pub atm: f64,
    pub skew: f64,
    pub curv: f64,
}

impl SpxSmileParams {
    pub fn vol(&self, x: f64) -> f64 {
        self.atm + self.skew * x + self.curv * x * x
    }
}

/// Parameters of a synthetic, self-consistent snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticMarket {
    pub spot: f64,
    pub t1_days: f64,
    pub t2_days: f64,
    pub spx_t1: SpxSmileParams,
    pub spx_t2: SpxSmileParams,
    /// Log-moneyness range and count of quoted SPX strikes.
    pub spx_x_range: (f64, f64),
    pub spx_n_strikes: usize,
    pub vix_strikes: Vec<f64>,
    /// VIX smile `atm + skew ln(K / ref)` in fixed strike coordinates.
    pub vix_atm: f64,
    pub vix_skew: f64,
    pub vix_ref: f64,
    pub basis: f64,
}

impl Default for SyntheticMarket {
    fn default() -> Self {
        SyntheticMarket {
            spot: 100.0,
            t1_days: 30.0,
            t2_days: 60.0,
            spx_t1: SpxSmileParams { atm: 0.17, skew: -0.25, curv: 0.5 },
            spx_t2: SpxSmileParams { atm: 0.18, skew: -0.2, curv: 0.4 },
            spx_x_range: (-0.4, 0.3),
            spx_n_strikes: 36,
            // 13 strikes on the 25-point VIX grid spanning [0.5 K_min, 1.5 K_max]
            vix_strikes: (0..13).map(|i| 0.12 + 0.02 * i as f64).collect(),
            vix_atm: 0.75,
            vix_skew: 0.35,
            vix_ref: 0.19,
            basis: 0.0,
        }
    }
}

impl SyntheticMarket {
    pub fn t1(&self) -> f64 {
        self.t1_days / 365.0
    }

    pub fn t2(&self) -> f64 {
        self.t2_days / 365.0
    }

    pub fn spx_smile(&self, p: &SpxSmileParams, expiry: f64, spot: f64) -> Result<VolSmile> {
        let (lo, hi) = self.spx_x_range;
        let n = self.spx_n_strikes;
        let x: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
        VolSmile::new(
            expiry,
            spot,
            x.iter().map(|v| spot * v.exp()).collect(),
            x.iter().map(|v| p.vol(*v)).collect(),
        )
    }

    /// VIX smile with every vol moved by `level_shift`, quoted for forward `fv`.
    pub fn vix_smile(&self, fv: f64, level_shift: f64) -> Result<VolSmile> {
        VolSmile::new(
            self.t1(),
            fv,
            self.vix_strikes.clone(),
            self.vix_strikes
                .iter()
                .map(|k| self.vix_atm + self.vix_skew * (k / self.vix_ref).ln() + level_shift)
                .collect(),
        )
    }

    /// Snapshot whose VIX future solves `E[V^2] = forward variance - basis`.
    pub fn snapshot(&self) -> Result<MarketSnapshot> {
        let s1 = self.spx_smile(&self.spx_t1, self.t1(), self.spot)?;
        let s2 = self.spx_smile(&self.spx_t2, self.t2(), self.spot)?;
        let base = MarketSnapshot::new(self.spot, s1, s2, self.vix_smile(self.vix_ref, 0.0)?, self.vix_ref, self.basis)?;
        let target = forward_variance(&base)?;
        let fv = solve_vix_future(&base.vix_smile, target)?;
        let vix = base.vix_smile.with_forward(fv);
        MarketSnapshot::new(self.spot, base.spx_smile_t1, base.spx_smile_t2, vix, fv, self.basis)
    }
}

/// VIX future `F` with `E[V^2](F) = target` for a smile fixed in strike.
pub fn solve_vix_future(smile: &VolSmile, target: f64) -> Result<f64> {
    let k = &smile.strikes;
    let (lo, hi) = (k[0], k[k.len() - 1]);
    find_root(
        |f| vix_strip_var(&smile.with_forward(f)).unwrap_or(f64::NAN) - target,
        lo,
        hi,
        1e-14,
    )
    .map_err(|e| PotError::Degenerate(format!("no VIX future matches forward variance {target}: {e}")))
}


/// Snapshot with VIX future `fv` and VIX smile level shift `level_shift`; the
/// T2 SPX ATM vol is re-solved so that the forward-variance identity holds.
pub fn consistent_snapshot(market: &SyntheticMarket, fv: f64, level_shift: f64) -> Result<MarketSnapshot> {
    let (t1, t2) = (market.t1(), market.t2());
    let s1 = market.spx_smile(&market.spx_t1, t1, market.spot)?;
    let vix = market.vix_smile(fv, level_shift)?;
    let target = vix_strip_var(&vix)? + market.basis;
    let var1 = log_contract_var(&s1)?;
    let smile2 = |x: f64| {
        let p = SpxSmileParams { atm: market.spx_t2.atm + x, ..market.spx_t2.clone() };
        market.spx_smile(&p, t2, market.spot)
    };
    let gap = |x: f64| match smile2(x).and_then(|s| log_contract_var(&s)) {
        Ok(v2) => forward_variance_from(var1, t1, v2, t2) - target,
        Err(_) => f64::NAN,
    };
    let (lo_x, hi_x) = market.spx_x_range;
    let floor = (0..=50)
        .map(|i| market.spx_t2.vol(lo_x + (hi_x - lo_x) * i as f64 / 50.0))
        .fold(f64::INFINITY, f64::min);
    let x = find_root(gap, -0.95 * floor, 1.0, 1e-14)
        .map_err(|e| PotError::Degenerate(format!("no T2 SPX level matches VIX future {fv}: {e}")))?;
    MarketSnapshot::new(market.spot, s1, smile2(x)?, vix, fv, market.basis)
}

/// Settings of the synthetic hedging experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BacktestConfig {
    pub market: SyntheticMarket,
    pub days: usize,
    /// Annualized volatility of the log VIX future.
    pub vol_of_vol: f64,
    /// Mean-reversion speed of the log VIX future towards its initial level.
    pub mean_reversion: f64,
    pub days_per_year: f64,
    /// SSR of the generated smile dynamics and of the POT hedge.
    pub ssr: f64,
    pub n_portfolios: usize,
    /// Full calibration every this many dates, reduced projection in between.
    pub recalib_every: usize,
    /// Parallel SPX vol bump behind the POT greeks.
    pub bump: f64,
    pub calibration: CalibConfig,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        BacktestConfig {
            market: SyntheticMarket::default(),
            days: 120,
            vol_of_vol: 0.3,
            mean_reversion: 4.0,
            days_per_year: 252.0,
            ssr: 1.2,
            n_portfolios: 50,
            recalib_every: 5,
            bump: 1e-3,
            calibration: CalibConfig::default(),
        }
    }
}

impl BacktestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.days < 2 {
            return Err(PotError::Input("backtest needs at least two dates".into()));
        }
        if !(self.vol_of_vol >= 0.0 && self.mean_reversion >= 0.0 && self.days_per_year > 0.0) {
            return Err(PotError::Input("path dynamics must be nonnegative".into()));
        }
        if !(self.ssr > 0.0) || !(self.bump > 0.0) || self.recalib_every == 0 {
            return Err(PotError::Input("ssr, bump and recalibration cadence must be positive".into()));
        }
        self.calibration.validate()
    }

    fn ssr_params(&self) -> SsrParams {
        SsrParams { ssr: self.ssr, ..SsrParams::default() }
    }
}

/// Daily synthetic market. One VIX expiry, quoted at constant maturity.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketPath {
    pub dates: Vec<usize>,
    pub snapshots: Vec<MarketSnapshot>,
    /// VIX futures per expiry, then per date.
    pub vix_futures: Vec<Vec<f64>>,
    pub seed: u64,
}

impl MarketPath {
    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }
}

/// Seeded path: log-OU VIX future, VIX vols moved at fixed strike by
/// `-ssr * skew * dF`, SPX T2 level solved for consistency.
pub fn gen_market_path(config: &BacktestConfig, seed: u64) -> Result<MarketPath> {
    config.validate()?;
    let market = &config.market;
    let base = market.snapshot()?;
    let f0 = base.vix_future;
    let bw = SsrParams::default().bandwidth;
    let dt = 1.0 / config.days_per_year;
    let sig = config.vol_of_vol;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut f, mut shift) = (f0, 0.0);
    let mut snapshots = vec![consistent_snapshot(market, f, shift)?];
    for _ in 1..config.days {
        let z: f64 = rng.sample(StandardNormal);
        let lf = f.ln() + config.mean_reversion * dt * (f0.ln() - f.ln()) - 0.5 * sig * sig * dt + sig * dt.sqrt() * z;
        let fnew = lf.exp();
        let prev = &snapshots[snapshots.len() - 1].vix_smile;
        let (skew, _) = smile_skew(prev, f, bw);
        shift -= config.ssr * skew * (fnew - f);
        f = fnew;
        snapshots.push(consistent_snapshot(market, f, shift)?);
    }
    let futures = snapshots.iter().map(|s| s.vix_future).collect();
    Ok(MarketPath { dates: (0..config.days).collect(), snapshots, vix_futures: vec![futures], seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsrEstimate {
    pub expiry: usize,
    pub ssr: f64,
    pub stderr: f64,
    pub n_obs: usize,
}

/// Least-squares slope, through the origin, of the daily fixed-strike ATM vol
/// change on `-skew * dF` over the date range `window`.
pub fn ssr_regress(path: &MarketPath, window: std::ops::Range<usize>) -> Result<Vec<SsrEstimate>> {
    if window.end > path.len() || window.start >= window.end {
        return Err(PotError::Input(format!("window {window:?} outside a path of {} dates", path.len())));
    }
    let n = window.len() - 1;
    if n < 10 {
        return Err(PotError::Estimation(format!("{n} observations, need at least 10")));
    }
    let bw = SsrParams::default().bandwidth;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    let mut pts = Vec::with_capacity(n);
    for t in window.start..window.end - 1 {
        let (a, b) = (&path.snapshots[t], &path.snapshots[t + 1]);
        let f = a.vix_future;
        let (skew, _) = smile_skew(&a.vix_smile, f, bw);
        let x = -skew * (b.vix_future - f);
        let y = smile_eval(&b.vix_smile, f) - smile_eval(&a.vix_smile, f);
        sxx += x * x;
        sxy += x * y;
        pts.push((x, y));
    }
    if !(sxx > 1e-300) {
        return Err(PotError::Estimation("regressor has zero variance".into()));
    }
    let beta = sxy / sxx;
    let rss: f64 = pts.iter().map(|(x, y)| (y - beta * x).powi(2)).sum();
    let stderr = (rss / (n - 1) as f64 / sxx).sqrt();
    Ok(vec![SsrEstimate { expiry: 0, ssr: beta, stderr, n_obs: n }])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LegKind {
    Call,
    Put,
    Future,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioLeg {
    pub expiry: usize,
    pub strike: f64,
    pub kind: LegKind,
    pub weight: f64,
}

impl PortfolioLeg {
    fn payoff(&self) -> Payoff {
        match self.kind {
            LegKind::Call => Payoff::VixCall { strike: self.strike },
            LegKind::Put => Payoff::VixPut { strike: self.strike },
            LegKind::Future => Payoff::VixFuture,
        }
    }

    fn key(&self) -> (u8, u64) {
        (self.kind as u8, self.strike.to_bits())
    }

    /// Market value per unit weight.
    fn value(&self, smile: &VolSmile) -> Result<f64> {
        let f = smile.forward;
        match self.kind {
            LegKind::Future => Ok(f),
            k => black_price(f, self.strike, smile_eval(smile, self.strike), smile.expiry, k == LegKind::Call),
        }
    }

    /// Sticky-strike Black delta per unit weight.
    fn black_delta(&self, smile: &VolSmile) -> f64 {
        let f = smile.forward;
        let d = || black_call_delta(f, self.strike, smile_eval(smile, self.strike), smile.expiry);
        match self.kind {
            LegKind::Future => 1.0,
            LegKind::Call => d(),
            LegKind::Put => d() - 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Portfolio {
    pub date: usize,
    pub legs: Vec<PortfolioLeg>,
}

/// `n` portfolios per date: 17 delta strikes on the day's VIX smile, puts
/// below 50 delta, weights uniform on `[-1, 1]`. Indexed `[date][portfolio]`.
pub fn gen_portfolios(path: &MarketPath, n: usize, seed: u64) -> Result<Vec<Vec<Portfolio>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(path.len());
    for (t, snap) in path.snapshots.iter().enumerate() {
        let smile = snap.vix_smile.with_forward(snap.vix_future);
        let strikes: Vec<(f64, LegKind)> = delta_levels()
            .into_iter()
            .map(|d| {
                let k = strike_for_delta(&smile, d).map_err(|e| PotError::Degenerate(format!("portfolio strikes on date {t}: {e}")))?;
                Ok((k, if d < 0.5 - 1e-9 { LegKind::Put } else { LegKind::Call }))
            })
            .collect::<Result<_>>()?;
        let day = (0..n)
            .map(|_| Portfolio {
                date: path.dates[t],
                legs: strikes
                    .iter()
                    .map(|&(strike, kind)| PortfolioLeg { expiry: 0, strike, kind, weight: rng.random_range(-1.0..=1.0) })
                    .collect(),
            })
            .collect();
        out.push(day);
    }
    Ok(out)
}

/// `alpha_j = -G_j / g_j`, one hedge instrument per expiry.
pub fn hedge_sizes(portfolio_greeks: &[f64], instrument_greeks: &[f64]) -> Result<Vec<f64>> {
    if portfolio_greeks.len() != instrument_greeks.len() {
        return Err(PotError::Input("one instrument greek per expiry expected".into()));
    }
    portfolio_greeks
        .iter()
        .zip(instrument_greeks)
        .enumerate()
        .map(|(j, (big, g))| {
            if g.abs() < 1e-12 {
                return Err(PotError::Hedge(format!("expiry {j} is unhedgeable (instrument greek {g:.3e})")));
            }
            Ok(-big / g)
        })
        .collect()
}

/// Sizes of two instruments matching portfolio delta and vega: solves
/// `G + A alpha = 0` with instrument greeks as the columns of `A`
/// (`a[i] = [delta_i, vega_i]`).
pub fn hedge_sizes_delta_vega(portfolio: [f64; 2], a: [[f64; 2]; 2]) -> Result<[f64; 2]> {
    let det = a[0][0] * a[1][1] - a[1][0] * a[0][1];
    let scale = a.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
    if !(det.abs() > 1e-12 * scale * scale) {
        return Err(PotError::Hedge(format!("delta/vega system is singular (det {det:.3e})")));
    }
    let m = nalgebra::Matrix2::new(a[0][0], a[1][0], a[0][1], a[1][1]);
    let x = m
        .lu()
        .solve(&nalgebra::Vector2::new(-portfolio[0], -portfolio[1]))
        .ok_or_else(|| PotError::Hedge("delta/vega system is singular".into()))?;
    Ok([x[0], x[1]])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HedgeMethod {
    Pot,
    Benchmark,
}

impl HedgeMethod {
    pub fn name(&self) -> &'static str {
        match self {
            HedgeMethod::Pot => "POT",
            HedgeMethod::Benchmark => "benchmark",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HedgeReport {
    pub method: HedgeMethod,
    /// Start date of each P&L observation.
    pub dates: Vec<usize>,
    /// `[portfolio][observation]`.
    pub pnl: Vec<Vec<f64>>,
    pub stdev: Vec<f64>,
    /// 20-day rolling stdev per portfolio.
    pub rolling: Vec<Vec<f64>>,
    /// Dates dropped after a calibration failure.
    pub skipped: Vec<usize>,
}

pub const ROLLING_WINDOW: usize = 20;

/// Sample standard deviation.
pub fn stdev(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = x.iter().sum::<f64>() / x.len() as f64;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

/// Sample stdev over every window of exactly `w` consecutive observations,
/// from running sums of the data shifted by its first value.
pub fn rolling_stdev(x: &[f64], w: usize) -> Vec<f64> {
    if w < 2 || x.len() < w {
        return vec![];
    }
    let k = x[0];
    let (mut s, mut q) = (0.0, 0.0);
    let mut out = Vec::with_capacity(x.len() - w + 1);
    for (i, v) in x.iter().enumerate() {
        let d = v - k;
        s += d;
        q += d * d;
        if i >= w {
            let old = x[i - w] - k;
            s -= old;
            q -= old * old;
        }
        if i + 1 >= w {
            let var = (q - s * s / w as f64) / (w - 1) as f64;
            out.push(var.max(0.0).sqrt());
        }
    }
    out
}

/// Per-leg greeks of one date, in units of the hedge instrument's greek.
struct DayGreeks {
    legs: BTreeMap<(u8, u64), f64>,
    instrument: f64,
}

fn benchmark_greeks(smile: &VolSmile, legs: &[&PortfolioLeg]) -> DayGreeks {
    DayGreeks { legs: legs.iter().map(|l| (l.key(), l.black_delta(smile))).collect(), instrument: 1.0 }
}

fn pot_greeks(model: &CalibratedModel, legs: &[&PortfolioLeg], spec: &ScenarioSpec) -> Result<DayGreeks> {
    let tabs: Vec<Vec<f64>> = std::iter::once(Payoff::VixFuture)
        .chain(legs.iter().map(|l| l.payoff()))
        .map(|p| p.tabulate(model.grid()))
        .collect();
    let refs: Vec<&[f64]> = tabs.iter().map(|v| v.as_slice()).collect();
    let (g, _) = dr_greeks(model, &refs, spec, true)?;
    Ok(DayGreeks { legs: legs.iter().zip(&g[1..]).map(|(l, v)| (l.key(), *v)).collect(), instrument: g[0] })
}

/// Daily hedged P&L `dP + alpha dF` of every portfolio under one method.
pub fn run_backtest(
    path: &MarketPath,
    portfolios: &[Vec<Portfolio>],
    method: HedgeMethod,
    config: &BacktestConfig,
) -> Result<HedgeReport> {
    if portfolios.len() != path.len() {
        return Err(PotError::Input(format!("{} portfolio dates for a path of {}", portfolios.len(), path.len())));
    }
    let n_port = portfolios.first().map_or(0, |d| d.len());
    if portfolios.iter().any(|d| d.len() != n_port) {
        return Err(PotError::Input("portfolio count varies across dates".into()));
    }
    let mut report = HedgeReport {
        method,
        dates: vec![],
        pnl: vec![vec![]; n_port],
        stdev: vec![],
        rolling: vec![],
        skipped: vec![],
    };
    let spec = ScenarioSpec { id: None, kind: BumpKind::VolParallel, size: config.bump, ssr: config.ssr_params() };
    let mut anchor: Option<CalibratedModel> = None;
    for t in 0..path.len().saturating_sub(1) {
        if n_port == 0 {
            report.dates.push(path.dates[t]);
            continue;
        }
        let (a, b) = (&path.snapshots[t], &path.snapshots[t + 1]);
        let smile_t = a.vix_smile.with_forward(a.vix_future);
        let smile_n = b.vix_smile.with_forward(b.vix_future);
        let mut legs: Vec<&PortfolioLeg> = portfolios[t].iter().flat_map(|p| &p.legs).collect();
        legs.sort_by_key(|l| l.key());
        legs.dedup_by_key(|l| l.key());
        let greeks = match method {
            HedgeMethod::Benchmark => benchmark_greeks(&smile_t, &legs),
            HedgeMethod::Pot => {
                let day = match &anchor {
                    Some(m) if t % config.recalib_every != 0 => dr_roll(m, a),
                    _ => calibrate(a, &config.calibration).inspect(|m| anchor = Some(m.clone())),
                };
                match day.and_then(|m| pot_greeks(&m, &legs, &spec)) {
                    Ok(g) => g,
                    Err(e) => {
                        log::warn!("date {}: {e}; skipped", path.dates[t]);
                        report.skipped.push(path.dates[t]);
                        continue;
                    }
                }
            }
        };
        let mut dv = BTreeMap::new();
        for l in &legs {
            dv.insert(l.key(), l.value(&smile_n)? - l.value(&smile_t)?);
        }
        let df = b.vix_future - a.vix_future;
        for (p, series) in portfolios[t].iter().zip(report.pnl.iter_mut()) {
            let big: f64 = p.legs.iter().map(|l| l.weight * greeks.legs[&l.key()]).sum();
            let alpha = hedge_sizes(&[big], &[greeks.instrument])?[0];
            let dp: f64 = p.legs.iter().map(|l| l.weight * dv[&l.key()]).sum();
            series.push(dp + alpha * df);
        }
        report.dates.push(path.dates[t]);
    }
    report.stdev = report.pnl.iter().map(|s| stdev(s)).collect();
    report.rolling = report.pnl.iter().map(|s| rolling_stdev(s, ROLLING_WINDOW)).collect();
    Ok(report)
}

/// Per-portfolio comparison of two reports over their common dates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportComparison {
    pub dates: Vec<usize>,
    pub stdev_a: Vec<f64>,
    pub stdev_b: Vec<f64>,
    /// `stdev_a - stdev_b`.
    pub diff: Vec<f64>,
    pub rolling_a: Vec<Vec<f64>>,
    pub rolling_b: Vec<Vec<f64>>,
}

pub fn compare_reports(a: &HedgeReport, b: &HedgeReport) -> Result<ReportComparison> {
    if a.pnl.len() != b.pnl.len() {
        return Err(PotError::Comparison(format!("{} portfolios against {}", a.pnl.len(), b.pnl.len())));
    }
    let pos_b: BTreeMap<usize, usize> = b.dates.iter().enumerate().map(|(i, d)| (*d, i)).collect();
    let common: Vec<(usize, usize)> = a.dates.iter().enumerate().filter_map(|(i, d)| pos_b.get(d).map(|j| (i, *j))).collect();
    let pick = |r: &HedgeReport, second: bool| -> Vec<Vec<f64>> {
        r.pnl.iter().map(|s| common.iter().map(|(i, j)| s[if second { *j } else { *i }]).collect()).collect()
    };
    let (pa, pb) = (pick(a, false), pick(b, true));
    let stdev_a: Vec<f64> = pa.iter().map(|s| stdev(s)).collect();
    let stdev_b: Vec<f64> = pb.iter().map(|s| stdev(s)).collect();
    Ok(ReportComparison {
        dates: common.iter().map(|(i, _)| a.dates[*i]).collect(),
        diff: stdev_a.iter().zip(&stdev_b).map(|(x, y)| x - y).collect(),
        rolling_a: pa.iter().map(|s| rolling_stdev(s, ROLLING_WINDOW)).collect(),
        rolling_b: pb.iter().map(|s| rolling_stdev(s, ROLLING_WINDOW)).collect(),
        stdev_a,
        stdev_b,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestSummary {
    pub n_portfolios: usize,
    /// Fraction of portfolios with a lower POT stdev.
    pub pct_pot_wins: f64,
    /// Median of POT over benchmark stdev; absent without portfolios.
    pub median_stdev_ratio: Option<f64>,
    pub skipped_dates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestOutput {
    pub pot: HedgeReport,
    pub benchmark: HedgeReport,
    pub comparison: ReportComparison,
    pub summary: BacktestSummary,
}

/// Generate a path and portfolios from `seed`, hedge under both methods and
/// compare. With `threads > 1` the two methods run side by side.
pub fn backtest(config: &BacktestConfig, seed: u64, threads: usize) -> Result<BacktestOutput> {
    let path = gen_market_path(config, seed)?;
    let portfolios = gen_portfolios(&path, config.n_portfolios, seed.wrapping_add(1))?;
    let run = |m| run_backtest(&path, &portfolios, m, config);
    let (pot, benchmark) = if threads > 1 {
        std::thread::scope(|s| {
            let h = s.spawn(|| run(HedgeMethod::Benchmark));
            let pot = run(HedgeMethod::Pot);
            (pot, h.join().expect("benchmark worker panicked"))
        })
    } else {
        (run(HedgeMethod::Pot), run(HedgeMethod::Benchmark))
    };
    let (pot, benchmark) = (pot?, benchmark?);
    let comparison = compare_reports(&pot, &benchmark)?;
    let n = comparison.diff.len();
    let wins = comparison.diff.iter().filter(|d| **d < 0.0).count();
    let mut ratios: Vec<f64> = comparison
        .stdev_a
        .iter()
        .zip(&comparison.stdev_b)
        .filter(|(_, b)| **b > 0.0)
        .map(|(a, b)| a / b)
        .collect();
    ratios.sort_by(f64::total_cmp);
    let median = match ratios.len() {
        0 => None,
        m if m % 2 == 1 => Some(ratios[m / 2]),
        m => Some(0.5 * (ratios[m / 2 - 1] + ratios[m / 2])),
    };
    let summary = BacktestSummary {
        n_portfolios: n,
        pct_pot_wins: if n == 0 { 0.0 } else { wins as f64 / n as f64 },
        median_stdev_ratio: median,
        skipped_dates: pot.skipped.len(),
    };
    Ok(BacktestOutput { pot, benchmark, comparison, summary })
}
