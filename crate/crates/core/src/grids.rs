//! State grids, the joint coupling tensor over `S1 x V x S2`, and the
//! conditional residual fields of the martingale and variance-consistency
//! constraints.

use serde::{Deserialize, Serialize};

use crate::error::{PotError, Result};
use crate::market::{smile_eval, MarginalLaw, MarketSnapshot};

/// `L(x) = -(2/tau) ln x`.
pub fn log_return_functional(x: f64, tau: f64) -> f64 {
    -2.0 / tau * x.ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub n1: usize,
    pub nv: usize,
    pub n2: usize,
    /// Half-width of the SPX grids in ATM standard deviations.
    #[serde(default = "default_coverage")]
    pub coverage_sd: f64,
    #[serde(default = "default_v_lo")]
    pub v_lo_mult: f64,
    #[serde(default = "default_v_hi")]
    pub v_hi_mult: f64,
}

fn default_coverage() -> f64 {
    5.0
}
fn default_v_lo() -> f64 {
    0.5
}
fn default_v_hi() -> f64 {
    1.5
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            n1: 40,
            nv: 25,
            n2: 60,
            coverage_sd: default_coverage(),
            v_lo_mult: default_v_lo(),
            v_hi_mult: default_v_hi(),
        }
    }
}

/// Discretized state spaces plus the constants of the log-return functional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub s1: Vec<f64>,
    pub v: Vec<f64>,
    pub s2: Vec<f64>,
    /// Forward-start period `T2 - T1` in years.
    pub tau: f64,
    /// SPX-implied forward variance minus VIX-strip variance.
    #[serde(default)]
    pub basis: f64,
}

fn check_axis(name: &str, x: &[f64]) -> Result<()> {
    if x.len() < 2 {
        return Err(PotError::Grid(format!("{name} grid needs at least 2 points")));
    }
    if x[0] <= 0.0 || x.windows(2).any(|w| !(w[1] > w[0])) || x.iter().any(|v| !v.is_finite()) {
        return Err(PotError::Grid(format!("{name} grid must be positive and strictly increasing")));
    }
    Ok(())
}

impl GridSpec {
    pub fn new(s1: Vec<f64>, v: Vec<f64>, s2: Vec<f64>, tau: f64, basis: f64) -> Result<Self> {
        let g = GridSpec { s1, v, s2, tau, basis };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        check_axis("s1", &self.s1)?;
        check_axis("v", &self.v)?;
        check_axis("s2", &self.s2)?;
        if !(self.tau > 0.0) {
            return Err(PotError::Grid("tau must be positive".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.s1.len(), self.v.len(), self.s2.len())
    }

    pub fn len(&self) -> usize {
        self.s1.len() * self.v.len() * self.s2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.v.len() + j) * self.s2.len() + k
    }

    /// Martingale statistic `s2 - s1`.
    #[inline]
    pub fn stat_m(&self, i: usize, k: usize) -> f64 {
        self.s2[k] - self.s1[i]
    }

    /// Consistency statistic `L(s2/s1) - basis - v^2`.
    #[inline]
    pub fn stat_c(&self, i: usize, j: usize, k: usize) -> f64 {
        log_return_functional(self.s2[k] / self.s1[i], self.tau) - self.basis - self.v[j] * self.v[j]
    }

    /// Tabulate `f(s1, v, s2)` in coupling order.
    pub fn tabulate(&self, f: impl Fn(f64, f64, f64) -> f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for &a in &self.s1 {
            for &b in &self.v {
                for &c in &self.s2 {
                    out.push(f(a, b, c));
                }
            }
        }
        out
    }
}

fn log_spaced(center: f64, half_width: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| center * (-half_width + 2.0 * half_width * i as f64 / (n - 1) as f64).exp())
        .collect()
}

fn lin_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Build the three state grids for a snapshot.
pub fn build_grids(snapshot: &MarketSnapshot, config: &GridConfig) -> Result<GridSpec> {
    if config.n1 < 2 || config.nv < 2 || config.n2 < 2 {
        return Err(PotError::Grid("every grid needs at least 2 points".into()));
    }
    let f = snapshot.spx_spot;
    let sd1 = smile_eval(&snapshot.spx_smile_t1, f) * snapshot.t1().sqrt();
    let sd2 = smile_eval(&snapshot.spx_smile_t2, f) * snapshot.t2().sqrt();
    if !(sd1 > 0.0 && sd2 > 0.0) {
        return Err(PotError::Grid("degenerate SPX smile".into()));
    }
    let k = &snapshot.vix_smile.strikes;
    let (vlo, vhi) = (config.v_lo_mult * k[0], config.v_hi_mult * k[k.len() - 1]);
    if !(vlo > 0.0 && vhi > vlo) {
        return Err(PotError::Grid(format!("degenerate VIX range [{vlo}, {vhi}]")));
    }
    GridSpec::new(
        log_spaced(f, config.coverage_sd * sd1, config.n1),
        lin_spaced(vlo, vhi, config.nv),
        log_spaced(f, config.coverage_sd * sd2, config.n2),
        snapshot.tau(),
        snapshot.basis,
    )
}

/// Dense joint law over `S1 x V x S2`, row-major in `(i, j, k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub grid: GridSpec,
    pub mass: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReducedCoupling {
    pub s1: Vec<f64>,
    pub v: Vec<f64>,
    /// Row-major `(i, j)`.
    pub mass: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalKernel {
    pub n1: usize,
    pub nv: usize,
    pub n2: usize,
    /// `probs[(i*nv + j)*n2 + k] = kappa(s2_k | s1_i, v_j)`.
    pub probs: Vec<f64>,
}

impl ReducedCoupling {
    pub fn marginals(&self) -> (Vec<f64>, Vec<f64>) {
        let nv = self.v.len();
        let mut m1 = vec![0.0; self.s1.len()];
        let mut mv = vec![0.0; nv];
        for (n, m) in self.mass.iter().enumerate() {
            m1[n / nv] += m;
            mv[n % nv] += m;
        }
        (m1, mv)
    }
}

impl Coupling {
    pub fn new(grid: GridSpec, mass: Vec<f64>) -> Result<Self> {
        if mass.len() != grid.len() {
            return Err(PotError::Input(format!(
                "coupling has {} entries, grid needs {}",
                mass.len(),
                grid.len()
            )));
        }
        if mass.iter().any(|m| !(*m >= 0.0)) {
            return Err(PotError::Input("coupling mass must be nonnegative".into()));
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(PotError::Input(format!("coupling mass sums to {total}")));
        }
        Ok(Coupling { grid, mass })
    }

    /// Product law `mu1 x muV x mu2`.
    pub fn product(grid: GridSpec, m1: &[f64], mv: &[f64], m2: &[f64]) -> Self {
        let mut mass = Vec::with_capacity(grid.len());
        for a in m1 {
            for b in mv {
                for c in m2 {
                    mass.push(a * b * c);
                }
            }
        }
        Coupling { grid, mass }
    }

    pub fn axis_sums(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (n1, nv, n2) = self.grid.dims();
        let mut m1 = vec![0.0; n1];
        let mut mv = vec![0.0; nv];
        let mut m2 = vec![0.0; n2];
        for i in 0..n1 {
            for j in 0..nv {
                let row = &self.mass[self.grid.idx(i, j, 0)..][..n2];
                let mut s = 0.0;
                for (k, m) in row.iter().enumerate() {
                    s += m;
                    m2[k] += m;
                }
                m1[i] += s;
                mv[j] += s;
            }
        }
        (m1, mv, m2)
    }

    /// Mass of each `(s1, v)` node.
    pub fn node_mass(&self) -> Vec<f64> {
        let n2 = self.grid.s2.len();
        self.mass.chunks(n2).map(|c| c.iter().sum()).collect()
    }
}

/// The three axis marginals of a coupling.
pub fn marginals(mu: &Coupling) -> (MarginalLaw, MarginalLaw, MarginalLaw) {
    let (m1, mv, m2) = mu.axis_sums();
    (
        MarginalLaw { grid: mu.grid.s1.clone(), weights: m1 },
        MarginalLaw { grid: mu.grid.v.clone(), weights: mv },
        MarginalLaw { grid: mu.grid.s2.clone(), weights: m2 },
    )
}

/// Split `mu` into its `(s1, v)` marginal and the conditional law of `s2`.
pub fn disintegrate(mu: &Coupling) -> Result<(ReducedCoupling, ConditionalKernel)> {
    let (n1, nv, n2) = mu.grid.dims();
    let node = mu.node_mass();
    let mut probs = Vec::with_capacity(mu.mass.len());
    for (n, m) in node.iter().enumerate() {
        if !(*m > 0.0) {
            return Err(PotError::Numeric(format!(
                "zero mass at node ({}, {}) cannot be disintegrated",
                n / nv,
                n % nv
            )));
        }
        probs.extend(mu.mass[n * n2..(n + 1) * n2].iter().map(|x| x / m));
    }
    Ok((
        ReducedCoupling { s1: mu.grid.s1.clone(), v: mu.grid.v.clone(), mass: node },
        ConditionalKernel { n1, nv, n2, probs },
    ))
}

/// `mu(i,j,k) = gamma(i,j) kappa(k|i,j)` on `grid`.
pub fn recompose(gamma: &ReducedCoupling, kappa: &ConditionalKernel, grid: &GridSpec) -> Result<Coupling> {
    let (n1, nv, n2) = grid.dims();
    if gamma.mass.len() != n1 * nv || kappa.n1 != n1 || kappa.nv != nv || kappa.n2 != n2 {
        return Err(PotError::Input("reduced coupling and kernel shapes disagree".into()));
    }
    let mut mass = Vec::with_capacity(grid.len());
    for (n, g) in gamma.mass.iter().enumerate() {
        mass.extend(kappa.probs[n * n2..(n + 1) * n2].iter().map(|p| g * p));
    }
    Ok(Coupling { grid: grid.clone(), mass })
}

/// `sum G mu` for a payoff tabulated in coupling order.
pub fn expectation(mu: &Coupling, payoff: &[f64]) -> f64 {
    mu.mass.iter().zip(payoff).map(|(m, g)| m * g).sum()
}

fn residual_field(mu: &Coupling, stat: impl Fn(usize, usize, usize) -> f64) -> Vec<f64> {
    let (n1, nv, n2) = mu.grid.dims();
    let mut out = Vec::with_capacity(n1 * nv);
    for i in 0..n1 {
        for j in 0..nv {
            let row = &mu.mass[mu.grid.idx(i, j, 0)..][..n2];
            let (mut num, mut den) = (0.0, 0.0);
            for (k, m) in row.iter().enumerate() {
                num += m * stat(i, j, k);
                den += m;
            }
            out.push(num / den);
        }
    }
    out
}

/// `r_M(s1, v) = E[s2 - s1 | s1, v]`, row-major over `(i, j)`.
pub fn martingale_residual(mu: &Coupling) -> Vec<f64> {
    residual_field(mu, |i, _, k| mu.grid.stat_m(i, k))
}

/// `r_C(s1, v) = E[L(s2/s1) | s1, v] - basis - v^2`, row-major over `(i, j)`.
pub fn consistency_residual(mu: &Coupling) -> Vec<f64> {
    residual_field(mu, |i, j, k| mu.grid.stat_c(i, j, k))
}

/// Parameters of the reference measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorParams {
    #[serde(default = "default_floor")]
    pub floor: f64,
}

fn default_floor() -> f64 {
    1e-300
}

impl Default for PriorParams {
    fn default() -> Self {
        PriorParams { floor: default_floor() }
    }
}

/// Log of the lognormal transition `q(s2 | s1, v)` per `s2` node, normalized.
fn log_transition(grid: &GridSpec, i: usize, j: usize, floor: f64) -> Vec<f64> {
    let n2 = grid.s2.len();
    let var = grid.v[j] * grid.v[j] * grid.tau;
    let ln_floor = floor.ln();
    let mut lq: Vec<f64> = (0..n2)
        .map(|k| {
            let lo = if k == 0 { grid.s2[0] } else { grid.s2[k - 1] };
            let hi = if k == n2 - 1 { grid.s2[n2 - 1] } else { grid.s2[k + 1] };
            let x = (grid.s2[k] / grid.s1[i]).ln() + 0.5 * var;
            let ln_pdf = -0.5 * x * x / var - grid.s2[k].ln();
            ln_pdf + (0.5 * (hi - lo)).ln()
        })
        .collect();
    let mx = lq.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = lq.iter().map(|l| (l - mx).exp()).sum();
    for l in lq.iter_mut() {
        *l = (*l - mx - z.ln()).max(ln_floor);
    }
    let z: f64 = lq.iter().map(|l| l.exp()).sum();
    lq.iter_mut().for_each(|l| *l -= z.ln());
    lq
}

/// Log of the reference measure `mu1(s1) muV(v) q(s2 | s1, v)`.
pub fn log_prior(grid: &GridSpec, mu1: &MarginalLaw, muv: &MarginalLaw, params: &PriorParams) -> Result<Vec<f64>> {
    let (n1, nv, _) = grid.dims();
    if mu1.len() != n1 || muv.len() != nv {
        return Err(PotError::Input("prior marginals do not live on the grids".into()));
    }
    let mut out = Vec::with_capacity(grid.len());
    for i in 0..n1 {
        for j in 0..nv {
            let base = mu1.weights[i].max(params.floor).ln() + muv.weights[j].max(params.floor).ln();
            out.extend(log_transition(grid, i, j, params.floor).into_iter().map(|l| base + l));
        }
    }
    Ok(out)
}

/// Strictly positive reference coupling.
pub fn build_prior(grid: &GridSpec, mu1: &MarginalLaw, muv: &MarginalLaw, params: &PriorParams) -> Result<Coupling> {
    let lp = log_prior(grid, mu1, muv, params)?;
    let mut mass: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    crate::market::normalize(&mut mass);
    Ok(Coupling { grid: grid.clone(), mass })
}

/// `D(p || q) = sum p ln(p/q)`, with `0 ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

/// L1 distance between two mass vectors.
pub fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}
