//! Base calibration: Sinkhorn marginal scaling alternated with per-node damped
//! Newton enforcement of the martingale and variance-consistency constraints.
//!
//! Every quantity lives in the log domain. The state keeps the unnormalized
//! Gibbs kernel `K = prior * a * b * c * exp(dm (s2-s1) + dc (L - basis - v^2))`
//! alongside its logarithm so that marginal sums are cheap and extreme
//! multipliers never overflow.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{PotError, Result};
use crate::fisher::{fisher_system_constrained, FisherSystem};
use crate::grids::{build_grids, log_prior, Coupling, GridConfig, GridSpec, PriorParams};
use crate::market::{bl_density, MarginalLaw, MarketSnapshot, SnapshotFile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibConfig {
    #[serde(default = "d_eps_marg")]
    pub eps_marg: f64,
    #[serde(default = "d_eps_fin")]
    pub eps_fin: f64,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_max_outer")]
    pub max_outer: usize,
    #[serde(default = "d_max_inner")]
    pub max_inner: usize,
    /// Switch off to solve the marginals-only entropic projection.
    #[serde(default = "d_true")]
    pub enforce_financial: bool,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub prior: PriorParams,
}

fn d_eps_marg() -> f64 {
    1e-9
}
fn d_eps_fin() -> f64 {
    1e-8
}
fn d_lambda() -> f64 {
    1e-10
}
fn d_max_outer() -> usize {
    500
}
fn d_max_inner() -> usize {
    20
}
fn d_true() -> bool {
    true
}

impl Default for CalibConfig {
    fn default() -> Self {
        CalibConfig {
            eps_marg: d_eps_marg(),
            eps_fin: d_eps_fin(),
            lambda: d_lambda(),
            max_outer: d_max_outer(),
            max_inner: d_max_inner(),
            enforce_financial: true,
            grid: GridConfig::default(),
            prior: PriorParams::default(),
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_marg > 0.0 && self.eps_fin > 0.0 && self.lambda >= 0.0) {
            return Err(PotError::Input("calibration tolerances must be positive".into()));
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(PotError::Input("iteration caps must be positive".into()));
        }
        Ok(())
    }
}

/// The three prescribed marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Targets {
    pub mu1: MarginalLaw,
    pub muv: MarginalLaw,
    pub mu2: MarginalLaw,
}

/// Smallest weight kept in a target law; zero weights would send a potential to `-inf`.
const TARGET_FLOOR: f64 = 1e-250;

fn floored(law: &MarginalLaw) -> MarginalLaw {
    let mut w: Vec<f64> = law.weights.iter().map(|x| x.max(TARGET_FLOOR)).collect();
    crate::market::normalize(&mut w);
    MarginalLaw { grid: law.grid.clone(), weights: w }
}

impl Targets {
    pub fn axes(&self) -> [&MarginalLaw; 3] {
        [&self.mu1, &self.muv, &self.mu2]
    }
}

/// Minimal-entropy adjustment of raw marginals so that the aggregate
/// constraints implied by the node constraints hold exactly:
/// `E[s1] = E[s2] = forward` and `E[v^2] = E[L(s2/s1)] - basis`.
///
/// Jointly minimizes the summed relative entropy to the raw laws. The solution
/// tilts `mu1` and `mu2` in `(s, ln s)` and `muV` in `v^2`, with one multiplier
/// shared by the three log/variance statistics; it is the identity when the raw
/// laws are already consistent.
pub fn harmonize_targets(
    mu1: &MarginalLaw,
    muv: &MarginalLaw,
    mu2: &MarginalLaw,
    forward: f64,
    tau: f64,
    basis: f64,
) -> Result<Targets> {
    let mu1 = floored(mu1);
    let muv = floored(muv);
    let mu2 = floored(mu2);
    let z1: Vec<f64> = mu1.grid.iter().map(|s| (s - forward) / forward).collect();
    let z2: Vec<f64> = mu2.grid.iter().map(|s| (s - forward) / forward).collect();
    let y1: Vec<f64> = mu1.grid.iter().map(|s| -2.0 / tau * s.ln()).collect();
    let y2: Vec<f64> = mu2.grid.iter().map(|s| 2.0 / tau * s.ln()).collect();
    let yv: Vec<f64> = muv.grid.iter().map(|v| v * v).collect();
    let (l1, lv, l2) = (logs(&mu1.weights), logs(&muv.weights), logs(&mu2.weights));
    // x = (alpha1, alpha2, theta)
    let eval = |x: [f64; 3]| {
        let p1 = gibbs(&l1, &[(&z1, x[0]), (&y1, x[2])]);
        let p2 = gibbs(&l2, &[(&z2, x[1]), (&y2, x[2])]);
        let pv = gibbs(&lv, &[(&yv, x[2])]);
        let r = [
            dot(&p1, &z1),
            dot(&p2, &z2),
            dot(&p1, &y1) + dot(&p2, &y2) + dot(&pv, &yv) + basis,
        ];
        (p1, pv, p2, r)
    };
    let norm = |r: &[f64; 3]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut x = [0.0; 3];
    let (mut p1, mut pv, mut p2, mut r) = eval(x);
    for _ in 0..100 {
        if norm(&r) < 1e-14 {
            break;
        }
        let j = nalgebra::Matrix3::new(
            cov(&p1, &z1, &z1),
            0.0,
            cov(&p1, &z1, &y1),
            0.0,
            cov(&p2, &z2, &z2),
            cov(&p2, &z2, &y2),
            cov(&p1, &y1, &z1),
            cov(&p2, &y2, &z2),
            cov(&p1, &y1, &y1) + cov(&p2, &y2, &y2) + cov(&pv, &yv, &yv),
        );
        let step = j
            .lu()
            .solve(&nalgebra::Vector3::new(-r[0], -r[1], -r[2]))
            .ok_or_else(|| PotError::Numeric("harmonization Jacobian is singular".into()))?;
        let mut t = 1.0;
        let mut improved = false;
        while t > 1e-6 {
            let xn = [x[0] + t * step[0], x[1] + t * step[1], x[2] + t * step[2]];
            let cand = eval(xn);
            if norm(&cand.3) < norm(&r) {
                x = xn;
                (p1, pv, p2, r) = cand;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        // rounding floor reached
        if !improved {
            break;
        }
    }
    if !(norm(&r) < 1e-12) {
        return Err(PotError::Numeric(format!(
            "marginals cannot be made consistent with forward {forward} and basis {basis} (residual {:.3e})",
            norm(&r)
        )));
    }
    let law = |g: &MarginalLaw, w: Vec<f64>| MarginalLaw { grid: g.grid.clone(), weights: floor_renorm(w) };
    Ok(Targets { mu1: law(&mu1, p1), muv: law(&muv, pv), mu2: law(&mu2, p2) })
}

fn logs(w: &[f64]) -> Vec<f64> {
    w.iter().map(|v| v.ln()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cov(p: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (dot(p, a), dot(p, b));
    p.iter().zip(a.iter().zip(b)).map(|(w, (x, y))| w * (x - ma) * (y - mb)).sum()
}

/// Normalized `exp(lw + sum_t coef_t stat_t)`.
fn gibbs(lw: &[f64], terms: &[(&Vec<f64>, f64)]) -> Vec<f64> {
    let l: Vec<f64> = (0..lw.len()).map(|i| lw[i] + terms.iter().map(|(s, c)| c * s[i]).sum::<f64>()).collect();
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
    crate::market::normalize(&mut p);
    p
}

fn floor_renorm(mut w: Vec<f64>) -> Vec<f64> {
    w.iter_mut().for_each(|x| *x = x.max(TARGET_FLOOR));
    crate::market::normalize(&mut w);
    w
}

/// Raw Breeden-Litzenberger marginals of a snapshot on `grid`, harmonized.
pub fn snapshot_targets(snapshot: &MarketSnapshot, grid: &GridSpec) -> Result<Targets> {
    let mu1 = bl_density(&snapshot.spx_smile_t1, &grid.s1)?;
    let muv = bl_density(&snapshot.vix_smile, &grid.v)?;
    let mu2 = bl_density(&snapshot.spx_smile_t2, &grid.s2)?;
    harmonize_targets(&mu1, &muv, &mu2, snapshot.spx_spot, grid.tau, grid.basis)
}

/// Grid, log reference measure and the constraint statistics.
#[derive(Debug, Clone)]
pub struct Problem {
    pub grid: GridSpec,
    pub log_prior: Vec<f64>,
    /// `L(s2_k / s1_i)` row-major over `(i, k)`.
    lr: Vec<f64>,
}

impl Problem {
    pub fn new(grid: GridSpec, log_prior: Vec<f64>) -> Result<Self> {
        if log_prior.len() != grid.len() || log_prior.iter().any(|l| !l.is_finite()) {
            return Err(PotError::Input("prior must be strictly positive on the full grid".into()));
        }
        let (n1, _, n2) = grid.dims();
        let mut lr = Vec::with_capacity(n1 * n2);
        for i in 0..n1 {
            for k in 0..n2 {
                lr.push(crate::grids::log_return_functional(grid.s2[k] / grid.s1[i], grid.tau));
            }
        }
        Ok(Problem { grid, log_prior, lr })
    }

    pub fn from_prior(prior: &Coupling) -> Result<Self> {
        Problem::new(prior.grid.clone(), prior.mass.iter().map(|m| m.ln()).collect())
    }

    #[inline]
    fn stat_m(&self, i: usize, k: usize) -> f64 {
        self.grid.s2[k] - self.grid.s1[i]
    }

    #[inline]
    fn stat_c(&self, i: usize, j: usize, k: usize) -> f64 {
        let n2 = self.grid.s2.len();
        self.lr[i * n2 + k] - self.grid.basis - self.grid.v[j] * self.grid.v[j]
    }
}

/// Dual variables plus the cached Gibbs kernel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationState {
    /// `ln a`, `ln b`, `ln c`.
    pub u1: Vec<f64>,
    pub uv: Vec<f64>,
    pub u2: Vec<f64>,
    pub delta_m: Vec<f64>,
    pub delta_c: Vec<f64>,
    pub outer_iters: usize,
    pub newton_iters: usize,
    #[serde(skip)]
    logk: Vec<f64>,
    #[serde(skip)]
    cache: Vec<f64>,
}

impl CalibrationState {
    /// Unit scalings and zero multipliers.
    pub fn initial(problem: &Problem) -> Self {
        let (n1, nv, n2) = problem.grid.dims();
        let mut s = CalibrationState {
            u1: vec![0.0; n1],
            uv: vec![0.0; nv],
            u2: vec![0.0; n2],
            delta_m: vec![0.0; n1 * nv],
            delta_c: vec![0.0; n1 * nv],
            outer_iters: 0,
            newton_iters: 0,
            logk: vec![],
            cache: vec![],
        };
        s.refresh(problem);
        s
    }

    pub fn from_parts(
        problem: &Problem,
        u1: Vec<f64>,
        uv: Vec<f64>,
        u2: Vec<f64>,
        delta_m: Vec<f64>,
        delta_c: Vec<f64>,
    ) -> Result<Self> {
        let (n1, nv, n2) = problem.grid.dims();
        if u1.len() != n1 || uv.len() != nv || u2.len() != n2 || delta_m.len() != n1 * nv || delta_c.len() != n1 * nv {
            return Err(PotError::Input("calibration state does not match the grid".into()));
        }
        let mut s = CalibrationState { u1, uv, u2, delta_m, delta_c, outer_iters: 0, newton_iters: 0, logk: vec![], cache: vec![] };
        s.refresh(problem);
        Ok(s)
    }

    pub fn a(&self) -> Vec<f64> {
        self.u1.iter().map(|u| u.exp()).collect()
    }

    pub fn b(&self) -> Vec<f64> {
        self.uv.iter().map(|u| u.exp()).collect()
    }

    pub fn c(&self) -> Vec<f64> {
        self.u2.iter().map(|u| u.exp()).collect()
    }

    /// Recompute the kernel cache from the dual variables.
    pub fn refresh(&mut self, problem: &Problem) {
        let (n1, nv, n2) = problem.grid.dims();
        self.logk.resize(problem.grid.len(), 0.0);
        self.cache.resize(problem.grid.len(), 0.0);
        for i in 0..n1 {
            for j in 0..nv {
                self.refresh_node(problem, i, j, nv, n2);
            }
        }
    }

    fn refresh_node(&mut self, p: &Problem, i: usize, j: usize, nv: usize, n2: usize) {
        let node = i * nv + j;
        let (dm, dc) = (self.delta_m[node], self.delta_c[node]);
        let base = self.u1[i] + self.uv[j];
        let off = node * n2;
        for k in 0..n2 {
            let l = p.log_prior[off + k] + base + self.u2[k] + dm * p.stat_m(i, k) + dc * p.stat_c(i, j, k);
            self.logk[off + k] = l;
            self.cache[off + k] = l.exp();
        }
    }

    /// Unnormalized kernel.
    pub fn kernel(&self) -> &[f64] {
        &self.cache
    }
}

/// Normalized Gibbs coupling of the current dual variables, computed from scratch.
pub fn gibbs_coupling(problem: &Problem, state: &CalibrationState) -> Result<Coupling> {
    let mut s = state.clone();
    s.refresh(problem);
    coupling_from_log(&problem.grid, &s.logk)
}

fn coupling_from_log(grid: &GridSpec, logk: &[f64]) -> Result<Coupling> {
    let mx = logk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return Err(PotError::Numeric("non-finite Gibbs exponent".into()));
    }
    let mut mass: Vec<f64> = logk.iter().map(|l| (l - mx).exp()).collect();
    if mass.iter().any(|m| !m.is_finite()) {
        return Err(PotError::Numeric("non-finite Gibbs exponent".into()));
    }
    crate::market::normalize(&mut mass);
    Ok(Coupling { grid: grid.clone(), mass })
}

fn scale_update(u: &mut f64, target: f64, current: f64) -> Result<f64> {
    if !(current > 0.0) || !current.is_finite() {
        return Err(PotError::Numeric(format!("degenerate Sinkhorn denominator {current}")));
    }
    let du = target.ln() - current.ln();
    *u += du;
    Ok(du)
}

/// One Sinkhorn pass: match the `s1`, then `v`, then `s2` marginal.
pub fn sinkhorn_sweep(problem: &Problem, state: &mut CalibrationState, targets: &Targets) -> Result<()> {
    let (n1, nv, n2) = problem.grid.dims();
    let block = nv * n2;
    for i in 0..n1 {
        let row = &mut state.cache[i * block..(i + 1) * block];
        let du = scale_update(&mut state.u1[i], targets.mu1.weights[i], row.iter().sum())?;
        let f = du.exp();
        row.iter_mut().for_each(|x| *x *= f);
        state.logk[i * block..(i + 1) * block].iter_mut().for_each(|x| *x += du);
    }
    let mut colv = vec![0.0; nv];
    for (n, chunk) in state.cache.chunks(n2).enumerate() {
        colv[n % nv] += chunk.iter().sum::<f64>();
    }
    let mut dv = vec![0.0; nv];
    for j in 0..nv {
        dv[j] = scale_update(&mut state.uv[j], targets.muv.weights[j], colv[j])?;
    }
    let fv: Vec<f64> = dv.iter().map(|d| d.exp()).collect();
    for (n, (chunk, lchunk)) in state.cache.chunks_mut(n2).zip(state.logk.chunks_mut(n2)).enumerate() {
        let j = n % nv;
        chunk.iter_mut().for_each(|x| *x *= fv[j]);
        lchunk.iter_mut().for_each(|x| *x += dv[j]);
    }
    let mut col2 = vec![0.0; n2];
    for chunk in state.cache.chunks(n2) {
        for (c, x) in col2.iter_mut().zip(chunk) {
            *c += x;
        }
    }
    let mut d2 = vec![0.0; n2];
    for k in 0..n2 {
        d2[k] = scale_update(&mut state.u2[k], targets.mu2.weights[k], col2[k])?;
    }
    let f2: Vec<f64> = d2.iter().map(|d| d.exp()).collect();
    for (chunk, lchunk) in state.cache.chunks_mut(n2).zip(state.logk.chunks_mut(n2)) {
        for k in 0..n2 {
            chunk[k] *= f2[k];
            lchunk[k] += d2[k];
        }
    }
    Ok(())
}

/// Conditional moments at one node for trial multipliers.
struct NodeMoments {
    r: [f64; 2],
    j: [f64; 3],
}

fn node_moments(p: &Problem, state: &CalibrationState, i: usize, j: usize, dm: f64, dc: f64, buf: &mut [f64]) -> NodeMoments {
    let (_, nv, n2) = p.grid.dims();
    let off = (i * nv + j) * n2;
    let mut mx = f64::NEG_INFINITY;
    for k in 0..n2 {
        let l = p.log_prior[off + k] + state.u2[k] + dm * p.stat_m(i, k) + dc * p.stat_c(i, j, k);
        buf[k] = l;
        mx = mx.max(l);
    }
    let mut z = 0.0;
    let (mut em, mut ec) = (0.0, 0.0);
    for k in 0..n2 {
        let w = (buf[k] - mx).exp();
        buf[k] = w;
        z += w;
        em += w * p.stat_m(i, k);
        ec += w * p.stat_c(i, j, k);
    }
    em /= z;
    ec /= z;
    let (mut vmm, mut vmc, mut vcc) = (0.0, 0.0, 0.0);
    for k in 0..n2 {
        let w = buf[k] / z;
        let a = p.stat_m(i, k) - em;
        let b = p.stat_c(i, j, k) - ec;
        vmm += w * a * a;
        vmc += w * a * b;
        vcc += w * b * b;
    }
    NodeMoments { r: [em, ec], j: [vmm, vmc, vcc] }
}

fn norm2(r: &[f64; 2]) -> f64 {
    (r[0] * r[0] + r[1] * r[1]).sqrt()
}

/// Outcome of one node's Newton loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeReport {
    pub residual_before: f64,
    pub residual_after: f64,
    pub iterations: usize,
}

const MAX_HALVINGS: usize = 8;
const MAX_ESCALATIONS: usize = 40;

/// Damped Newton on `(dm, dc)` at node `(i, j)` until the conditional residual
/// drops below `eps_fin` or the inner cap is reached. Refreshes the node's
/// slice of the kernel cache.
pub fn newton_node_update(
    problem: &Problem,
    state: &mut CalibrationState,
    i: usize,
    j: usize,
    config: &CalibConfig,
) -> Result<NodeReport> {
    let (_, nv, n2) = problem.grid.dims();
    let node = i * nv + j;
    let mut buf = vec![0.0; n2];
    let (mut dm, mut dc) = (state.delta_m[node], state.delta_c[node]);
    let mut cur = node_moments(problem, state, i, j, dm, dc, &mut buf);
    let before = norm2(&cur.r);
    let mut iterations = 0;
    while norm2(&cur.r) > config.eps_fin && iterations < config.max_inner {
        iterations += 1;
        let rn = norm2(&cur.r);
        let mut lambda = config.lambda;
        let mut accepted = false;
        for _ in 0..MAX_ESCALATIONS {
            let a = cur.j[0] + lambda;
            let b = cur.j[1];
            let c = cur.j[2] + lambda;
            let det = a * c - b * b;
            if det > 0.0 && det.is_finite() {
                let sm = -(c * cur.r[0] - b * cur.r[1]) / det;
                let sc = -(a * cur.r[1] - b * cur.r[0]) / det;
                let mut t = 1.0;
                for _ in 0..=MAX_HALVINGS {
                    let trial = node_moments(problem, state, i, j, dm + t * sm, dc + t * sc, &mut buf);
                    let tn = norm2(&trial.r);
                    if tn.is_finite() && tn <= rn {
                        dm += t * sm;
                        dc += t * sc;
                        cur = trial;
                        accepted = true;
                        break;
                    }
                    t *= 0.5;
                }
            }
            if accepted {
                break;
            }
            lambda = if lambda > 0.0 { lambda * 10.0 } else { 1e-12 * (cur.j[0] + cur.j[2]).max(1e-300) };
        }
        if !accepted {
            return Err(PotError::Node { i, j, msg: format!("no damped step reduced residual {rn:.3e}") });
        }
    }
    state.delta_m[node] = dm;
    state.delta_c[node] = dc;
    state.newton_iters += iterations;
    if iterations > 0 {
        state.refresh_node(problem, i, j, nv, n2);
    }
    Ok(NodeReport { residual_before: before, residual_after: norm2(&cur.r), iterations })
}

/// Per-axis L1 marginal errors of the normalized kernel.
pub fn marginal_errors(state: &CalibrationState, problem: &Problem, targets: &Targets) -> [f64; 3] {
    let mu = Coupling { grid: problem.grid.clone(), mass: state.cache.clone() };
    let (m1, mv, m2) = mu.axis_sums();
    let total: f64 = m1.iter().sum();
    let err = |m: &[f64], t: &MarginalLaw| m.iter().zip(&t.weights).map(|(a, b)| (a / total - b).abs()).sum::<f64>();
    [err(&m1, &targets.mu1), err(&mv, &targets.muv), err(&m2, &targets.mu2)]
}

/// Largest conditional residual norm over all nodes.
pub fn max_node_residual(problem: &Problem, state: &CalibrationState) -> f64 {
    let (n1, nv, n2) = problem.grid.dims();
    let mut buf = vec![0.0; n2];
    let mut worst: f64 = 0.0;
    for i in 0..n1 {
        for j in 0..nv {
            let m = node_moments(problem, state, i, j, state.delta_m[i * nv + j], state.delta_c[i * nv + j], &mut buf);
            worst = worst.max(norm2(&m.r));
        }
    }
    worst
}

/// Entropic dual `<u, nu> - sum K + 1`; non-decreasing under exact block updates.
pub fn dual_objective(problem: &Problem, state: &CalibrationState, targets: &Targets) -> f64 {
    let _ = problem;
    let dot = |u: &[f64], t: &MarginalLaw| u.iter().zip(&t.weights).map(|(a, b)| a * b).sum::<f64>();
    dot(&state.u1, &targets.mu1) + dot(&state.uv, &targets.muv) + dot(&state.u2, &targets.mu2)
        - state.cache.iter().sum::<f64>()
        + 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub outer: usize,
    pub marginal_err: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub marginal_err: [f64; 3],
    pub max_marginal_err: f64,
    pub max_residual: f64,
    pub max_abs_rm: f64,
    pub max_abs_rc: f64,
    pub outer_iters: usize,
    pub newton_iters: usize,
    /// Not persisted, so that saved models are reproducible byte for byte.
    #[serde(skip)]
    pub wall_ms: f64,
    pub trace: Vec<TraceRow>,
}

/// Run the outer loop from `state` until both error families are within tolerance.
pub fn solve(problem: &Problem, state: &mut CalibrationState, targets: &Targets, config: &CalibConfig) -> Result<Diagnostics> {
    config.validate()?;
    let start = Instant::now();
    let (n1, nv, _) = problem.grid.dims();
    let targets = Targets { mu1: floored(&targets.mu1), muv: floored(&targets.muv), mu2: floored(&targets.mu2) };
    let mut trace = Vec::new();
    state.outer_iters = 0;
    state.newton_iters = 0;
    state.refresh(problem);
    let mut residual = if config.enforce_financial { max_node_residual(problem, state) } else { 0.0 };
    let mut merr = marginal_errors(state, problem, &targets);
    let mut m = merr.iter().cloned().fold(0.0, f64::max);
    while m > config.eps_marg || residual > config.eps_fin {
        if state.outer_iters >= config.max_outer {
            return Err(PotError::Calibration { outer: state.outer_iters, marginal_err: m, residual });
        }
        state.outer_iters += 1;
        sinkhorn_sweep(problem, state, &targets)?;
        if config.enforce_financial {
            residual = 0.0;
            for i in 0..n1 {
                for j in 0..nv {
                    let rep = newton_node_update(problem, state, i, j, config)?;
                    residual = residual.max(rep.residual_after);
                }
            }
        }
        // rebuild the cache every pass so incremental updates cannot drift
        state.refresh(problem);
        merr = marginal_errors(state, problem, &targets);
        m = merr.iter().cloned().fold(0.0, f64::max);
        trace.push(TraceRow { outer: state.outer_iters, marginal_err: m, residual });
    }
    let mu = coupling_from_log(&problem.grid, &state.logk)?;
    let rm = crate::grids::martingale_residual(&mu);
    let rc = crate::grids::consistency_residual(&mu);
    let amax = |v: &[f64]| v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    Ok(Diagnostics {
        marginal_err: merr,
        max_marginal_err: m,
        max_residual: residual,
        max_abs_rm: amax(&rm),
        max_abs_rc: amax(&rc),
        outer_iters: state.outer_iters,
        newton_iters: state.newton_iters,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        trace,
    })
}

/// Converged calibration with everything needed for risk.
#[derive(Debug, Clone)]
pub struct CalibratedModel {
    pub problem: Problem,
    pub coupling: Coupling,
    pub state: CalibrationState,
    pub fisher: FisherSystem,
    pub targets: Targets,
    /// Marginals used to build the reference measure.
    pub prior_targets: Targets,
    pub snapshot: MarketSnapshot,
    pub config: CalibConfig,
    pub diagnostics: Diagnostics,
}

impl CalibratedModel {
    pub fn grid(&self) -> &GridSpec {
        &self.problem.grid
    }
}

/// Calibrate the joint coupling to a snapshot.
pub fn calibrate(snapshot: &MarketSnapshot, config: &CalibConfig) -> Result<CalibratedModel> {
    config.validate()?;
    let grid = build_grids(snapshot, &config.grid)?;
    let targets = snapshot_targets(snapshot, &grid)?;
    let lp = log_prior(&grid, &targets.mu1, &targets.muv, &config.prior)?;
    let problem = Problem::new(grid, lp)?;
    let mut state = CalibrationState::initial(&problem);
    let diagnostics = solve(&problem, &mut state, &targets, config)?;
    finish(problem, state, targets.clone(), targets, snapshot.clone(), config.clone(), diagnostics)
}

fn finish(
    problem: Problem,
    state: CalibrationState,
    targets: Targets,
    prior_targets: Targets,
    snapshot: MarketSnapshot,
    config: CalibConfig,
    diagnostics: Diagnostics,
) -> Result<CalibratedModel> {
    let coupling = coupling_from_log(&problem.grid, &state.logk)?;
    let fisher = fisher_system_constrained(&coupling, config.enforce_financial)?;
    Ok(CalibratedModel { problem, coupling, state, fisher, targets, prior_targets, snapshot, config, diagnostics })
}

/// Warm-started calibration to new targets on the model's grid and prior.
pub fn recalibrate_targets(model: &CalibratedModel, targets: &Targets, config: &CalibConfig) -> Result<CalibratedModel> {
    let mut state = model.state.clone();
    let diagnostics = solve(&model.problem, &mut state, targets, config)?;
    finish(
        model.problem.clone(),
        state,
        targets.clone(),
        model.prior_targets.clone(),
        model.snapshot.clone(),
        config.clone(),
        diagnostics,
    )
}

/// Full recalibration to a bumped snapshot, warm-started from `model`.
pub fn recalibrate(model: &CalibratedModel, bumped: &MarketSnapshot) -> Result<CalibratedModel> {
    let mut grid = model.problem.grid.clone();
    grid.basis = bumped.basis;
    let targets = snapshot_targets(bumped, &grid)?;
    let mut out = recalibrate_targets(model, &targets, &model.config)?;
    out.snapshot = bumped.clone();
    Ok(out)
}

/// Recalibration that skips the Fisher build; for bump-and-reprice loops.
pub fn recalibrate_coupling(model: &CalibratedModel, targets: &Targets, config: &CalibConfig) -> Result<(Coupling, Diagnostics)> {
    let mut state = model.state.clone();
    let diagnostics = solve(&model.problem, &mut state, targets, config)?;
    Ok((coupling_from_log(&model.problem.grid, &state.logk)?, diagnostics))
}

/// Rebuild a model from persisted dual variables.
pub fn restore(
    snapshot: &MarketSnapshot,
    config: &CalibConfig,
    prior_targets: Targets,
    targets: Targets,
    parts: (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>),
    diagnostics: Diagnostics,
) -> Result<CalibratedModel> {
    let grid = build_grids(snapshot, &config.grid)?;
    let lp = log_prior(&grid, &prior_targets.mu1, &prior_targets.muv, &config.prior)?;
    let problem = Problem::new(grid, lp)?;
    let (u1, uv, u2, dm, dc) = parts;
    let state = CalibrationState::from_parts(&problem, u1, uv, u2, dm, dc)?;
    finish(problem, state, targets, prior_targets, snapshot.clone(), config.clone(), diagnostics)
}

/// On-disk form of a calibrated model: inputs plus dual variables.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub snapshot: SnapshotFile,
    pub config: CalibConfig,
    pub prior_targets: Targets,
    pub targets: Targets,
    pub state: CalibrationState,
    pub diagnostics: Diagnostics,
}

impl CalibratedModel {
    pub fn to_model_file(&self) -> ModelFile {
        ModelFile {
            snapshot: self.snapshot.to_file(),
            config: self.config.clone(),
            prior_targets: self.prior_targets.clone(),
            targets: self.targets.clone(),
            state: self.state.clone(),
            diagnostics: self.diagnostics.clone(),
        }
    }

    pub fn from_model_file(f: ModelFile) -> Result<Self> {
        let snapshot = MarketSnapshot::from_file(f.snapshot)?;
        let s = f.state;
        let mut m = restore(
            &snapshot,
            &f.config,
            f.prior_targets,
            f.targets,
            (s.u1, s.uv, s.u2, s.delta_m, s.delta_c),
            f.diagnostics,
        )?;
        m.state.outer_iters = s.outer_iters;
        m.state.newton_iters = s.newton_iters;
        Ok(m)
    }
}

/// Market against model price for one quoted strike, out-of-the-money side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmileFitRow {
    pub smile: String,
    pub strike: f64,
    pub market: f64,
    pub model: f64,
    /// `|model - market| / forward`.
    pub error: f64,
}

/// Smile-fit table of the calibrated marginals against the snapshot quotes.
pub fn smile_fit(model: &CalibratedModel) -> Vec<SmileFitRow> {
    let (l1, lv, l2) = crate::grids::marginals(&model.coupling);
    let s = &model.snapshot;
    let mut rows = Vec::new();
    for (name, smile, law) in [("spx_t1", &s.spx_smile_t1, &l1), ("spx_t2", &s.spx_smile_t2, &l2), ("vix", &s.vix_smile, &lv)] {
        for &k in &smile.strikes {
            let is_call = k >= smile.forward;
            let market = smile.price(k, is_call);
            let m = law.option_price(k, is_call);
            rows.push(SmileFitRow {
                smile: name.to_string(),
                strike: k,
                market,
                model: m,
                error: (m - market).abs() / smile.forward,
            });
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backtest::SyntheticMarket;
    use crate::grids::{expectation, l1, marginals};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn literal_grid(s1: Vec<f64>, v: Vec<f64>, s2: Vec<f64>) -> GridSpec {
        GridSpec { s1, v, s2, tau: 30.0 / 365.0, basis: 0.0 }
    }

    fn law(grid: &[f64], w: &[f64]) -> MarginalLaw {
        MarginalLaw::new(grid.to_vec(), w.to_vec()).unwrap()
    }

    fn random_problem(seed: u64, n1: usize, nv: usize, n2: usize) -> Problem {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let s1 = (0..n1).map(|i| 90.0 + 5.0 * i as f64).collect();
        let v = (0..nv).map(|j| 0.1 + 0.05 * j as f64).collect();
        let s2 = (0..n2).map(|k| 80.0 + 10.0 * k as f64).collect();
        let grid = literal_grid(s1, v, s2);
        let lp = (0..grid.len()).map(|_| rng.random_range(-3.0..0.0)).collect();
        Problem::new(grid, lp).unwrap()
    }

    fn random_law(rng: &mut impl Rng, grid: &[f64]) -> MarginalLaw {
        let mut w: Vec<f64> = grid.iter().map(|_| rng.random_range(0.1..1.0)).collect();
        crate::market::normalize(&mut w);
        law(grid, &w)
    }

    fn small_config() -> CalibConfig {
        let mut cfg = CalibConfig::default();
        cfg.grid.n1 = 16;
        cfg
    }

    #[test]
    fn zero_duals_give_the_normalized_prior() {
        let p = random_problem(1, 3, 2, 4);
        let mu = gibbs_coupling(&p, &CalibrationState::initial(&p)).unwrap();
        let z: f64 = p.log_prior.iter().map(|l| l.exp()).sum();
        for (m, l) in mu.mass.iter().zip(&p.log_prior) {
            assert!((m - l.exp() / z).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn potentials_are_defined_up_to_a_shared_constant(c in -5.0f64..5.0, seed in 0u64..50) {
            let p = random_problem(seed, 3, 2, 4);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 100);
            let mut r = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
            let (u1, uv, u2, dm, dc) = (r(3), r(2), r(4), r(6), r(6));
            let a = CalibrationState::from_parts(&p, u1.clone(), uv.clone(), u2.clone(), dm.clone(), dc.clone()).unwrap();
            let b = CalibrationState::from_parts(
                &p,
                u1.iter().map(|x| x + c).collect(),
                uv.iter().map(|x| x - c).collect(),
                u2,
                dm,
                dc,
            )
            .unwrap();
            let (ma, mb) = (gibbs_coupling(&p, &a).unwrap(), gibbs_coupling(&p, &b).unwrap());
            prop_assert!(ma.mass.iter().zip(&mb.mass).all(|(x, y)| (x - y).abs() < 1e-14));
        }
    }

    #[test]
    fn unit_martingale_multiplier_tilts_by_the_increment() {
        let grid = literal_grid(vec![1.0, 2.0], vec![0.2], vec![1.5, 2.5]);
        let p = Problem::new(grid, vec![0.0; 4]).unwrap();
        let s = CalibrationState::from_parts(&p, vec![0.0; 2], vec![0.0], vec![0.0; 2], vec![1.0; 2], vec![0.0; 2]).unwrap();
        let mu = gibbs_coupling(&p, &s).unwrap();
        // weights e^{0.5}, e^{1.5}, e^{-0.5}, e^{0.5}
        let w = [0.5f64.exp(), 1.5f64.exp(), (-0.5f64).exp(), 0.5f64.exp()];
        let z: f64 = w.iter().sum();
        for (m, x) in mu.mass.iter().zip(w) {
            assert!((m - x / z).abs() < 1e-15);
        }
    }

    #[test]
    fn sweep_matches_the_last_marginal_exactly() {
        let p = random_problem(2, 3, 2, 4);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let t = Targets {
            mu1: random_law(&mut rng, &p.grid.s1),
            muv: random_law(&mut rng, &p.grid.v),
            mu2: random_law(&mut rng, &p.grid.s2),
        };
        let mut s = CalibrationState::initial(&p);
        sinkhorn_sweep(&p, &mut s, &t).unwrap();
        let (_, _, m2) = marginals(&gibbs_coupling(&p, &s).unwrap());
        assert!(l1(&m2.weights, &t.mu2.weights) < 1e-14);
    }

    #[test]
    fn own_marginals_are_a_fixed_point() {
        let p = random_problem(4, 3, 2, 4);
        let mu = gibbs_coupling(&p, &CalibrationState::initial(&p)).unwrap();
        let (mu1, muv, mu2) = marginals(&mu);
        let t = Targets { mu1, muv, mu2 };
        let mut cfg = CalibConfig::default();
        cfg.enforce_financial = false;
        let mut s = CalibrationState::initial(&p);
        let d = solve(&p, &mut s, &t, &cfg).unwrap();
        assert_eq!(d.outer_iters, 0);
    }

    #[test]
    fn two_by_two_transport_matches_ipfp() {
        let grid = literal_grid(vec![1.0, 2.0], vec![0.1, 0.2], vec![1.0]);
        let prior = [0.4, 0.1, 0.2, 0.3];
        let p = Problem::new(grid.clone(), prior.iter().map(|x: &f64| x.ln()).collect()).unwrap();
        let t = Targets { mu1: law(&grid.s1, &[0.6, 0.4]), muv: law(&grid.v, &[0.5, 0.5]), mu2: law(&grid.s2, &[1.0]) };
        let mut cfg = CalibConfig::default();
        cfg.enforce_financial = false;
        cfg.eps_marg = 1e-14;
        let mut s = CalibrationState::initial(&p);
        solve(&p, &mut s, &t, &cfg).unwrap();
        let mu = gibbs_coupling(&p, &s).unwrap();
        let mut q = prior;
        for _ in 0..10_000 {
            for i in 0..2 {
                let r = q[2 * i] + q[2 * i + 1];
                q[2 * i] *= [0.6, 0.4][i] / r;
                q[2 * i + 1] *= [0.6, 0.4][i] / r;
            }
            for j in 0..2 {
                let c = q[j] + q[2 + j];
                q[j] *= 0.5 / c;
                q[2 + j] *= 0.5 / c;
            }
        }
        assert!(mu.mass.iter().zip(q).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn two_atom_node_solves_to_the_closed_form() {
        // martingale weight on the low atom is (b - s1) / (b - a); pick v so the
        // consistency constraint holds at the same point
        let (s1, a, b, tau) = (100.0, 90.0, 115.0, 30.0 / 365.0);
        let p_star = (b - s1) / (b - a);
        let l = |x: f64| crate::grids::log_return_functional(x / s1, tau);
        let v2 = p_star * l(a) + (1.0 - p_star) * l(b);
        let grid = GridSpec { s1: vec![s1], v: vec![v2.sqrt()], s2: vec![a, b], tau, basis: 0.0 };
        let p = Problem::new(grid, vec![0.5f64.ln(); 2]).unwrap();
        let mut s = CalibrationState::initial(&p);
        let mut cfg = CalibConfig::default();
        cfg.eps_fin = 1e-13;
        let rep = newton_node_update(&p, &mut s, 0, 0, &cfg).unwrap();
        assert!(rep.residual_after < 1e-12, "{rep:?}");
        let mu = gibbs_coupling(&p, &s).unwrap();
        assert!((mu.mass[0] - p_star).abs() < 1e-12);
    }

    #[test]
    fn dual_objective_is_monotone_under_sweeps() {
        let p = random_problem(5, 4, 3, 5);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let t = Targets {
            mu1: random_law(&mut rng, &p.grid.s1),
            muv: random_law(&mut rng, &p.grid.v),
            mu2: random_law(&mut rng, &p.grid.s2),
        };
        let mut s = CalibrationState::initial(&p);
        let mut last = dual_objective(&p, &s, &t);
        for _ in 0..30 {
            sinkhorn_sweep(&p, &mut s, &t).unwrap();
            s.refresh(&p);
            let d = dual_objective(&p, &s, &t);
            assert!(d >= last - 1e-13, "{d} < {last}");
            last = d;
        }
    }

    #[test]
    fn solution_does_not_depend_on_the_start() {
        let snap = SyntheticMarket::default().snapshot().unwrap();
        let cfg = small_config();
        let m = calibrate(&snap, &cfg).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (n1, nv, n2) = m.grid().dims();
        let mut r = |n: usize, s: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(-s..s)).collect() };
        let mut s = CalibrationState::from_parts(&m.problem, r(n1, 1.0), r(nv, 1.0), r(n2, 1.0), r(n1 * nv, 0.01), r(n1 * nv, 0.01)).unwrap();
        solve(&m.problem, &mut s, &m.targets, &cfg).unwrap();
        let other = gibbs_coupling(&m.problem, &s).unwrap();
        assert!(l1(&other.mass, &m.coupling.mass) < 1e-7);
    }

    #[test]
    fn synthetic_calibration_meets_tolerances_and_fits_smiles() {
        let snap = SyntheticMarket::default().snapshot().unwrap();
        let m = calibrate(&snap, &small_config()).unwrap();
        let d = &m.diagnostics;
        assert!(d.max_marginal_err <= 1e-9 && d.max_residual <= 1e-8, "{d:?}");
        assert!(d.max_abs_rm < 1e-7 && d.max_abs_rc < 1e-7);
        let (s1, s2) = (crate::payoff::Payoff::SpxForward { expiry: crate::payoff::SpxExpiry::T1 }, crate::payoff::Payoff::SpxForward { expiry: crate::payoff::SpxExpiry::T2 });
        assert!((s1.price(&m.coupling) - snap.spx_spot).abs() < 1e-6);
        assert!((s2.price(&m.coupling) - snap.spx_spot).abs() < 1e-6);
        for row in smile_fit(&m) {
            assert!(row.error < 5e-3, "{row:?}");
        }
    }

    #[test]
    fn zero_bump_recalibration_is_idempotent_and_warm_start_is_cheaper() {
        let snap = SyntheticMarket::default().snapshot().unwrap();
        let m = calibrate(&snap, &small_config()).unwrap();
        let again = recalibrate(&m, &snap).unwrap();
        assert!(l1(&again.coupling.mass, &m.coupling.mass) < 1e-10);
        assert!(again.diagnostics.outer_iters <= 1);
        assert!(again.diagnostics.outer_iters <= m.diagnostics.outer_iters);
        let g = m.grid().tabulate(|_, v, _| v);
        assert!((expectation(&again.coupling, &g) - expectation(&m.coupling, &g)).abs() < 1e-10);
    }

    #[test]
    fn model_file_restores_the_same_coupling() {
        let snap = SyntheticMarket::default().snapshot().unwrap();
        let m = calibrate(&snap, &small_config()).unwrap();
        let text = serde_json::to_string(&m.to_model_file()).unwrap();
        let back = CalibratedModel::from_model_file(serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back.coupling.mass, m.coupling.mass);
        assert_eq!(serde_json::to_string(&back.to_model_file()).unwrap(), text);
    }

    #[test]
    fn bad_config_is_rejected() {
        let mut cfg = CalibConfig::default();
        cfg.eps_marg = 0.0;
        assert!(cfg.validate().is_err());
        cfg = CalibConfig::default();
        cfg.max_outer = 0;
        assert!(cfg.validate().is_err());
    }
}
