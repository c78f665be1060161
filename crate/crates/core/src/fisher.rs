//! Fisher information of the calibrated exponential family and the
//! linear-response solve.
//!
//! The sufficient statistics are the indicators of the three grids. When the
//! financial constraints are active, the node statistics `1_{(i,j)} (s2 - s1)`
//! and `1_{(i,j)} (L - basis - v^2)` join them; they are eliminated by a Schur
//! complement so that the solve stays in indicator coordinates.
//!
//! Gauge fixing drops the last indicator of every axis (each axis' indicators
//! sum to one, so the covariance has one null direction per axis) and the
//! financial statistics of one node (their sums are separable functions of the
//! indicators).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{PotError, Result};
use crate::grids::{expectation, Coupling};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Statistic {
    S1(usize),
    V(usize),
    S2(usize),
    Martingale(usize, usize),
    Consistency(usize, usize),
}

/// Financial statistics eliminated by the Schur complement.
#[derive(Debug, Clone)]
struct Augmentation {
    /// Node index (row-major `(i, j)`) of each kept node.
    nodes: Vec<usize>,
    dropped: usize,
    /// `X = Cov(F,F)^{-1} Cov(F,T)`, `nf x nt`.
    x: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct FisherSystem {
    pub dims: (usize, usize, usize),
    /// Ordered statistics of the full system (indicators, then financial rows).
    pub statistics: Vec<Statistic>,
    /// Covariance of all `N1 + NV + N2` indicators.
    pub h: DMatrix<f64>,
    /// Gauge-fixed matrix the response is solved against.
    pub reduced: DMatrix<f64>,
    pub min_eigenvalue: f64,
    chol: Option<Cholesky<f64, Dyn>>,
    /// Indicator means, the gauge weights for embedding back.
    means: [Vec<f64>; 3],
    aug: Option<Augmentation>,
}

/// Gauge-fixed coordinates of a vector over the stacked indicators.
fn reduce(dims: (usize, usize, usize), full: &[f64]) -> DVector<f64> {
    let (n1, nv, n2) = dims;
    let mut out = Vec::with_capacity(n1 + nv + n2 - 3);
    out.extend_from_slice(&full[..n1 - 1]);
    out.extend_from_slice(&full[n1..n1 + nv - 1]);
    out.extend_from_slice(&full[n1 + nv..n1 + nv + n2 - 1]);
    DVector::from_vec(out)
}

fn reduced_index(dims: (usize, usize, usize), full: usize) -> Option<usize> {
    let (n1, nv, n2) = dims;
    if full < n1 {
        (full < n1 - 1).then_some(full)
    } else if full < n1 + nv {
        (full < n1 + nv - 1).then_some(full - 1)
    } else if full < n1 + nv + n2 - 1 {
        Some(full - 2)
    } else {
        None
    }
}

/// Covariance of the stacked indicators under `mu`.
fn indicator_covariance(mu: &Coupling) -> (DMatrix<f64>, [Vec<f64>; 3]) {
    let (n1, nv, n2) = mu.grid.dims();
    let n = n1 + nv + n2;
    let (m1, mv, m2) = mu.axis_sums();
    let mut p1v = vec![0.0; n1 * nv];
    let mut p12 = vec![0.0; n1 * n2];
    let mut pv2 = vec![0.0; nv * n2];
    for i in 0..n1 {
        for j in 0..nv {
            for k in 0..n2 {
                let m = mu.mass[mu.grid.idx(i, j, k)];
                p1v[i * nv + j] += m;
                p12[i * n2 + k] += m;
                pv2[j * n2 + k] += m;
            }
        }
    }
    let mean: Vec<f64> = m1.iter().chain(&mv).chain(&m2).cloned().collect();
    let mut h = DMatrix::zeros(n, n);
    for (off, m) in [(0, &m1), (n1, &mv), (n1 + nv, &m2)] {
        for (a, p) in m.iter().enumerate() {
            h[(off + a, off + a)] = *p;
        }
    }
    for i in 0..n1 {
        for j in 0..nv {
            h[(i, n1 + j)] = p1v[i * nv + j];
            h[(n1 + j, i)] = p1v[i * nv + j];
        }
        for k in 0..n2 {
            h[(i, n1 + nv + k)] = p12[i * n2 + k];
            h[(n1 + nv + k, i)] = p12[i * n2 + k];
        }
    }
    for j in 0..nv {
        for k in 0..n2 {
            h[(n1 + j, n1 + nv + k)] = pv2[j * n2 + k];
            h[(n1 + nv + k, n1 + j)] = pv2[j * n2 + k];
        }
    }
    for a in 0..n {
        for b in 0..n {
            h[(a, b)] -= mean[a] * mean[b];
        }
    }
    (h, [m1, mv, m2])
}

fn finalize(
    dims: (usize, usize, usize),
    statistics: Vec<Statistic>,
    h: DMatrix<f64>,
    reduced: DMatrix<f64>,
    means: [Vec<f64>; 3],
    aug: Option<Augmentation>,
) -> Result<FisherSystem> {
    let n = reduced.nrows();
    let eig = SymmetricEigen::new(reduced.clone());
    let min_eigenvalue = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let chol = Cholesky::new(reduced.clone());
    if chol.is_none() {
        return Err(PotError::Conditioning(format!(
            "reduced Fisher matrix ({n}x{n}) is not positive definite (min eigenvalue {min_eigenvalue:.3e})"
        )));
    }
    Ok(FisherSystem { dims, statistics, h, reduced, min_eigenvalue, chol, means, aug })
}

fn indicator_statistics(dims: (usize, usize, usize)) -> Vec<Statistic> {
    let (n1, nv, n2) = dims;
    (0..n1)
        .map(Statistic::S1)
        .chain((0..nv).map(Statistic::V))
        .chain((0..n2).map(Statistic::S2))
        .collect()
}

/// Fisher system of the indicator statistics alone.
pub fn fisher_matrix(mu: &Coupling) -> Result<FisherSystem> {
    let dims = mu.grid.dims();
    let (h, means) = indicator_covariance(mu);
    let keep: Vec<usize> = (0..h.nrows()).filter(|a| reduced_index(dims, *a).is_some()).collect();
    let reduced = h.select_rows(&keep).select_columns(&keep);
    finalize(dims, indicator_statistics(dims), h, reduced, means, None)
}

/// Fisher system with the node-level financial statistics eliminated.
/// Falls back to [`fisher_matrix`] when `financial` is false.
pub fn fisher_system_constrained(mu: &Coupling, financial: bool) -> Result<FisherSystem> {
    if !financial {
        return fisher_matrix(mu);
    }
    let grid = &mu.grid;
    let dims = grid.dims();
    let (n1, nv, n2) = dims;
    let (h, means) = indicator_covariance(mu);
    let keep: Vec<usize> = (0..h.nrows()).filter(|a| reduced_index(dims, *a).is_some()).collect();
    let htt = h.select_rows(&keep).select_columns(&keep);
    let nt = keep.len();

    let node_mass = mu.node_mass();
    let dropped = (0..node_mass.len())
        .max_by(|a, b| node_mass[*a].total_cmp(&node_mass[*b]))
        .unwrap_or(0);
    let nodes: Vec<usize> = (0..n1 * nv).filter(|n| *n != dropped).collect();
    let nf = 2 * nodes.len();

    // second moments per node and the means of F
    let mut dblk = Vec::with_capacity(nodes.len());
    let mut mf = DVector::zeros(nf);
    // E[T F] in reduced indicator rows, nf columns
    let mut htf = DMatrix::zeros(nt, nf);
    for (q, &node) in nodes.iter().enumerate() {
        let (i, j) = (node / nv, node % nv);
        let (mut em, mut ec, mut dmm, mut dmc, mut dcc) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for k in 0..n2 {
            let m = mu.mass[grid.idx(i, j, k)];
            let a = grid.stat_m(i, k);
            let c = grid.stat_c(i, j, k);
            em += m * a;
            ec += m * c;
            dmm += m * a * a;
            dmc += m * a * c;
            dcc += m * c * c;
            if let Some(r) = reduced_index(dims, n1 + nv + k) {
                htf[(r, 2 * q)] += m * a;
                htf[(r, 2 * q + 1)] += m * c;
            }
        }
        if let Some(r) = reduced_index(dims, i) {
            htf[(r, 2 * q)] += em;
            htf[(r, 2 * q + 1)] += ec;
        }
        if let Some(r) = reduced_index(dims, n1 + j) {
            htf[(r, 2 * q)] += em;
            htf[(r, 2 * q + 1)] += ec;
        }
        mf[2 * q] = em;
        mf[2 * q + 1] = ec;
        let det = dmm * dcc - dmc * dmc;
        if !(det > 0.0) || !det.is_finite() {
            return Err(PotError::Conditioning(format!(
                "financial statistics are collinear at node ({i}, {j})"
            )));
        }
        dblk.push([dcc / det, -dmc / det, dmm / det]);
    }
    // centre: Cov(T, F) = E[T F] - E[T] E[F]
    let tmean = reduce(dims, &means.concat());
    for r in 0..nt {
        for c in 0..nf {
            htf[(r, c)] -= tmean[r] * mf[c];
        }
    }
    let dinv = |y: &DVector<f64>| -> DVector<f64> {
        let mut out = DVector::zeros(nf);
        for (q, b) in dblk.iter().enumerate() {
            let (y0, y1) = (y[2 * q], y[2 * q + 1]);
            out[2 * q] = b[0] * y0 + b[1] * y1;
            out[2 * q + 1] = b[1] * y0 + b[2] * y1;
        }
        out
    };
    // Cov(F,F) = D - m m^T, inverted by Sherman-Morrison
    let dm = dinv(&mf);
    let denom = 1.0 - mf.dot(&dm);
    if !(denom > 0.0) {
        return Err(PotError::Conditioning("financial covariance is singular".into()));
    }
    let mut x = DMatrix::zeros(nf, nt);
    for r in 0..nt {
        let col = htf.row(r).transpose();
        let mut y = dinv(&col);
        let corr = dm.dot(&col) / denom;
        y.axpy(corr, &dm, 1.0);
        x.set_column(r, &y);
    }
    let reduced = &htt - &htf * &x;
    let reduced = 0.5 * (&reduced + reduced.transpose());
    let mut statistics = indicator_statistics(dims);
    for &node in &nodes {
        statistics.push(Statistic::Martingale(node / nv, node % nv));
        statistics.push(Statistic::Consistency(node / nv, node % nv));
    }
    finalize(dims, statistics, h, reduced, means, Some(Augmentation { nodes, dropped, x }))
}

/// `g_a = Cov(G, T_a)` over the stacked indicators.
pub fn covariance_vector(mu: &Coupling, payoff: &[f64]) -> Vec<f64> {
    let (n1, nv, n2) = mu.grid.dims();
    let eg = expectation(mu, payoff);
    let mut g = vec![0.0; n1 + nv + n2];
    for i in 0..n1 {
        for j in 0..nv {
            for k in 0..n2 {
                let n = mu.grid.idx(i, j, k);
                let c = mu.mass[n] * (payoff[n] - eg);
                g[i] += c;
                g[n1 + j] += c;
                g[n1 + nv + k] += c;
            }
        }
    }
    g
}

/// `Cov(G, F)` for the kept financial statistics.
fn financial_covariance(mu: &Coupling, payoff: &[f64], aug: &Augmentation) -> DVector<f64> {
    let grid = &mu.grid;
    let (_, nv, n2) = grid.dims();
    let eg = expectation(mu, payoff);
    let mut out = DVector::zeros(2 * aug.nodes.len());
    for (q, &node) in aug.nodes.iter().enumerate() {
        let (i, j) = (node / nv, node % nv);
        let (mut a, mut c) = (0.0, 0.0);
        for k in 0..n2 {
            let n = grid.idx(i, j, k);
            let w = mu.mass[n] * (payoff[n] - eg);
            a += w * grid.stat_m(i, k);
            c += w * grid.stat_c(i, j, k);
        }
        out[2 * q] = a;
        out[2 * q + 1] = c;
    }
    out
}

impl FisherSystem {
    pub fn reduced_dim(&self) -> usize {
        self.reduced.nrows()
    }

    pub fn is_augmented(&self) -> bool {
        self.aug.is_some()
    }

    /// Node whose financial statistics were dropped for gauge fixing.
    pub fn dropped_node(&self) -> Option<usize> {
        self.aug.as_ref().map(|a| a.dropped)
    }

    /// Effective covariance vector in reduced coordinates, with the financial
    /// statistics eliminated.
    pub fn effective_g(&self, mu: &Coupling, payoff: &[f64]) -> DVector<f64> {
        let g = reduce(self.dims, &covariance_vector(mu, payoff));
        match &self.aug {
            None => g,
            Some(aug) => {
                let gf = financial_covariance(mu, payoff, aug);
                g - aug.x.transpose() * gf
            }
        }
    }

    /// Solve `(H + lambda I) theta = h` in reduced coordinates.
    pub fn solve_reduced(&self, rhs: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
        let n = self.reduced_dim();
        let trace = self.reduced.trace();
        if lambda == 0.0 && !(self.min_eigenvalue > 1e-14 * trace / n as f64) {
            return Err(PotError::Conditioning(format!(
                "min eigenvalue {:.3e} below 1e-14 trace/n; retry with lambda = {:.3e}",
                self.min_eigenvalue,
                1e-12 * trace / n as f64
            )));
        }
        let mat = &self.reduced + DMatrix::identity(n, n) * lambda;
        let chol = if lambda == 0.0 {
            self.chol.clone().expect("factorized at construction")
        } else {
            Cholesky::new(mat.clone()).ok_or_else(|| PotError::Conditioning("damped system not SPD".into()))?
        };
        let mut x = chol.solve(rhs);
        // one round of iterative refinement
        let r = rhs - &mat * &x;
        x += chol.solve(&r);
        Ok(x)
    }

    /// Linear response of the dual variables to a stacked marginal shock.
    pub fn solve_response(&self, h: &[f64], lambda: f64) -> Result<DVector<f64>> {
        check_admissible(self.dims, h)?;
        self.solve_reduced(&reduce(self.dims, h), lambda)
    }

    /// Embed reduced coordinates back into the full indicators with zero
    /// mean per axis under the marginals.
    pub fn embed(&self, reduced: &DVector<f64>) -> [Vec<f64>; 3] {
        let (n1, nv, n2) = self.dims;
        let mut a: Vec<f64> = reduced.as_slice()[..n1 - 1].to_vec();
        a.push(0.0);
        let mut b: Vec<f64> = reduced.as_slice()[n1 - 1..n1 + nv - 2].to_vec();
        b.push(0.0);
        let mut c: Vec<f64> = reduced.as_slice()[n1 + nv - 2..].to_vec();
        c.push(0.0);
        debug_assert_eq!(c.len(), n2);
        for (v, m) in [(&mut a, &self.means[0]), (&mut b, &self.means[1]), (&mut c, &self.means[2])] {
            let mean: f64 = v.iter().zip(m).map(|(x, w)| x * w).sum();
            v.iter_mut().for_each(|x| *x -= mean);
        }
        [a, b, c]
    }

    /// Log-density derivative `d ln mu / d eps` along the response `theta`,
    /// centred so that it integrates to zero.
    pub fn response_field(&self, mu: &Coupling, theta: &DVector<f64>) -> Vec<f64> {
        let grid = &mu.grid;
        let (n1, nv, n2) = grid.dims();
        let [t1, tv, t2] = self.embed(theta);
        let mut phi = vec![0.0; 2 * n1 * nv];
        if let Some(aug) = &self.aug {
            let p = -(&aug.x * theta);
            for (q, &node) in aug.nodes.iter().enumerate() {
                phi[2 * node] = p[2 * q];
                phi[2 * node + 1] = p[2 * q + 1];
            }
        }
        let c = 2.0 / grid.tau;
        let ln2: Vec<f64> = grid.s2.iter().map(|s| c * s.ln()).collect();
        let mut w = Vec::with_capacity(grid.len());
        for i in 0..n1 {
            let (s1, l1) = (grid.s1[i], c * grid.s1[i].ln());
            for j in 0..nv {
                let node = i * nv + j;
                let (pm, pc) = (phi[2 * node], phi[2 * node + 1]);
                let base = t1[i] + tv[j] - pm * s1 + pc * (l1 - grid.basis - grid.v[j] * grid.v[j]);
                for k in 0..n2 {
                    // stat_m = s2 - s1, stat_c = -(2/tau) ln(s2/s1) - basis - v^2
                    w.push(base + t2[k] + pm * grid.s2[k] - pc * ln2[k]);
                }
            }
        }
        let ew = expectation(mu, &w);
        w.iter_mut().for_each(|x| *x -= ew);
        w
    }
}

/// Each block of a stacked shock must carry zero mass.
pub fn check_admissible(dims: (usize, usize, usize), h: &[f64]) -> Result<()> {
    let (n1, nv, n2) = dims;
    if h.len() != n1 + nv + n2 {
        return Err(PotError::Admissibility(format!("shock has {} entries, expected {}", h.len(), n1 + nv + n2)));
    }
    for (name, block) in [("h1", &h[..n1]), ("hV", &h[n1..n1 + nv]), ("h2", &h[n1 + nv..])] {
        let s: f64 = block.iter().sum();
        let scale = block.iter().fold(1.0f64, |a, b| a.max(b.abs()));
        if s.abs() > 1e-10 * scale {
            return Err(PotError::Admissibility(format!("{name} sums to {s:.3e}")));
        }
    }
    Ok(())
}

/// `Pi'(0) = g^T theta` for payoff `G` under the stacked shock `h`.
pub fn lr_sensitivity(fisher: &FisherSystem, mu: &Coupling, payoff: &[f64], h: &[f64]) -> Result<f64> {
    let theta = fisher.solve_response(h, 0.0)?;
    Ok(fisher.effective_g(mu, payoff).dot(&theta))
}

/// Influence function of a payoff: `psi = H^{-1} g`, embedded with zero means.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceFunction {
    pub psi1: Vec<f64>,
    pub psiv: Vec<f64>,
    pub psi2: Vec<f64>,
}

impl InfluenceFunction {
    pub fn pair(&self, h: &[f64]) -> f64 {
        self.psi1.iter().chain(&self.psiv).chain(&self.psi2).zip(h).map(|(a, b)| a * b).sum()
    }
}

pub fn influence_function(fisher: &FisherSystem, mu: &Coupling, payoff: &[f64]) -> Result<InfluenceFunction> {
    let g = fisher.effective_g(mu, payoff);
    let psi = fisher.solve_reduced(&g, 0.0)?;
    let [psi1, psiv, psi2] = fisher.embed(&psi);
    Ok(InfluenceFunction { psi1, psiv, psi2 })
}

/// Row of the second-order table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RemainderRow {
    pub eps: f64,
    pub value: f64,
    pub remainder: f64,
    pub normalized: f64,
}

/// `|Pi(eps) - Pi(0) - eps Pi'(0)|` and its `eps^2`-normalization for each
/// `eps`, where `reprice(eps)` returns `Pi(eps)` (typically by recalibration).
pub fn second_order_check(
    pi0: f64,
    dpi: f64,
    eps_list: &[f64],
    mut reprice: impl FnMut(f64) -> Result<f64>,
) -> Result<Vec<RemainderRow>> {
    let mut out = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        if eps == 0.0 {
            out.push(RemainderRow { eps, value: pi0, remainder: 0.0, normalized: 0.0 });
            continue;
        }
        let value = reprice(eps)?;
        let remainder = (value - pi0 - eps * dpi).abs();
        out.push(RemainderRow { eps, value, remainder, normalized: remainder / (eps * eps) });
    }
    Ok(out)
}

/// Remainder ratios between consecutive rows (`eps` then `eps/2`).
pub fn remainder_ratios(rows: &[RemainderRow]) -> Vec<f64> {
    rows.windows(2).map(|w| w[0].remainder / w[1].remainder).collect()
}
