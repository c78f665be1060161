//! Dimension-reduced perturbation: re-project the `(s1, v)` marginal of the
//! calibrated coupling onto shocked targets and reattach the frozen conditional
//! law of `s2`.

use crate::calibration::{snapshot_targets, CalibratedModel};
use crate::error::{PotError, Result};
use crate::grids::{disintegrate, expectation, recompose, ConditionalKernel, Coupling, ReducedCoupling};
use crate::market::{MarginalLaw, MarketSnapshot};
use crate::perturb::{bumped_targets_with, vix_future_sensitivity, ScenarioSpec};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const MAX_SWEEPS: usize = 200;

/// Targets of the two-dimensional projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedTargets {
    pub mu1: MarginalLaw,
    pub muv: MarginalLaw,
}

/// Alternating row/column scaling of `gamma` until both marginal L1 errors
/// are within `tol`. Returns the projected coupling and the sweep count.
pub fn reduced_project(gamma: &ReducedCoupling, t1: &[f64], tv: &[f64], tol: f64) -> Result<(ReducedCoupling, usize)> {
    let (n1, nv) = (gamma.s1.len(), gamma.v.len());
    if t1.len() != n1 || tv.len() != nv || gamma.mass.len() != n1 * nv {
        return Err(PotError::Input("reduced targets do not match the coupling shape".into()));
    }
    if gamma.mass.iter().chain(t1).chain(tv).any(|x| !(*x > 0.0)) {
        return Err(PotError::Input("reduced projection needs strictly positive prior and targets".into()));
    }
    let mut g = gamma.mass.clone();
    let l1err = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
    let errs = |g: &[f64]| {
        let mut m1 = vec![0.0; n1];
        let mut mv = vec![0.0; nv];
        for (n, m) in g.iter().enumerate() {
            m1[n / nv] += m;
            mv[n % nv] += m;
        }
        (l1err(&m1, t1), l1err(&mv, tv))
    };
    let mut sweeps = 0;
    loop {
        let (e1, ev) = errs(&g);
        if e1 <= tol && ev <= tol {
            break;
        }
        if sweeps >= MAX_SWEEPS {
            return Err(PotError::Projection(sweeps));
        }
        sweeps += 1;
        for i in 0..n1 {
            let row = &mut g[i * nv..(i + 1) * nv];
            let s: f64 = row.iter().sum();
            let f = t1[i] / s;
            row.iter_mut().for_each(|x| *x *= f);
        }
        let mut col = vec![0.0; nv];
        for (n, x) in g.iter().enumerate() {
            col[n % nv] += x;
        }
        for (n, x) in g.iter_mut().enumerate() {
            *x *= tv[n % nv] / col[n % nv];
        }
    }
    Ok((ReducedCoupling { s1: gamma.s1.clone(), v: gamma.v.clone(), mass: g }, sweeps))
}

/// Perturbed targets for a scenario at bump `size`. The `s1` law stays at its
/// calibrated value when the scenario leaves the first expiry untouched.
pub fn dr_targets(model: &CalibratedModel, spec: &ScenarioSpec, size: f64) -> Result<ReducedTargets> {
    dr_targets_with(model, spec, size, vix_future_sensitivity(&model.snapshot, spec.kind)?)
}

fn dr_targets_with(model: &CalibratedModel, spec: &ScenarioSpec, size: f64, sens: f64) -> Result<ReducedTargets> {
    let t = bumped_targets_with(model, spec, size, sens)?;
    let mu1 = if spec.kind.moves_t1() { t.mu1 } else { model.targets.mu1.clone() };
    Ok(ReducedTargets { mu1, muv: t.muv })
}

/// `gamma_eps * kappa*` for the given reduced targets, with the sweep count.
pub fn dr_perturbed_coupling(model: &CalibratedModel, targets: &ReducedTargets) -> Result<(Coupling, usize)> {
    let (gamma, kappa) = disintegrate(&model.coupling)?;
    perturbed_from_parts(model, &gamma, &kappa, targets)
}

fn perturbed_from_parts(
    model: &CalibratedModel,
    gamma: &ReducedCoupling,
    kappa: &ConditionalKernel,
    targets: &ReducedTargets,
) -> Result<(Coupling, usize)> {
    let (g, sweeps) = reduced_project(gamma, &targets.mu1.weights, &targets.muv.weights, DEFAULT_TOL)?;
    Ok((recompose(&g, kappa, model.grid())?, sweeps))
}

/// Carry a calibrated model to a new snapshot by the reduced projection,
/// keeping the grid and the conditional law of `s2`.
///
/// The dual state and Fisher system are still those of `model`, so the result
/// is only meant for DR greeks.
pub fn dr_roll(model: &CalibratedModel, snapshot: &MarketSnapshot) -> Result<CalibratedModel> {
    let mut grid = model.grid().clone();
    grid.basis = snapshot.basis;
    let targets = snapshot_targets(snapshot, &grid)?;
    let reduced = ReducedTargets { mu1: targets.mu1.clone(), muv: targets.muv.clone() };
    let (coupling, _) = dr_perturbed_coupling(model, &reduced)?;
    let mut out = model.clone();
    out.coupling = coupling;
    out.targets = targets;
    out.snapshot = snapshot.clone();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrGreek {
    pub value: f64,
    pub sweeps: usize,
}

/// Finite-difference sensitivity of `E[G]` along a scenario, per unit bump;
/// central when `central` is set, else one-sided from the calibrated coupling.
pub fn dr_greek(model: &CalibratedModel, payoff: &[f64], spec: &ScenarioSpec, central: bool) -> Result<DrGreek> {
    dr_greeks(model, &[payoff], spec, central).map(|(v, s)| DrGreek { value: v[0], sweeps: s })
}

/// [`dr_greek`] for several payoffs sharing one projection per bump.
pub fn dr_greeks(model: &CalibratedModel, payoffs: &[&[f64]], spec: &ScenarioSpec, central: bool) -> Result<(Vec<f64>, usize)> {
    spec.validate()?;
    let eps = spec.size;
    if eps == 0.0 {
        return Ok((vec![0.0; payoffs.len()], 0));
    }
    let sens = vix_future_sensitivity(&model.snapshot, spec.kind)?;
    let (gamma, kappa) = disintegrate(&model.coupling)?;
    let (up, s_up) = perturbed_from_parts(model, &gamma, &kappa, &dr_targets_with(model, spec, eps, sens)?)?;
    let (dn, s_dn, width) = if central {
        let (dn, s) = perturbed_from_parts(model, &gamma, &kappa, &dr_targets_with(model, spec, -eps, sens)?)?;
        (dn, s, 2.0 * eps)
    } else {
        (model.coupling.clone(), 0, eps)
    };
    let values = payoffs.iter().map(|g| (expectation(&up, g) - expectation(&dn, g)) / width).collect();
    Ok((values, s_up.max(s_dn)))
}
