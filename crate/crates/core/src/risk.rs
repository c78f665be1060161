//! Batch sensitivities of many payoffs under many scenarios by linear response,
//! dimension reduction or bump-and-recalibrate.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::calibration::{recalibrate_coupling, CalibConfig, CalibratedModel};
use crate::dr::dr_greeks;
use crate::error::{PotError, Result};
use crate::grids::expectation;
use crate::payoff::NamedPayoff;
use crate::perturb::{assemble_scenario, bumped_targets_with, vix_future_sensitivity, PerturbationVector, ScenarioSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lr,
    Dr,
    Recalib,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Lr => "LR",
            Method::Dr => "DR",
            Method::Recalib => "RECALIB",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lr" => Ok(Method::Lr),
            "dr" => Ok(Method::Dr),
            "recalib" => Ok(Method::Recalib),
            _ => Err(PotError::Input(format!("unknown risk method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RiskOptions {
    /// Central instead of one-sided differences for DR.
    pub dr_central: bool,
    /// Tolerances of the recalibrations behind the finite differences.
    pub recalib_eps_marg: f64,
    pub recalib_eps_fin: f64,
}

impl Default for RiskOptions {
    fn default() -> Self {
        RiskOptions { dr_central: true, recalib_eps_marg: 1e-12, recalib_eps_fin: 1e-11 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskRow {
    pub payoff: String,
    pub scenario: String,
    pub pi0: f64,
    pub value: f64,
    pub method: Method,
    /// Wall time of the whole scenario, shared by its payoffs.
    pub wall_ms: f64,
}

/// Linear response of several payoffs to one shock: one solve, one response
/// field, then one weighted sum per payoff.
pub fn lr_values(model: &CalibratedModel, tabs: &[Vec<f64>], h: &PerturbationVector) -> Result<Vec<f64>> {
    let hs = h.stacked();
    let theta = match model.fisher.solve_response(&hs, 0.0) {
        Err(PotError::Conditioning(msg)) => {
            let n = model.fisher.reduced_dim() as f64;
            let lambda = 1e-12 * model.fisher.reduced.trace() / n;
            log::warn!("{msg}; damping with lambda = {lambda:.3e}");
            model.fisher.solve_response(&hs, lambda)?
        }
        other => other?,
    };
    let w = model.fisher.response_field(&model.coupling, &theta);
    let dmu: Vec<f64> = model.coupling.mass.iter().zip(&w).map(|(m, x)| m * x).collect();
    Ok(tabs.iter().map(|g| g.iter().zip(&dmu).map(|(a, b)| a * b).sum()).collect())
}

/// Central difference of warm-started recalibrations at `+-size`.
pub fn recalib_values(model: &CalibratedModel, tabs: &[Vec<f64>], spec: &ScenarioSpec, config: &CalibConfig) -> Result<Vec<f64>> {
    if spec.size == 0.0 {
        return Ok(vec![0.0; tabs.len()]);
    }
    let sens = vix_future_sensitivity(&model.snapshot, spec.kind)?;
    let (up, _) = recalibrate_coupling(model, &bumped_targets_with(model, spec, spec.size, sens)?, config)?;
    let (dn, _) = recalibrate_coupling(model, &bumped_targets_with(model, spec, -spec.size, sens)?, config)?;
    Ok(tabs
        .iter()
        .map(|g| (expectation(&up, g) - expectation(&dn, g)) / (2.0 * spec.size))
        .collect())
}

/// Sensitivities of every payoff under every scenario with one method.
pub fn run_risk(
    model: &CalibratedModel,
    payoffs: &[NamedPayoff],
    scenarios: &[ScenarioSpec],
    method: Method,
    options: &RiskOptions,
) -> Result<Vec<RiskRow>> {
    let tabs: Vec<Vec<f64>> = payoffs.iter().map(|p| p.payoff.tabulate(model.grid())).collect();
    let pi0: Vec<f64> = tabs.iter().map(|g| expectation(&model.coupling, g)).collect();
    let mut config = model.config.clone();
    config.eps_marg = config.eps_marg.min(options.recalib_eps_marg);
    config.eps_fin = config.eps_fin.min(options.recalib_eps_fin);
    let mut rows = Vec::with_capacity(payoffs.len() * scenarios.len());
    for spec in scenarios {
        spec.validate()?;
        let start = Instant::now();
        let values = match method {
            Method::Lr => lr_values(model, &tabs, &assemble_scenario(model, spec)?)?,
            Method::Dr => {
                let refs: Vec<&[f64]> = tabs.iter().map(|v| v.as_slice()).collect();
                dr_greeks(model, &refs, spec, options.dr_central)?.0
            }
            Method::Recalib => recalib_values(model, &tabs, spec, &config)?,
        };
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        log::info!("{} scenario {} took {wall_ms:.2} ms", method.name(), spec.id());
        for ((p, v), p0) in payoffs.iter().zip(values).zip(&pi0) {
            rows.push(RiskRow { payoff: p.id.clone(), scenario: spec.id(), pi0: *p0, value: v, method, wall_ms });
        }
    }
    Ok(rows)
}

/// Side-by-side values of two risk runs keyed by (payoff, scenario).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub payoff: String,
    pub scenario: String,
    pub a: f64,
    pub b: f64,
    /// `|a - b| / max(|b|, tiny)`.
    pub rel_gap: f64,
}

pub fn compare_risk(a: &[RiskRow], b: &[RiskRow]) -> Result<Vec<CompareRow>> {
    use std::collections::BTreeMap;
    let key = |r: &RiskRow| (r.payoff.clone(), r.scenario.clone());
    let mb: BTreeMap<_, f64> = b.iter().map(|r| (key(r), r.value)).collect();
    if mb.len() != a.len() {
        return Err(PotError::Comparison(format!("row counts differ ({} vs {})", a.len(), b.len())));
    }
    a.iter()
        .map(|r| {
            let vb = *mb
                .get(&key(r))
                .ok_or_else(|| PotError::Comparison(format!("no match for payoff {} scenario {}", r.payoff, r.scenario)))?;
            let rel_gap = if r.value == vb { 0.0 } else { (r.value - vb).abs() / vb.abs().max(1e-300) };
            Ok(CompareRow { payoff: r.payoff.clone(), scenario: r.scenario.clone(), a: r.value, b: vb, rel_gap })
        })
        .collect()
}
