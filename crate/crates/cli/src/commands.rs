//! The five commands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pot_core::backtest::{backtest, BacktestOutput, SyntheticMarket, ROLLING_WINDOW};
use pot_core::calibration::{calibrate, smile_fit, CalibratedModel, ModelFile};
use pot_core::grids::{consistency_residual, martingale_residual};
use pot_core::market::MarketSnapshot;
use pot_core::payoff::{vix_call_ladder, NamedPayoff, Payoff};
use pot_core::perturb::{BumpKind, ScenarioSpec};
use pot_core::risk::{compare_risk, run_risk, Method, RiskRow};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io::{parse_json, read_csv, read_json, read_text, write_csv, write_json};

pub const DEFAULT_SEED: u64 = 7;

fn load_snapshot(flag: Option<&Path>, config: &RunConfig) -> CliResult<MarketSnapshot> {
    match flag.or(config.snapshot.as_deref()) {
        Some(p) => Ok(MarketSnapshot::from_json(&read_text(p)?).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?),
        None => {
            log::info!("no snapshot given; using the built-in synthetic market");
            Ok(SyntheticMarket::default().snapshot()?)
        }
    }
}

pub fn load_model(path: &Path) -> CliResult<CalibratedModel> {
    let f: ModelFile = read_json(path)?;
    Ok(CalibratedModel::from_model_file(f)?)
}

#[derive(Serialize)]
struct ResidualRow {
    i: usize,
    j: usize,
    s1: f64,
    v: f64,
    mass: f64,
    r_m: f64,
    r_c: f64,
}

#[derive(Serialize)]
struct MarginalRow<'a> {
    axis: &'a str,
    l1_error: f64,
}

#[derive(Serialize)]
struct DiagnosticsSummary {
    max_marginal_err: f64,
    max_residual: f64,
    max_abs_rm: f64,
    max_abs_rc: f64,
    outer_iters: usize,
    newton_iters: usize,
    grid: [usize; 3],
    fisher_dim: usize,
    fisher_min_eigenvalue: f64,
    max_smile_error: BTreeMap<String, f64>,
}

/// Residual fields, marginal errors, convergence trace and smile fit.
pub fn write_diagnostics(model: &CalibratedModel, out: &Path) -> CliResult<()> {
    let mu = &model.coupling;
    let grid = model.grid();
    let (n1, nv, n2) = grid.dims();
    let (rm, rc) = (martingale_residual(mu), consistency_residual(mu));
    let nodes = mu.node_mass();
    let rows: Vec<ResidualRow> = (0..n1 * nv)
        .map(|n| ResidualRow {
            i: n / nv,
            j: n % nv,
            s1: grid.s1[n / nv],
            v: grid.v[n % nv],
            mass: nodes[n],
            r_m: rm[n],
            r_c: rc[n],
        })
        .collect();
    write_csv(&out.join("residuals.csv"), &["i", "j", "s1", "v", "mass", "r_m", "r_c"], &rows)?;
    let d = &model.diagnostics;
    let marg: Vec<MarginalRow> =
        ["s1", "v", "s2"].iter().zip(d.marginal_err).map(|(a, e)| MarginalRow { axis: a, l1_error: e }).collect();
    write_csv(&out.join("marginal_errors.csv"), &["axis", "l1_error"], &marg)?;
    write_csv(&out.join("trace.csv"), &["outer", "marginal_err", "residual"], &d.trace)?;
    let fit = smile_fit(model);
    write_csv(&out.join("smile_fit.csv"), &["smile", "strike", "market", "model", "error"], &fit)?;
    let mut worst = BTreeMap::new();
    for r in &fit {
        let e = worst.entry(r.smile.clone()).or_insert(0.0f64);
        *e = e.max(r.error);
    }
    let amax = |v: &[f64]| v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let summary = DiagnosticsSummary {
        max_marginal_err: d.max_marginal_err,
        max_residual: d.max_residual,
        max_abs_rm: amax(&rm),
        max_abs_rc: amax(&rc),
        outer_iters: d.outer_iters,
        newton_iters: d.newton_iters,
        grid: [n1, nv, n2],
        fisher_dim: model.fisher.reduced_dim(),
        fisher_min_eigenvalue: model.fisher.min_eigenvalue,
        max_smile_error: worst,
    };
    write_json(&out.join("diagnostics.json"), &summary)
}

pub fn cmd_calibrate(config: &RunConfig, snapshot: Option<&Path>, out: &Path) -> CliResult<()> {
    let snap = load_snapshot(snapshot, config)?;
    let model = calibrate(&snap, &config.calibration)?;
    let d = &model.diagnostics;
    log::info!(
        "calibrated in {:.1} ms: {} outer iterations, marginal err {:.2e}, residual {:.2e}",
        d.wall_ms,
        d.outer_iters,
        d.max_marginal_err,
        d.max_residual
    );
    write_json(&out.join("model.json"), &model.to_model_file())?;
    write_diagnostics(&model, out)
}

pub fn cmd_diagnose(model: &Path, out: &Path) -> CliResult<()> {
    write_diagnostics(&load_model(model)?, out)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

fn load_scenarios(flag: Option<&Path>, config: &RunConfig) -> CliResult<Vec<ScenarioSpec>> {
    let list = match flag {
        Some(p) => match parse_json::<OneOrMany<ScenarioSpec>>(&read_text(p)?, &p.display().to_string())? {
            OneOrMany::One(s) => vec![s],
            OneOrMany::Many(v) => v,
        },
        None => match &config.scenarios {
            Some(v) => v.clone(),
            None => [BumpKind::Spot, BumpKind::VolT1, BumpKind::VolT2]
                .into_iter()
                .map(|k| ScenarioSpec::new(k, 1e-3))
                .collect(),
        },
    };
    for s in &list {
        s.validate().map_err(|e| CliError::Input(format!("scenario {}: {e}", s.id())))?;
    }
    Ok(list)
}

fn load_payoffs(flag: Option<&Path>, config: &RunConfig, model: &CalibratedModel) -> CliResult<Vec<NamedPayoff>> {
    if let Some(p) = flag {
        return parse_json(&read_text(p)?, &p.display().to_string());
    }
    if let Some(v) = &config.payoffs {
        return Ok(v.clone());
    }
    let s = &model.snapshot;
    let mut v = vec![Payoff::VixFuture.named()];
    v.extend(vix_call_ladder(&s.vix_smile.with_forward(s.vix_future))?);
    Ok(v)
}

#[derive(Serialize)]
struct Timing {
    method: Method,
    n_payoffs: usize,
    n_scenarios: usize,
    total_ms: f64,
    per_scenario_ms: BTreeMap<String, f64>,
}

pub struct RiskArgs<'a> {
    pub method: Method,
    pub model: &'a Path,
    pub scenario: Option<&'a Path>,
    pub payoffs: Option<&'a Path>,
}

pub fn cmd_risk(config: &RunConfig, args: RiskArgs, out: &Path) -> CliResult<()> {
    let model = load_model(args.model)?;
    let scenarios = load_scenarios(args.scenario, config)?;
    let payoffs = load_payoffs(args.payoffs, config, &model)?;
    let rows = run_risk(&model, &payoffs, &scenarios, args.method, &config.risk)?;
    write_csv(&out.join("risk.csv"), &["payoff", "scenario", "pi0", "value", "method", "wall_ms"], &rows)?;
    let per: BTreeMap<String, f64> = rows.iter().map(|r| (r.scenario.clone(), r.wall_ms)).collect();
    let timing = Timing {
        method: args.method,
        n_payoffs: payoffs.len(),
        n_scenarios: scenarios.len(),
        total_ms: per.values().sum(),
        per_scenario_ms: per,
    };
    log::info!("{} risk: {:.2} ms over {} scenarios", args.method.name(), timing.total_ms, timing.n_scenarios);
    write_json(&out.join("timing.json"), &timing)
}

pub fn cmd_compare(a: &Path, b: &Path, out: &Path) -> CliResult<()> {
    let (ra, rb): (Vec<RiskRow>, Vec<RiskRow>) = (read_csv(a)?, read_csv(b)?);
    let rows = compare_risk(&ra, &rb)?;
    write_csv(&out.join("comparison.csv"), &["payoff", "scenario", "a", "b", "rel_gap"], &rows)
}

#[derive(Serialize)]
struct PnlRow {
    date: usize,
    portfolio: usize,
    pot: f64,
    benchmark: f64,
}

#[derive(Serialize)]
struct StdevRow {
    portfolio: usize,
    pot: f64,
    benchmark: f64,
    diff: f64,
}

#[derive(Serialize)]
struct RollingRow {
    portfolio: usize,
    end_date: usize,
    pot: f64,
    benchmark: f64,
}

pub fn write_backtest(o: &BacktestOutput, out: &Path) -> CliResult<()> {
    let c = &o.comparison;
    let index = |dates: &[usize]| -> BTreeMap<usize, usize> { dates.iter().enumerate().map(|(i, d)| (*d, i)).collect() };
    let (ia, ib) = (index(&o.pot.dates), index(&o.benchmark.dates));
    let mut pnl = Vec::new();
    for p in 0..c.diff.len() {
        for d in &c.dates {
            pnl.push(PnlRow { date: *d, portfolio: p, pot: o.pot.pnl[p][ia[d]], benchmark: o.benchmark.pnl[p][ib[d]] });
        }
    }
    write_csv(&out.join("pnl.csv"), &["date", "portfolio", "pot", "benchmark"], &pnl)?;
    let sd: Vec<StdevRow> = (0..c.diff.len())
        .map(|p| StdevRow { portfolio: p, pot: c.stdev_a[p], benchmark: c.stdev_b[p], diff: c.diff[p] })
        .collect();
    write_csv(&out.join("stdev.csv"), &["portfolio", "pot", "benchmark", "diff"], &sd)?;
    let mut roll = Vec::new();
    for p in 0..c.diff.len() {
        for (w, (a, b)) in c.rolling_a[p].iter().zip(&c.rolling_b[p]).enumerate() {
            roll.push(RollingRow { portfolio: p, end_date: c.dates[w + ROLLING_WINDOW - 1], pot: *a, benchmark: *b });
        }
    }
    write_csv(&out.join("rolling.csv"), &["portfolio", "end_date", "pot", "benchmark"], &roll)?;
    write_json(&out.join("summary.json"), &o.summary)
}

pub fn cmd_backtest(config: &RunConfig, seed: Option<u64>, threads: usize, out: &Path) -> CliResult<()> {
    let seed = seed.or(config.seed).unwrap_or(DEFAULT_SEED);
    let o = backtest(&config.backtest, seed, threads)?;
    log::info!(
        "backtest seed {seed}: {} portfolios, POT wins {:.0}%",
        o.summary.n_portfolios,
        100.0 * o.summary.pct_pot_wins
    );
    write_backtest(&o, out)
}

/// `--out`, else the config's `out`, else `./pot-out`.
pub fn out_dir(flag: Option<&Path>, config: &RunConfig) -> PathBuf {
    flag.map(Path::to_path_buf).or_else(|| config.out.clone()).unwrap_or_else(|| PathBuf::from("pot-out"))
}
