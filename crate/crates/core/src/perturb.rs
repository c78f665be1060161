//! Admissible marginal shocks: SPX spot and vol bumps, propagation to the VIX
//! future and smile through the skew stickiness ratio, and projection onto the
//! kernel of the linearized financial constraints.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::calibration::{snapshot_targets, CalibratedModel, Targets};
use crate::error::{PotError, Result};
use crate::grids::GridSpec;
use crate::market::{
    bl_density, black_call_delta, black_vega, forward_variance_from, log_contract_delta, log_contract_vega, smile_eval,
    vix_strip_delta, MarginalLaw, MarketSnapshot, VolSmile,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BumpKind {
    /// Relative spot move under a sticky-strike SPX surface.
    Spot,
    VolT1,
    VolT2,
    VolParallel,
}

impl BumpKind {
    pub fn name(&self) -> &'static str {
        match self {
            BumpKind::Spot => "spot",
            BumpKind::VolT1 => "vol_t1",
            BumpKind::VolT2 => "vol_t2",
            BumpKind::VolParallel => "vol_parallel",
        }
    }

    /// Whether the first SPX expiry moves under this bump.
    pub fn moves_t1(&self) -> bool {
        !matches!(self, BumpKind::VolT2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsrParams {
    #[serde(default = "d_ssr", rename = "value")]
    pub ssr: f64,
    /// Half-width of the skew finite difference, relative to the VIX future.
    #[serde(default = "d_bandwidth")]
    pub bandwidth: f64,
    /// Adds the second-order term `-ssr * curvature * dF^2 / 2` to the shift.
    #[serde(default)]
    pub convexity: bool,
    /// Strikes outside `[lo, hi]` keep their vols.
    #[serde(default)]
    pub strike_range: Option<(f64, f64)>,
}

fn d_ssr() -> f64 {
    1.2
}
fn d_bandwidth() -> f64 {
    0.025
}

impl Default for SsrParams {
    fn default() -> Self {
        SsrParams { ssr: d_ssr(), bandwidth: d_bandwidth(), convexity: false, strike_range: None }
    }
}

impl SsrParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.ssr > 0.0 && self.ssr.is_finite()) {
            return Err(PotError::Input(format!("ssr must be positive, got {}", self.ssr)));
        }
        if !(self.bandwidth > 0.0 && self.bandwidth < 0.5) {
            return Err(PotError::Input(format!("skew bandwidth must lie in (0, 0.5), got {}", self.bandwidth)));
        }
        Ok(())
    }
}

/// One risk scenario as read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    #[serde(default)]
    pub id: Option<String>,
    pub kind: BumpKind,
    pub size: f64,
    #[serde(default)]
    pub ssr: SsrParams,
}

impl ScenarioSpec {
    pub fn new(kind: BumpKind, size: f64) -> Self {
        ScenarioSpec { id: None, kind, size, ssr: SsrParams::default() }
    }

    pub fn id(&self) -> String {
        self.id.clone().unwrap_or_else(|| format!("{}_{}", self.kind.name(), self.size))
    }

    pub fn validate(&self) -> Result<()> {
        self.ssr.validate()?;
        if !self.size.is_finite() || self.size < 0.0 {
            return Err(PotError::Input(format!("scenario size must be finite and nonnegative, got {}", self.size)));
        }
        Ok(())
    }
}

/// Stacked marginal shock per unit of bump size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationVector {
    pub h1: Vec<f64>,
    pub hv: Vec<f64>,
    pub h2: Vec<f64>,
    /// Per quoted VIX strike, `(Delta - Vega * ssr * skew) * dF_V`.
    pub constraint_bumps: Vec<f64>,
    pub scenario_id: String,
    pub eps: f64,
    pub kind: BumpKind,
}

impl PerturbationVector {
    pub fn zeros(grid: &GridSpec, spec: &ScenarioSpec) -> Self {
        PerturbationVector {
            h1: vec![0.0; grid.s1.len()],
            hv: vec![0.0; grid.v.len()],
            h2: vec![0.0; grid.s2.len()],
            constraint_bumps: Vec::new(),
            scenario_id: spec.id(),
            eps: spec.size,
            kind: spec.kind,
        }
    }

    pub fn stacked(&self) -> Vec<f64> {
        self.h1.iter().chain(&self.hv).chain(&self.h2).cloned().collect()
    }

    pub fn set_stacked(&mut self, h: &[f64]) {
        let (n1, nv) = (self.h1.len(), self.hv.len());
        self.h1.copy_from_slice(&h[..n1]);
        self.hv.copy_from_slice(&h[n1..n1 + nv]);
        self.h2.copy_from_slice(&h[n1 + nv..]);
    }

    pub fn scaled(&self, s: f64) -> Self {
        let m = |v: &[f64]| v.iter().map(|x| x * s).collect();
        PerturbationVector {
            h1: m(&self.h1),
            hv: m(&self.hv),
            h2: m(&self.h2),
            constraint_bumps: m(&self.constraint_bumps),
            ..self.clone()
        }
    }

    pub fn block_sums(&self) -> [f64; 3] {
        [self.h1.iter().sum(), self.hv.iter().sum(), self.h2.iter().sum()]
    }
}

/// Translation derivative of a discrete law: every atom moves by `delta`
/// with its mass split linearly between the neighbouring nodes; mass pushed
/// past an end node stays there.
pub fn spot_bump_marginal(mu1: &MarginalLaw, delta: f64) -> Result<Vec<f64>> {
    let n = mu1.len();
    if delta == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let g = &mu1.grid;
    let min_gap = g.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    if delta.abs() > 5.0 * min_gap {
        return Err(PotError::BumpTooLarge(format!(
            "spot shift {delta} exceeds five grid spacings ({min_gap})"
        )));
    }
    let mut shifted = vec![0.0; n];
    for (i, &w) in mu1.weights.iter().enumerate() {
        let x = g[i] + delta;
        if x <= g[0] {
            shifted[0] += w;
        } else if x >= g[n - 1] {
            shifted[n - 1] += w;
        } else {
            let k = g.partition_point(|s| *s <= x) - 1;
            let t = (x - g[k]) / (g[k + 1] - g[k]);
            shifted[k] += w * (1.0 - t);
            shifted[k + 1] += w * t;
        }
    }
    Ok(shifted.iter().zip(&mu1.weights).map(|(a, b)| (a - b) / delta).collect())
}

/// Derivative of the Breeden-Litzenberger law in a parallel vol shift.
pub fn vol_bump_marginal(smile: &VolSmile, dsigma: f64, grid: &[f64]) -> Result<Vec<f64>> {
    if dsigma == 0.0 {
        return Ok(vec![0.0; grid.len()]);
    }
    let base = bl_density(smile, grid)?;
    let bumped = bl_density(&smile.shifted(dsigma), grid)
        .map_err(|e| PotError::BumpTooLarge(format!("vol bump {dsigma}: {e}")))?;
    Ok(bumped.weights.iter().zip(&base.weights).map(|(a, b)| (a - b) / dsigma).collect())
}

/// Central-difference skew and curvature of the smile at `fv`.
pub fn smile_skew(smile: &VolSmile, fv: f64, bandwidth: f64) -> (f64, f64) {
    let h = bandwidth * fv;
    let (lo, mid, hi) = (smile_eval(smile, fv - h), smile_eval(smile, fv), smile_eval(smile, fv + h));
    ((hi - lo) / (2.0 * h), (hi - 2.0 * mid + lo) / (h * h))
}

/// Vol shift `-ssr * skew * dF` applied to the smile (plus the curvature term
/// when enabled), quoted for the forward `fv + dfv`.
pub fn ssr_shift_smile(smile: &VolSmile, fv: f64, dfv: f64, params: &SsrParams) -> Result<VolSmile> {
    params.validate()?;
    let k = &smile.strikes;
    if !(fv >= k[0] && fv <= k[k.len() - 1]) {
        return Err(PotError::Input(format!("VIX future {fv} outside the quoted strikes")));
    }
    let (skew, curv) = smile_skew(smile, fv, params.bandwidth);
    let mut shift = -params.ssr * skew * dfv;
    if params.convexity {
        shift -= 0.5 * params.ssr * curv * dfv * dfv;
    }
    let mut floored = 0;
    let vols: Vec<f64> = smile
        .strikes
        .iter()
        .zip(&smile.vols)
        .map(|(k, v)| {
            let inside = params.strike_range.is_none_or(|(lo, hi)| *k >= lo && *k <= hi);
            let s = if inside { v + shift } else { *v };
            if s < 1e-4 {
                floored += 1;
                1e-4
            } else {
                s
            }
        })
        .collect();
    if floored * 5 > vols.len() {
        return Err(PotError::Degenerate(format!(
            "SSR shift {shift:.4} floors {floored} of {} VIX vols",
            vols.len()
        )));
    }
    Ok(VolSmile { expiry: smile.expiry, forward: fv + dfv, strikes: smile.strikes.clone(), vols })
}

/// SPX part of a bump; the VIX block is left as is.
pub fn spx_bump(snapshot: &MarketSnapshot, kind: BumpKind, size: f64) -> Result<MarketSnapshot> {
    let mut s = snapshot.clone();
    match kind {
        BumpKind::Spot => {
            let spot = snapshot.spx_spot * (1.0 + size);
            if !(spot > 0.0) {
                return Err(PotError::BumpTooLarge(format!("relative spot bump {size}")));
            }
            s.spx_spot = spot;
            s.spx_smile_t1 = s.spx_smile_t1.with_forward(spot);
            s.spx_smile_t2 = s.spx_smile_t2.with_forward(spot);
        }
        BumpKind::VolT1 => s.spx_smile_t1 = s.spx_smile_t1.shifted(size),
        BumpKind::VolT2 => s.spx_smile_t2 = s.spx_smile_t2.shifted(size),
        BumpKind::VolParallel => {
            s.spx_smile_t1 = s.spx_smile_t1.shifted(size);
            s.spx_smile_t2 = s.spx_smile_t2.shifted(size);
        }
    }
    for sm in [&s.spx_smile_t1, &s.spx_smile_t2] {
        if sm.vols.iter().any(|v| !(*v > 0.0)) {
            return Err(PotError::BumpTooLarge(format!("vol bump {size} makes an SPX vol nonpositive")));
        }
    }
    Ok(s)
}

/// Forward-variance change per unit SPX bump.
pub fn forward_variance_sensitivity(snapshot: &MarketSnapshot, kind: BumpKind) -> Result<f64> {
    let (t1, t2) = (snapshot.t1(), snapshot.t2());
    let (s1, s2) = (&snapshot.spx_smile_t1, &snapshot.spx_smile_t2);
    let (d1, d2) = match kind {
        BumpKind::Spot => (
            snapshot.spx_spot * log_contract_delta(s1)?,
            snapshot.spx_spot * log_contract_delta(s2)?,
        ),
        BumpKind::VolT1 => (log_contract_vega(s1)?, 0.0),
        BumpKind::VolT2 => (0.0, log_contract_vega(s2)?),
        BumpKind::VolParallel => (log_contract_vega(s1)?, log_contract_vega(s2)?),
    };
    Ok(forward_variance_from(d1, t1, d2, t2))
}

/// VIX future move per unit SPX bump: forward-variance change over the strip delta.
pub fn vix_future_sensitivity(snapshot: &MarketSnapshot, kind: BumpKind) -> Result<f64> {
    let num = forward_variance_sensitivity(snapshot, kind)?;
    vix_sensitivity_from(num, &snapshot.vix_smile.with_forward(snapshot.vix_future))
}

/// `d(forward variance) / strip delta` at the smile's forward.
pub fn vix_sensitivity_from(dfwdvar: f64, vix_smile: &VolSmile) -> Result<f64> {
    let den = vix_strip_delta(vix_smile)?;
    if !(den.abs() > 1e-14) {
        return Err(PotError::Degenerate("VIX strip delta vanishes".into()));
    }
    Ok(dfwdvar / den)
}

/// `(law(shifted) - law(base)) / eps` on the VIX grid.
pub fn perturbed_vix_marginal(base: &VolSmile, shifted: &VolSmile, vgrid: &[f64], eps: f64) -> Result<Vec<f64>> {
    if eps == 0.0 {
        return Ok(vec![0.0; vgrid.len()]);
    }
    let b = bl_density(base, vgrid)?;
    let s = bl_density(shifted, vgrid)?;
    Ok(s.weights.iter().zip(&b.weights).map(|(x, y)| (x - y) / eps).collect())
}

/// Snapshot after a bump of `size`: SPX moved, VIX future moved along the
/// strip identity, VIX smile moved by the SSR rule.
pub fn bump_snapshot(snapshot: &MarketSnapshot, kind: BumpKind, size: f64, ssr: &SsrParams) -> Result<MarketSnapshot> {
    if size == 0.0 {
        return Ok(snapshot.clone());
    }
    bump_snapshot_with(snapshot, kind, size, ssr, vix_future_sensitivity(snapshot, kind)?)
}

/// [`bump_snapshot`] with a precomputed [`vix_future_sensitivity`].
pub fn bump_snapshot_with(
    snapshot: &MarketSnapshot,
    kind: BumpKind,
    size: f64,
    ssr: &SsrParams,
    sensitivity: f64,
) -> Result<MarketSnapshot> {
    let mut s = spx_bump(snapshot, kind, size)?;
    let dfv = sensitivity * size;
    let fv = snapshot.vix_future;
    s.vix_smile = ssr_shift_smile(&snapshot.vix_smile.with_forward(fv), fv, dfv, ssr)?;
    s.vix_future = fv + dfv;
    s.validate()?;
    Ok(s)
}

/// Rows of the linearized aggregate financial constraints on stacked shocks:
/// per-block mass, `E[s1] = E[s2]` and the forward-variance identity.
pub fn constraint_matrix(grid: &GridSpec) -> DMatrix<f64> {
    let (n1, nv, n2) = grid.dims();
    let n = n1 + nv + n2;
    let mut a = DMatrix::zeros(5, n);
    let c = 2.0 / grid.tau;
    for i in 0..n1 {
        a[(0, i)] = 1.0;
        a[(3, i)] = grid.s1[i];
        a[(4, i)] = -c * grid.s1[i].ln();
    }
    for j in 0..nv {
        a[(1, n1 + j)] = 1.0;
        a[(4, n1 + j)] = grid.v[j] * grid.v[j];
    }
    for k in 0..n2 {
        a[(2, n1 + nv + k)] = 1.0;
        a[(3, n1 + nv + k)] = -grid.s2[k];
        a[(4, n1 + nv + k)] = c * grid.s2[k].ln();
    }
    a
}

/// Euclidean projection of a stacked shock onto the kernel of [`constraint_matrix`].
pub fn project_kernel(grid: &GridSpec, h: &[f64]) -> Vec<f64> {
    let a = constraint_matrix(grid);
    let svd = a.transpose().svd(true, false);
    let u = svd.u.expect("requested U");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let mut out = nalgebra::DVector::from_column_slice(h);
    for (r, s) in svd.singular_values.iter().enumerate() {
        if *s > 1e-12 * smax {
            let col = u.column(r);
            let c = col.dot(&out);
            out.axpy(-c, &col, 1.0);
        }
    }
    out.as_slice().to_vec()
}

pub fn tangent_project(h: &PerturbationVector, grid: &GridSpec) -> PerturbationVector {
    let mut out = h.clone();
    out.set_stacked(&project_kernel(grid, &h.stacked()));
    out
}

/// Targets of the model grid after a bump of `size` (harmonized).
pub fn bumped_targets(model: &CalibratedModel, spec: &ScenarioSpec, size: f64) -> Result<Targets> {
    let sens = vix_future_sensitivity(&model.snapshot, spec.kind)?;
    bumped_targets_with(model, spec, size, sens)
}

pub fn bumped_targets_with(model: &CalibratedModel, spec: &ScenarioSpec, size: f64, sensitivity: f64) -> Result<Targets> {
    if size == 0.0 {
        return Ok(model.targets.clone());
    }
    let bumped = bump_snapshot_with(&model.snapshot, spec.kind, size, &spec.ssr, sensitivity)?;
    let mut grid = model.grid().clone();
    grid.basis = bumped.basis;
    snapshot_targets(&bumped, &grid)
}

/// Full shock for a scenario: central difference of the harmonized bumped
/// targets at `+-size`, per unit size, projected onto the tangent space.
pub fn assemble_scenario(model: &CalibratedModel, spec: &ScenarioSpec) -> Result<PerturbationVector> {
    spec.validate()?;
    let grid = model.grid();
    let mut h = PerturbationVector::zeros(grid, spec);
    if spec.size == 0.0 {
        return Ok(h);
    }
    let snap = &model.snapshot;
    let dfv = vix_future_sensitivity(snap, spec.kind)?;
    let up = bumped_targets_with(model, spec, spec.size, dfv)?;
    let dn = bumped_targets_with(model, spec, -spec.size, dfv)?;
    let d = |a: &MarginalLaw, b: &MarginalLaw| -> Vec<f64> {
        a.weights.iter().zip(&b.weights).map(|(x, y)| (x - y) / (2.0 * spec.size)).collect()
    };
    h.h1 = d(&up.mu1, &dn.mu1);
    h.hv = d(&up.muv, &dn.muv);
    h.h2 = d(&up.mu2, &dn.mu2);

    let fv = snap.vix_future;
    let vix = snap.vix_smile.with_forward(fv);
    let (skew, _) = smile_skew(&vix, fv, spec.ssr.bandwidth);
    h.constraint_bumps = vix
        .strikes
        .iter()
        .map(|&k| {
            let vol = smile_eval(&vix, k);
            let delta = black_call_delta(fv, k, vol, vix.expiry);
            let vega = black_vega(fv, k, vol, vix.expiry);
            (delta - vega * spec.ssr.ssr * skew) * dfv
        })
        .collect();
    Ok(tangent_project(&h, grid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grids::PriorParams;
    use proptest::prelude::*;

    fn flat(vol: f64, fwd: f64, t: f64) -> VolSmile {
        let k: Vec<f64> = (0..41).map(|i| fwd * (0.5 + 0.025 * i as f64)).collect();
        let n = k.len();
        VolSmile::new(t, fwd, k, vec![vol; n]).unwrap()
    }

    #[test]
    fn spot_bump_of_uniform_law_moves_only_the_ends() {
        let g: Vec<f64> = (0..10).map(|i| 90.0 + 2.0 * i as f64).collect();
        let law = MarginalLaw::new(g, vec![0.1; 10]).unwrap();
        let h = spot_bump_marginal(&law, 0.5).unwrap();
        let edge = 1.0 / (2.0 * 10.0);
        assert!((h[0] + edge).abs() < 1e-12);
        assert!((h[9] - edge).abs() < 1e-12);
        assert!(h[1..9].iter().all(|x| x.abs() < 1e-12));
        assert!(spot_bump_marginal(&law, 0.0).unwrap().iter().all(|x| *x == 0.0));
        assert!(spot_bump_marginal(&law, 20.0).is_err());
    }

    #[test]
    fn spot_bump_converges_as_delta_shrinks() {
        let g: Vec<f64> = (0..30).map(|i| 80.0 + 1.5 * i as f64).collect();
        let w: Vec<f64> = g.iter().map(|s| (-(s - 100.0f64).powi(2) / 50.0).exp()).collect();
        let z: f64 = w.iter().sum();
        let law = MarginalLaw::new(g, w.iter().map(|x| x / z).collect()).unwrap();
        let d = 0.2;
        let a = spot_bump_marginal(&law, d).unwrap();
        let b = spot_bump_marginal(&law, d / 2.0).unwrap();
        let gap = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        // the shift is piecewise linear in delta inside one cell, so the gap is zero
        assert!(gap <= 1e-12 + d);
    }

    #[test]
    fn vol_bump_matches_lognormal_sigma_derivative() {
        let (fwd, t, vol) = (100.0, 0.5, 0.2);
        let sm = flat(vol, fwd, t);
        let grid: Vec<f64> = (0..200).map(|i| 60.0 + 80.0 * i as f64 / 199.0).collect();
        let dx = grid[1] - grid[0];
        let h = vol_bump_marginal(&sm, 0.01, &grid).unwrap();
        assert!(h.iter().sum::<f64>().abs() < 1e-10);
        // central lognormal density derivative in sigma, per cell
        let pdf = |s: f64, sig: f64| {
            let st = sig * t.sqrt();
            let z = ((s / fwd).ln() + 0.5 * st * st) / st;
            (-0.5 * z * z).exp() / (s * st * (2.0 * std::f64::consts::PI).sqrt())
        };
        let k = grid.iter().position(|s| *s >= 100.0).unwrap();
        let dsig = |s: f64| (pdf(s, vol + 0.01) - pdf(s, vol)) / 0.01 * dx;
        let sup = grid.iter().map(|s| dsig(*s).abs()).fold(0.0, f64::max);
        // end nodes carry the tail mass beyond the grid
        let err = (1..199).map(|i| (h[i] - dsig(grid[i])).abs()).fold(0.0, f64::max);
        assert!(err / sup < 0.02, "{err} {sup}");
        // a wider law: mass leaves the centre for the wings
        assert!(h[k] < 0.0);
        assert!(h[10] > 0.0 && h[189] > 0.0);
    }

    #[test]
    fn ssr_shift_examples() {
        let p = SsrParams::default();
        let k: Vec<f64> = (0..11).map(|i| 15.0 + i as f64).collect();
        let lin = VolSmile::new(0.1, 20.0, k.clone(), k.iter().map(|x| 0.5 - 0.01 * (x - 20.0)).collect()).unwrap();
        let out = ssr_shift_smile(&lin, 20.0, 1.0, &p).unwrap();
        for (a, b) in out.vols.iter().zip(&lin.vols) {
            assert!((a - b - 0.012).abs() < 1e-12);
        }
        assert_eq!(out.forward, 21.0);
        let same = ssr_shift_smile(&lin, 20.0, 0.0, &p).unwrap();
        assert_eq!(same.vols, lin.vols);
        let fl = VolSmile::new(0.1, 20.0, k.clone(), vec![0.8; 11]).unwrap();
        assert_eq!(ssr_shift_smile(&fl, 20.0, 2.0, &p).unwrap().vols, fl.vols);
        // large shift floors most vols
        assert!(ssr_shift_smile(&lin, 20.0, -60.0, &p).is_err());
    }

    proptest! {
        #[test]
        fn ssr_shift_is_affine_in_dfv(d1 in -0.5f64..0.5, d2 in -0.5f64..0.5) {
            let k: Vec<f64> = (0..11).map(|i| 15.0 + i as f64).collect();
            let sm = VolSmile::new(0.1, 20.0, k.clone(), k.iter().map(|x| 0.9 - 0.02 * (x - 20.0) + 0.001 * (x - 20.0).powi(2)).collect()).unwrap();
            let p = SsrParams::default();
            let a = ssr_shift_smile(&sm, 20.0, d1, &p).unwrap();
            let b = ssr_shift_smile(&sm, 20.0, d2, &p).unwrap();
            let c = ssr_shift_smile(&sm, 20.0, d1 + d2, &p).unwrap();
            for i in 0..11 {
                prop_assert!(((a.vols[i] - sm.vols[i]) + (b.vols[i] - sm.vols[i]) - (c.vols[i] - sm.vols[i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_vol_strip_sensitivity_is_half_over_future() {
        let k = vec![15.0, 20.0, 25.0];
        let sm = VolSmile { expiry: 0.1, forward: 20.0, strikes: k, vols: vec![0.0; 3] };
        let s = vix_sensitivity_from(0.4, &sm).unwrap();
        assert!((s - 0.4 / 40.0).abs() < 1e-14);
        assert_eq!(vix_sensitivity_from(0.0, &sm).unwrap(), 0.0);
    }

    #[test]
    fn vix_future_sensitivity_matches_root_oracle() {
        use crate::backtest::{solve_vix_future, SyntheticMarket};
        use crate::market::forward_variance;
        let s = SyntheticMarket::default().snapshot().unwrap();
        let e = 1e-3;
        for kind in [BumpKind::VolParallel, BumpKind::Spot, BumpKind::VolT2] {
            let formula = vix_future_sensitivity(&s, kind).unwrap();
            let root = |sz: f64| {
                let b = spx_bump(&s, kind, sz).unwrap();
                solve_vix_future(&s.vix_smile, forward_variance(&b).unwrap()).unwrap()
            };
            let oracle = (root(e) - root(-e)) / (2.0 * e);
            assert!(((formula - oracle) / oracle).abs() < 0.05, "{kind:?} {formula} {oracle}");
        }
    }

    #[test]
    fn perturbed_vix_marginal_tracks_new_future() {
        let vg: Vec<f64> = (0..25).map(|i| 0.06 + 0.02 * i as f64).collect();
        let base = VolSmile::new(0.08, 0.2, (0..13).map(|i| 0.12 + 0.02 * i as f64).collect(), vec![0.8; 13]).unwrap();
        assert!(perturbed_vix_marginal(&base, &base, &vg, 0.01).unwrap().iter().all(|x| *x == 0.0));
        let eps = 1e-3;
        let shifted = base.with_forward(0.2 + eps * 0.5);
        let hv = perturbed_vix_marginal(&base, &shifted, &vg, eps).unwrap();
        assert!(hv.iter().sum::<f64>().abs() < 1e-10);
        let b = bl_density(&base, &vg).unwrap();
        let mean: f64 = vg.iter().zip(b.weights.iter().zip(&hv)).map(|(v, (w, h))| v * (w + eps * h)).sum();
        assert!(((mean - shifted.forward) / shifted.forward).abs() < 2e-3);
    }

    fn toy_grid() -> GridSpec {
        GridSpec::new(vec![90.0, 110.0], vec![0.15, 0.25], vec![85.0, 100.0, 115.0], 30.0 / 365.0, 0.0).unwrap()
    }

    #[test]
    fn projection_is_idempotent_and_matches_pinv_oracle() {
        use rand::{Rng, SeedableRng};
        let g = toy_grid();
        let a = constraint_matrix(&g);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let h: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = project_kernel(&g, &h);
            let pp = project_kernel(&g, &p);
            let resid = &a * nalgebra::DVector::from_column_slice(&p);
            assert!(resid.amax() < 1e-9);
            assert!(p.iter().zip(&pp).all(|(x, y)| (x - y).abs() < 1e-12));
            // I - A^+ A from a dense pseudoinverse
            let pinv = a.clone().pseudo_inverse(1e-12).unwrap();
            let proj = DMatrix::identity(7, 7) - &pinv * &a;
            let oracle = proj * nalgebra::DVector::from_column_slice(&h);
            assert!(p.iter().zip(oracle.iter()).all(|(x, y)| (x - y).abs() < 1e-10));
        }
    }

    #[test]
    fn scenario_blocks_are_admissible() {
        use crate::backtest::SyntheticMarket;
        use crate::calibration::{calibrate, CalibConfig};
        let s = SyntheticMarket::default().snapshot().unwrap();
        let mut cfg = CalibConfig::default();
        cfg.grid.n1 = 16;
        cfg.prior = PriorParams::default();
        let m = calibrate(&s, &cfg).unwrap();
        let zero = assemble_scenario(&m, &ScenarioSpec::new(BumpKind::Spot, 0.0)).unwrap();
        assert!(zero.stacked().iter().all(|x| *x == 0.0));
        let h = assemble_scenario(&m, &ScenarioSpec::new(BumpKind::Spot, 1e-3)).unwrap();
        assert!(h.block_sums().iter().all(|x| x.abs() < 1e-10));
        assert!(h.h1.iter().any(|x| x.abs() > 1e-3));
        let a = constraint_matrix(m.grid());
        let r = &a * nalgebra::DVector::from_column_slice(&h.stacked());
        assert!(r.amax() < 1e-9);
        assert_eq!(h.constraint_bumps.len(), s.vix_smile.strikes.len());
    }
}
