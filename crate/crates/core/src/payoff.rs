//! Payoffs on the `(s1, v, s2)` grid.

use serde::{Deserialize, Serialize};

use crate::error::{PotError, Result};
use crate::grids::{expectation, Coupling, GridSpec};
use crate::market::{black_call_delta, smile_eval, VolSmile};
use crate::numerics::find_root;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpxExpiry {
    T1,
    T2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payoff {
    VixFuture,
    VixCall { strike: f64 },
    VixPut { strike: f64 },
    SpxCall { expiry: SpxExpiry, strike: f64 },
    SpxPut { expiry: SpxExpiry, strike: f64 },
    SpxForward { expiry: SpxExpiry },
    /// `s1 * v`.
    Joint,
    Constant { value: f64 },
    Basket { legs: Vec<Leg> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leg {
    pub weight: f64,
    pub payoff: Payoff,
}

/// Payoff with an identifier, as listed in a payoffs file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedPayoff {
    pub id: String,
    #[serde(flatten)]
    pub payoff: Payoff,
}

impl Payoff {
    pub fn eval(&self, s1: f64, v: f64, s2: f64) -> f64 {
        let spx = |e: &SpxExpiry| match e {
            SpxExpiry::T1 => s1,
            SpxExpiry::T2 => s2,
        };
        match self {
            Payoff::VixFuture => v,
            Payoff::VixCall { strike } => (v - strike).max(0.0),
            Payoff::VixPut { strike } => (strike - v).max(0.0),
            Payoff::SpxCall { expiry, strike } => (spx(expiry) - strike).max(0.0),
            Payoff::SpxPut { expiry, strike } => (strike - spx(expiry)).max(0.0),
            Payoff::SpxForward { expiry } => spx(expiry),
            Payoff::Joint => s1 * v,
            Payoff::Constant { value } => *value,
            Payoff::Basket { legs } => legs.iter().map(|l| l.weight * l.payoff.eval(s1, v, s2)).sum(),
        }
    }

    /// Whether the payoff depends on `v` alone.
    pub fn is_vix_only(&self) -> bool {
        match self {
            Payoff::VixFuture | Payoff::VixCall { .. } | Payoff::VixPut { .. } | Payoff::Constant { .. } => true,
            Payoff::Basket { legs } => legs.iter().all(|l| l.payoff.is_vix_only()),
            _ => false,
        }
    }

    pub fn tabulate(&self, grid: &GridSpec) -> Vec<f64> {
        grid.tabulate(|s1, v, s2| self.eval(s1, v, s2))
    }

    pub fn price(&self, mu: &Coupling) -> f64 {
        expectation(mu, &self.tabulate(&mu.grid))
    }

    pub fn default_id(&self) -> String {
        match self {
            Payoff::VixFuture => "vix_future".into(),
            Payoff::VixCall { strike } => format!("vix_call_{strike:.4}"),
            Payoff::VixPut { strike } => format!("vix_put_{strike:.4}"),
            Payoff::SpxCall { expiry, strike } => format!("spx_call_{expiry:?}_{strike:.2}").to_lowercase(),
            Payoff::SpxPut { expiry, strike } => format!("spx_put_{expiry:?}_{strike:.2}").to_lowercase(),
            Payoff::SpxForward { expiry } => format!("spx_forward_{expiry:?}").to_lowercase(),
            Payoff::Joint => "joint_s1_v".into(),
            Payoff::Constant { value } => format!("constant_{value}"),
            Payoff::Basket { legs } => format!("basket_{}", legs.len()),
        }
    }

    pub fn named(self) -> NamedPayoff {
        NamedPayoff { id: self.default_id(), payoff: self }
    }
}

/// Parse a JSON list of named payoffs.
pub fn payoffs_from_json(text: &str) -> Result<Vec<NamedPayoff>> {
    serde_json::from_str(text).map_err(|e| PotError::Input(format!("payoffs: {e} at line {} column {}", e.line(), e.column())))
}

/// Call-delta levels `0.10, 0.15, ..., 0.90`.
pub fn delta_levels() -> Vec<f64> {
    (0..17).map(|i| 0.10 + 0.05 * i as f64).collect()
}

/// Strike whose Black call delta on `smile` equals `delta`.
pub fn strike_for_delta(smile: &VolSmile, delta: f64) -> Result<f64> {
    let f = smile.forward;
    let t = smile.expiry;
    let g = |k: f64| black_call_delta(f, k, smile_eval(smile, k), t) - delta;
    let (mut lo, mut hi) = (f * 0.2, f * 5.0);
    for _ in 0..20 {
        if g(lo) > 0.0 && g(hi) < 0.0 {
            break;
        }
        lo *= 0.5;
        hi *= 2.0;
    }
    find_root(g, lo, hi, 1e-12 * f).map_err(|e| PotError::Numeric(format!("no strike with call delta {delta}: {e}")))
}

/// VIX options struck at the 17 call-delta levels; puts below 50 delta.
pub fn vix_option_ladder(smile: &VolSmile) -> Result<Vec<NamedPayoff>> {
    delta_levels()
        .iter()
        .map(|&d| {
            let strike = strike_for_delta(smile, d)?;
            let p = if d < 0.5 - 1e-9 { Payoff::VixPut { strike } } else { Payoff::VixCall { strike } };
            Ok(NamedPayoff { id: format!("{}_d{:02}", p.default_id(), (d * 100.0).round()), payoff: p })
        })
        .collect()
}

/// VIX calls at the 17 call-delta strikes.
pub fn vix_call_ladder(smile: &VolSmile) -> Result<Vec<NamedPayoff>> {
    delta_levels()
        .iter()
        .map(|&d| {
            let p = Payoff::VixCall { strike: strike_for_delta(smile, d)? };
            Ok(p.named())
        })
        .collect()
}
