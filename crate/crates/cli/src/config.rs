//! Run configuration shared by all commands.

use std::path::{Path, PathBuf};

use pot_core::backtest::BacktestConfig;
use pot_core::calibration::CalibConfig;
use pot_core::payoff::NamedPayoff;
use pot_core::perturb::ScenarioSpec;
use pot_core::risk::RiskOptions;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::io::read_json;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub calibration: CalibConfig,
    /// Snapshot file, relative to the config file.
    pub snapshot: Option<PathBuf>,
    pub scenarios: Option<Vec<ScenarioSpec>>,
    pub payoffs: Option<Vec<NamedPayoff>>,
    pub risk: RiskOptions,
    pub backtest: BacktestConfig,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl RunConfig {
    /// Load and validate; paths inside are resolved against the file's directory.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let mut c: RunConfig = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut c.snapshot, &mut c.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> CliResult<()> {
        let field = |name: &str, r: pot_core::Result<()>| r.map_err(|e| CliError::Input(format!("config: {name}: {e}")));
        field("calibration", self.calibration.validate())?;
        field("backtest", self.backtest.validate())?;
        for (i, s) in self.scenarios.iter().flatten().enumerate() {
            field(&format!("scenarios[{i}]"), s.validate())?;
        }
        if let Some(p) = &self.snapshot {
            if !p.is_file() {
                return Err(CliError::Input(format!("config: snapshot: {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}
