use thiserror::Error;

/// Errors raised across the pipeline.
///
/// [`PotError::is_input`] separates bad inputs from numerical failures so the
/// CLI can map them onto distinct exit codes.
#[derive(Debug, Error)]
pub enum PotError {
    #[error("input error: {0}")]
    Input(String),
    #[error("implied vol inversion failed: {0}")]
    Inversion(String),
    #[error("butterfly arbitrage: {0}")]
    Arbitrage(String),
    #[error("grid error: {0}")]
    Grid(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("newton failed at node ({i}, {j}): {msg}")]
    Node { i: usize, j: usize, msg: String },
    #[error("calibration did not converge after {outer} outer iterations (marginal err {marginal_err:.3e}, residual {residual:.3e})")]
    Calibration {
        outer: usize,
        marginal_err: f64,
        residual: f64,
    },
    #[error("ill-conditioned Fisher system: {0}")]
    Conditioning(String),
    #[error("inadmissible perturbation: {0}")]
    Admissibility(String),
    #[error("bump too large: {0}")]
    BumpTooLarge(String),
    #[error("degenerate market: {0}")]
    Degenerate(String),
    #[error("reduced projection did not converge in {0} sweeps")]
    Projection(usize),
    #[error("estimation error: {0}")]
    Estimation(String),
    #[error("hedge error: {0}")]
    Hedge(String),
    #[error("comparison error: {0}")]
    Comparison(String),
}

impl PotError {
    pub fn is_input(&self) -> bool {
        matches!(self, PotError::Input(_) | PotError::Comparison(_))
    }
}

pub type Result<T> = std::result::Result<T, PotError>;

pub(crate) fn check_finite(name: &str, x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(PotError::Input(format!("{name} is not finite ({x})")))
    }
}
