use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Method;
use crate::forms::Mode;
use crate::gcomp::{gcomp_estimate, GcompError};
use crate::ipw::{compute_weights, fit_propensity, ipw_estimate, IpwError};
use crate::msm::{default_msm_terms, msm_survival};
use crate::panel::Panel;
use crate::strategy::Strategy;
use crate::survival::SurvivalCurve;
use crate::tmle::{tmle_curve, TmleError, TmleOptions};

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error("ipw: {0}")]
    Ipw(#[from] IpwError),
    #[error("gcomp: {0}")]
    Gcomp(#[from] GcompError),
    #[error("tmle: {0}")]
    Tmle(#[from] TmleError),
    #[error("tmle: time {time}: {message}")]
    TmleTime { time: usize, message: String },
}

/// Settings shared by every estimator call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateOptions {
    pub n_mc: usize,
    pub seed: u64,
    pub stabilized: bool,
    pub weight_cap: Option<f64>,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            n_mc: 10_000,
            seed: 1,
            stabilized: false,
            weight_cap: None,
        }
    }
}

/// Runs one estimator end to end on `panel`. A TMLE time that cannot be
/// estimated is reported as an error.
pub fn estimate_curve(
    panel: &Panel,
    method: Method,
    mode: Mode,
    strategy: &Strategy,
    opts: &EstimateOptions,
) -> Result<SurvivalCurve, EstimateError> {
    match method {
        Method::Ipw => Ok(ipw_estimate(
            panel,
            strategy,
            mode,
            opts.stabilized,
            opts.weight_cap,
        )?),
        Method::Msm => {
            let models = fit_propensity(panel, mode, opts.stabilized)?;
            let mut w = compute_weights(panel, &models, strategy)?;
            if let Some(q) = opts.weight_cap {
                w.cap(q)?;
            }
            Ok(msm_survival(panel, &w, strategy, &default_msm_terms())?.curve)
        }
        Method::Gcomp => Ok(gcomp_estimate(panel, strategy, mode, opts.n_mc, opts.seed)?),
        Method::Tmle => {
            let o = TmleOptions {
                stabilized: opts.stabilized,
                ..TmleOptions::new(mode)
            };
            let c = tmle_curve(panel, strategy, &o)?;
            if let Some((time, message)) = c.errors.into_iter().next() {
                return Err(EstimateError::TmleTime { time, message });
            }
            Ok(c.curve)
        }
    }
}
