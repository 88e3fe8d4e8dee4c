use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{estimate_curve, EstimateError, EstimateOptions, HarnessError, Method};
use crate::forms::Mode;
use crate::ipw::quantile_sorted;
use crate::panel::Panel;
use crate::rng::substream;
use crate::strategy::Strategy;

/// Largest tolerated share of failed resamples.
const MAX_FAILED_SHARE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapCi {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub n_resamples: usize,
    pub n_failed: usize,
}

/// Percentile interval of `estimator` over `resamples` resamples of
/// individuals drawn with replacement. Resample `b` uses substream `b` of
/// `seed`.
pub fn bootstrap_with<F, E>(
    panel: &Panel,
    resamples: usize,
    seed: u64,
    level: f64,
    estimator: F,
) -> Result<BootstrapCi, HarnessError>
where
    F: Fn(&Panel) -> Result<f64, E> + Sync,
{
    if resamples < 100 {
        return Err(HarnessError::TooFewResamples(resamples));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(HarnessError::InvalidLevel(level));
    }
    let n = panel.n_individuals();
    let results: Vec<Option<f64>> = (0..resamples as u64)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(seed, b);
            let picks: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            estimator(&panel.resample(&picks))
                .ok()
                .filter(|v| v.is_finite())
        })
        .collect();
    let mut ok: Vec<f64> = results.into_iter().flatten().collect();
    let n_failed = resamples - ok.len();
    if n_failed as f64 > MAX_FAILED_SHARE * resamples as f64 || ok.is_empty() {
        return Err(HarnessError::BootstrapUnstable {
            failed: n_failed,
            total: resamples,
        });
    }
    ok.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    Ok(BootstrapCi {
        lower: quantile_sorted(&ok, alpha / 2.0),
        upper: quantile_sorted(&ok, 1.0 - alpha / 2.0),
        level,
        n_resamples: resamples,
        n_failed,
    })
}

/// Percentile interval for the survival at `time` (1-based) of one
/// estimator, rerunning the full pipeline on every resample.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_ci(
    panel: &Panel,
    method: Method,
    mode: Mode,
    strategy: &Strategy,
    time: usize,
    opts: &EstimateOptions,
    resamples: usize,
    seed: u64,
    level: f64,
) -> Result<BootstrapCi, HarnessError> {
    bootstrap_with(panel, resamples, seed, level, |p| {
        let c = estimate_curve(p, method, mode, strategy, opts)?;
        c.at(time).ok_or(EstimateError::TmleTime {
            time,
            message: "missing estimate".into(),
        })
    })
}
