use rayon::prelude::*;

use super::truth::cached_truth;
use super::{summarize, ExperimentConfig, HarnessError, Method, ResultRow};
use crate::dgm::{scenario_params, simulate_cohort, ScenarioParams, TruthCurve};
use crate::forms::Mode;
use crate::gcomp::{fit_gcomp_models_on, gcomp_survival};
use crate::ipw::{compute_weights_on, fit_propensity_on, ipw_survival_on, WeightSet};
use crate::msm::{default_msm_terms, msm_survival};
use crate::rng::{derive, substream_seed};
use crate::strategy::Strategy;
use crate::tmle::{tmle_curve, TmleOptions};

/// Simulates the true curves (or reads them from the cache in `out_dir`)
/// and runs every replication.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<ResultRow>, HarnessError> {
    config.validate()?;
    let truths = config
        .strategies
        .iter()
        .map(|s| {
            cached_truth(
                &config.out_dir,
                config.scenario,
                s,
                config.truth_n,
                config.truth_seed,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    run_experiment_with_truth(config, &truths)
}

/// Estimates per replication for every `(strategy, method, mode)` cell;
/// `None` marks a failed estimate.
type RepResult = Vec<Option<Vec<f64>>>;

fn cells(config: &ExperimentConfig) -> Vec<(usize, Method, Mode)> {
    let mut out = Vec::new();
    for si in 0..config.strategies.len() {
        for &m in &config.methods {
            for &mode in &config.modes {
                out.push((si, m, mode));
            }
        }
    }
    out
}

fn complete(values: &[Option<f64>]) -> Option<Vec<f64>> {
    values.iter().copied().collect()
}

fn run_rep(config: &ExperimentConfig, params: &ScenarioParams, rep: u64) -> RepResult {
    let cells = cells(config);
    let mut out: RepResult = vec![None; cells.len()];
    let seed = substream_seed(config.master_seed, rep);
    let Ok(panel) = simulate_cohort(params, config.n, derive(seed, 0)) else {
        return out;
    };
    let Ok(traj) = panel.trajectories() else {
        return out;
    };
    let horizon = panel.horizon();
    let pool = panel.baseline_covariates();
    let weigh = |models: &crate::ipw::PropensityModels, s: &Strategy| -> Option<WeightSet> {
        let mut w = compute_weights_on(&traj, models, s).ok()?;
        if let Some(q) = config.weight_cap {
            w.cap(q).ok()?;
        }
        Some(w)
    };
    for &mode in &config.modes {
        let wants = |m: Method| config.methods.contains(&m);
        let propensity = (wants(Method::Ipw) || wants(Method::Msm))
            .then(|| fit_propensity_on(&traj, horizon, mode, config.stabilized).ok())
            .flatten();
        let nuisance = wants(Method::Gcomp)
            .then(|| fit_gcomp_models_on(&traj, horizon, mode).ok())
            .flatten();
        for (c, &(si, method, cell_mode)) in cells.iter().enumerate() {
            if cell_mode != mode {
                continue;
            }
            let s = &config.strategies[si];
            out[c] = match method {
                Method::Ipw => propensity.as_ref().and_then(|m| {
                    let w = weigh(m, s)?;
                    let curve = ipw_survival_on(&traj, horizon, &w, s, mode).ok()?;
                    complete(&curve.values)
                }),
                Method::Msm => propensity.as_ref().and_then(|m| {
                    let w = weigh(m, s)?;
                    let fit = msm_survival(&panel, &w, s, &default_msm_terms()).ok()?;
                    complete(&fit.curve.values)
                }),
                Method::Gcomp => nuisance.as_ref().and_then(|m| {
                    let curve =
                        gcomp_survival(m, &pool, s, horizon, config.n_mc, derive(seed, 1)).ok()?;
                    complete(&curve.values)
                }),
                Method::Tmle => {
                    let opts = TmleOptions {
                        stabilized: config.stabilized,
                        ..TmleOptions::new(mode)
                    };
                    tmle_curve(&panel, s, &opts)
                        .ok()
                        .and_then(|c| complete(&c.curve.values))
                }
            };
        }
    }
    out
}

/// Runs every replication against the given true curves (one per strategy,
/// in config order) and summarizes each cell.
pub fn run_experiment_with_truth(
    config: &ExperimentConfig,
    truths: &[TruthCurve],
) -> Result<Vec<ResultRow>, HarnessError> {
    config.validate()?;
    if truths.len() != config.strategies.len() {
        return Err(HarnessError::Config(format!(
            "{} true curves for {} strategies",
            truths.len(),
            config.strategies.len()
        )));
    }
    let params = scenario_params(config.scenario)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.effective_workers())
        .build()?;
    let reps: Vec<RepResult> = pool.install(|| {
        (0..config.n_sim as u64)
            .into_par_iter()
            .map(|r| run_rep(config, &params, r))
            .collect()
    });

    let mut rows = Vec::new();
    for (c, (si, method, mode)) in cells(config).into_iter().enumerate() {
        let ok: Vec<&Vec<f64>> = reps.iter().filter_map(|r| r[c].as_ref()).collect();
        let n_failed = reps.len() - ok.len();
        let truth = truths[si].values();
        for (k, &t) in truth.iter().enumerate().take(params.horizon) {
            let est: Vec<f64> = ok.iter().map(|v| v[k]).collect();
            let (mean, se, bias, mc_se) = match summarize(&est, t) {
                Ok(s) => (s.mean, s.empirical_se, s.bias, s.mc_se),
                Err(_) => {
                    let mean = est.first().copied().unwrap_or(f64::NAN);
                    (mean, f64::NAN, mean - t, f64::NAN)
                }
            };
            rows.push(ResultRow {
                scenario: config.scenario,
                strategy: config.strategies[si].to_string(),
                time: k + 1,
                method,
                mode,
                true_value: t,
                mean_estimate: mean,
                empirical_se: se,
                bias,
                mc_se,
                n_failed_reps: n_failed,
            });
        }
    }
    Ok(rows)
}
