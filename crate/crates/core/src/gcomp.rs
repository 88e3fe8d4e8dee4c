//! Parametric g-formula by Monte Carlo forward simulation.
//!
//! The conditional models for the covariate, treatment, monitoring and
//! failure are fitted to the panel, then synthetic individuals are simulated
//! period by period with treatment set by the strategy wherever it forces a
//! value.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::design::ArrayHistory;
use crate::dgm::{normal, ScenarioParams, SimPath};
use crate::forms::{self, fit_form, Mode, ModelError};
use crate::glm::{Family, FittedGlm, GlmError};
use crate::ipw::{fit_propensity_on, IpwError, PropensityModels};
use crate::panel::{HistoryView, Panel, PanelError, PanelRecord};
use crate::rng::{substream, StreamRng};
use crate::strategy::{PeriodClass, Strategy, StrategyError};
use crate::survival::{CurveMode, SurvivalCurve};

#[derive(Debug, Error)]
pub enum GcompError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Propensity(#[from] IpwError),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error("the g-formula needs at least 2 periods, got {0}")]
    TooFewPeriods(usize),
    #[error("the baseline pool is empty")]
    EmptyPool,
    #[error("the number of Monte Carlo draws must be positive")]
    NoDraws,
    #[error("no monitored transitions to estimate the covariate variance from")]
    NoMonitoredTransitions,
}

/// Conditional distributions used to simulate individuals forward.
///
/// Every method sees the path filled up to what is known at that point of
/// period `k`: the covariate before treatment, treatment before monitoring,
/// monitoring before failure.
pub trait ForwardModel: Sync {
    fn curve_mode(&self) -> CurveMode;

    /// Starts a path from an observed baseline covariate.
    fn init(&self, baseline: f64, rng: &mut StreamRng) -> SimPath;

    /// Draws the covariate of period `k >= 1`, returning `(true, observed)`.
    fn draw_covariate(
        &self,
        path: &SimPath,
        k: usize,
        rng: &mut StreamRng,
    ) -> Result<(f64, f64), GlmError>;

    fn treatment_prob(&self, path: &SimPath, k: usize) -> Result<f64, GlmError>;

    /// `None` when monitoring is not modelled; the period then counts as
    /// monitored.
    fn monitoring_prob(&self, path: &SimPath, k: usize) -> Result<Option<f64>, GlmError>;

    fn failure_prob(&self, path: &SimPath, k: usize) -> Result<f64, GlmError>;
}

fn view(path: &SimPath, k: usize) -> ArrayHistory<'_> {
    ArrayHistory {
        k,
        l: &path.l,
        l_star: Some(&path.l_star),
        n: &path.n,
        a: &path.a,
        y: &path.y,
    }
}

/// Fitted conditional models.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NuisanceModels {
    pub mode: Mode,
    pub y_model: FittedGlm,
    pub l_model: FittedGlm,
    pub l_residual_variance: f64,
    pub a_model: PropensityModels,
    /// `(baseline, follow-up)`; absent in naive mode.
    pub n_model: Option<(FittedGlm, FittedGlm)>,
}

/// Fits the four conditional models on the at-risk rows of `panel`.
pub fn fit_gcomp_models(panel: &Panel, mode: Mode) -> Result<NuisanceModels, GcompError> {
    if panel.horizon() < 2 {
        return Err(GcompError::TooFewPeriods(panel.horizon()));
    }
    let traj = panel.trajectories()?;
    fit_gcomp_models_on(&traj, panel.horizon(), mode)
}

pub(crate) fn fit_gcomp_models_on(
    traj: &[&[PanelRecord]],
    horizon: usize,
    mode: Mode,
) -> Result<NuisanceModels, GcompError> {
    let a_model = fit_propensity_on(traj, horizon, mode, false)?;
    let y_model = fit_form(
        "outcome",
        Family::Logistic,
        &forms::outcome(mode),
        traj,
        |_| true,
        |r| f64::from(r.y),
    )?;
    let l_model = fit_form(
        "covariate",
        Family::Gaussian,
        &forms::covariate(mode),
        traj,
        |k| k >= 1,
        |r| r.l,
    )?;
    let (l_residual_variance, n_model) = match mode {
        Mode::Naive => (
            l_model
                .residual_variance
                .ok_or(GcompError::NoMonitoredTransitions)?,
            None,
        ),
        Mode::Adapted => {
            let n = |r: &PanelRecord| f64::from(r.n);
            let base = fit_form(
                "monitoring baseline",
                Family::Logistic,
                &forms::monitoring_baseline(),
                traj,
                |k| k == 0,
                n,
            )?;
            let follow = fit_form(
                "monitoring follow-up",
                Family::Logistic,
                &forms::monitoring_followup(),
                traj,
                |k| k >= 1,
                n,
            )?;
            (monitored_variance(&l_model, traj)?, Some((base, follow)))
        }
    };
    Ok(NuisanceModels {
        mode,
        y_model,
        l_model,
        l_residual_variance,
        a_model,
        n_model,
    })
}

/// Residual variance of the covariate model over transitions that followed
/// a monitored period.
fn monitored_variance(model: &FittedGlm, traj: &[&[PanelRecord]]) -> Result<f64, GcompError> {
    let mut rss = 0.0;
    let mut count = 0usize;
    for t in traj {
        for k in 1..t.len() {
            if t[k - 1].n == 1 {
                let mean = model
                    .predict_one(&HistoryView::new(t, k))
                    .map_err(ModelError::glm("covariate"))?;
                rss += (t[k].l - mean).powi(2);
                count += 1;
            }
        }
    }
    let dof = count.saturating_sub(model.coefficients.len());
    if dof == 0 || rss <= 0.0 {
        return Err(GcompError::NoMonitoredTransitions);
    }
    Ok(rss / dof as f64)
}

impl ForwardModel for NuisanceModels {
    fn curve_mode(&self) -> CurveMode {
        self.mode.curve_mode()
    }

    fn init(&self, baseline: f64, _rng: &mut StreamRng) -> SimPath {
        SimPath {
            u: 0.0,
            l_star: vec![baseline],
            l: vec![baseline],
            ..SimPath::default()
        }
    }

    fn draw_covariate(
        &self,
        path: &SimPath,
        k: usize,
        rng: &mut StreamRng,
    ) -> Result<(f64, f64), GlmError> {
        if self.mode == Mode::Adapted && path.n[k - 1] == 0 {
            let l = path.l[k - 1];
            return Ok((l, l));
        }
        let mean = self.l_model.predict_one(&view(path, k))?;
        let l = normal(rng, mean, self.l_residual_variance);
        Ok((l, l))
    }

    fn treatment_prob(&self, path: &SimPath, k: usize) -> Result<f64, GlmError> {
        let h = view(path, k);
        if k == 0 {
            self.a_model.baseline.predict_one(&h)
        } else {
            self.a_model
                .followup
                .as_ref()
                .unwrap_or(&self.a_model.baseline)
                .predict_one(&h)
        }
    }

    fn monitoring_prob(&self, path: &SimPath, k: usize) -> Result<Option<f64>, GlmError> {
        match &self.n_model {
            None => Ok(None),
            Some((base, follow)) => {
                let m = if k == 0 { base } else { follow };
                m.predict_one(&view(path, k)).map(Some)
            }
        }
    }

    fn failure_prob(&self, path: &SimPath, k: usize) -> Result<f64, GlmError> {
        self.y_model.predict_one(&view(path, k))
    }
}

/// The data-generating mechanism itself as a forward model. The frailty is
/// drawn from its conditional distribution given the baseline covariate, so
/// resampling observed baselines reproduces the joint law.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueForwardModel {
    pub params: ScenarioParams,
}

impl ForwardModel for TrueForwardModel {
    fn curve_mode(&self) -> CurveMode {
        CurveMode::Truth
    }

    fn init(&self, baseline: f64, rng: &mut StreamRng) -> SimPath {
        let b = self.params.covariate.frailty;
        let s2 = self.params.covariate.variance;
        let var = 1.0 / (1.0 / self.params.frailty_var + b * b / s2);
        let mean = var * b * baseline / s2;
        SimPath {
            u: normal(rng, mean, var),
            l_star: vec![baseline],
            l: vec![baseline],
            ..SimPath::default()
        }
    }

    fn draw_covariate(
        &self,
        path: &SimPath,
        k: usize,
        rng: &mut StreamRng,
    ) -> Result<(f64, f64), GlmError> {
        let mean = self
            .params
            .covariate_mean(k, path.u, path.l_star[k - 1], path.a[k - 1]);
        let ls = normal(rng, mean, self.params.covariate.variance);
        let l = if path.n[k - 1] == 1 {
            ls
        } else {
            path.l[k - 1]
        };
        Ok((ls, l))
    }

    fn treatment_prob(&self, path: &SimPath, k: usize) -> Result<f64, GlmError> {
        let (prev_a, prev_n) = if k == 0 {
            (0, 1)
        } else {
            (path.a[k - 1], path.n[k - 1])
        };
        Ok(self.params.treatment_prob(k, path.l[k], prev_a, prev_n))
    }

    fn monitoring_prob(&self, path: &SimPath, k: usize) -> Result<Option<f64>, GlmError> {
        let prev_n = if k == 0 { 1 } else { path.n[k - 1] };
        Ok(Some(
            self.params.monitoring_prob(k, path.l[k], path.a[k], prev_n),
        ))
    }

    fn failure_prob(&self, path: &SimPath, k: usize) -> Result<f64, GlmError> {
        Ok(self.params.outcome_prob(k, path.u, &path.l_star, &path.a))
    }
}

/// Simulates one synthetic individual under `strategy`.
pub fn simulate_forward<M: ForwardModel + ?Sized>(
    model: &M,
    baseline: f64,
    strategy: &Strategy,
    horizon: usize,
    rng: &mut StreamRng,
) -> Result<SimPath, GlmError> {
    let mut path = model.init(baseline, rng);
    for k in 0..horizon {
        if k > 0 {
            let (ls, l) = model.draw_covariate(&path, k, rng)?;
            path.l_star.push(ls);
            path.l.push(l);
        }
        let ua: f64 = rng.random();
        let a = match strategy.classify_unchecked(&path.a) {
            PeriodClass::Forced(v) => v,
            PeriodClass::Natural => u8::from(ua < model.treatment_prob(&path, k)?),
        };
        path.a.push(a);
        let un: f64 = rng.random();
        let n = match model.monitoring_prob(&path, k)? {
            Some(p) => u8::from(un < p),
            None => 1,
        };
        path.n.push(n);
        let uy: f64 = rng.random();
        let y = u8::from(uy < model.failure_prob(&path, k)?);
        path.y.push(y);
        if y == 1 {
            break;
        }
    }
    Ok(path)
}

/// Counterfactual survival under `strategy` from `n_mc` synthetic
/// individuals whose baseline covariate is resampled from `baseline_pool`.
/// Individual `i` uses random substream `i` of `seed`, so the result does
/// not depend on the thread count.
pub fn gcomp_survival<M: ForwardModel + ?Sized>(
    model: &M,
    baseline_pool: &[f64],
    strategy: &Strategy,
    horizon: usize,
    n_mc: usize,
    seed: u64,
) -> Result<SurvivalCurve, GcompError> {
    strategy.validate(horizon)?;
    if baseline_pool.is_empty() {
        return Err(GcompError::EmptyPool);
    }
    if n_mc == 0 {
        return Err(GcompError::NoDraws);
    }
    let survivors = (0..n_mc as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, i);
            let b = baseline_pool[rng.random_range(0..baseline_pool.len())];
            simulate_forward(model, b, strategy, horizon, &mut rng)
        })
        .try_fold(
            || vec![0u64; horizon],
            |mut acc, path| {
                let path = path?;
                let alive = if path.failed() {
                    path.periods() - 1
                } else {
                    path.periods()
                };
                for c in acc.iter_mut().take(alive) {
                    *c += 1;
                }
                Ok::<_, GlmError>(acc)
            },
        )
        .try_reduce(
            || vec![0u64; horizon],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                Ok(a)
            },
        )
        .map_err(ModelError::glm("forward simulation"))?;
    let values = survivors
        .iter()
        .map(|&s| Some(s as f64 / n_mc as f64))
        .collect();
    Ok(SurvivalCurve::new(
        values,
        "gcomp",
        model.curve_mode(),
        &strategy.to_string(),
    ))
}

/// Fits the models on `panel` and simulates under `strategy`.
pub fn gcomp_estimate(
    panel: &Panel,
    strategy: &Strategy,
    mode: Mode,
    n_mc: usize,
    seed: u64,
) -> Result<SurvivalCurve, GcompError> {
    let models = fit_gcomp_models(panel, mode)?;
    gcomp_survival(
        &models,
        &panel.baseline_covariates(),
        strategy,
        panel.horizon(),
        n_mc,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgm::{scenario_params, simulate_cohort, simulate_truth};

    #[test]
    fn adapted_covariate_is_carried_when_unmonitored() {
        let p = scenario_params(3).unwrap();
        let panel = simulate_cohort(&p, 3000, 11).unwrap();
        let m = fit_gcomp_models(&panel, Mode::Adapted).unwrap();
        let mut rng = substream(1, 0);
        for i in 0..200 {
            let path = simulate_forward(
                &m,
                0.3 * f64::from(i % 7) - 1.0,
                &Strategy::TREAT_EARLY,
                5,
                &mut rng,
            )
            .unwrap();
            for k in 1..path.periods() {
                if path.n[k - 1] == 0 {
                    assert_eq!(path.l[k], path.l[k - 1]);
                }
            }
        }
    }

    #[test]
    fn naive_has_no_monitoring_model() {
        let p = scenario_params(1).unwrap();
        let panel = simulate_cohort(&p, 2000, 2).unwrap();
        let m = fit_gcomp_models(&panel, Mode::Naive).unwrap();
        assert!(m.n_model.is_none());
        assert_eq!(m.l_model.coefficients.len(), 3);
    }

    #[test]
    fn seed_determinism_and_monotone() {
        let p = scenario_params(1).unwrap();
        let panel = simulate_cohort(&p, 1500, 4).unwrap();
        let a = gcomp_estimate(&panel, &Strategy::WAIT, Mode::Adapted, 2000, 9).unwrap();
        let b = gcomp_estimate(&panel, &Strategy::WAIT, Mode::Adapted, 2000, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.is_monotone());
    }

    #[test]
    fn true_model_matches_truth() {
        let p = scenario_params(1).unwrap();
        let pool = simulate_cohort(&p, 50_000, 21)
            .unwrap()
            .baseline_covariates();
        let model = TrueForwardModel { params: p };
        for s in Strategy::study_set() {
            let g = gcomp_survival(&model, &pool, &s, 5, 40_000, 5).unwrap();
            let t = simulate_truth(&p, &s, 40_000, 6).unwrap();
            for k in 0..5 {
                let (x, y) = (g.values[k].unwrap(), t.values()[k]);
                let se = (x * (1.0 - x) / 40_000.0 * 2.0).sqrt();
                assert!((x - y).abs() < 4.0 * se, "{s} t{} {x} {y}", k + 1);
            }
        }
    }
}
