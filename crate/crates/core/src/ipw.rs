//! Inverse probability of treatment weighting with grace periods.
//!
//! Only periods in which the strategy forces treatment contribute a factor to
//! the weight. In a grace period treatment is left to its natural course, so
//! following the strategy there carries no selection and the factor is 1.

use serde::Serialize;
use thiserror::Error;

use crate::forms::{self, fit_form, Mode, ModelError};
use crate::glm::{Family, FittedGlm, GlmError};
use crate::panel::{HistoryView, Panel, PanelError, PanelRecord};
use crate::strategy::{PeriodClass, Strategy};
use crate::survival::{survival_from_partial_hazards, SurvivalCurve, SurvivalError};

/// Smallest propensity accepted for a forced treatment value.
pub const POSITIVITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum IpwError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("positivity violation for id {id} at period {k}: propensity {propensity:e}")]
    PositivityViolation { id: u64, k: usize, propensity: f64 },
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error(transparent)]
    Survival(#[from] SurvivalError),
    #[error("weight cap percentile {0} must lie in (0, 100]")]
    InvalidCap(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropensityModels {
    pub mode: Mode,
    pub baseline: FittedGlm,
    pub followup: Option<FittedGlm>,
    /// Numerator models `(baseline, followup)` for stabilized weights.
    pub stabilizer: Option<(FittedGlm, Option<FittedGlm>)>,
}

/// Fits the treatment models on the at-risk rows of a panel: one model at
/// baseline and one pooled over later periods.
pub fn fit_propensity(
    panel: &Panel,
    mode: Mode,
    stabilized: bool,
) -> Result<PropensityModels, IpwError> {
    let traj = panel.trajectories()?;
    fit_propensity_on(&traj, panel.horizon(), mode, stabilized)
}

pub(crate) fn fit_propensity_on(
    traj: &[&[PanelRecord]],
    horizon: usize,
    mode: Mode,
    stabilized: bool,
) -> Result<PropensityModels, IpwError> {
    let a = |r: &PanelRecord| f64::from(r.a);
    let baseline = fit_form(
        "treatment baseline",
        Family::Logistic,
        &forms::treatment_baseline(),
        traj,
        |k| k == 0,
        a,
    )?;
    let followup = if horizon > 1 {
        Some(fit_form(
            "treatment follow-up",
            Family::Logistic,
            &forms::treatment_followup(mode),
            traj,
            |k| k >= 1,
            a,
        )?)
    } else {
        None
    };
    let stabilizer = if stabilized {
        let b = fit_form(
            "stabilizer baseline",
            Family::Logistic,
            &forms::stabilizer_baseline(),
            traj,
            |k| k == 0,
            a,
        )?;
        let f = if horizon > 1 {
            Some(fit_form(
                "stabilizer follow-up",
                Family::Logistic,
                &forms::stabilizer_followup(),
                traj,
                |k| k >= 1,
                a,
            )?)
        } else {
            None
        };
        Some((b, f))
    } else {
        None
    };
    Ok(PropensityModels {
        mode,
        baseline,
        followup,
        stabilizer,
    })
}

fn prob_of(p_treated: f64, a: u8) -> f64 {
    if a == 1 {
        p_treated
    } else {
        1.0 - p_treated
    }
}

impl PropensityModels {
    /// Probability that treatment at period `k` is 1 given the history.
    pub fn treated_prob(&self, history: &HistoryView<'_>, k: usize) -> Result<f64, GlmError> {
        let model = if k == 0 {
            &self.baseline
        } else {
            self.followup.as_ref().unwrap_or(&self.baseline)
        };
        model.predict_one(history)
    }

    fn numerator(&self, history: &HistoryView<'_>, k: usize, a: u8) -> Result<f64, GlmError> {
        match &self.stabilizer {
            None => Ok(1.0),
            Some((b, f)) => {
                let model = if k == 0 { b } else { f.as_ref().unwrap_or(b) };
                Ok(prob_of(model.predict_one(history)?, a))
            }
        }
    }
}

/// Cumulative weights for every at-risk person-period.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightSet {
    pub ids: Vec<u64>,
    /// `weights[i][k]` for individual `i` and period `k` while at risk.
    pub weights: Vec<Vec<f64>>,
    pub mode: Mode,
    pub stabilized: bool,
}

impl WeightSet {
    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.weights[i].get(k).copied().unwrap_or(0.0)
    }

    /// Truncates weights above the given percentile of positive weights.
    pub fn cap(&mut self, percentile: f64) -> Result<f64, IpwError> {
        if !(percentile > 0.0 && percentile <= 100.0) {
            return Err(IpwError::InvalidCap(percentile));
        }
        let mut positive: Vec<f64> = self
            .weights
            .iter()
            .flatten()
            .copied()
            .filter(|&w| w > 0.0)
            .collect();
        if positive.is_empty() {
            return Ok(0.0);
        }
        positive.sort_by(f64::total_cmp);
        let cap = quantile_sorted(&positive, percentile / 100.0);
        for w in self.weights.iter_mut().flatten() {
            *w = w.min(cap);
        }
        Ok(cap)
    }
}

/// Type-7 quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Weight contribution of each period along a trajectory, zero from the
/// first deviation on.
pub(crate) fn weights_along(
    traj: &[PanelRecord],
    models: &PropensityModels,
    strategy: &Strategy,
) -> Result<Vec<f64>, IpwError> {
    let a: Vec<u8> = traj.iter().map(|r| r.a).collect();
    let (classes, deviation) = strategy.classes_along(&a);
    let mut out = vec![0.0; traj.len()];
    let mut w = 1.0;
    for k in 0..traj.len() {
        if deviation.is_some_and(|d| k >= d) {
            break;
        }
        if let PeriodClass::Forced(v) = classes[k] {
            let view = HistoryView::new(traj, k);
            let p = prob_of(
                models
                    .treated_prob(&view, k)
                    .map_err(ModelError::glm("treatment"))?,
                v,
            );
            if p < POSITIVITY_FLOOR {
                return Err(IpwError::PositivityViolation {
                    id: traj[k].id,
                    k,
                    propensity: p,
                });
            }
            let num = models
                .numerator(&view, k, v)
                .map_err(ModelError::glm("stabilizer"))?;
            w *= num / p;
        }
        out[k] = w;
    }
    Ok(out)
}

/// Cumulative weights of every at-risk person-period under `strategy`.
pub fn compute_weights(
    panel: &Panel,
    models: &PropensityModels,
    strategy: &Strategy,
) -> Result<WeightSet, IpwError> {
    let traj = panel.trajectories()?;
    compute_weights_on(&traj, models, strategy)
}

pub(crate) fn compute_weights_on(
    traj: &[&[PanelRecord]],
    models: &PropensityModels,
    strategy: &Strategy,
) -> Result<WeightSet, IpwError> {
    let mut ids = Vec::with_capacity(traj.len());
    let mut weights = Vec::with_capacity(traj.len());
    for t in traj {
        ids.push(t[0].id);
        weights.push(weights_along(t, models, strategy)?);
    }
    Ok(WeightSet {
        ids,
        weights,
        mode: models.mode,
        stabilized: models.stabilizer.is_some(),
    })
}

/// Weighted discrete-time hazards among followers, turned into survival.
/// A period without any weighted follower leaves that and later times
/// missing.
pub fn ipw_survival(
    panel: &Panel,
    weights: &WeightSet,
    strategy: &Strategy,
) -> Result<SurvivalCurve, IpwError> {
    let traj = panel.trajectories()?;
    ipw_survival_on(&traj, panel.horizon(), weights, strategy, weights.mode)
}

pub(crate) fn weighted_hazards(
    traj: &[&[PanelRecord]],
    horizon: usize,
    weights: &WeightSet,
) -> Vec<Option<f64>> {
    let mut num = vec![0.0; horizon];
    let mut den = vec![0.0; horizon];
    for (i, t) in traj.iter().enumerate() {
        for (k, r) in t.iter().enumerate() {
            let w = weights.get(i, k);
            if w > 0.0 {
                num[k] += w * f64::from(r.y);
                den[k] += w;
            }
        }
    }
    num.iter()
        .zip(&den)
        .map(|(n, d)| (*d > 0.0).then(|| (n / d).clamp(0.0, 1.0)))
        .collect()
}

pub(crate) fn ipw_survival_on(
    traj: &[&[PanelRecord]],
    horizon: usize,
    weights: &WeightSet,
    strategy: &Strategy,
    mode: Mode,
) -> Result<SurvivalCurve, IpwError> {
    let hazards = weighted_hazards(traj, horizon, weights);
    let values = survival_from_partial_hazards(&hazards)?;
    Ok(SurvivalCurve::new(
        values,
        "ipw",
        mode.curve_mode(),
        &strategy.to_string(),
    ))
}

/// Full IPW pipeline: fit propensities, weight, estimate.
pub fn ipw_estimate(
    panel: &Panel,
    strategy: &Strategy,
    mode: Mode,
    stabilized: bool,
    weight_cap: Option<f64>,
) -> Result<SurvivalCurve, IpwError> {
    let traj = panel.trajectories()?;
    let models = fit_propensity_on(&traj, panel.horizon(), mode, stabilized)?;
    let mut w = compute_weights_on(&traj, &models, strategy)?;
    if let Some(q) = weight_cap {
        w.cap(q)?;
    }
    ipw_survival_on(&traj, panel.horizon(), &w, strategy, mode)
}
