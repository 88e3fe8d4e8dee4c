//! Longitudinal targeted maximum likelihood estimation by iterated
//! conditional expectations.
//!
//! For a target time the probability of failure by that time is regressed
//! backwards one period at a time. Each regression is predicted under the
//! strategy's treatment and then nudged by an intercept-only weighted
//! logistic fit among the individuals still following the strategy.

use serde::Serialize;
use thiserror::Error;

use crate::design::{DesignMatrix, DesignSpec};
use crate::forms::{self, Mode, ModelError};
use crate::glm::{expit, fit_glm, logit, Family, GlmError};
use crate::ipw::{fit_propensity_on, weights_along, IpwError};
use crate::panel::{HistoryView, Panel, PanelError, PanelRecord};
use crate::strategy::{PeriodClass, Strategy, StrategyError};
use crate::survival::SurvivalCurve;

/// Bound applied to predicted probabilities before taking logits.
pub const CLAMP: f64 = 1e-6;

const REDUNDANCY_TOLERANCE: f64 = 1e-9;

/// Fluctuation used when every follower's pseudo-outcome sits on the same
/// boundary, where the likelihood has no finite maximizer.
pub const BOUNDARY_EPSILON: f64 = 50.0;

/// Pseudo-outcomes this close to 0 or 1 count as lying on the boundary.
const BOUNDARY_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TmleError {
    #[error("no individual follows the strategy through period {0}")]
    EmptyFollowerSet(usize),
    #[error("target time {time} outside 1..={horizon}")]
    TargetOutOfRange { time: usize, horizon: usize },
    #[error("custom outcome design has {got} periods, expected {expected}")]
    DesignLength { expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Weights(#[from] IpwError),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
}

/// Outcome regression used at each backward step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum OutcomeDesign {
    /// The outcome model form of the given mode at every step.
    Form(Mode),
    /// One design per period.
    Custom(Vec<DesignSpec>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TmleOptions {
    pub mode: Mode,
    pub design: OutcomeDesign,
    /// When false every fluctuation is skipped, leaving the plain
    /// iterated-expectation estimate.
    pub targeting: bool,
    pub stabilized: bool,
}

impl TmleOptions {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            design: OutcomeDesign::Form(mode),
            targeting: true,
            stabilized: false,
        }
    }

    fn design_at(&self, j: usize) -> DesignSpec {
        match &self.design {
            OutcomeDesign::Form(m) => forms::outcome(*m),
            OutcomeDesign::Custom(v) => v[j].clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepTrace {
    pub period: usize,
    pub epsilon: f64,
    pub n_followers: usize,
    /// Weighted residual sum over followers before and after fluctuation.
    pub pre_score: f64,
    pub post_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TargetingTrace {
    pub target_time: usize,
    pub steps: Vec<StepTrace>,
    pub estimate: f64,
}

/// Fits the intercept-only logistic fluctuation on the masked rows and
/// applies it to every row.
pub fn fluctuate(
    q_init: &[f64],
    pseudo: &[f64],
    weights: &[f64],
    mask: &[bool],
) -> Result<(f64, Vec<f64>), GlmError> {
    let spec = DesignSpec::new(true, Vec::new()).map_err(GlmError::from)?;
    let mut m = DesignMatrix::empty(spec);
    let mut y = Vec::new();
    let mut w = Vec::new();
    for i in 0..q_init.len() {
        if mask[i] && weights[i] > 0.0 {
            m.push_values(&[], logit(q_init[i].clamp(CLAMP, 1.0 - CLAMP)))
                .map_err(GlmError::from)?;
            y.push(pseudo[i]);
            w.push(weights[i]);
        }
    }
    if y.is_empty() {
        return Err(GlmError::NoPositiveWeight);
    }
    let eps = if y.iter().all(|&v| v <= BOUNDARY_TOLERANCE) {
        -BOUNDARY_EPSILON
    } else if y.iter().all(|&v| v >= 1.0 - BOUNDARY_TOLERANCE) {
        BOUNDARY_EPSILON
    } else {
        fit_glm(Family::Logistic, &m, &y, Some(&w))?.coefficients[0]
    };
    let q_star = q_init
        .iter()
        .map(|&q| expit(logit(q.clamp(CLAMP, 1.0 - CLAMP)) + eps))
        .collect();
    Ok((eps, q_star))
}

fn score(q: &[f64], pseudo: &[f64], weights: &[f64], mask: &[bool]) -> f64 {
    (0..q.len())
        .filter(|&i| mask[i])
        .map(|i| weights[i] * (pseudo[i] - q[i]))
        .sum()
}

/// Treatment the strategy assigns along an observed trajectory, keeping the
/// observed value in grace periods.
fn counterfactual_treatment(strategy: &Strategy, traj: &[PanelRecord]) -> Vec<u8> {
    let mut cf = Vec::with_capacity(traj.len());
    for r in traj {
        let a = match strategy.classify_unchecked(&cf) {
            PeriodClass::Forced(v) => v,
            PeriodClass::Natural => r.a,
        };
        cf.push(a);
    }
    cf
}

/// Per-individual inputs shared across target times.
struct Prepared<'a> {
    traj: Vec<&'a [PanelRecord]>,
    weights: Vec<Vec<f64>>,
    counterfactual: Vec<Vec<u8>>,
}

fn prepare<'a>(
    panel: &'a Panel,
    strategy: &Strategy,
    opts: &TmleOptions,
) -> Result<Prepared<'a>, TmleError> {
    strategy.validate(panel.horizon())?;
    if let OutcomeDesign::Custom(v) = &opts.design {
        if v.len() < panel.horizon() {
            return Err(TmleError::DesignLength {
                expected: panel.horizon(),
                got: v.len(),
            });
        }
    }
    let traj = panel.trajectories()?;
    let models = fit_propensity_on(&traj, panel.horizon(), opts.mode, opts.stabilized)?;
    let weights = traj
        .iter()
        .map(|t| weights_along(t, &models, strategy))
        .collect::<Result<Vec<_>, _>>()?;
    let counterfactual = traj
        .iter()
        .map(|t| counterfactual_treatment(strategy, t))
        .collect();
    Ok(Prepared {
        traj,
        weights,
        counterfactual,
    })
}

fn run_target(
    prep: &Prepared<'_>,
    opts: &TmleOptions,
    target_time: usize,
) -> Result<TargetingTrace, TmleError> {
    let target = target_time - 1;
    let n = prep.traj.len();
    // Q* of the next period, by individual.
    let mut next = vec![f64::NAN; n];
    let mut steps = Vec::with_capacity(target_time);
    for j in (0..=target).rev() {
        let rows: Vec<usize> = (0..n).filter(|&i| prep.traj[i].len() > j).collect();
        let pseudo: Vec<f64> = rows
            .iter()
            .map(|&i| {
                let r = &prep.traj[i][j];
                if j == target || r.y == 1 {
                    f64::from(r.y)
                } else {
                    next[i]
                }
            })
            .collect();

        let spec = opts.design_at(j);
        let mut fit_m = DesignMatrix::empty(spec.clone());
        let mut pred_m = DesignMatrix::empty(spec);
        for &i in &rows {
            let t = prep.traj[i];
            fit_m
                .push(&HistoryView::new(t, j))
                .map_err(ModelError::design("outcome"))?;
            pred_m
                .push(&HistoryView::new(t, j).with_treatment(&prep.counterfactual[i]))
                .map_err(ModelError::design("outcome"))?;
        }
        let drop = fit_m.redundant_terms(None, REDUNDANCY_TOLERANCE);
        let fit_m = fit_m.without_terms(&drop);
        let pred_m = pred_m.without_terms(&drop);
        let q_model =
            fit_glm(Family::Logistic, &fit_m, &pseudo, None).map_err(ModelError::glm("outcome"))?;
        let q: Vec<f64> = q_model
            .predict(&pred_m)
            .map_err(ModelError::glm("outcome"))?
            .into_iter()
            .map(|p| p.clamp(CLAMP, 1.0 - CLAMP))
            .collect();

        let w: Vec<f64> = rows.iter().map(|&i| prep.weights[i][j]).collect();
        let mask: Vec<bool> = w.iter().map(|&x| x > 0.0).collect();
        let n_followers = mask.iter().filter(|&&m| m).count();
        if n_followers == 0 {
            return Err(TmleError::EmptyFollowerSet(j));
        }
        let pre_score = score(&q, &pseudo, &w, &mask);
        let (epsilon, q_star) = if opts.targeting {
            fluctuate(&q, &pseudo, &w, &mask).map_err(ModelError::glm("fluctuation"))?
        } else {
            (0.0, q.clone())
        };
        let post_score = score(&q_star, &pseudo, &w, &mask);
        steps.push(StepTrace {
            period: j,
            epsilon,
            n_followers,
            pre_score,
            post_score,
        });
        next = vec![f64::NAN; n];
        for (&i, &v) in rows.iter().zip(&q_star) {
            next[i] = v;
        }
    }
    let estimate = 1.0 - next.iter().sum::<f64>() / n as f64;
    steps.reverse();
    Ok(TargetingTrace {
        target_time,
        steps,
        estimate,
    })
}

/// Survival at `target_time` (1-based) under `strategy`.
pub fn tmle_estimate(
    panel: &Panel,
    strategy: &Strategy,
    target_time: usize,
    opts: &TmleOptions,
) -> Result<(f64, TargetingTrace), TmleError> {
    if target_time == 0 || target_time > panel.horizon() {
        return Err(TmleError::TargetOutOfRange {
            time: target_time,
            horizon: panel.horizon(),
        });
    }
    let prep = prepare(panel, strategy, opts)?;
    let trace = run_target(&prep, opts, target_time)?;
    Ok((trace.estimate, trace))
}

/// Estimates at every time, each from its own backward recursion.
#[derive(Debug, Serialize)]
pub struct TmleCurve {
    pub curve: SurvivalCurve,
    pub traces: Vec<Option<TargetingTrace>>,
    /// `(time, message)` for every time that could not be estimated.
    pub errors: Vec<(usize, String)>,
    pub monotone: bool,
}

pub fn tmle_curve(
    panel: &Panel,
    strategy: &Strategy,
    opts: &TmleOptions,
) -> Result<TmleCurve, TmleError> {
    let prep = prepare(panel, strategy, opts)?;
    let mut values = Vec::with_capacity(panel.horizon());
    let mut traces = Vec::with_capacity(panel.horizon());
    let mut errors = Vec::new();
    for t in 1..=panel.horizon() {
        match run_target(&prep, opts, t) {
            Ok(tr) => {
                values.push(Some(tr.estimate));
                traces.push(Some(tr));
            }
            Err(e) => {
                values.push(None);
                traces.push(None);
                errors.push((t, e.to_string()));
            }
        }
    }
    let curve = SurvivalCurve::new(
        values,
        "tmle",
        opts.mode.curve_mode(),
        &strategy.to_string(),
    );
    let monotone = curve.is_monotone();
    Ok(TmleCurve {
        curve,
        traces,
        errors,
        monotone,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgm::{scenario_params, simulate_cohort};
    use crate::rng::substream;
    use rand::Rng;

    #[test]
    fn fixed_point() {
        let q = [0.2, 0.5, 0.7];
        let (eps, qs) = fluctuate(&q, &q, &[1.0, 2.0, 1.0], &[true; 3]).unwrap();
        assert!(eps.abs() < 1e-10);
        for (a, b) in q.iter().zip(&qs) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn closed_form_intercept() {
        let q = [0.5; 5];
        let pseudo = [1.0, 1.0, 1.0, 1.0, 0.0];
        let (eps, qs) = fluctuate(&q, &pseudo, &[1.0; 5], &[true; 5]).unwrap();
        assert!((eps - 0.8f64.ln() + 0.2f64.ln()).abs() < 1e-8);
        assert!(qs.iter().all(|v| (v - 0.8).abs() < 1e-8));
    }

    #[test]
    fn random_score_identity() {
        let mut rng = substream(3, 0);
        for _ in 0..20 {
            let q: Vec<f64> = (0..6).map(|_| rng.random_range(0.05..0.95)).collect();
            let pseudo: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
            let w: Vec<f64> = (0..6).map(|_| rng.random_range(0.1..3.0)).collect();
            let mask = [true, true, false, true, true, false];
            let (_, qs) = fluctuate(&q, &pseudo, &w, &mask).unwrap();
            assert!(score(&qs, &pseudo, &w, &mask).abs() < 1e-8);
        }
    }

    #[test]
    fn boundary_pseudo_outcomes() {
        let q = [0.3, 1.0 - 1e-7, 0.01];
        let (eps, qs) =
            fluctuate(&q, &[0.0, 0.0, 1.0], &[2.0, 1.0, 1.0], &[true, true, false]).unwrap();
        assert_eq!(eps, -BOUNDARY_EPSILON);
        assert!(qs.iter().all(|&v| v > 0.0 && v < 1e-12));
        assert!(
            score(
                &qs,
                &[0.0, 0.0, 1.0],
                &[2.0, 1.0, 1.0],
                &[true, true, false]
            )
            .abs()
                < 1e-6
        );
    }

    #[test]
    fn pseudo_outcomes_left_by_an_earlier_boundary_step() {
        let q = [0.06, 0.02, 0.4];
        let pseudo = [2e-24, 1e-25, 0.0];
        let (eps, _) = fluctuate(&q, &pseudo, &[10.0, 200.0, 1.0], &[true; 3]).unwrap();
        assert_eq!(eps, -BOUNDARY_EPSILON);
    }

    #[test]
    fn empty_mask_is_an_error() {
        assert!(fluctuate(&[0.5], &[1.0], &[1.0], &[false]).is_err());
    }

    #[test]
    fn curve_shape_and_trace_invariants() {
        let p = scenario_params(1).unwrap();
        let panel = simulate_cohort(&p, 3000, 17).unwrap();
        let c = tmle_curve(
            &panel,
            &Strategy::TREAT_EARLY,
            &TmleOptions::new(Mode::Adapted),
        )
        .unwrap();
        assert!(c.errors.is_empty(), "{:?}", c.errors);
        assert_eq!(c.curve.len(), 5);
        for v in &c.curve.values {
            assert!((0.0..=1.0).contains(&v.unwrap()));
        }
        for tr in c.traces.iter().flatten() {
            assert_eq!(tr.steps.len(), tr.target_time);
            for s in &tr.steps {
                assert!(s.post_score.abs() < 1e-6, "{s:?}");
            }
        }
    }

    #[test]
    fn counterfactual_keeps_grace_choices() {
        let rec = |k, a| PanelRecord {
            id: 0,
            k,
            l_star: None,
            l: 0.0,
            n: 1,
            a,
            y: 0,
            at_risk: 1,
        };
        let traj = [rec(0, 0), rec(1, 0), rec(2, 1), rec(3, 0), rec(4, 0)];
        assert_eq!(
            counterfactual_treatment(&Strategy::WAIT, &traj),
            vec![0, 0, 1, 1, 0]
        );
        assert_eq!(
            counterfactual_treatment(&Strategy::TREAT_EARLY, &traj),
            vec![1, 1, 1, 0, 0]
        );
    }
}
