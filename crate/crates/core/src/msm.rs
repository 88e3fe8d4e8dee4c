//! Weighted pooled-logistic marginal structural model for the hazard.
//!
//! The hazard is modelled on categorical time plus treatment-history terms.
//! A strategy's curve is obtained by averaging the predicted hazard over the
//! weighted followers at each period and chaining the results.

use serde::Serialize;

use crate::design::{lag, DesignMatrix, DesignSpec, Term, Var};
use crate::forms::ModelError;
use crate::glm::{fit_glm, Family, FittedGlm};
use crate::ipw::{IpwError, WeightSet};
use crate::panel::{HistoryView, Panel};
use crate::strategy::Strategy;
use crate::survival::{survival_from_partial_hazards, SurvivalCurve};

const REDUNDANCY_TOLERANCE: f64 = 1e-9;

/// Current and two previous treatments.
pub fn default_msm_terms() -> Vec<Term> {
    vec![
        Term::var(Var::A, 0),
        Term::var(Var::A, 1),
        Term::var(Var::A, 2),
    ]
}

/// Fully saturated treatment history: one coefficient per treatment prefix
/// within each period.
pub fn saturated_msm_terms(horizon: usize) -> Vec<Term> {
    let mut terms = Vec::new();
    for k in 0..horizon {
        for mask in 1u32..(1 << (k + 1)) {
            let factors: Vec<_> = (0..=k)
                .filter(|j| mask & (1 << j) != 0)
                .map(|j| lag(Var::A, k - j))
                .collect();
            terms.push(Term::at_period(k, &factors));
        }
    }
    terms
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MsmFit {
    pub curve: SurvivalCurve,
    pub model: Option<FittedGlm>,
    /// Periods without events (or with only events) among followers; their
    /// hazard is set to the boundary value.
    pub degenerate_periods: Vec<usize>,
    /// Terms removed because they were identically zero or collinear.
    pub dropped_terms: Vec<String>,
    pub warnings: Vec<String>,
}

/// Fits the hazard model with `history_terms` added to categorical time on
/// the weighted at-risk rows and standardizes over the followers.
pub fn msm_survival(
    panel: &Panel,
    weights: &WeightSet,
    strategy: &Strategy,
    history_terms: &[Term],
) -> Result<MsmFit, IpwError> {
    let traj = panel.trajectories()?;
    let horizon = panel.horizon();
    let mut warnings = Vec::new();
    if !weights.stabilized {
        warnings.push("unstabilized weights".to_owned());
    }

    let mut sum_w = vec![0.0; horizon];
    let mut sum_wy = vec![0.0; horizon];
    for (i, t) in traj.iter().enumerate() {
        for (k, r) in t.iter().enumerate() {
            let w = weights.get(i, k);
            if w > 0.0 {
                sum_w[k] += w;
                sum_wy[k] += w * f64::from(r.y);
            }
        }
    }
    let boundary: Vec<Option<f64>> = (0..horizon)
        .map(|k| {
            if sum_w[k] <= 0.0 {
                None
            } else if sum_wy[k] <= 0.0 {
                Some(0.0)
            } else if sum_wy[k] >= sum_w[k] {
                Some(1.0)
            } else {
                None
            }
        })
        .collect();
    let degenerate_periods: Vec<usize> = (0..horizon).filter(|&k| boundary[k].is_some()).collect();
    let fitted_periods: Vec<usize> = (0..horizon)
        .filter(|&k| sum_w[k] > 0.0 && boundary[k].is_none())
        .collect();

    let mut terms: Vec<Term> = fitted_periods.iter().map(|&k| Term::period(k)).collect();
    terms.extend(history_terms.iter().cloned());
    let spec = DesignSpec::new(false, terms).map_err(ModelError::design("msm"))?;

    let mut m = DesignMatrix::empty(spec);
    let mut y = Vec::new();
    let mut w = Vec::new();
    for (i, t) in traj.iter().enumerate() {
        for (k, r) in t.iter().enumerate() {
            let wi = weights.get(i, k);
            if wi > 0.0 && fitted_periods.contains(&k) {
                m.push(&HistoryView::new(t, k))
                    .map_err(ModelError::design("msm"))?;
                y.push(f64::from(r.y));
                w.push(wi);
            }
        }
    }

    let mut dropped_terms = Vec::new();
    let model = if fitted_periods.is_empty() {
        None
    } else {
        let drop = m.redundant_terms(Some(&w), REDUNDANCY_TOLERANCE);
        dropped_terms = drop
            .iter()
            .map(|&t| m.spec().terms[t].name.clone())
            .collect();
        let m = m.without_terms(&drop);
        Some(fit_glm(Family::Logistic, &m, &y, Some(&w)).map_err(ModelError::glm("msm"))?)
    };

    let mut num = vec![0.0; horizon];
    for (i, t) in traj.iter().enumerate() {
        for k in 0..t.len() {
            let wi = weights.get(i, k);
            if wi > 0.0 && boundary[k].is_none() {
                let model = model.as_ref().expect("fitted periods imply a model");
                let h = model
                    .predict_one(&HistoryView::new(t, k))
                    .map_err(ModelError::glm("msm"))?;
                num[k] += wi * h;
            }
        }
    }
    let hazards: Vec<Option<f64>> = (0..horizon)
        .map(|k| boundary[k].or_else(|| (sum_w[k] > 0.0).then(|| num[k] / sum_w[k])))
        .collect();
    let values = survival_from_partial_hazards(&hazards)?;
    Ok(MsmFit {
        curve: SurvivalCurve::new(
            values,
            "msm",
            weights.mode.curve_mode(),
            &strategy.to_string(),
        ),
        model,
        degenerate_periods,
        dropped_terms,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forms::Mode;
    use crate::ipw::ipw_survival;
    use crate::panel::PanelRecord;
    use rand::{Rng, SeedableRng};

    fn random_panel(n: u64, horizon: usize, seed: u64) -> (Panel, WeightSet) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut recs = Vec::new();
        let mut weights = Vec::new();
        for id in 0..n {
            let mut ws = Vec::new();
            let mut w = 1.0;
            for k in 0..horizon {
                let a = u8::from(rng.random_bool(0.5));
                let y = u8::from(rng.random_bool(0.2 + 0.2 * f64::from(a)));
                w *= rng.random_range(0.5..2.0);
                ws.push(w);
                recs.push(PanelRecord {
                    id,
                    k,
                    l_star: None,
                    l: 0.0,
                    n: 1,
                    a,
                    y,
                    at_risk: 1,
                });
                if y == 1 {
                    break;
                }
            }
            weights.push(ws);
        }
        let panel = Panel::new(horizon, recs).unwrap();
        let ids = (0..n).collect();
        (
            panel,
            WeightSet {
                ids,
                weights,
                mode: Mode::Adapted,
                stabilized: true,
            },
        )
    }

    #[test]
    fn saturated_model_reproduces_weighted_hazards() {
        let (panel, w) = random_panel(400, 2, 5);
        let s = Strategy::TreatEarly { force_len: 0 };
        let fit = msm_survival(&panel, &w, &s, &saturated_msm_terms(2)).unwrap();
        let direct = ipw_survival(&panel, &w, &s).unwrap();
        for t in 0..2 {
            let (a, b) = (fit.curve.values[t].unwrap(), direct.values[t].unwrap());
            assert!((a - b).abs() < 1e-7, "{a} {b}");
        }
        assert!(fit.degenerate_periods.is_empty());
    }

    #[test]
    fn zero_weight_rows_do_not_matter() {
        let (panel, w) = random_panel(300, 3, 8);
        let s = Strategy::TreatEarly { force_len: 0 };
        let base = msm_survival(&panel, &w, &s, &default_msm_terms()).unwrap();
        let mut recs = panel.records().to_vec();
        let mut w2 = w.clone();
        for extra in 0..20u64 {
            let id = 1000 + extra;
            recs.push(PanelRecord {
                id,
                k: 0,
                l_star: None,
                l: 0.0,
                n: 1,
                a: 1,
                y: 1,
                at_risk: 1,
            });
            w2.ids.push(id);
            w2.weights.push(vec![0.0]);
        }
        let panel2 = Panel::new(3, recs).unwrap();
        let other = msm_survival(&panel2, &w2, &s, &default_msm_terms()).unwrap();
        for (a, b) in base.curve.values.iter().zip(&other.curve.values) {
            assert!((a.unwrap() - b.unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn period_without_events_is_flagged() {
        let recs = (0..4)
            .flat_map(|id| {
                (0..2).map(move |k| PanelRecord {
                    id,
                    k,
                    l_star: None,
                    l: 0.0,
                    n: 1,
                    a: 1,
                    y: u8::from(k == 1 && id % 2 == 0),
                    at_risk: 1,
                })
            })
            .collect();
        let panel = Panel::new(2, recs).unwrap();
        let w = WeightSet {
            ids: vec![0, 1, 2, 3],
            weights: vec![vec![1.0, 1.0]; 4],
            mode: Mode::Adapted,
            stabilized: false,
        };
        let fit = msm_survival(&panel, &w, &Strategy::AlwaysTreat, &default_msm_terms()).unwrap();
        assert_eq!(fit.degenerate_periods, vec![0]);
        assert_eq!(fit.curve.values[0], Some(1.0));
        assert!((fit.curve.values[1].unwrap() - 0.5).abs() < 1e-8);
        assert!(fit.dropped_terms.contains(&"A[k]".to_owned()));
        assert_eq!(fit.warnings.len(), 1);
    }
}
