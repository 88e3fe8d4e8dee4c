//! The simulation study's data-generating mechanism and its truth oracle.
//!
//! Each individual owns a random substream, and every period draws its
//! values in the fixed order covariate, treatment, monitoring, outcome. The
//! treatment uniform is drawn even when a strategy forces treatment, so two
//! strategies that agree on a prefix produce identical individuals over it.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::glm::expit;
use crate::panel::{Panel, PanelRecord};
use crate::rng::{substream, StreamRng};
use crate::strategy::{PeriodClass, Strategy};
use crate::survival::{CurveMode, SurvivalCurve};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DgmError {
    #[error("unknown scenario {0}; expected 1 to 5")]
    UnknownScenario(u8),
    #[error("invalid parameters: {0}")]
    InvalidParams(&'static str),
    #[error("cohort size must be at least 1")]
    EmptyCohort,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovariateModel {
    pub intercept: f64,
    pub prev_covariate: f64,
    pub prev_treatment: f64,
    /// Baseline loading on the frailty term.
    pub frailty: f64,
    /// Residual variance.
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreatmentModel {
    pub intercept: f64,
    pub covariate: f64,
    pub prev_treatment: f64,
    pub prev_monitoring: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitoringModel {
    pub intercept: f64,
    pub covariate: f64,
    pub treatment: f64,
    pub prev_monitoring: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub intercept: f64,
    /// Coefficient on the sum of the last three true covariate values.
    pub covariate_sum: f64,
    /// Coefficient on the sum of the last three treatments.
    pub treatment_sum: f64,
    pub frailty: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioParams {
    pub covariate: CovariateModel,
    pub treatment: TreatmentModel,
    pub monitoring: MonitoringModel,
    pub outcome: OutcomeModel,
    pub frailty_var: f64,
    pub horizon: usize,
}

/// Parameters of scenarios 1 to 5.
pub fn scenario_params(id: u8) -> Result<ScenarioParams, DgmError> {
    let mut p = ScenarioParams {
        covariate: CovariateModel {
            intercept: 0.1,
            prev_covariate: 1.2,
            prev_treatment: -1.2,
            frailty: 1.0,
            variance: 1.0,
        },
        treatment: TreatmentModel {
            intercept: -0.3,
            covariate: 0.5,
            prev_treatment: 0.7,
            prev_monitoring: 1.2,
        },
        monitoring: MonitoringModel {
            intercept: -2.0,
            covariate: 2.0,
            treatment: 2.0,
            prev_monitoring: 0.5,
        },
        outcome: OutcomeModel {
            intercept: -0.7,
            covariate_sum: 0.6,
            treatment_sum: -0.3,
            frailty: 0.05,
        },
        frailty_var: 0.01,
        horizon: 5,
    };
    match id {
        1 => {}
        2 => {
            p.monitoring = MonitoringModel {
                intercept: -5.0,
                covariate: 3.0,
                treatment: 3.0,
                prev_monitoring: 1.0,
            }
        }
        3 => {
            p.monitoring = MonitoringModel {
                intercept: -0.7,
                covariate: 0.0,
                treatment: 0.0,
                prev_monitoring: 0.0,
            }
        }
        4 => p.treatment.prev_monitoring = 2.0,
        5 => p.treatment.prev_monitoring = 0.0,
        other => return Err(DgmError::UnknownScenario(other)),
    }
    Ok(p)
}

impl ScenarioParams {
    pub fn validate(&self) -> Result<(), DgmError> {
        if self.covariate.variance.is_nan() || self.covariate.variance <= 0.0 {
            return Err(DgmError::InvalidParams(
                "covariate variance must be positive",
            ));
        }
        if self.frailty_var.is_nan() || self.frailty_var <= 0.0 {
            return Err(DgmError::InvalidParams("frailty variance must be positive"));
        }
        if self.horizon == 0 {
            return Err(DgmError::InvalidParams("horizon must be at least 1"));
        }
        Ok(())
    }

    /// Mean of the true covariate in period `k`.
    pub fn covariate_mean(&self, k: usize, u: f64, prev_l_star: f64, prev_a: u8) -> f64 {
        let c = &self.covariate;
        if k == 0 {
            c.frailty * u
        } else {
            c.intercept + c.prev_covariate * prev_l_star + c.prev_treatment * f64::from(prev_a)
        }
    }

    pub fn treatment_prob(&self, k: usize, l: f64, prev_a: u8, prev_n: u8) -> f64 {
        let t = &self.treatment;
        let mut eta = t.intercept + t.covariate * l;
        if k > 0 {
            eta += t.prev_treatment * f64::from(prev_a) + t.prev_monitoring * f64::from(prev_n);
        }
        expit(eta)
    }

    pub fn monitoring_prob(&self, k: usize, l: f64, a: u8, prev_n: u8) -> f64 {
        let m = &self.monitoring;
        let mut eta = m.intercept + m.covariate * l + m.treatment * f64::from(a);
        if k > 0 {
            eta += m.prev_monitoring * f64::from(prev_n);
        }
        expit(eta)
    }

    /// Failure probability in period `k` given the true covariate and
    /// treatment histories through `k`.
    pub fn outcome_prob(&self, k: usize, u: f64, l_star: &[f64], a: &[u8]) -> f64 {
        let o = &self.outcome;
        let lo = k.saturating_sub(2);
        let ls: f64 = l_star[lo..=k].iter().sum();
        let asum: f64 = a[lo..=k].iter().map(|&v| f64::from(v)).sum();
        expit(o.intercept + o.frailty * u + o.covariate_sum * ls + o.treatment_sum * asum)
    }
}

/// One simulated individual, stored up to and including the failure period.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimPath {
    pub u: f64,
    pub l_star: Vec<f64>,
    pub l: Vec<f64>,
    pub n: Vec<u8>,
    pub a: Vec<u8>,
    pub y: Vec<u8>,
}

impl SimPath {
    /// Number of periods the individual was at risk.
    pub fn periods(&self) -> usize {
        self.y.len()
    }

    pub fn failed(&self) -> bool {
        self.y.last() == Some(&1)
    }
}

pub(crate) fn normal(rng: &mut StreamRng, mean: f64, variance: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    mean + variance.sqrt() * z
}

/// Simulates one individual. With a strategy, treatment follows it;
/// otherwise treatment follows the observational model.
pub fn simulate_path(
    params: &ScenarioParams,
    strategy: Option<&Strategy>,
    rng: &mut StreamRng,
) -> SimPath {
    let horizon = params.horizon;
    let mut p = SimPath {
        u: normal(rng, 0.0, params.frailty_var),
        l_star: Vec::with_capacity(horizon),
        l: Vec::with_capacity(horizon),
        n: Vec::with_capacity(horizon),
        a: Vec::with_capacity(horizon),
        y: Vec::with_capacity(horizon),
    };
    for k in 0..horizon {
        let (prev_ls, prev_l, prev_a, prev_n) = if k == 0 {
            (0.0, 0.0, 0, 1)
        } else {
            (p.l_star[k - 1], p.l[k - 1], p.a[k - 1], p.n[k - 1])
        };
        let ls = normal(
            rng,
            params.covariate_mean(k, p.u, prev_ls, prev_a),
            params.covariate.variance,
        );
        let l = if prev_n == 1 { ls } else { prev_l };
        let ua: f64 = rng.random();
        let a = match strategy.map(|s| s.classify_unchecked(&p.a)) {
            Some(PeriodClass::Forced(v)) => v,
            _ => u8::from(ua < params.treatment_prob(k, l, prev_a, prev_n)),
        };
        let un: f64 = rng.random();
        let n = u8::from(un < params.monitoring_prob(k, l, a, prev_n));
        p.l_star.push(ls);
        p.l.push(l);
        p.a.push(a);
        p.n.push(n);
        let uy: f64 = rng.random();
        let y = u8::from(uy < params.outcome_prob(k, p.u, &p.l_star, &p.a));
        p.y.push(y);
        if y == 1 {
            break;
        }
    }
    p
}

/// Simulates an observational cohort of `n` individuals with ids `0..n`.
pub fn simulate_cohort(params: &ScenarioParams, n: usize, seed: u64) -> Result<Panel, DgmError> {
    Ok(simulate_cohort_with_frailty(params, n, seed)?.0)
}

/// Like [`simulate_cohort`] but also returns each individual's frailty.
pub fn simulate_cohort_with_frailty(
    params: &ScenarioParams,
    n: usize,
    seed: u64,
) -> Result<(Panel, Vec<f64>), DgmError> {
    params.validate()?;
    if n == 0 {
        return Err(DgmError::EmptyCohort);
    }
    let horizon = params.horizon;
    let paths: Vec<SimPath> = (0..n as u64)
        .into_par_iter()
        .map(|i| simulate_path(params, None, &mut substream(seed, i)))
        .collect();
    let mut records = Vec::with_capacity(n * horizon);
    let mut frailty = Vec::with_capacity(n);
    for (id, p) in paths.iter().enumerate() {
        frailty.push(p.u);
        for k in 0..p.periods() {
            records.push(PanelRecord {
                id: id as u64,
                k,
                l_star: Some(p.l_star[k]),
                l: p.l[k],
                n: p.n[k],
                a: p.a[k],
                y: p.y[k],
                at_risk: 1,
            });
        }
    }
    let panel = Panel::new(horizon, records).expect("horizon validated above");
    Ok((panel, frailty))
}

/// A survival curve from the intervened simulation, with its Monte Carlo
/// standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthCurve {
    pub curve: SurvivalCurve,
    pub n_individuals: usize,
    pub mc_se: Vec<f64>,
}

impl TruthCurve {
    pub fn values(&self) -> Vec<f64> {
        self.curve
            .values
            .iter()
            .map(|v| v.unwrap_or(f64::NAN))
            .collect()
    }

    /// Writes `time,survival,mc_se` rows.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        w.write_record(["time", "survival", "mc_se"])?;
        for (i, (v, se)) in self.values().iter().zip(&self.mc_se).enumerate() {
            w.write_record([(i + 1).to_string(), v.to_string(), se.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(
        reader: R,
        strategy: &str,
        n_individuals: usize,
    ) -> csv::Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            #[allow(dead_code)]
            time: usize,
            survival: f64,
            mc_se: f64,
        }
        let mut r = csv::Reader::from_reader(reader);
        let rows: Vec<Row> = r.deserialize().collect::<Result<_, _>>()?;
        Ok(TruthCurve {
            curve: SurvivalCurve::new(
                rows.iter().map(|r| Some(r.survival)).collect(),
                "truth",
                CurveMode::Truth,
                strategy,
            ),
            n_individuals,
            mc_se: rows.iter().map(|r| r.mc_se).collect(),
        })
    }
}

/// Counts of survivors at the end of each period among `n` individuals
/// simulated under `strategy`.
pub(crate) fn survivor_counts(
    params: &ScenarioParams,
    strategy: &Strategy,
    n: usize,
    seed: u64,
) -> Vec<u64> {
    let horizon = params.horizon;
    (0..n as u64)
        .into_par_iter()
        .fold(
            || vec![0u64; horizon],
            |mut acc, i| {
                let p = simulate_path(params, Some(strategy), &mut substream(seed, i));
                let survived = if p.failed() { p.periods() - 1 } else { horizon };
                for c in acc.iter_mut().take(survived) {
                    *c += 1;
                }
                acc
            },
        )
        .reduce(
            || vec![0u64; horizon],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        )
}

/// Counterfactual survival under `strategy` by simulating `n` individuals
/// whose treatment is set as the strategy dictates.
pub fn simulate_truth(
    params: &ScenarioParams,
    strategy: &Strategy,
    n: usize,
    seed: u64,
) -> Result<TruthCurve, DgmError> {
    params.validate()?;
    if n == 0 {
        return Err(DgmError::EmptyCohort);
    }
    let counts = survivor_counts(params, strategy, n, seed);
    let nf = n as f64;
    let values: Vec<f64> = counts.iter().map(|&c| c as f64 / nf).collect();
    let mc_se = values.iter().map(|s| (s * (1.0 - s) / nf).sqrt()).collect();
    Ok(TruthCurve {
        curve: SurvivalCurve::new(
            values.into_iter().map(Some).collect(),
            "truth",
            CurveMode::Truth,
            &strategy.to_string(),
        ),
        n_individuals: n,
        mc_se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::validate_panel;

    #[test]
    fn scenario_table() {
        let s1 = scenario_params(1).unwrap();
        assert_eq!(s1.outcome.intercept, -0.7);
        assert_eq!(s1.treatment.prev_monitoring, 1.2);
        assert_eq!(s1.monitoring.intercept, -2.0);
        let s3 = scenario_params(3).unwrap();
        assert_eq!(
            (
                s3.monitoring.covariate,
                s3.monitoring.treatment,
                s3.monitoring.prev_monitoring
            ),
            (0.0, 0.0, 0.0)
        );
        assert_eq!(s3.monitoring.intercept, -0.7);
        let s5 = scenario_params(5).unwrap();
        assert_eq!(s5.treatment.prev_monitoring, 0.0);
        assert_eq!(
            ScenarioParams {
                treatment: s1.treatment,
                ..s5
            },
            s1
        );
        assert_eq!(scenario_params(2).unwrap().monitoring.intercept, -5.0);
        assert_eq!(scenario_params(4).unwrap().treatment.prev_monitoring, 2.0);
        assert_eq!(scenario_params(0), Err(DgmError::UnknownScenario(0)));
        assert_eq!(scenario_params(6), Err(DgmError::UnknownScenario(6)));
    }

    #[test]
    fn cohorts_are_valid_and_reproducible() {
        for id in 1..=5 {
            let p = scenario_params(id).unwrap();
            let a = simulate_cohort(&p, 500, 42).unwrap();
            assert!(validate_panel(&a).is_empty(), "scenario {id}");
            let b = simulate_cohort(&p, 500, 42).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn baseline_survival_is_plausible() {
        let p = scenario_params(1).unwrap();
        let panel = simulate_cohort(&p, 3000, 7).unwrap();
        let at_risk_1 = crate::panel::risk_set(&panel, 1).unwrap().len();
        let s = at_risk_1 as f64 / 3000.0;
        assert!((0.65..=0.71).contains(&s), "{s}");
    }

    #[test]
    fn shared_prefix_gives_identical_survival() {
        let p = scenario_params(1).unwrap();
        let always = simulate_truth(&p, &Strategy::AlwaysTreat, 20_000, 3).unwrap();
        let early = simulate_truth(&p, &Strategy::TREAT_EARLY, 20_000, 3).unwrap();
        assert_eq!(always.values()[..3], early.values()[..3]);
    }

    #[test]
    fn random_monitoring_rate() {
        let p = scenario_params(3).unwrap();
        let panel = simulate_cohort(&p, 100_000, 5).unwrap();
        let target = expit(-0.7);
        for k in 0..5 {
            let rows: Vec<_> = panel.records().iter().filter(|r| r.k == k).collect();
            let rate = rows.iter().filter(|r| r.n == 1).count() as f64 / rows.len() as f64;
            assert!((rate - target).abs() < 0.01, "k={k} rate={rate}");
        }
    }

    #[test]
    fn truth_csv_round_trip() {
        let p = scenario_params(1).unwrap();
        let t = simulate_truth(&p, &Strategy::NeverTreat, 1000, 1).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf.clone())
            .unwrap()
            .starts_with("time,survival,mc_se\n1,"));
        let back = TruthCurve::read_csv(buf.as_slice(), "never", 1000).unwrap();
        assert_eq!(back, t);
    }
}
