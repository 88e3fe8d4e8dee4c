//! Model formulas used by the estimators, in adapted and naive variants.
//!
//! Adapted forms carry the monitoring history so that the observed covariate
//! is only trusted as far as it was actually measured. Naive forms treat the
//! last observed covariate as if it were current and ignore monitoring.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{lag, DesignError, DesignMatrix, DesignSpec, Term, Var};
use crate::glm::{fit_glm, Family, FittedGlm, GlmError};
use crate::panel::{HistoryView, PanelRecord};
use crate::survival::CurveMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Adapted,
    Naive,
}

impl Mode {
    pub fn curve_mode(self) -> CurveMode {
        match self {
            Mode::Adapted => CurveMode::Adapted,
            Mode::Naive => CurveMode::Naive,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Adapted => "adapted",
            Mode::Naive => "naive",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adapted" => Ok(Mode::Adapted),
            "naive" => Ok(Mode::Naive),
            other => Err(format!("unknown mode `{other}`; expected adapted or naive")),
        }
    }
}

fn spec(intercept: bool, terms: Vec<Term>) -> DesignSpec {
    DesignSpec::new(intercept, terms).expect("built-in term names are unique")
}

/// Treatment at baseline given the baseline covariate.
pub fn treatment_baseline() -> DesignSpec {
    spec(true, vec![Term::var(Var::L, 0)])
}

/// Treatment after baseline.
pub fn treatment_followup(mode: Mode) -> DesignSpec {
    match mode {
        Mode::Adapted => spec(
            true,
            vec![
                Term::var(Var::L, 0),
                Term::var(Var::A, 1),
                Term::var(Var::N, 1),
            ],
        ),
        Mode::Naive => spec(true, vec![Term::var(Var::A, 1), Term::var(Var::L, 0)]),
    }
}

/// Numerator of stabilized weights at baseline.
pub fn stabilizer_baseline() -> DesignSpec {
    spec(true, vec![])
}

/// Numerator of stabilized weights after baseline.
pub fn stabilizer_followup() -> DesignSpec {
    spec(true, vec![Term::var(Var::A, 1)])
}

pub fn monitoring_baseline() -> DesignSpec {
    spec(true, vec![Term::var(Var::L, 0), Term::var(Var::A, 0)])
}

pub fn monitoring_followup() -> DesignSpec {
    spec(
        true,
        vec![
            Term::var(Var::L, 0),
            Term::var(Var::A, 0),
            Term::var(Var::N, 1),
        ],
    )
}

/// Mean of the observed covariate after baseline. The adapted form has no
/// intercept, the previous value as offset, and every term multiplied by the
/// previous monitoring flag, so an unmonitored covariate is predicted to stay
/// where it was.
pub fn covariate(mode: Mode) -> DesignSpec {
    match mode {
        Mode::Adapted => spec(
            false,
            vec![
                Term::var(Var::N, 1),
                Term::product(&[lag(Var::L, 1), lag(Var::N, 1)]),
                Term::product(&[lag(Var::L, 1), lag(Var::N, 1), lag(Var::N, 2)]),
                Term::product(&[lag(Var::A, 1), lag(Var::N, 1)]),
                Term::product(&[lag(Var::A, 1), lag(Var::N, 1), lag(Var::N, 2)]),
            ],
        )
        .with_offset(Term::var(Var::L, 1)),
        Mode::Naive => spec(true, vec![Term::var(Var::L, 1), Term::var(Var::A, 1)]),
    }
}

/// Failure in the current period.
pub fn outcome(mode: Mode) -> DesignSpec {
    match mode {
        Mode::Adapted => spec(
            true,
            vec![
                Term::var(Var::A, 0),
                Term::var(Var::A, 1),
                Term::var(Var::A, 2),
                Term::product(&[lag(Var::N, 1), lag(Var::L, 0)]),
                Term::product(&[lag(Var::N, 2), lag(Var::L, 1)]),
                Term::product(&[lag(Var::N, 3), lag(Var::L, 2)]),
            ],
        ),
        Mode::Naive => spec(
            true,
            vec![
                Term::sum(&[lag(Var::L, 0), lag(Var::L, 1), lag(Var::L, 2)]),
                Term::sum(&[lag(Var::A, 0), lag(Var::A, 1), lag(Var::A, 2)]),
            ],
        ),
    }
}

/// Design matrix and response over the at-risk rows of `trajectories` whose
/// period passes `keep`.
pub(crate) fn collect(
    spec: &DesignSpec,
    trajectories: &[&[PanelRecord]],
    keep: impl Fn(usize) -> bool,
    response: impl Fn(&PanelRecord) -> f64,
) -> Result<(DesignMatrix, Vec<f64>), DesignError> {
    let mut m = DesignMatrix::empty(spec.clone());
    let mut y = Vec::new();
    for traj in trajectories {
        for (k, r) in traj.iter().enumerate() {
            if keep(k) {
                m.push(&HistoryView::new(traj, k))?;
                y.push(response(r));
            }
        }
    }
    Ok((m, y))
}

/// A nuisance model failed to fit or predict.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{model} model: {source}")]
    Glm {
        model: &'static str,
        #[source]
        source: GlmError,
    },
    #[error("{model} model: {source}")]
    Design {
        model: &'static str,
        #[source]
        source: DesignError,
    },
}

impl ModelError {
    pub fn glm(model: &'static str) -> impl Fn(GlmError) -> ModelError {
        move |source| ModelError::Glm { model, source }
    }

    pub fn design(model: &'static str) -> impl Fn(DesignError) -> ModelError {
        move |source| ModelError::Design { model, source }
    }
}

/// Fits `spec` on the at-risk rows whose period passes `keep`.
pub(crate) fn fit_form(
    model: &'static str,
    family: Family,
    spec: &DesignSpec,
    trajectories: &[&[PanelRecord]],
    keep: impl Fn(usize) -> bool,
    response: impl Fn(&PanelRecord) -> f64,
) -> Result<FittedGlm, ModelError> {
    let (m, y) = collect(spec, trajectories, keep, response).map_err(ModelError::design(model))?;
    fit_glm(family, &m, &y, None).map_err(ModelError::glm(model))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes() {
        assert_eq!(treatment_followup(Mode::Naive).n_columns(), 3);
        assert_eq!(treatment_followup(Mode::Adapted).n_columns(), 4);
        assert_eq!(covariate(Mode::Adapted).n_columns(), 5);
        assert!(covariate(Mode::Adapted).offset.is_some());
        assert_eq!(outcome(Mode::Adapted).n_columns(), 7);
        assert_eq!(outcome(Mode::Naive).n_columns(), 3);
        assert_eq!("naive".parse::<Mode>(), Ok(Mode::Naive));
    }
}
