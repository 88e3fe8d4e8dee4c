//! Survival curves and the hazard-to-survival product.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SurvivalError {
    #[error("hazard {value} at index {index} is outside [0, 1]")]
    HazardOutOfRange { index: usize, value: f64 },
}

/// Whether a curve comes from a model tailored to irregular monitoring, a
/// naive model that ignores it, or the simulation oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveMode {
    Adapted,
    Naive,
    Truth,
}

impl fmt::Display for CurveMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CurveMode::Adapted => "adapted",
            CurveMode::Naive => "naive",
            CurveMode::Truth => "truth",
        })
    }
}

impl FromStr for CurveMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adapted" => Ok(CurveMode::Adapted),
            "naive" => Ok(CurveMode::Naive),
            "truth" => Ok(CurveMode::Truth),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

/// Survival probabilities at reported times `1..=K`.
///
/// A value is `None` when the estimator could not produce it (for example an
/// empty risk set); every later value is then `None` as well for estimators
/// built on hazards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve {
    pub values: Vec<Option<f64>>,
    pub method: String,
    pub mode: CurveMode,
    pub strategy: String,
}

impl SurvivalCurve {
    pub fn new(values: Vec<Option<f64>>, method: &str, mode: CurveMode, strategy: &str) -> Self {
        Self {
            values,
            method: method.to_owned(),
            mode,
            strategy: strategy.to_owned(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Survival at reported time `t` (1-based).
    pub fn at(&self, t: usize) -> Option<f64> {
        t.checked_sub(1)
            .and_then(|i| self.values.get(i).copied().flatten())
    }

    pub fn is_complete(&self) -> bool {
        self.values.iter().all(Option::is_some)
    }

    /// True when the defined values never increase.
    pub fn is_monotone(&self) -> bool {
        let v: Vec<f64> = self.values.iter().flatten().copied().collect();
        v.windows(2).all(|w| w[1] <= w[0])
    }

    /// Writes `time,survival` rows; missing values are left empty.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        w.write_record(["time", "survival"])?;
        for (i, v) in self.values.iter().enumerate() {
            let s = v.map(|x| x.to_string()).unwrap_or_default();
            w.write_record([(i + 1).to_string(), s])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `S(t) = prod_{j < t} (1 - h_j)` for each reported time.
pub fn survival_from_hazards(hazards: &[f64]) -> Result<Vec<f64>, SurvivalError> {
    let mut s = 1.0;
    hazards
        .iter()
        .enumerate()
        .map(|(index, &h)| {
            if !(0.0..=1.0).contains(&h) {
                return Err(SurvivalError::HazardOutOfRange { index, value: h });
            }
            s *= 1.0 - h;
            Ok(s)
        })
        .collect()
}

/// Like [`survival_from_hazards`] but a missing hazard makes that time and
/// every later time missing.
pub fn survival_from_partial_hazards(
    hazards: &[Option<f64>],
) -> Result<Vec<Option<f64>>, SurvivalError> {
    let mut s = Some(1.0);
    hazards
        .iter()
        .enumerate()
        .map(|(index, h)| {
            s = match (s, h) {
                (Some(prev), Some(h)) => {
                    if !(0.0..=1.0).contains(h) {
                        return Err(SurvivalError::HazardOutOfRange { index, value: *h });
                    }
                    Some(prev * (1.0 - h))
                }
                _ => None,
            };
            Ok(s)
        })
        .collect()
}
