//! Long-format person-period panels.
//!
//! A [`Panel`] holds one [`PanelRecord`] per individual per period. Period
//! `k` runs from `0` to `K-1`; the outcome recorded on the row for period `k`
//! is drawn at the end of that period and is reported as time `k+1`.
//!
//! The monitoring flag `n` on period `k` decides whether the covariate is
//! measured at period `k+1`. When it is not, the observed covariate `l` is
//! carried forward unchanged.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{Covariates, Var};

/// One individual in one period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PanelRecord {
    pub id: u64,
    pub k: usize,
    /// True covariate level; only simulated panels carry it.
    pub l_star: Option<f64>,
    /// Observed (last monitored) covariate level.
    pub l: f64,
    /// Monitoring decision for period `k+1`.
    pub n: u8,
    pub a: u8,
    /// Failure by the end of period `k`.
    pub y: u8,
    pub at_risk: u8,
}

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("period {k} is outside 0..{horizon}")]
    PeriodOutOfRange { k: usize, horizon: usize },
    #[error("panel is not structurally valid: {0}")]
    Invalid(Violation),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("horizon must be at least 1")]
    EmptyHorizon,
}

/// Which invariant a record breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    /// `l` moved although the previous period was not monitored, or did not
    /// pick up `l_star` although it was.
    Locf,
    /// A record is still at risk after a failure.
    AbsorbingFailure,
    /// `l != l_star` at baseline.
    BaselineMonitored,
    /// The individual has no period-0 record.
    MissingBaseline,
    /// Periods are not `0, 1, 2, ...` without gaps or duplicates.
    Contiguity,
    /// Follow-up stops before failure and before the last period.
    Truncated,
    /// `at_risk` disagrees with the failure history.
    AtRisk,
    /// `k` is not below the horizon.
    PeriodRange,
    /// A binary field holds something other than 0 or 1.
    NonBinary,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Rule::Locf => "locf",
            Rule::AbsorbingFailure => "absorbing_failure",
            Rule::BaselineMonitored => "baseline_monitored",
            Rule::MissingBaseline => "missing_baseline",
            Rule::Contiguity => "contiguity",
            Rule::Truncated => "truncated",
            Rule::AtRisk => "at_risk",
            Rule::PeriodRange => "period_range",
            Rule::NonBinary => "non_binary",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Violation {
    pub id: u64,
    pub k: usize,
    pub rule: Rule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "id {} period {}: {}", self.id, self.k, self.rule)
    }
}

/// A person-period panel with a fixed number of potential periods.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    horizon: usize,
    records: Vec<PanelRecord>,
}

impl Panel {
    /// Builds a panel, sorting records by `(id, k)`.
    pub fn new(horizon: usize, mut records: Vec<PanelRecord>) -> Result<Self, PanelError> {
        if horizon == 0 {
            return Err(PanelError::EmptyHorizon);
        }
        records.sort_by_key(|r| (r.id, r.k));
        Ok(Self { horizon, records })
    }

    /// Number of potential periods `K`.
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn records(&self) -> &[PanelRecord] {
        &self.records
    }

    pub fn has_lstar(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.l_star.is_some())
    }

    /// Records grouped by individual, in id order.
    pub fn individuals(&self) -> impl Iterator<Item = &[PanelRecord]> {
        self.records.chunk_by(|a, b| a.id == b.id)
    }

    pub fn n_individuals(&self) -> usize {
        self.individuals().count()
    }

    /// Baseline observed covariate of every individual.
    pub fn baseline_covariates(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.k == 0)
            .map(|r| r.l)
            .collect()
    }

    /// At-risk trajectories for estimation: one slice per individual holding
    /// periods `0..` while at risk. Fails on the first structural violation.
    pub fn trajectories(&self) -> Result<Vec<&[PanelRecord]>, PanelError> {
        let mut out = Vec::with_capacity(self.records.len() / self.horizon.max(1) + 1);
        for recs in self.individuals() {
            let mut len = 0;
            for (i, r) in recs.iter().enumerate() {
                if r.k != i || r.k >= self.horizon {
                    return Err(PanelError::Invalid(Violation {
                        id: r.id,
                        k: r.k,
                        rule: Rule::Contiguity,
                    }));
                }
                if r.at_risk == 1 {
                    len = i + 1;
                }
            }
            if len == 0 {
                let r = recs[0];
                return Err(PanelError::Invalid(Violation {
                    id: r.id,
                    k: r.k,
                    rule: Rule::MissingBaseline,
                }));
            }
            out.push(&recs[..len]);
        }
        Ok(out)
    }

    /// Keeps the listed individuals (with repetition), relabelling them
    /// `0..ids.len()`. Used for bootstrap resampling.
    pub fn resample(&self, picks: &[usize]) -> Panel {
        let groups: Vec<&[PanelRecord]> = self.individuals().collect();
        let mut records = Vec::with_capacity(picks.len() * self.horizon);
        for (new_id, &g) in picks.iter().enumerate() {
            for r in groups[g] {
                records.push(PanelRecord {
                    id: new_id as u64,
                    ..*r
                });
            }
        }
        Panel {
            horizon: self.horizon,
            records,
        }
    }

    pub fn read_csv<R: Read>(horizon: usize, reader: R) -> Result<Self, PanelError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let records = rdr
            .deserialize::<PanelRecord>()
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(horizon, records)
    }

    /// Reads a panel file, inferring `K` as one more than the largest period
    /// unless given.
    pub fn from_path(path: &Path, horizon: Option<usize>) -> Result<Self, PanelError> {
        let file = std::fs::File::open(path)?;
        let mut rdr = csv::Reader::from_reader(file);
        let records = rdr
            .deserialize::<PanelRecord>()
            .collect::<Result<Vec<_>, _>>()?;
        let k = horizon.unwrap_or_else(|| records.iter().map(|r| r.k + 1).max().unwrap_or(1));
        Self::new(k, records)
    }

    /// Writes the canonical CSV form: header `id,k,l_star,l,n,a,y,at_risk`,
    /// rows sorted by id then period, LF line endings.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), PanelError> {
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        for r in &self.records {
            wtr.serialize(r)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_path(&self, path: &Path) -> Result<(), PanelError> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(file)
    }
}

/// Checks every record and individual invariant. Violations are data: an
/// empty report means the panel is valid.
pub fn validate_panel(panel: &Panel) -> Vec<Violation> {
    let mut out = Vec::new();
    let horizon = panel.horizon;
    for recs in panel.individuals() {
        let id = recs[0].id;
        if recs[0].k != 0 {
            out.push(Violation {
                id,
                k: recs[0].k,
                rule: Rule::MissingBaseline,
            });
        }
        let mut failed_at: Option<usize> = None;
        for (i, r) in recs.iter().enumerate() {
            let k = r.k;
            if k >= horizon {
                out.push(Violation {
                    id,
                    k,
                    rule: Rule::PeriodRange,
                });
            }
            if [r.n, r.a, r.y, r.at_risk].iter().any(|&v| v > 1) {
                out.push(Violation {
                    id,
                    k,
                    rule: Rule::NonBinary,
                });
            }
            if i > 0 && k != recs[i - 1].k + 1 {
                out.push(Violation {
                    id,
                    k,
                    rule: Rule::Contiguity,
                });
            }
            if k == 0 {
                if let Some(ls) = r.l_star {
                    if ls != r.l {
                        out.push(Violation {
                            id,
                            k,
                            rule: Rule::BaselineMonitored,
                        });
                    }
                }
            }
            if i > 0 && k == recs[i - 1].k + 1 {
                let prev = &recs[i - 1];
                let ok = if prev.n == 0 {
                    r.l == prev.l
                } else {
                    r.l_star.is_none_or(|ls| r.l == ls)
                };
                if !ok {
                    out.push(Violation {
                        id,
                        k,
                        rule: Rule::Locf,
                    });
                }
            }
            match failed_at {
                Some(_) if r.at_risk == 1 => out.push(Violation {
                    id,
                    k,
                    rule: Rule::AbsorbingFailure,
                }),
                None if r.at_risk != 1 => out.push(Violation {
                    id,
                    k,
                    rule: Rule::AtRisk,
                }),
                _ => {}
            }
            if r.y == 1 && r.at_risk == 1 && failed_at.is_none() {
                failed_at = Some(k);
            }
        }
        let last = recs.last().expect("chunks are non-empty");
        if failed_at.is_none() && last.k + 1 < horizon {
            out.push(Violation {
                id,
                k: last.k,
                rule: Rule::Truncated,
            });
        }
    }
    out
}

/// Ids at risk (alive at the start) in period `k`.
pub fn risk_set(panel: &Panel, k: usize) -> Result<BTreeSet<u64>, PanelError> {
    if k >= panel.horizon {
        return Err(PanelError::PeriodOutOfRange {
            k,
            horizon: panel.horizon,
        });
    }
    Ok(panel
        .records
        .iter()
        .filter(|r| r.k == k && r.at_risk == 1)
        .map(|r| r.id)
        .collect())
}

/// Value of `var` at period `p = k - lag` under the shared conventions for
/// periods before baseline: covariate, treatment and outcome terms vanish,
/// while `N` at period `-1` is 1 because baseline is always monitored.
pub(crate) fn before_baseline(var: Var, lag: usize, k: usize) -> f64 {
    debug_assert!(lag > k);
    match var {
        Var::N if lag == k + 1 => 1.0,
        _ => 0.0,
    }
}

/// Covariate view of one individual's history at period `k`, optionally with
/// treatment values replaced by a counterfactual trajectory.
#[derive(Debug, Clone, Copy)]
pub struct HistoryView<'a> {
    recs: &'a [PanelRecord],
    k: usize,
    treatment: Option<&'a [u8]>,
}

impl<'a> HistoryView<'a> {
    pub fn new(recs: &'a [PanelRecord], k: usize) -> Self {
        Self {
            recs,
            k,
            treatment: None,
        }
    }

    /// Replaces observed treatments at periods `0..=k` with `treatment`.
    pub fn with_treatment(mut self, treatment: &'a [u8]) -> Self {
        self.treatment = Some(treatment);
        self
    }
}

impl Covariates for HistoryView<'_> {
    fn period(&self) -> usize {
        self.k
    }

    fn value(&self, var: Var, lag: usize) -> Option<f64> {
        if lag > self.k {
            return Some(before_baseline(var, lag, self.k));
        }
        let p = self.k - lag;
        let r = self.recs.get(p)?;
        match var {
            Var::L => Some(r.l),
            Var::LStar => r.l_star,
            Var::N => Some(f64::from(r.n)),
            Var::A => Some(f64::from(match self.treatment {
                Some(t) => *t.get(p)?,
                None => r.a,
            })),
            Var::Y => Some(f64::from(r.y)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u64, k: usize, l_star: f64, l: f64, n: u8, a: u8, y: u8) -> PanelRecord {
        PanelRecord {
            id,
            k,
            l_star: Some(l_star),
            l,
            n,
            a,
            y,
            at_risk: 1,
        }
    }

    fn good_individual(id: u64) -> Vec<PanelRecord> {
        vec![
            rec(id, 0, 0.5, 0.5, 0, 1, 0),
            rec(id, 1, 0.9, 0.5, 1, 1, 0),
            rec(id, 2, -0.2, -0.2, 0, 0, 0),
        ]
    }

    #[test]
    fn valid_panel_has_empty_report() {
        let mut r = good_individual(1);
        r.extend(good_individual(2));
        let p = Panel::new(3, r).unwrap();
        assert!(validate_panel(&p).is_empty());
    }

    #[test]
    fn locf_breach_is_reported_once() {
        let mut r = good_individual(1);
        r[1].l = 0.7; // previous n = 0, so l must stay 0.5
        let p = Panel::new(3, r).unwrap();
        let v = validate_panel(&p);
        assert_eq!(
            v,
            vec![Violation {
                id: 1,
                k: 1,
                rule: Rule::Locf
            }]
        );
    }

    #[test]
    fn monitored_value_must_be_picked_up() {
        let mut r = good_individual(1);
        r[2].l = 0.5; // previous n = 1, so l must equal l_star = -0.2
        let v = validate_panel(&Panel::new(3, r).unwrap());
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, Rule::Locf);
    }

    #[test]
    fn at_risk_after_failure_is_reported() {
        let mut r = good_individual(1);
        r[1].y = 1;
        let v = validate_panel(&Panel::new(3, r).unwrap());
        assert_eq!(
            v,
            vec![Violation {
                id: 1,
                k: 2,
                rule: Rule::AbsorbingFailure
            }]
        );
    }

    #[test]
    fn padding_after_failure_is_allowed() {
        let mut r = good_individual(1);
        r[1].y = 1;
        r[2].at_risk = 0;
        r[2].y = 1;
        assert!(validate_panel(&Panel::new(3, r).unwrap()).is_empty());
    }

    #[test]
    fn structural_breaches() {
        let mut r = good_individual(1);
        r.remove(0);
        r[0].l = r[0].l_star.unwrap();
        let v = validate_panel(&Panel::new(3, r).unwrap());
        assert!(v.iter().any(|v| v.rule == Rule::MissingBaseline));

        let mut r = good_individual(1);
        r.pop();
        let v = validate_panel(&Panel::new(3, r).unwrap());
        assert_eq!(v[0].rule, Rule::Truncated);

        let mut r = good_individual(1);
        r[0].l = 0.4;
        let v = validate_panel(&Panel::new(3, r).unwrap());
        assert_eq!(v[0].rule, Rule::BaselineMonitored);

        let mut r = good_individual(1);
        r[1].a = 2;
        let v = validate_panel(&Panel::new(3, r).unwrap());
        assert_eq!(v[0].rule, Rule::NonBinary);
    }

    #[test]
    fn risk_set_excludes_early_failures() {
        let mut r = good_individual(1);
        r.extend(vec![rec(2, 0, 0.1, 0.1, 0, 0, 1)]);
        let p = Panel::new(3, r).unwrap();
        assert_eq!(risk_set(&p, 0).unwrap(), BTreeSet::from([1, 2]));
        assert_eq!(risk_set(&p, 1).unwrap(), BTreeSet::from([1]));
        assert!(matches!(
            risk_set(&p, 3),
            Err(PanelError::PeriodOutOfRange { .. })
        ));
    }

    #[test]
    fn history_view_lags() {
        let r = good_individual(1);
        let v = HistoryView::new(&r, 1);
        assert_eq!(v.value(Var::L, 0), Some(0.5));
        assert_eq!(v.value(Var::N, 1), Some(0.0));
        assert_eq!(v.value(Var::N, 2), Some(1.0));
        assert_eq!(v.value(Var::A, 3), Some(0.0));
        assert_eq!(v.value(Var::L, 2), Some(0.0));
        let cf = [0u8, 0, 0];
        assert_eq!(v.with_treatment(&cf).value(Var::A, 0), Some(0.0));
    }

    #[test]
    fn csv_round_trip_and_header() {
        let mut r = good_individual(1);
        r[0].l_star = None;
        r[1].l_star = None;
        r[2].l_star = None;
        let p = Panel::new(3, r).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("id,k,l_star,l,n,a,y,at_risk\n1,0,,0.5,0,1,0,1\n"));
        assert!(!text.contains('\r'));
        let back = Panel::read_csv(3, buf.as_slice()).unwrap();
        assert_eq!(back, p);
    }
}
