//! Model formulas over lagged history variables.
//!
//! A [`DesignSpec`] lists named terms, each built from lagged values of the
//! panel variables. Any source of history (an observed panel row, a
//! simulated individual, a counterfactual trajectory) implements
//! [`Covariates`] and can be turned into a design row.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DesignError {
    #[error("term `{0}` cannot be evaluated: a source value is missing")]
    MissingColumn(String),
    #[error("duplicate term name `{0}`")]
    DuplicateTerm(String),
    #[error("row has {got} values but the design has {expected} columns")]
    Width { expected: usize, got: usize },
}

/// A panel variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Var {
    /// Observed covariate.
    L,
    /// True covariate.
    LStar,
    /// Monitoring decision.
    N,
    /// Treatment.
    A,
    /// Failure.
    Y,
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Var::L => "L",
            Var::LStar => "Lstar",
            Var::N => "N",
            Var::A => "A",
            Var::Y => "Y",
        })
    }
}

/// Variable `var` at period `k - lag`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Lag {
    pub var: Var,
    pub lag: usize,
}

pub const fn lag(var: Var, lag: usize) -> Lag {
    Lag { var, lag }
}

/// How a term's value is computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Product(Vec<Lag>),
    Sum(Vec<Lag>),
    /// 1 when the current period equals the given one.
    Period(usize),
    /// Product of lags in the given period, 0 elsewhere.
    AtPeriod(usize, Vec<Lag>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub name: String,
    pub expr: Expr,
}

fn lag_name(l: &Lag) -> String {
    match l.lag {
        0 => format!("{}[k]", l.var),
        d => format!("{}[k-{d}]", l.var),
    }
}

impl Term {
    pub fn var(var: Var, lag_by: usize) -> Self {
        Self::product(&[lag(var, lag_by)])
    }

    pub fn product(factors: &[Lag]) -> Self {
        let name = factors.iter().map(lag_name).collect::<Vec<_>>().join("*");
        Self {
            name,
            expr: Expr::Product(factors.to_vec()),
        }
    }

    pub fn sum(parts: &[Lag]) -> Self {
        let name = parts.iter().map(lag_name).collect::<Vec<_>>().join("+");
        Self {
            name: format!("({name})"),
            expr: Expr::Sum(parts.to_vec()),
        }
    }

    pub fn period(p: usize) -> Self {
        Self {
            name: format!("time{}", p + 1),
            expr: Expr::Period(p),
        }
    }

    pub fn at_period(p: usize, factors: &[Lag]) -> Self {
        let name = factors.iter().map(lag_name).collect::<Vec<_>>().join("*");
        Self {
            name: format!("time{}:{name}", p + 1),
            expr: Expr::AtPeriod(p, factors.to_vec()),
        }
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = name.to_owned();
        self
    }

    pub fn eval<C: Covariates + ?Sized>(&self, row: &C) -> Option<f64> {
        match &self.expr {
            Expr::Product(fs) => fs
                .iter()
                .try_fold(1.0, |acc, f| Some(acc * row.value(f.var, f.lag)?)),
            Expr::Sum(ps) => ps
                .iter()
                .try_fold(0.0, |acc, f| Some(acc + row.value(f.var, f.lag)?)),
            Expr::Period(p) => Some(if row.period() == *p { 1.0 } else { 0.0 }),
            Expr::AtPeriod(p, fs) => {
                if row.period() != *p {
                    return Some(0.0);
                }
                fs.iter()
                    .try_fold(1.0, |acc, f| Some(acc * row.value(f.var, f.lag)?))
            }
        }
    }
}

/// A source of lagged history values at some period `k`.
///
/// `value(var, lag)` is the value of `var` at period `k - lag`. Periods
/// before baseline follow the shared convention: `N` at period `-1` is 1 and
/// every other variable is 0.
pub trait Covariates {
    fn period(&self) -> usize;
    fn value(&self, var: Var, lag: usize) -> Option<f64>;
}

/// Ordered model terms plus intercept and offset choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub intercept: bool,
    pub terms: Vec<Term>,
    pub offset: Option<Term>,
}

impl DesignSpec {
    pub fn new(intercept: bool, terms: Vec<Term>) -> Result<Self, DesignError> {
        let spec = Self {
            intercept,
            terms,
            offset: None,
        };
        spec.check_names()?;
        Ok(spec)
    }

    pub fn with_offset(mut self, offset: Term) -> Self {
        self.offset = Some(offset);
        self
    }

    fn check_names(&self) -> Result<(), DesignError> {
        let mut seen = std::collections::HashSet::new();
        for name in self.column_names() {
            if !seen.insert(name.clone()) {
                return Err(DesignError::DuplicateTerm(name));
            }
        }
        Ok(())
    }

    pub fn n_columns(&self) -> usize {
        self.terms.len() + usize::from(self.intercept)
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.n_columns());
        if self.intercept {
            names.push("(intercept)".to_owned());
        }
        names.extend(self.terms.iter().map(|t| t.name.clone()));
        names
    }

    /// Design row for one history, written into `out`; returns the offset.
    pub fn row_into<C: Covariates + ?Sized>(
        &self,
        row: &C,
        out: &mut Vec<f64>,
    ) -> Result<f64, DesignError> {
        if self.intercept {
            out.push(1.0);
        }
        for t in &self.terms {
            out.push(
                t.eval(row)
                    .ok_or_else(|| DesignError::MissingColumn(t.name.clone()))?,
            );
        }
        match &self.offset {
            Some(t) => t
                .eval(row)
                .ok_or_else(|| DesignError::MissingColumn(t.name.clone())),
            None => Ok(0.0),
        }
    }

    pub fn build<C: Covariates>(&self, rows: &[C]) -> Result<DesignMatrix, DesignError> {
        let mut m = DesignMatrix::empty(self.clone());
        for r in rows {
            m.push(r)?;
        }
        Ok(m)
    }

    /// Same spec without the terms at the given positions.
    pub fn without_terms(&self, drop: &[usize]) -> DesignSpec {
        DesignSpec {
            intercept: self.intercept,
            terms: self
                .terms
                .iter()
                .enumerate()
                .filter(|(i, _)| !drop.contains(i))
                .map(|(_, t)| t.clone())
                .collect(),
            offset: self.offset.clone(),
        }
    }
}

/// Row-major design data ready for fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    spec: DesignSpec,
    values: Vec<f64>,
    offset: Vec<f64>,
}

impl DesignMatrix {
    pub fn empty(spec: DesignSpec) -> Self {
        Self {
            spec,
            values: Vec::new(),
            offset: Vec::new(),
        }
    }

    /// Matrix from explicit columns (no intercept column added unless the
    /// spec asks for one). Terms of the spec are used only for names.
    pub fn from_columns(spec: DesignSpec, columns: &[Vec<f64>]) -> Result<Self, DesignError> {
        if columns.len() != spec.terms.len() {
            return Err(DesignError::Width {
                expected: spec.terms.len(),
                got: columns.len(),
            });
        }
        let n = columns.first().map_or(0, Vec::len);
        let mut m = Self::empty(spec);
        let mut row = Vec::new();
        for i in 0..n {
            row.clear();
            for c in columns {
                row.push(*c.get(i).ok_or(DesignError::Width {
                    expected: n,
                    got: c.len(),
                })?);
            }
            m.push_values(&row, 0.0)?;
        }
        Ok(m)
    }

    pub fn spec(&self) -> &DesignSpec {
        &self.spec
    }

    pub fn n_rows(&self) -> usize {
        self.offset.len()
    }

    pub fn n_columns(&self) -> usize {
        self.spec.n_columns()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.n_columns();
        &self.values[i * p..(i + 1) * p]
    }

    pub fn offset(&self) -> &[f64] {
        &self.offset
    }

    pub fn push<C: Covariates + ?Sized>(&mut self, row: &C) -> Result<(), DesignError> {
        let start = self.values.len();
        match self.spec.row_into(row, &mut self.values) {
            Ok(o) => {
                self.offset.push(o);
                Ok(())
            }
            Err(e) => {
                self.values.truncate(start);
                Err(e)
            }
        }
    }

    /// Appends a row of term values; the intercept is added automatically.
    pub fn push_values(&mut self, terms: &[f64], offset: f64) -> Result<(), DesignError> {
        if terms.len() != self.spec.terms.len() {
            return Err(DesignError::Width {
                expected: self.spec.terms.len(),
                got: terms.len(),
            });
        }
        if self.spec.intercept {
            self.values.push(1.0);
        }
        self.values.extend_from_slice(terms);
        self.offset.push(offset);
        Ok(())
    }

    /// Replaces the offset of every row.
    pub fn set_offset(&mut self, offset: Vec<f64>) -> Result<(), DesignError> {
        if offset.len() != self.n_rows() {
            return Err(DesignError::Width {
                expected: self.n_rows(),
                got: offset.len(),
            });
        }
        self.offset = offset;
        Ok(())
    }

    /// Indices of non-intercept terms whose column is identically zero on
    /// rows with positive weight.
    pub fn zero_terms(&self, weights: Option<&[f64]>) -> Vec<usize> {
        let p = self.n_columns();
        let skip = usize::from(self.spec.intercept);
        (0..self.spec.terms.len())
            .filter(|&t| {
                (0..self.n_rows()).all(|i| {
                    weights.is_some_and(|w| w[i] <= 0.0) || self.values[i * p + skip + t] == 0.0
                })
            })
            .collect()
    }

    /// Indices of terms that are linearly dependent on earlier columns under
    /// the weighted inner product, found by Gram-Schmidt in column order.
    pub fn redundant_terms(&self, weights: Option<&[f64]>, tolerance: f64) -> Vec<usize> {
        let n = self.n_rows();
        let p = self.n_columns();
        let skip = usize::from(self.spec.intercept);
        let w = |i: usize| weights.map_or(1.0, |w| w[i].max(0.0));
        let mut basis: Vec<Vec<f64>> = Vec::new();
        let mut redundant = Vec::new();
        for c in 0..p {
            let mut v: Vec<f64> = (0..n).map(|i| self.values[i * p + c]).collect();
            let norm0: f64 = (0..n).map(|i| w(i) * v[i] * v[i]).sum();
            for b in &basis {
                let proj: f64 = (0..n).map(|i| w(i) * v[i] * b[i]).sum();
                for i in 0..n {
                    v[i] -= proj * b[i];
                }
            }
            let norm: f64 = (0..n).map(|i| w(i) * v[i] * v[i]).sum();
            if norm0 <= 0.0 || norm <= tolerance * norm0 {
                if c >= skip {
                    redundant.push(c - skip);
                }
                continue;
            }
            let s = norm.sqrt();
            basis.push(v.into_iter().map(|x| x / s).collect());
        }
        redundant
    }

    /// Copy with the given term columns removed.
    pub fn without_terms(&self, drop: &[usize]) -> DesignMatrix {
        if drop.is_empty() {
            return self.clone();
        }
        let spec = self.spec.without_terms(drop);
        let p = self.n_columns();
        let skip = usize::from(self.spec.intercept);
        let keep: Vec<usize> = (0..p)
            .filter(|&c| c < skip || !drop.contains(&(c - skip)))
            .collect();
        let mut values = Vec::with_capacity(self.n_rows() * keep.len());
        for i in 0..self.n_rows() {
            let r = self.row(i);
            values.extend(keep.iter().map(|&c| r[c]));
        }
        DesignMatrix {
            spec,
            values,
            offset: self.offset.clone(),
        }
    }
}

/// A history given directly as per-period arrays, with optional treatment
/// override. Used for simulated individuals.
#[derive(Debug, Clone, Copy)]
pub struct ArrayHistory<'a> {
    pub k: usize,
    pub l: &'a [f64],
    pub l_star: Option<&'a [f64]>,
    pub n: &'a [u8],
    pub a: &'a [u8],
    pub y: &'a [u8],
}

impl Covariates for ArrayHistory<'_> {
    fn period(&self) -> usize {
        self.k
    }

    fn value(&self, var: Var, lag: usize) -> Option<f64> {
        if lag > self.k {
            return Some(crate::panel::before_baseline(var, lag, self.k));
        }
        let p = self.k - lag;
        match var {
            Var::L => self.l.get(p).copied(),
            Var::LStar => self.l_star.and_then(|s| s.get(p).copied()),
            Var::N => self.n.get(p).map(|&v| f64::from(v)),
            Var::A => self.a.get(p).map(|&v| f64::from(v)),
            Var::Y => self.y.get(p).map(|&v| f64::from(v)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hist<'a>(k: usize, l: &'a [f64], n: &'a [u8], a: &'a [u8]) -> ArrayHistory<'a> {
        ArrayHistory {
            k,
            l,
            l_star: None,
            n,
            a,
            y: &[0, 0, 0, 0, 0],
        }
    }

    #[test]
    fn negative_lags_follow_convention() {
        let l = [0.5, 0.7, 0.9];
        let n = [0u8, 1, 1];
        let a = [1u8, 1, 0];
        let h = hist(1, &l, &n, &a);
        let t = Term::product(&[lag(Var::N, 3), lag(Var::L, 2)]);
        assert_eq!(t.eval(&h), Some(0.0));
        let h2 = hist(2, &l, &n, &a);
        assert_eq!(t.eval(&h2), Some(0.5));
        let s = Term::sum(&[lag(Var::A, 0), lag(Var::A, 1), lag(Var::A, 2)]);
        assert_eq!(s.eval(&h), Some(2.0));
        assert_eq!(Term::period(1).eval(&h), Some(1.0));
        assert_eq!(Term::var(Var::LStar, 0).eval(&h), None);
    }

    #[test]
    fn build_and_drop_columns() {
        let spec = DesignSpec::new(true, vec![Term::var(Var::L, 0), Term::var(Var::A, 1)])
            .unwrap()
            .with_offset(Term::var(Var::L, 1));
        let l = [0.5, 0.7];
        let n = [1u8, 1];
        let a = [1u8, 0];
        let rows = [hist(0, &l, &n, &a), hist(1, &l, &n, &a)];
        let m = spec.build(&rows).unwrap();
        assert_eq!(m.row(0), &[1.0, 0.5, 0.0]);
        assert_eq!(m.row(1), &[1.0, 0.7, 1.0]);
        assert_eq!(m.offset(), &[0.0, 0.5]);
        assert!(m.zero_terms(None).is_empty());
        assert_eq!(m.zero_terms(Some(&[1.0, 0.0])), vec![1]);
        let d = m.without_terms(&[0]);
        assert_eq!(d.row(1), &[1.0, 1.0]);
        assert_eq!(d.spec().column_names(), vec!["(intercept)", "A[k-1]"]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let r = DesignSpec::new(false, vec![Term::var(Var::L, 0), Term::var(Var::L, 0)]);
        assert_eq!(r, Err(DesignError::DuplicateTerm("L[k]".into())));
    }
}
