//! Weighted logistic and Gaussian regression by iteratively reweighted least
//! squares.
//!
//! Logistic responses may be fractional (any value in `[0, 1]`), which the
//! backward regressions of TMLE rely on.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{Covariates, DesignError, DesignMatrix, DesignSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Logistic,
    Gaussian,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GlmError {
    #[error("no convergence after {iterations} iterations (max score {max_score:e})")]
    NonConvergence { iterations: usize, max_score: f64 },
    #[error("separation: coefficient `{term}` reached {value:.3}")]
    Separation { term: String, value: f64 },
    #[error("design matrix is numerically rank deficient")]
    SingularDesign,
    #[error("no row has positive weight")]
    NoPositiveWeight,
    #[error("row {row}: {reason}")]
    InvalidInput { row: usize, reason: &'static str },
    #[error("expected {expected} values, got {got}")]
    Length { expected: usize, got: usize },
    #[error(transparent)]
    Design(#[from] DesignError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlmOptions {
    /// Convergence when every weighted score component is below this.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Coefficients beyond this magnitude abort a logistic fit.
    pub separation_bound: f64,
    /// Relative pivot below which the normal equations count as singular.
    pub singular_threshold: f64,
    /// Ridge penalty added to the diagonal of the normal equations.
    pub ridge: f64,
}

impl Default for GlmOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 100,
            separation_bound: 20.0,
            singular_threshold: 1e-10,
            ridge: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedGlm {
    pub family: Family,
    pub spec: DesignSpec,
    pub coefficients: Vec<f64>,
    /// Weighted residual variance of a Gaussian fit; `None` for logistic
    /// fits and for Gaussian fits whose residuals vanish.
    pub residual_variance: Option<f64>,
    pub zero_variance: bool,
    pub converged: bool,
    pub iterations: usize,
    /// Largest absolute weighted score component at the solution.
    pub max_score: f64,
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Prepared<'a> {
    data: &'a DesignMatrix,
    y: &'a [f64],
    w: Vec<f64>,
    rows: Vec<usize>,
}

fn prepare<'a>(
    family: Family,
    data: &'a DesignMatrix,
    y: &'a [f64],
    weights: Option<&[f64]>,
) -> Result<Prepared<'a>, GlmError> {
    let n = data.n_rows();
    if y.len() != n {
        return Err(GlmError::Length {
            expected: n,
            got: y.len(),
        });
    }
    let w = match weights {
        Some(w) if w.len() != n => {
            return Err(GlmError::Length {
                expected: n,
                got: w.len(),
            })
        }
        Some(w) => w.to_vec(),
        None => vec![1.0; n],
    };
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        if !(w[i] >= 0.0 && w[i].is_finite()) {
            return Err(GlmError::InvalidInput {
                row: i,
                reason: "weight must be finite and nonnegative",
            });
        }
        if w[i] == 0.0 {
            continue;
        }
        let ok = match family {
            Family::Logistic => (0.0..=1.0).contains(&y[i]),
            Family::Gaussian => y[i].is_finite(),
        };
        if !ok {
            return Err(GlmError::InvalidInput {
                row: i,
                reason: "response outside the family's support",
            });
        }
        if data.row(i).iter().any(|v| !v.is_finite()) || !data.offset()[i].is_finite() {
            return Err(GlmError::InvalidInput {
                row: i,
                reason: "non-finite design value",
            });
        }
        rows.push(i);
    }
    if rows.is_empty() {
        return Err(GlmError::NoPositiveWeight);
    }
    Ok(Prepared { data, y, w, rows })
}

/// Solves `H x = g` for symmetric positive definite `H`, rejecting
/// numerically singular systems.
fn spd_solve(
    h: DMatrix<f64>,
    g: &DVector<f64>,
    opts: &GlmOptions,
) -> Result<DVector<f64>, GlmError> {
    let p = h.nrows();
    if p == 0 {
        return Ok(DVector::zeros(0));
    }
    let mut h = h;
    for j in 0..p {
        h[(j, j)] += opts.ridge;
    }
    let max_diag = (0..p).map(|j| h[(j, j)]).fold(0.0, f64::max);
    if max_diag <= 0.0 {
        return Err(GlmError::SingularDesign);
    }
    let chol = h.cholesky().ok_or(GlmError::SingularDesign)?;
    let l = chol.l_dirty();
    let min_pivot = (0..p)
        .map(|j| l[(j, j)] * l[(j, j)])
        .fold(f64::INFINITY, f64::min);
    if min_pivot / max_diag < opts.singular_threshold {
        return Err(GlmError::SingularDesign);
    }
    Ok(chol.solve(g))
}

/// Fits with default options.
pub fn fit_glm(
    family: Family,
    data: &DesignMatrix,
    response: &[f64],
    weights: Option<&[f64]>,
) -> Result<FittedGlm, GlmError> {
    fit_glm_with(family, data, response, weights, &GlmOptions::default())
}

pub fn fit_glm_with(
    family: Family,
    data: &DesignMatrix,
    response: &[f64],
    weights: Option<&[f64]>,
    opts: &GlmOptions,
) -> Result<FittedGlm, GlmError> {
    let prep = prepare(family, data, response, weights)?;
    match family {
        Family::Gaussian => fit_gaussian(&prep, opts),
        Family::Logistic => fit_logistic(&prep, opts),
    }
}

fn normal_equations(
    prep: &Prepared<'_>,
    iter_w: &[f64],
    resid: &[f64],
) -> (DMatrix<f64>, DVector<f64>) {
    let p = prep.data.n_columns();
    let mut h = DMatrix::<f64>::zeros(p, p);
    let mut g = DVector::<f64>::zeros(p);
    for (idx, &i) in prep.rows.iter().enumerate() {
        let x = prep.data.row(i);
        let wi = iter_w[idx];
        let ri = resid[idx];
        for a in 0..p {
            let xa = x[a] * wi;
            g[a] += x[a] * ri;
            for b in 0..=a {
                h[(a, b)] += xa * x[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            h[(b, a)] = h[(a, b)];
        }
    }
    (h, g)
}

fn fit_gaussian(prep: &Prepared<'_>, opts: &GlmOptions) -> Result<FittedGlm, GlmError> {
    let p = prep.data.n_columns();
    let resid: Vec<f64> = prep
        .rows
        .iter()
        .map(|&i| prep.w[i] * (prep.y[i] - prep.data.offset()[i]))
        .collect();
    let iter_w: Vec<f64> = prep.rows.iter().map(|&i| prep.w[i]).collect();
    let (h, g) = normal_equations(prep, &iter_w, &resid);
    let beta = spd_solve(h, &g, opts)?;
    let beta: Vec<f64> = beta.iter().copied().collect();
    let mut rss = 0.0;
    let mut score = vec![0.0; p];
    let mut sum_w = 0.0;
    for &i in &prep.rows {
        let x = prep.data.row(i);
        let r = prep.y[i] - prep.data.offset()[i] - dot(x, &beta);
        rss += prep.w[i] * r * r;
        sum_w += prep.w[i];
        for a in 0..p {
            score[a] += prep.w[i] * x[a] * r;
        }
    }
    let dof = sum_w - p as f64;
    let variance = if dof > 0.0 { rss / dof } else { f64::NAN };
    let zero_variance = variance.is_nan() || variance <= 0.0;
    Ok(FittedGlm {
        family: Family::Gaussian,
        spec: prep.data.spec().clone(),
        coefficients: beta,
        residual_variance: (!zero_variance).then_some(variance),
        zero_variance,
        converged: true,
        iterations: 1,
        max_score: score.iter().fold(0.0, |m, s| f64::max(m, s.abs())),
    })
}

fn log_likelihood(prep: &Prepared<'_>, beta: &[f64]) -> f64 {
    prep.rows
        .iter()
        .map(|&i| {
            let eta = dot(prep.data.row(i), beta) + prep.data.offset()[i];
            let y = prep.y[i];
            // y*eta - log(1+exp(eta)), computed stably
            let log1pexp = if eta > 0.0 {
                eta + (-eta).exp().ln_1p()
            } else {
                eta.exp().ln_1p()
            };
            prep.w[i] * (y * eta - log1pexp)
        })
        .sum()
}

fn logistic_score(prep: &Prepared<'_>, beta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut iter_w = Vec::with_capacity(prep.rows.len());
    let mut resid = Vec::with_capacity(prep.rows.len());
    for &i in &prep.rows {
        let mu = expit(dot(prep.data.row(i), beta) + prep.data.offset()[i]);
        iter_w.push(prep.w[i] * mu * (1.0 - mu));
        resid.push(prep.w[i] * (prep.y[i] - mu));
    }
    (iter_w, resid)
}

fn fit_logistic(prep: &Prepared<'_>, opts: &GlmOptions) -> Result<FittedGlm, GlmError> {
    let p = prep.data.n_columns();
    let names = prep.data.spec().column_names();
    let mut beta = vec![0.0; p];
    let mut ll = log_likelihood(prep, &beta);
    let mut last_score = f64::INFINITY;
    let sum_w: f64 = prep.rows.iter().map(|&i| prep.w[i]).sum();
    for iter in 0..=opts.max_iterations {
        let (iter_w, resid) = logistic_score(prep, &beta);
        let (h, g) = normal_equations(prep, &iter_w, &resid);
        let max_score = g.iter().fold(0.0, |m: f64, s| m.max(s.abs()));
        last_score = max_score;
        let step = spd_solve(h, &g, opts);
        // A small score with a large Newton step means the likelihood is
        // still climbing towards infinite coefficients.
        let settled = match &step {
            Ok(s) => s.iter().all(|v| v.abs() < 1e-4),
            Err(_) => false,
        };
        if max_score < opts.tolerance && settled {
            return Ok(FittedGlm {
                family: Family::Logistic,
                spec: prep.data.spec().clone(),
                coefficients: beta,
                residual_variance: None,
                zero_variance: false,
                converged: true,
                iterations: iter,
                max_score,
            });
        }
        if iter == opts.max_iterations {
            break;
        }
        let step = match step {
            Ok(s) => s,
            Err(e) if max_score < opts.tolerance => {
                let (j, b) = beta.iter().enumerate().fold((0, 0.0), |m, (j, &b)| {
                    if b.abs() > f64::abs(m.1) {
                        (j, b)
                    } else {
                        m
                    }
                });
                return Err(if b.abs() > 5.0 {
                    GlmError::Separation {
                        term: names[j].clone(),
                        value: b,
                    }
                } else {
                    e
                });
            }
            Err(e) => return Err(e),
        };
        let mut t = 1.0;
        let mut candidate: Vec<f64>;
        loop {
            candidate = beta
                .iter()
                .zip(step.iter())
                .map(|(b, s)| b + t * s)
                .collect();
            let cand_ll = log_likelihood(prep, &candidate);
            if cand_ll >= ll - 1e-12 * ll.abs().max(1.0) || t < 1e-4 {
                ll = cand_ll;
                break;
            }
            t *= 0.5;
        }
        for (j, &b) in candidate.iter().enumerate() {
            if b.abs() > opts.separation_bound {
                return Err(GlmError::Separation {
                    term: names[j].clone(),
                    value: b,
                });
            }
        }
        let moved = candidate
            .iter()
            .zip(&beta)
            .fold(0.0, |m: f64, (a, b)| m.max((a - b).abs()));
        beta = candidate;
        // Rounding can keep the score just above an absolute tolerance on
        // large or heavily weighted data; accept a stalled Newton step when
        // the score is negligible relative to the total weight.
        if moved < 1e-12 && max_score < 1e-10 * sum_w.max(1.0) {
            let (_, resid) = logistic_score(prep, &beta);
            let (_, g) = normal_equations(prep, &vec![0.0; resid.len()], &resid);
            return Ok(FittedGlm {
                family: Family::Logistic,
                spec: prep.data.spec().clone(),
                coefficients: beta,
                residual_variance: None,
                zero_variance: false,
                converged: true,
                iterations: iter + 1,
                max_score: g.iter().fold(0.0, |m: f64, s| m.max(s.abs())),
            });
        }
    }
    Err(GlmError::NonConvergence {
        iterations: opts.max_iterations,
        max_score: last_score,
    })
}

impl FittedGlm {
    pub fn linear_predictor_row(&self, x: &[f64], offset: f64) -> f64 {
        dot(x, &self.coefficients) + offset
    }

    fn mean(&self, eta: f64) -> f64 {
        match self.family {
            Family::Logistic => expit(eta),
            Family::Gaussian => eta,
        }
    }

    /// Fitted means for every row of `data`, which must share this model's
    /// column layout.
    pub fn predict(&self, data: &DesignMatrix) -> Result<Vec<f64>, GlmError> {
        if data.n_columns() != self.coefficients.len() {
            return Err(GlmError::Length {
                expected: self.coefficients.len(),
                got: data.n_columns(),
            });
        }
        Ok((0..data.n_rows())
            .map(|i| self.mean(self.linear_predictor_row(data.row(i), data.offset()[i])))
            .collect())
    }

    /// Fitted mean for one history.
    pub fn predict_one<C: Covariates + ?Sized>(&self, row: &C) -> Result<f64, GlmError> {
        let mut x = Vec::with_capacity(self.coefficients.len());
        let offset = self.spec.row_into(row, &mut x)?;
        Ok(self.mean(self.linear_predictor_row(&x, offset)))
    }

    /// Coefficient of the named column.
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.spec
            .column_names()
            .iter()
            .position(|n| n == name)
            .map(|i| self.coefficients[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{Term, Var};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    fn spec(intercept: bool, names: &[&str]) -> DesignSpec {
        DesignSpec::new(
            intercept,
            names
                .iter()
                .map(|n| Term::var(Var::L, 0).named(n))
                .collect(),
        )
        .unwrap()
    }

    fn matrix(intercept: bool, cols: &[Vec<f64>]) -> DesignMatrix {
        let names: Vec<String> = (0..cols.len()).map(|i| format!("x{i}")).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        DesignMatrix::from_columns(spec(intercept, &names), cols).unwrap()
    }

    fn simulated(n: usize, seed: u64) -> (DesignMatrix, Vec<f64>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&xi| f64::from(rng.random::<f64>() < expit(0.5 + 1.2 * xi)))
            .collect();
        (matrix(true, &[x]), y)
    }

    #[test]
    fn intercept_only_balanced() {
        let m = matrix(true, &[]);
        let mut m = m;
        for _ in 0..4 {
            m.push_values(&[], 0.0).unwrap();
        }
        let fit = fit_glm(Family::Logistic, &m, &[0.0, 1.0, 1.0, 0.0], None).unwrap();
        assert!(fit.coefficients[0].abs() < 1e-12);
        assert!(fit
            .predict(&m)
            .unwrap()
            .iter()
            .all(|&p| (p - 0.5).abs() < 1e-12));
    }

    #[test]
    fn recovers_logistic_coefficients() {
        let (m, y) = simulated(100_000, 11);
        let fit = fit_glm(Family::Logistic, &m, &y, None).unwrap();
        assert!(fit.converged);
        assert!(
            (fit.coefficients[0] - 0.5).abs() < 0.03,
            "{:?}",
            fit.coefficients
        );
        assert!(
            (fit.coefficients[1] - 1.2).abs() < 0.03,
            "{:?}",
            fit.coefficients
        );
        // Score identity on the training rows.
        let mu = fit.predict(&m).unwrap();
        for j in 0..2 {
            let s: f64 = (0..m.n_rows()).map(|i| m.row(i)[j] * (y[i] - mu[i])).sum();
            assert!(s.abs() < 1e-6);
        }
    }

    #[test]
    fn closed_form_prediction() {
        let m = matrix(true, &[vec![0.0]]);
        let fit = FittedGlm {
            family: Family::Logistic,
            spec: m.spec().clone(),
            coefficients: vec![0.5, 1.2],
            residual_variance: None,
            zero_variance: false,
            converged: true,
            iterations: 0,
            max_score: 0.0,
        };
        let p = fit.predict(&m).unwrap()[0];
        assert!((p - 0.622_459_331_201_854_6).abs() < 1e-12);
    }

    #[test]
    fn separation_is_reported() {
        let m = matrix(true, &[vec![-2.0, -1.0, 1.0, 2.0]]);
        let r = fit_glm(Family::Logistic, &m, &[0.0, 0.0, 1.0, 1.0], None);
        assert!(matches!(r, Err(GlmError::Separation { .. })), "{r:?}");
    }

    #[test]
    fn singular_design_is_reported() {
        let x = vec![1.0, 2.0, 3.0];
        let m = matrix(true, &[x.clone(), x]);
        let r = fit_glm(Family::Gaussian, &m, &[1.0, 2.0, 2.5], None);
        assert_eq!(r, Err(GlmError::SingularDesign));
    }

    #[test]
    fn gaussian_zero_variance_is_flagged() {
        let prev = vec![0.3, -1.0, 2.0, 0.5];
        let mut m = matrix(false, &[vec![1.0, 1.0, 1.0, 1.0], prev.clone()]);
        m.set_offset(prev.clone()).unwrap();
        let fit = fit_glm(Family::Gaussian, &m, &prev, None).unwrap();
        assert!(fit.coefficients.iter().all(|c| c.abs() < 1e-12));
        assert!(fit.zero_variance);
        assert_eq!(fit.residual_variance, None);
    }

    #[test]
    fn gaussian_offset_matches_normal_equations() {
        // y - o = b * x, weighted: b = sum w x (y - o) / sum w x^2
        let x = vec![1.0, 2.0, 3.0];
        let o = vec![0.5, -0.5, 1.0];
        let y = vec![2.0, 3.0, 7.5];
        let w = vec![1.0, 2.0, 0.5];
        let mut m = matrix(false, std::slice::from_ref(&x));
        m.set_offset(o.clone()).unwrap();
        let fit = fit_glm(Family::Gaussian, &m, &y, Some(&w)).unwrap();
        let num: f64 = (0..3).map(|i| w[i] * x[i] * (y[i] - o[i])).sum();
        let den: f64 = (0..3).map(|i| w[i] * x[i] * x[i]).sum();
        assert!((fit.coefficients[0] - num / den).abs() < 1e-12);
        let rss: f64 = (0..3)
            .map(|i| w[i] * (y[i] - o[i] - num / den * x[i]).powi(2))
            .sum();
        let var = fit.residual_variance.unwrap();
        assert!((var - rss / (3.5 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn fractional_responses_are_accepted() {
        let m = matrix(true, &[vec![0.0, 1.0, 0.0, 1.0]]);
        let y = [0.2, 0.7, 0.4, 0.9];
        let fit = fit_glm(Family::Logistic, &m, &y, None).unwrap();
        let p = fit.predict(&m).unwrap();
        assert!((p[0] - 0.3).abs() < 1e-9 && (p[1] - 0.8).abs() < 1e-9);
    }

    #[test]
    fn gradient_vanishes_by_finite_differences() {
        let (m, y) = simulated(2_000, 3);
        let w: Vec<f64> = (0..m.n_rows()).map(|i| 0.5 + (i % 3) as f64).collect();
        let fit = fit_glm(Family::Logistic, &m, &y, Some(&w)).unwrap();
        let prep = prepare(Family::Logistic, &m, &y, Some(&w)).unwrap();
        let h = 1e-5;
        for j in 0..2 {
            let mut up = fit.coefficients.clone();
            let mut dn = fit.coefficients.clone();
            up[j] += h;
            dn[j] -= h;
            let d = (log_likelihood(&prep, &up) - log_likelihood(&prep, &dn)) / (2.0 * h);
            assert!(d.abs() < 1e-4, "gradient {d}");
        }
    }

    #[test]
    fn bad_inputs() {
        let m = matrix(true, &[vec![0.0, 1.0]]);
        assert_eq!(
            fit_glm(Family::Logistic, &m, &[0.0, 1.0], Some(&[0.0, 0.0])),
            Err(GlmError::NoPositiveWeight)
        );
        assert!(matches!(
            fit_glm(Family::Logistic, &m, &[0.0, 1.5], None),
            Err(GlmError::InvalidInput { row: 1, .. })
        ));
        assert!(matches!(
            fit_glm(Family::Logistic, &m, &[0.0], None),
            Err(GlmError::Length { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn weight_scaling_invariance(seed in 0u64..1000, c in 0.01f64..100.0) {
            let (m, y) = simulated(300, seed);
            let w: Vec<f64> = (0..300).map(|i| 1.0 + (i % 5) as f64).collect();
            let ws: Vec<f64> = w.iter().map(|v| v * c).collect();
            let a = fit_glm(Family::Logistic, &m, &y, Some(&w));
            let b = fit_glm(Family::Logistic, &m, &y, Some(&ws));
            if let (Ok(a), Ok(b)) = (a, b) {
                for (x, z) in a.coefficients.iter().zip(&b.coefficients) {
                    prop_assert!((x - z).abs() < 1e-8);
                }
            }
        }

        #[test]
        fn converged_fits_satisfy_score_identity(seed in 0u64..1000) {
            let (m, y) = simulated(200, seed);
            let w: Vec<f64> = (0..200).map(|i| 0.25 + (i % 7) as f64).collect();
            if let Ok(fit) = fit_glm(Family::Logistic, &m, &y, Some(&w)) {
                let mu = fit.predict(&m).unwrap();
                for j in 0..2 {
                    let s: f64 = (0..200).map(|i| w[i] * m.row(i)[j] * (y[i] - mu[i])).sum();
                    prop_assert!(s.abs() < 1e-6);
                }
            }
        }
    }
}
