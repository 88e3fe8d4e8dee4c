use serde::Serialize;

use super::HarnessError;

/// Performance of an estimator across replications.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    /// Standard deviation of the estimates (n - 1 denominator).
    pub empirical_se: f64,
    pub bias: f64,
    /// Monte Carlo standard error of the bias.
    pub mc_se: f64,
}

pub fn summarize(estimates: &[f64], truth: f64) -> Result<Summary, HarnessError> {
    let n = estimates.len();
    if n < 2 {
        return Err(HarnessError::TooFewEstimates(n));
    }
    let nf = n as f64;
    let mean = estimates.iter().sum::<f64>() / nf;
    let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let sd = var.sqrt();
    Ok(Summary {
        mean,
        empirical_se: sd,
        bias: mean - truth,
        mc_se: sd / nf.sqrt(),
    })
}
