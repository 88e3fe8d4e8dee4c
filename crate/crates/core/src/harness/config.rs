use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::dgm::scenario_params;
use crate::forms::Mode;
use crate::strategy::Strategy;

/// Environment variable overriding the configured worker count.
pub const WORKERS_ENV: &str = "IMTK_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ipw,
    Msm,
    Gcomp,
    Tmle,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ipw => "ipw",
            Method::Msm => "msm",
            Method::Gcomp => "gcomp",
            Method::Tmle => "tmle",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ipw" => Ok(Method::Ipw),
            "msm" => Ok(Method::Msm),
            "gcomp" => Ok(Method::Gcomp),
            "tmle" => Ok(Method::Tmle),
            other => Err(format!(
                "unknown method `{other}`; expected ipw, msm, gcomp or tmle"
            )),
        }
    }
}

fn default_truth_seed() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: u8,
    /// Cohort size of each replication.
    pub n: usize,
    /// Number of replications.
    pub n_sim: usize,
    /// Individuals simulated for each true curve.
    pub truth_n: usize,
    pub methods: Vec<Method>,
    pub modes: Vec<Mode>,
    pub strategies: Vec<Strategy>,
    pub master_seed: u64,
    /// Monte Carlo individuals per g-computation run.
    pub n_mc: usize,
    #[serde(default)]
    pub stabilized: bool,
    /// Worker threads; 0 uses every available core.
    #[serde(default)]
    pub workers: usize,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub weight_cap: Option<f64>,
    #[serde(default = "default_truth_seed")]
    pub truth_seed: u64,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(HarnessError::json(path))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        let params =
            scenario_params(self.scenario).map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        if self.n_sim == 0 {
            return bad("n_sim must be at least 1".into());
        }
        if self.truth_n == 0 {
            return bad("truth_n must be positive".into());
        }
        if self.methods.is_empty() || self.modes.is_empty() || self.strategies.is_empty() {
            return bad("methods, modes and strategies must be nonempty".into());
        }
        if self.methods.contains(&Method::Gcomp) && self.n_mc == 0 {
            return bad("n_mc must be positive when gcomp is requested".into());
        }
        for s in &self.strategies {
            s.validate(params.horizon)
                .map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        if let Some(q) = self.weight_cap {
            if !(q > 0.0 && q <= 100.0) {
                return bad(format!("weight_cap {q} must lie in (0, 100]"));
            }
        }
        Ok(())
    }

    /// Worker count after applying the environment override.
    pub fn effective_workers(&self) -> usize {
        std::env::var(WORKERS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&w| w > 0)
            .unwrap_or(self.workers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn json() -> &'static str {
        r#"{"scenario":1,"n":3000,"n_sim":2,"truth_n":1000,"methods":["ipw"],"modes":["adapted"],
            "strategies":["always","wait:q1=2,q_last=3,p1=2"],"master_seed":7,"n_mc":100,"out_dir":"out"}"#
    }

    #[test]
    fn parses_and_validates() {
        let c: ExperimentConfig = serde_json::from_str(json()).unwrap();
        c.validate().unwrap();
        assert_eq!(c.strategies[1], Strategy::WAIT);
        assert!(!c.stabilized);
    }

    #[test]
    fn rejects_unknown_keys() {
        let text = json().replace("\"n_mc\"", "\"nmc\"");
        assert!(serde_json::from_str::<ExperimentConfig>(&text).is_err());
    }

    #[test]
    fn rejects_empty_methods() {
        let mut c: ExperimentConfig = serde_json::from_str(json()).unwrap();
        c.methods.clear();
        assert!(c.validate().is_err());
        c.methods.push(Method::Tmle);
        c.scenario = 9;
        assert!(c.validate().is_err());
    }
}
