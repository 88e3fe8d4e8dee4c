use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::dgm::{scenario_params, simulate_truth, TruthCurve};
use crate::strategy::Strategy;

/// Location of the cached true curve for a scenario and strategy.
pub fn truth_path(dir: &Path, scenario: u8, strategy: &Strategy) -> PathBuf {
    dir.join(format!("truth_s{scenario}_{}.csv", strategy.slug()))
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct TruthMeta {
    scenario: u8,
    strategy: Strategy,
    n: usize,
    seed: u64,
}

/// Reads the cached curve when it was produced with the same settings and
/// otherwise simulates and caches it.
pub fn cached_truth(
    dir: &Path,
    scenario: u8,
    strategy: &Strategy,
    n: usize,
    seed: u64,
) -> Result<TruthCurve, HarnessError> {
    let csv_path = truth_path(dir, scenario, strategy);
    let meta_path = csv_path.with_extension("json");
    let meta = TruthMeta {
        scenario,
        strategy: *strategy,
        n,
        seed,
    };
    let cached = std::fs::read_to_string(&meta_path)
        .ok()
        .and_then(|t| serde_json::from_str::<TruthMeta>(&t).ok());
    if cached.as_ref() == Some(&meta) {
        if let Ok(f) = File::open(&csv_path) {
            if let Ok(t) = TruthCurve::read_csv(f, &strategy.to_string(), n) {
                return Ok(t);
            }
        }
    }
    let params = scenario_params(scenario)?;
    let truth = simulate_truth(&params, strategy, n, seed)?;
    std::fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    let f = File::create(&csv_path).map_err(HarnessError::io(&csv_path))?;
    truth
        .write_csv(BufWriter::new(f))
        .map_err(HarnessError::csv(&csv_path))?;
    let text = serde_json::to_string_pretty(&meta).map_err(HarnessError::json(&meta_path))?;
    std::fs::write(&meta_path, text + "\n").map_err(HarnessError::io(&meta_path))?;
    Ok(truth)
}
