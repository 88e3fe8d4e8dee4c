use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{HarnessError, Method};
use crate::forms::Mode;

/// One line of `results.csv`: performance of one estimator at one time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scenario: u8,
    pub strategy: String,
    pub time: usize,
    pub method: Method,
    pub mode: Mode,
    pub true_value: f64,
    pub mean_estimate: f64,
    pub empirical_se: f64,
    pub bias: f64,
    pub mc_se: f64,
    pub n_failed_reps: usize,
}

fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, HarnessError> {
    let f = File::create(path).map_err(HarnessError::io(path))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(f)))
}

pub fn write_results(rows: &[ResultRow], path: &Path) -> Result<(), HarnessError> {
    let mut w = writer(path)?;
    for r in rows {
        w.serialize(r).map_err(HarnessError::csv(path))?;
    }
    w.flush().map_err(HarnessError::io(path))
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>, HarnessError> {
    let mut r = csv::Reader::from_path(path).map_err(HarnessError::csv(path))?;
    r.deserialize()
        .collect::<Result<_, _>>()
        .map_err(HarnessError::csv(path))
}

#[derive(Serialize)]
struct BiasPct<'a> {
    strategy: &'a str,
    time: usize,
    method: Method,
    mode: Mode,
    bias_pct: f64,
}

fn bias_table(rows: &[ResultRow]) -> String {
    let methods: BTreeSet<Method> = rows.iter().map(|r| r.method).collect();
    let modes: BTreeSet<Mode> = rows.iter().map(|r| r.mode).collect();
    let mut strategies: Vec<&str> = Vec::new();
    for r in rows {
        if !strategies.contains(&r.strategy.as_str()) {
            strategies.push(&r.strategy);
        }
    }
    let times: BTreeSet<usize> = rows.iter().map(|r| r.time).collect();
    let mut out = String::new();
    for mode in &modes {
        let _ = writeln!(out, "## {mode}\n");
        let mut header = String::from("| Strategy | Time | True value |");
        let mut rule = String::from("|---|---:|---:|");
        for m in &methods {
            let _ = write!(header, " {m} mean (SE) | {m} bias (MC SE) |");
            rule.push_str("---:|---:|");
        }
        let _ = writeln!(out, "{header}\n{rule}");
        for s in &strategies {
            for t in &times {
                let cell = |m: &Method| {
                    rows.iter().find(|r| {
                        r.mode == *mode && r.method == *m && r.strategy == *s && r.time == *t
                    })
                };
                let Some(truth) = methods.iter().find_map(&cell).map(|r| r.true_value) else {
                    continue;
                };
                let mut line = format!("| {s} | {t} | {truth:.3} |");
                for m in &methods {
                    match cell(m) {
                        Some(r) => {
                            let _ = write!(
                                line,
                                " {:.3} ({:.3}) | {:.3} ({:.3}) |",
                                r.mean_estimate, r.empirical_se, r.bias, r.mc_se
                            );
                        }
                        None => line.push_str(" | |"),
                    }
                }
                let _ = writeln!(out, "{line}");
            }
        }
        out.push('\n');
    }
    out
}

/// Writes `results.csv`, `bias_table.md` and `bias_pct.csv` into `dir`.
pub fn emit_report(rows: &[ResultRow], dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    if rows.is_empty() {
        return Err(HarnessError::EmptyResults);
    }
    std::fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    let results = dir.join("results.csv");
    write_results(rows, &results)?;

    let table = dir.join("bias_table.md");
    std::fs::write(&table, bias_table(rows)).map_err(HarnessError::io(&table))?;

    let pct = dir.join("bias_pct.csv");
    let mut w = writer(&pct)?;
    for r in rows {
        w.serialize(BiasPct {
            strategy: &r.strategy,
            time: r.time,
            method: r.method,
            mode: r.mode,
            bias_pct: 100.0 * r.bias / r.true_value,
        })
        .map_err(HarnessError::csv(&pct))?;
    }
    w.flush().map_err(HarnessError::io(&pct))?;
    Ok(vec![results, table, pct])
}
