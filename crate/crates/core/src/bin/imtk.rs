use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use imtk::dgm::{scenario_params, simulate_cohort, simulate_truth};
use imtk::forms::Mode;
use imtk::harness::{
    emit_report, estimate_curve, read_results, run_experiment, EstimateOptions, ExperimentConfig,
    Method, WORKERS_ENV,
};
use imtk::tmle::{tmle_curve, tmle_estimate, TmleOptions};
use imtk::{Panel, Strategy, SurvivalCurve};

#[derive(Parser)]
#[command(
    name = "imtk",
    version,
    about = "Causal survival estimation under informative covariate monitoring"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate an observed cohort and write it as a panel CSV.
    Simulate {
        #[arg(long, default_value_t = 1)]
        scenario: u8,
        #[arg(long, default_value_t = 3000)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the true survival curve under a strategy as `time,survival,mc_se`.
    Truth {
        #[arg(long, default_value_t = 1)]
        scenario: u8,
        #[arg(long)]
        strategy: Strategy,
        #[arg(long, default_value_t = 1_000_000)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Estimate a survival curve from a panel CSV and print `time,survival`.
    Estimate(EstimateArgs),
    /// Run a simulation study described by a JSON config.
    Experiment {
        #[arg(long)]
        config: PathBuf,
    },
    /// Regenerate the bias table and plot data from a results CSV.
    Report {
        #[arg(long)]
        results: PathBuf,
        /// Directory for the report files; defaults to the directory of the results file.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    method: Method,
    #[arg(long, default_value = "adapted")]
    mode: Mode,
    #[arg(long)]
    strategy: Strategy,
    #[arg(long)]
    input: PathBuf,
    /// Use stabilized weights.
    #[arg(long)]
    stabilized: bool,
    /// Monte Carlo sample size for g-computation.
    #[arg(long, default_value_t = 10_000)]
    n_mc: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Cap weights at this percentile.
    #[arg(long)]
    weight_cap: Option<f64>,
    /// TMLE target time (1-based) or `all`.
    #[arg(long, default_value = "all")]
    time: String,
    /// Write the TMLE targeting trace as JSON.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Number of periods in the panel; inferred from the data when omitted.
    #[arg(long)]
    horizon: Option<usize>,
}

fn main() -> Result<()> {
    configure_workers()?;
    match Cli::parse().command {
        Command::Simulate {
            scenario,
            n,
            seed,
            out,
        } => {
            let params = scenario_params(scenario)?;
            let panel = simulate_cohort(&params, n, seed)?;
            panel
                .to_path(&out)
                .with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Truth {
            scenario,
            strategy,
            n,
            seed,
        } => {
            let params = scenario_params(scenario)?;
            let truth = simulate_truth(&params, &strategy, n, seed)?;
            truth.write_csv(io::stdout().lock())?;
        }
        Command::Estimate(args) => estimate(args)?,
        Command::Experiment { config } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let rows = run_experiment(&cfg)?;
            for path in emit_report(&rows, &cfg.out_dir)? {
                eprintln!("wrote {}", path.display());
            }
        }
        Command::Report { results, out_dir } => {
            let rows = read_results(&results)?;
            let dir =
                out_dir.unwrap_or_else(|| results.parent().unwrap_or(Path::new(".")).to_path_buf());
            for path in emit_report(&rows, &dir)? {
                eprintln!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn configure_workers() -> Result<()> {
    let Ok(value) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let workers: usize = value
        .trim()
        .parse()
        .with_context(|| format!("{WORKERS_ENV}={value} is not a worker count"))?;
    if workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()?;
    }
    Ok(())
}

fn estimate(args: EstimateArgs) -> Result<()> {
    let panel = Panel::from_path(&args.input, args.horizon)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let target = match args.time.as_str() {
        "all" => None,
        t => Some(
            t.parse::<usize>()
                .with_context(|| format!("--time {t} is neither `all` nor a time"))?,
        ),
    };
    if args.method != Method::Tmle && (target.is_some() || args.trace.is_some()) {
        bail!("--time and --trace apply to tmle only");
    }
    let out = io::stdout().lock();
    if args.method == Method::Tmle {
        let opts = TmleOptions {
            stabilized: args.stabilized,
            ..TmleOptions::new(args.mode)
        };
        if let Some(t) = target {
            let (value, trace) = tmle_estimate(&panel, &args.strategy, t, &opts)?;
            write_trace(args.trace.as_deref(), &trace)?;
            let mut w = csv::WriterBuilder::new()
                .terminator(csv::Terminator::Any(b'\n'))
                .from_writer(out);
            w.write_record(["time", "survival"])?;
            w.write_record([t.to_string(), value.to_string()])?;
            w.flush()?;
        } else {
            let c = tmle_curve(&panel, &args.strategy, &opts)?;
            for (time, message) in &c.errors {
                eprintln!("time {time}: {message}");
            }
            write_trace(args.trace.as_deref(), &c.traces)?;
            c.curve.write_csv(out)?;
        }
        return Ok(());
    }
    let opts = EstimateOptions {
        n_mc: args.n_mc,
        seed: args.seed,
        stabilized: args.stabilized,
        weight_cap: args.weight_cap,
    };
    let curve: SurvivalCurve =
        estimate_curve(&panel, args.method, args.mode, &args.strategy, &opts)?;
    curve.write_csv(out)?;
    Ok(())
}

fn write_trace<T: serde::Serialize>(path: Option<&Path>, trace: &T) -> Result<()> {
    let Some(path) = path else {
        return Ok(());
    };
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, trace)?;
    writeln!(w)?;
    Ok(())
}
