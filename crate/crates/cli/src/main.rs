//! `rgd`: train, sweep, verify and summarize re-weighted gradient descent runs.
//!
//! Exit codes: 0 on success, 1 when a verification suite or a run fails,
//! 2 when a config or input file is rejected.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rgd_core::harness::{import_trace, report, trace_to_csv, SweepFile};
use rgd_core::verify::{gradcheck_suite, oracle_suite, GradcheckConfig, OracleSuiteConfig};
use rgd_core::{run_experiment, sweep, Error, ExperimentConfig};

#[derive(Parser)]
#[command(name = "rgd", version, about = "Re-weighted gradient descent experiments and checks")]
struct Cli {
    /// Overrides the seed in the config (training and data generation).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment; the trace goes to --out, the config's output, or stdout as CSV.
    Train {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every grid point and select on the holdout split.
    Sweep {
        sweep: PathBuf,
        /// Write the per-point table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the selected experiment config as JSON.
        #[arg(long)]
        best_config: Option<PathBuf>,
    },
    /// KL primal/dual agreement, worst-case forms, and brute force on small instances.
    Oracle {
        /// Largest number of atoms per instance.
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 0.5)]
        rho_max: f64,
        /// Grid points per simplex edge for the brute-force check.
        #[arg(long, default_value_t = 2001)]
        grid: usize,
    },
    /// Analytic weighted gradients against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        trials: usize,
    },
    /// Final record of every split of every trace, as one CSV table.
    Report {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Io { .. } | Error::Format { .. } | Error::InvalidInput(_) => {
                Failure::Config(e.to_string())
            }
            Error::NonFinite { .. } | Error::Divergence { .. } | Error::State(_) | Error::Oracle(_) => {
                Failure::Run(e.to_string())
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { config, out } => train(&config, out, cli.seed),
        Command::Sweep { sweep, out, best_config } => run_sweep(&sweep, out, best_config, cli.seed),
        Command::Oracle { n, trials, rho_max, grid } => {
            if n < 2 || !(rho_max >= 0.0 && rho_max.is_finite()) || grid < 2 {
                return Err(Failure::Config("need --n >= 2, --rho-max >= 0 and --grid >= 2".into()));
            }
            let config = OracleSuiteConfig {
                max_atoms: n,
                trials,
                rho_max,
                seed: cli.seed.unwrap_or(0),
                grid_points: grid,
                ..Default::default()
            };
            let r = oracle_suite(&config)?;
            println!("trials {}, brute-force checks {}", r.trials, r.brute_checks);
            println!("max duality gap {:.3e}", r.max_duality_gap);
            println!("max KL form deviation {:.3e}", r.max_form_deviation);
            println!("max brute-force value error {:.3e}", r.max_brute_error);
            println!("max brute-force maximizer deviation {:.3e}", r.max_brute_form_deviation);
            println!("{:.2}s", r.seconds);
            verdict(&r.failures)
        }
        Command::Gradcheck { trials } => {
            let config = GradcheckConfig {
                trials,
                seed: cli.seed.unwrap_or(0),
                ..Default::default()
            };
            let r = gradcheck_suite(&config)?;
            let mut failures = Vec::new();
            for k in &r.kinds {
                println!("{:?}: {} trials, max rel error {:.3e}, {} failed", k.kind, k.trials, k.max_rel_error, k.failures);
                if k.failures > 0 {
                    failures.push(format!("{:?}: {} of {} trials above tolerance", k.kind, k.failures, k.trials));
                }
            }
            println!("{:.2}s", r.seconds);
            verdict(&failures)
        }
        Command::Report { traces } => {
            let mut loaded = Vec::with_capacity(traces.len());
            for path in &traces {
                let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                loaded.push((name, import_trace(path)?));
            }
            print!("{}", report(&loaded));
            Ok(())
        }
    }
}

fn verdict(failures: &[String]) -> Result<(), Failure> {
    if failures.is_empty() {
        println!("PASS");
        return Ok(());
    }
    for f in failures {
        println!("  {f}");
    }
    println!("FAIL ({} checks)", failures.len());
    Err(Failure::Run(format!("{} verification checks failed", failures.len())))
}

fn train(path: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<(), Failure> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = seed {
        config = config.with_seed(seed);
    }
    if out.is_some() {
        config.output = out;
    }
    let (trace, summary) = run_experiment(&config)?;
    if config.output.is_none() {
        print!("{}", trace_to_csv(&trace));
    }
    eprintln!("{}: {} steps", summary.method, summary.steps);
    for (split, metrics) in &summary.final_metrics {
        let line: Vec<String> = metrics.iter().map(|(k, &v)| format!("{k}={}", short(v))).collect();
        eprintln!("  {split}: {}", line.join(" "));
    }
    Ok(())
}

fn short(v: f64) -> String {
    if v == 0.0 || (1e-3..1e6).contains(&v.abs()) {
        format!("{v:.6}")
    } else {
        format!("{v:.3e}")
    }
}

fn run_sweep(path: &Path, out: Option<PathBuf>, best_config: Option<PathBuf>, seed: Option<u64>) -> Result<(), Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let mut file = SweepFile::from_json(&text).map_err(|e| match e {
        Error::Config(msg) => Failure::Config(format!("config error: {}: {msg}", path.display())),
        other => other.into(),
    })?;
    if let Some(seed) = seed {
        file.base = file.base.with_seed(seed);
    }
    let outcome = sweep(&file.grid, &file.base)?;
    let table = outcome.table();
    match &out {
        Some(p) => fs::write(p, &table).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?,
        None => print!("{table}"),
    }
    let Some((point, config)) = &outcome.best else {
        return Err(Failure::Run("no grid point produced a finite holdout score".into()));
    };
    eprintln!("selected {}", point.label());
    if let Some(p) = best_config {
        let json = serde_json::to_string_pretty(config).expect("config serializes");
        fs::write(&p, json + "\n").map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}
