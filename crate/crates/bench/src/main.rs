//! `ipf-bench`: benchmark CLI.
//!
//! Subcommands:
//!   simulate --config <file> --out <dir>                 emit a truth trajectory
//!   run --config <file> --filter <kind> --particles <N> --seed <u64> --out <dir>
//!   compare --config <file> --out <dir>                  full Monte Carlo protocol
//!
//! Exit codes: 0 success, 2 config error, 3 filter-fatal, 4 i/o error.
//! `IPF_THREADS` caps the rayon thread pool; numeric outputs do not depend
//! on it.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use ipf_bench::{
    emit_report, run_monte_carlo, run_seed, run_single, simulate_run_truth, BenchError,
    ExperimentConfig,
};
use ipf_core::filters::FilterKind;
use ipf_core::models::TrajectorySidecar;

const USAGE: &str = "\
ipf-bench: Monte Carlo state-estimation benchmark on the Lorenz'96 system

USAGE:
  ipf-bench simulate --config <file> --out <dir>
  ipf-bench run --config <file> --filter <kind> --particles <N> --seed <u64> --out <dir>
  ipf-bench compare --config <file> --out <dir>

FILTER KINDS:
  EPF | UPF | E-IPF | U-IPF | I-IPF (case-insensitive)

OUTPUT:
  simulate: trajectory.csv, trajectory.json
  run:      rmse.csv (k,rmse), run.json
  compare:  rmse.csv (per-filter mean/std), timing.csv, report.json

ENVIRONMENT:
  IPF_THREADS   cap the worker thread count (numeric results are unchanged)

EXIT CODES:
  0 success, 2 config error, 3 filter-fatal, 4 i/o error
";

fn main() {
    let args: Vec<String> = env::args().skip(1).collect();
    if args.iter().any(|a| a == "--help" || a == "-h") || args.is_empty() {
        print!("{USAGE}");
        std::process::exit(if args.is_empty() { 2 } else { 0 });
    }
    match dispatch(&args) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

struct Flags {
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    filter: Option<FilterKind>,
    particles: Option<usize>,
    seed: Option<u64>,
}

fn parse_flags(args: &[String]) -> Result<Flags, BenchError> {
    let mut flags = Flags {
        config: None,
        out: None,
        filter: None,
        particles: None,
        seed: None,
    };
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let mut value = |name: &str| {
            it.next()
                .cloned()
                .ok_or_else(|| BenchError::Config(format!("missing value for {name}")))
        };
        match arg.as_str() {
            "--config" => flags.config = Some(PathBuf::from(value("--config")?)),
            "--out" => flags.out = Some(PathBuf::from(value("--out")?)),
            "--filter" => {
                let v = value("--filter")?;
                flags.filter = Some(
                    v.parse()
                        .map_err(|e: ipf_core::Error| BenchError::Config(e.to_string()))?,
                );
            }
            "--particles" => {
                let v = value("--particles")?;
                flags.particles = Some(v.parse().map_err(|_| {
                    BenchError::Config(format!("invalid --particles {v:?} (expected integer)"))
                })?);
            }
            "--seed" => {
                let v = value("--seed")?;
                flags.seed = Some(v.parse().map_err(|_| {
                    BenchError::Config(format!("invalid --seed {v:?} (expected u64)"))
                })?);
            }
            other => {
                return Err(BenchError::Config(format!("unknown flag {other:?}")));
            }
        }
    }
    Ok(flags)
}

fn required<T>(value: Option<T>, name: &str) -> Result<T, BenchError> {
    value.ok_or_else(|| BenchError::Config(format!("{name} is required")))
}

fn configure_threads() -> Result<(), BenchError> {
    if let Ok(raw) = env::var("IPF_THREADS") {
        let n: usize = raw.parse().map_err(|_| {
            BenchError::Config(format!("invalid IPF_THREADS {raw:?} (expected integer)"))
        })?;
        if n == 0 {
            return Err(BenchError::Config("IPF_THREADS must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| BenchError::Config(format!("thread pool setup failed: {e}")))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), BenchError> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| BenchError::Config(e.to_string()))?;
    fs::write(path, text).map_err(BenchError::io(path))
}

fn dispatch(args: &[String]) -> Result<(), BenchError> {
    configure_threads()?;
    let (subcommand, rest) = args.split_first().expect("checked non-empty");
    let flags = parse_flags(rest)?;
    match subcommand.as_str() {
        "simulate" => simulate(flags),
        "run" => run(flags),
        "compare" => compare(flags),
        other => Err(BenchError::Config(format!(
            "unknown subcommand {other:?} (expected simulate, run, or compare)"
        ))),
    }
}

fn load_config(flags: &Flags) -> Result<ExperimentConfig, BenchError> {
    let path = required(flags.config.as_ref(), "--config")?;
    ExperimentConfig::load(path)
}

fn prepare_out(flags: &Flags) -> Result<PathBuf, BenchError> {
    let out = required(flags.out.clone(), "--out")?;
    fs::create_dir_all(&out).map_err(BenchError::io(&out))?;
    Ok(out)
}

fn simulate(flags: Flags) -> Result<(), BenchError> {
    let cfg = load_config(&flags)?;
    let out = prepare_out(&flags)?;
    let trajectory = simulate_run_truth(&cfg, cfg.master_seed)?;

    let csv_path = out.join("trajectory.csv");
    let mut buf = Vec::new();
    trajectory
        .write_csv(&mut buf)
        .map_err(BenchError::io(&csv_path))?;
    fs::write(&csv_path, buf).map_err(BenchError::io(&csv_path))?;

    let sidecar = TrajectorySidecar {
        config: cfg.model,
        seed: cfg.master_seed,
    };
    write_json(&sidecar, &out.join("trajectory.json"))?;
    println!(
        "wrote {} states and {} measurements to {}",
        trajectory.states.len(),
        trajectory.measurements.len(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct RunSummary<'a> {
    config: &'a ExperimentConfig,
    filter: FilterKind,
    particles: usize,
    seed: u64,
    elapsed_seconds: f64,
}

fn run(flags: Flags) -> Result<(), BenchError> {
    let cfg = load_config(&flags)?;
    let kind = required(flags.filter, "--filter")?;
    let particles = required(flags.particles, "--particles")?;
    let seed = flags
        .seed
        .unwrap_or_else(|| run_seed(cfg.master_seed, 0, 0));
    let out = prepare_out(&flags)?;
    if particles == 0 {
        return Err(BenchError::Config("--particles must be at least 1".into()));
    }

    let single = run_single(&cfg, kind, particles, seed)?;

    let csv_path = out.join("rmse.csv");
    let mut text = String::from("k,rmse\n");
    for (k, v) in single.rmse.iter().enumerate() {
        text.push_str(&format!("{},{v}\n", k + 1));
    }
    fs::write(&csv_path, text).map_err(BenchError::io(&csv_path))?;

    write_json(
        &RunSummary {
            config: &cfg,
            filter: kind,
            particles,
            seed,
            elapsed_seconds: single.elapsed_seconds,
        },
        &out.join("run.json"),
    )?;
    let steady = single.rmse.iter().rev().take(100.min(single.rmse.len()));
    let count = steady.len().max(1);
    let tail_mean: f64 = steady.sum::<f64>() / count as f64;
    println!(
        "{kind} with {particles} particles: {} steps in {:.2}s, late-window mean RMSE {tail_mean:.4}",
        single.rmse.len(),
        single.elapsed_seconds
    );
    Ok(())
}

fn compare(flags: Flags) -> Result<(), BenchError> {
    let cfg = load_config(&flags)?;
    let out = prepare_out(&flags)?;
    let report = run_monte_carlo(&cfg)?;
    emit_report(&report, &out)?;
    for f in &report.filters {
        let status = if f.failed {
            "FAILED"
        } else if f.failures.is_empty() {
            "ok"
        } else {
            "ok (with failures)"
        };
        println!(
            "{}: {} runs, mean {:.2}s per run, {} failures [{status}]",
            f.label,
            f.seeds.len(),
            f.mean_seconds,
            f.failures.len()
        );
    }
    if report.any_failed() {
        return Err(BenchError::FilterFatal {
            step: 0,
            source: ipf_core::Error::TotalDegeneracy,
        });
    }
    println!("report written to {}", out.display());
    Ok(())
}
