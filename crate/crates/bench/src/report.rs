//! RMSE aggregation and report emission: `rmse.csv`, `timing.csv`, and a
//! round-trippable `report.json`.

use std::fs;
use std::io::Write;
use std::path::Path;

use ipf_core::filters::FilterKind;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{BenchError, Result};

/// Per-step root mean squared error: entry `k` is
/// `sqrt(mean_j (estimate_{j,k} - truth_{j,k})^2)`.
pub fn rmse_series(estimates: &[DVector<f64>], truth: &[DVector<f64>]) -> Result<Vec<f64>> {
    if estimates.len() != truth.len() {
        return Err(BenchError::Config(format!(
            "rmse shapes differ: {} estimates vs {} truth states",
            estimates.len(),
            truth.len()
        )));
    }
    estimates
        .iter()
        .zip(truth)
        .map(|(e, t)| {
            if e.len() != t.len() {
                return Err(BenchError::Config("rmse state dimensions differ".into()));
            }
            Ok(((e - t).norm_squared() / e.len() as f64).sqrt())
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunFailure {
    pub mc_index: usize,
    pub step: usize,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterReport {
    pub label: String,
    pub kind: FilterKind,
    pub particles: usize,
    /// Run seeds in Monte Carlo order.
    pub seeds: Vec<u64>,
    /// Mean RMSE per step over successful runs (empty if none succeeded).
    pub rmse_mean: Vec<f64>,
    /// Sample standard deviation per step (zero band when n_mc = 1).
    pub rmse_std: Vec<f64>,
    /// Mean filter wall-clock seconds per successful run.
    pub mean_seconds: f64,
    pub failures: Vec<RunFailure>,
    /// More than 10% of runs failed.
    pub failed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    /// Rayon threads available when the report was produced.
    pub thread_count: usize,
    pub filters: Vec<FilterReport>,
}

impl RunReport {
    pub fn any_failed(&self) -> bool {
        self.filters.iter().any(|f| f.failed)
    }

    pub fn filter(&self, kind: FilterKind, particles: usize) -> Option<&FilterReport> {
        self.filters
            .iter()
            .find(|f| f.kind == kind && f.particles == particles)
    }
}

fn write_rmse_csv<W: Write>(report: &RunReport, w: &mut W) -> std::io::Result<()> {
    write!(w, "k")?;
    for f in &report.filters {
        write!(w, ",{label}_mean,{label}_std", label = f.label)?;
    }
    writeln!(w)?;
    for k in 0..report.config.steps {
        write!(w, "{}", k + 1)?;
        for f in &report.filters {
            match (f.rmse_mean.get(k), f.rmse_std.get(k)) {
                (Some(mean), Some(std)) => write!(w, ",{mean},{std}")?,
                _ => write!(w, ",,")?,
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

fn write_timing_csv<W: Write>(report: &RunReport, w: &mut W) -> std::io::Result<()> {
    writeln!(w, "filter,N,mean_seconds")?;
    for f in &report.filters {
        writeln!(w, "{},{},{}", f.label, f.particles, f.mean_seconds)?;
    }
    Ok(())
}

/// Write `rmse.csv`, `timing.csv`, and `report.json` into `dir`.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(BenchError::io(dir))?;

    let rmse_path = dir.join("rmse.csv");
    let mut rmse = Vec::new();
    write_rmse_csv(report, &mut rmse).map_err(BenchError::io(&rmse_path))?;
    fs::write(&rmse_path, rmse).map_err(BenchError::io(&rmse_path))?;

    let timing_path = dir.join("timing.csv");
    let mut timing = Vec::new();
    write_timing_csv(report, &mut timing).map_err(BenchError::io(&timing_path))?;
    fs::write(&timing_path, timing).map_err(BenchError::io(&timing_path))?;

    let json_path = dir.join("report.json");
    let text =
        serde_json::to_string_pretty(report).map_err(|e| BenchError::Config(e.to_string()))?;
    fs::write(&json_path, text).map_err(BenchError::io(&json_path))?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(path).map_err(BenchError::io(path))?;
    serde_json::from_str(&text).map_err(|e| BenchError::Config(e.to_string()))
}
