//! Single-run and Monte Carlo execution.
//!
//! Every run derives its RNG streams from a single seed, so Monte Carlo jobs
//! can run in parallel without changing any numeric output. Timing covers
//! the filter computation only (ensemble initialization through the last
//! step), never truth simulation or report I/O.

use std::collections::HashSet;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use ipf_core::filters::{estimate, filter_step, init_ensemble, FilterKind, FilterParams};
use ipf_core::models::{
    attractor_initial_state, lorenz96_model_analytic, simulate_truth, StateSpaceModel, Trajectory,
};
use ipf_core::stream::{substream, tags};

use crate::config::ExperimentConfig;
use crate::error::{BenchError, Result};
use crate::report::{rmse_series, FilterReport, RunFailure, RunReport};

/// Deterministic RK4 steps taken before a truth run so the initial state
/// sits on the attractor.
pub const TRUTH_SPINUP_STEPS: usize = 500;

/// Build the benchmark model with the analytic Jacobian fast path attached.
pub fn build_model(cfg: &ExperimentConfig) -> Result<StateSpaceModel> {
    Ok(lorenz96_model_analytic(&cfg.model)?)
}

#[derive(Debug, Clone)]
pub struct SingleRun {
    pub estimates: Vec<DVector<f64>>,
    pub rmse: Vec<f64>,
    pub elapsed_seconds: f64,
}

/// Simulate a truth trajectory for one run seed.
pub fn simulate_run_truth(cfg: &ExperimentConfig, seed: u64) -> Result<Trajectory> {
    let model = build_model(cfg)?;
    let x0 = attractor_initial_state(&cfg.model, seed, TRUTH_SPINUP_STEPS)?;
    Ok(simulate_truth(
        &model,
        &x0,
        cfg.steps,
        substream(seed, &[tags::TRUTH]),
    )?)
}

/// Run one filter over an existing trajectory. Deterministic given `seed`
/// (timing aside).
pub fn run_filter_on_trajectory(
    model: &StateSpaceModel,
    trajectory: &Trajectory,
    cfg: &ExperimentConfig,
    kind: FilterKind,
    particles: usize,
    seed: u64,
) -> Result<SingleRun> {
    let bias = cfg.init_bias.to_vector(model.n_x())?;
    let params = FilterParams {
        alpha: cfg.alpha,
        ut: cfg.ut,
        resample_threshold_frac: cfg.resample_threshold_frac,
    };
    let steps = trajectory.steps();

    let start = Instant::now();
    let x0_est = &trajectory.states[0] + bias;
    let p0 = DMatrix::from_diagonal_element(model.n_x(), model.n_x(), cfg.init_spread);
    let mut ens = init_ensemble(particles, &x0_est, &p0, seed)?;
    let mut estimates = Vec::with_capacity(steps);
    for k in 1..=steps {
        let step_seed = substream(seed, &[tags::STEP, k as u64]);
        ens = filter_step(
            &ens,
            &trajectory.measurements[k - 1],
            model,
            kind,
            &params,
            step_seed,
        )
        .map_err(|source| BenchError::FilterFatal { step: k, source })?;
        estimates.push(estimate(&ens));
    }
    let elapsed_seconds = start.elapsed().as_secs_f64();

    let rmse = rmse_series(&estimates, &trajectory.states[1..])?;
    Ok(SingleRun {
        estimates,
        rmse,
        elapsed_seconds,
    })
}

/// Simulate a truth from `seed`, then run the chosen filter on it.
pub fn run_single(
    cfg: &ExperimentConfig,
    kind: FilterKind,
    particles: usize,
    seed: u64,
) -> Result<SingleRun> {
    let model = build_model(cfg)?;
    let trajectory = simulate_run_truth(cfg, seed)?;
    run_filter_on_trajectory(&model, &trajectory, cfg, kind, particles, seed)
}

/// Seed for one (filter index, Monte Carlo index) job.
pub fn run_seed(master_seed: u64, filter_index: usize, mc_index: usize) -> u64 {
    substream(
        master_seed,
        &[tags::RUN, filter_index as u64, mc_index as u64],
    )
}

fn sample_std(values: &[f64], mean: f64) -> f64 {
    let n = values.len();
    if n <= 1 {
        return 0.0;
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    var.sqrt()
}

/// Run the full Monte Carlo protocol: `n_mc` independent runs per roster
/// entry, aggregated into per-step RMSE mean and standard deviation
/// and per-run mean wall-clock. Job order is fixed, so parallel and serial
/// execution produce identical numerics.
pub fn run_monte_carlo(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;

    let mut jobs = Vec::new();
    for filter_index in 0..cfg.filters.len() {
        for mc_index in 0..cfg.n_mc {
            jobs.push((
                filter_index,
                mc_index,
                run_seed(cfg.master_seed, filter_index, mc_index),
            ));
        }
    }
    let mut seen = HashSet::new();
    for &(_, _, seed) in &jobs {
        if !seen.insert(seed) {
            return Err(BenchError::Config(
                "derived run seeds collide; choose a different master_seed".into(),
            ));
        }
    }

    let results: Vec<(usize, usize, u64, Result<SingleRun>)> = jobs
        .into_par_iter()
        .map(|(filter_index, mc_index, seed)| {
            let spec = cfg.filters[filter_index];
            let outcome = run_single(cfg, spec.kind, spec.particles, seed);
            (filter_index, mc_index, seed, outcome)
        })
        .collect();

    let mut filters = Vec::with_capacity(cfg.filters.len());
    for (filter_index, spec) in cfg.filters.iter().enumerate() {
        let mut seeds = Vec::with_capacity(cfg.n_mc);
        let mut successes: Vec<&SingleRun> = Vec::new();
        let mut failures = Vec::new();
        for (fi, mc_index, seed, outcome) in &results {
            if *fi != filter_index {
                continue;
            }
            seeds.push(*seed);
            match outcome {
                Ok(run) => successes.push(run),
                Err(e) => {
                    let step = match e {
                        BenchError::FilterFatal { step, .. } => *step,
                        _ => 0,
                    };
                    failures.push(RunFailure {
                        mc_index: *mc_index,
                        step,
                        message: e.to_string(),
                    });
                }
            }
        }

        let (rmse_mean, rmse_std) = if successes.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            let mut means = Vec::with_capacity(cfg.steps);
            let mut stds = Vec::with_capacity(cfg.steps);
            for k in 0..cfg.steps {
                let column: Vec<f64> = successes.iter().map(|run| run.rmse[k]).collect();
                let mean = column.iter().sum::<f64>() / column.len() as f64;
                means.push(mean);
                stds.push(sample_std(&column, mean));
            }
            (means, stds)
        };
        let mean_seconds = if successes.is_empty() {
            0.0
        } else {
            successes.iter().map(|r| r.elapsed_seconds).sum::<f64>() / successes.len() as f64
        };
        let failed = failures.len() * 10 > cfg.n_mc;
        filters.push(FilterReport {
            label: format!("{}-{}", spec.kind, spec.particles),
            kind: spec.kind,
            particles: spec.particles,
            seeds,
            rmse_mean,
            rmse_std,
            mean_seconds,
            failures,
            failed,
        });
    }

    Ok(RunReport {
        config: cfg.clone(),
        thread_count: rayon::current_num_threads(),
        filters,
    })
}
