//! Assembled sequential filters behind one stepping interface: the
//! implicit filters realized through EKF/UKF banks, the iterative
//! reference implementation, and the EKF/UKF-proposal baselines, plus
//! effective sample size, systematic resampling, and point estimation.
//!
//! Every step is deterministic given `(step seed, particle index)`: each
//! particle derives its own RNG stream, so parallel schedules never change
//! results. Per-particle numeric failures flag the particle with weight
//! `-inf`; the step only fails if every particle degenerates.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{cholesky_jittered, log_det_lower, logpdf_whitened, spd_sqrt};
use crate::implicit::{
    ipf_log_weight, map_particle, minimize_log_target, normalize_weights, random_map_solve,
    LogTarget, ReferenceSampler, TargetFactors,
};
use crate::kf_bank::{ekf_predict, kf_update, ukf_predict, PredictedMoments, UtParams};
use crate::models::StateSpaceModel;
use crate::stream::{self, tags};

/// A weighted particle with its own KF covariance.
#[derive(Debug, Clone)]
pub struct Particle {
    pub state: DVector<f64>,
    /// Log of the normalized weight.
    pub log_weight: f64,
    pub cov: DMatrix<f64>,
}

/// The particle population at one time index.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub particles: Vec<Particle>,
    pub step: usize,
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Normalized weights (exponentiated log-weights).
    pub fn weights(&self) -> Vec<f64> {
        self.particles.iter().map(|p| p.log_weight.exp()).collect()
    }
}

/// Prediction backend used by the per-particle bank.
#[derive(Debug, Clone, Copy)]
pub enum Backend {
    Ekf,
    Ukf(UtParams),
}

impl Backend {
    pub fn predict(
        &self,
        x_prev: &DVector<f64>,
        p_prev: &DMatrix<f64>,
        model: &StateSpaceModel,
    ) -> Result<PredictedMoments> {
        match self {
            Backend::Ekf => ekf_predict(x_prev, p_prev, model),
            Backend::Ukf(ut) => ukf_predict(x_prev, p_prev, model, ut),
        }
    }
}

/// The filter roster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FilterKind {
    /// EKF-proposal particle filter baseline.
    #[serde(rename = "EPF")]
    Epf,
    /// UKF-proposal particle filter baseline.
    #[serde(rename = "UPF")]
    Upf,
    /// Implicit filter realized through a bank of EKFs.
    #[serde(rename = "E-IPF")]
    ExtendedIpf,
    /// Implicit filter realized through a bank of UKFs.
    #[serde(rename = "U-IPF")]
    UnscentedIpf,
    /// Implicit filter via numerical optimization and a radial random map.
    #[serde(rename = "I-IPF")]
    IterativeIpf,
}

impl FilterKind {
    pub const ALL: [FilterKind; 5] = [
        FilterKind::Epf,
        FilterKind::Upf,
        FilterKind::ExtendedIpf,
        FilterKind::UnscentedIpf,
        FilterKind::IterativeIpf,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            FilterKind::Epf => "EPF",
            FilterKind::Upf => "UPF",
            FilterKind::ExtendedIpf => "E-IPF",
            FilterKind::UnscentedIpf => "U-IPF",
            FilterKind::IterativeIpf => "I-IPF",
        }
    }
}

impl std::fmt::Display for FilterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        for kind in Self::ALL {
            if kind.label().to_ascii_lowercase() == lower {
                return Ok(kind);
            }
        }
        Err(Error::InvalidConfig(format!(
            "unknown filter kind {s:?} (expected one of EPF, UPF, E-IPF, U-IPF, I-IPF)"
        )))
    }
}

/// Knobs shared by the filter roster.
#[derive(Debug, Clone, Copy)]
pub struct FilterParams {
    /// Reference concentration for the implicit filters.
    pub alpha: f64,
    /// Unscented-transform parameters for the UKF-backed filters.
    pub ut: UtParams,
    /// Resample when `ess <= frac * N`; 0 disables, 1 resamples every step.
    pub resample_threshold_frac: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            ut: UtParams::default(),
            resample_threshold_frac: 0.5,
        }
    }
}

/// Draw `n` particles from `N(x0_est, p0)`, each with weight `1/n` and
/// per-particle covariance `p0`.
pub fn init_ensemble(
    n: usize,
    x0_est: &DVector<f64>,
    p0: &DMatrix<f64>,
    seed: u64,
) -> Result<Ensemble> {
    if n == 0 {
        return Err(Error::InvalidConfig(
            "ensemble size must be positive".into(),
        ));
    }
    let l = spd_sqrt(p0)?;
    let mut rng = stream::rng(seed, &[tags::ENSEMBLE_INIT]);
    let log_weight = -(n as f64).ln();
    let dim = x0_est.len();
    let particles = (0..n)
        .map(|_| {
            let z = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            Particle {
                state: x0_est + &l * z,
                log_weight,
                cov: p0.clone(),
            }
        })
        .collect();
    Ok(Ensemble { particles, step: 0 })
}

/// Effective sample size `1 / sum w_i^2` of normalized weights.
pub fn ess(weights: &[f64]) -> f64 {
    let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
    1.0 / sum_sq
}

/// Systematic (single uniform offset) resampling. Preserves `N`, resets all
/// weights to `1/N`, and carries each particle's covariance with its state.
pub fn systematic_resample<R: Rng + ?Sized>(ens: &Ensemble, rng: &mut R) -> Ensemble {
    let n = ens.particles.len();
    let weights = ens.weights();
    let offset: f64 = rng.random::<f64>();
    let log_weight = -(n as f64).ln();
    let mut particles = Vec::with_capacity(n);
    let mut source = 0;
    let mut cumulative = weights[0];
    for t in 0..n {
        let position = (t as f64 + offset) / n as f64;
        while position > cumulative && source + 1 < n {
            source += 1;
            cumulative += weights[source];
        }
        let chosen = &ens.particles[source];
        particles.push(Particle {
            state: chosen.state.clone(),
            log_weight,
            cov: chosen.cov.clone(),
        });
    }
    Ensemble {
        particles,
        step: ens.step,
    }
}

/// Weighted posterior mean of the ensemble.
pub fn estimate(ens: &Ensemble) -> DVector<f64> {
    let dim = ens.particles[0].state.len();
    let mut out = DVector::zeros(dim);
    for p in &ens.particles {
        out.axpy(p.log_weight.exp(), &p.state, 1.0);
    }
    out
}

fn flagged(p: &Particle) -> Particle {
    Particle {
        state: p.state.clone(),
        log_weight: f64::NEG_INFINITY,
        cov: p.cov.clone(),
    }
}

fn process_bank<F>(ens: &Ensemble, op: F) -> Vec<Particle>
where
    F: Fn(usize, &Particle) -> Result<Particle> + Sync,
{
    ens.particles
        .par_iter()
        .enumerate()
        .map(|(i, p)| op(i, p).unwrap_or_else(|_| flagged(p)))
        .collect()
}

fn finish_step(mut particles: Vec<Particle>, step: usize) -> Result<Ensemble> {
    let log_weights: Vec<f64> = particles.iter().map(|p| p.log_weight).collect();
    let weights = normalize_weights(&log_weights)?;
    for (p, w) in particles.iter_mut().zip(&weights) {
        p.log_weight = w.ln();
    }
    Ok(Ensemble { particles, step })
}

/// Resampling happens on entry to the next step, with the incoming weights,
/// so that post-step estimates are taken from the weighted ensemble (the
/// weighted-sum estimator) rather than from resampled copies.
fn resample_on_entry(ens: &Ensemble, resample_threshold_frac: f64, seed: u64) -> Option<Ensemble> {
    let weights = ens.weights();
    let n = weights.len() as f64;
    (ess(&weights) <= resample_threshold_frac * n).then(|| {
        let mut rng = stream::rng(seed, &[tags::RESAMPLE]);
        systematic_resample(ens, &mut rng)
    })
}

fn check_step_inputs(ens: &Ensemble, y: &DVector<f64>, model: &StateSpaceModel) -> Result<()> {
    if ens.is_empty() {
        return Err(Error::InvalidConfig("cannot step an empty ensemble".into()));
    }
    if y.len() != model.n_y() {
        return Err(Error::InvalidConfig(format!(
            "measurement has dimension {}, model says {}",
            y.len(),
            model.n_y()
        )));
    }
    Ok(())
}

/// One step of the KF-realized implicit filter (Algorithm: per-particle KF
/// prediction and update, a concentrated reference draw mapped through the
/// updated moments, and the predictive likelihood as weight increment).
pub fn kf_ipf_step(
    ens: &Ensemble,
    y: &DVector<f64>,
    model: &StateSpaceModel,
    backend: Backend,
    alpha: f64,
    resample_threshold_frac: f64,
    step_seed: u64,
) -> Result<Ensemble> {
    check_step_inputs(ens, y, model)?;
    let resampled = resample_on_entry(ens, resample_threshold_frac, step_seed);
    let input = resampled.as_ref().unwrap_or(ens);
    let sampler = ReferenceSampler::new(model.n_x(), alpha)?;
    let particles = process_bank(input, |i, p| {
        let pred = backend.predict(&p.state, &p.cov, model)?;
        let updated = kf_update(&pred, y)?;
        let mut rng = stream::rng(step_seed, &[tags::PARTICLE, i as u64]);
        let xi = sampler.sample(&mut rng);
        let state = map_particle(&updated, &xi)?;
        let log_weight = ipf_log_weight(p.log_weight, &pred, y)?;
        Ok(Particle {
            state,
            log_weight,
            cov: updated.cov,
        })
    });
    finish_step(particles, ens.step + 1)
}

fn pf_step(
    ens: &Ensemble,
    y: &DVector<f64>,
    model: &StateSpaceModel,
    backend: Backend,
    resample_threshold_frac: f64,
    step_seed: u64,
) -> Result<Ensemble> {
    check_step_inputs(ens, y, model)?;
    let resampled = resample_on_entry(ens, resample_threshold_frac, step_seed);
    let input = resampled.as_ref().unwrap_or(ens);
    let n_x = model.n_x();
    let l_q = cholesky_jittered(model.q())?.unpack();
    let l_r = cholesky_jittered(model.r())?.unpack();
    let log_det_q = log_det_lower(&l_q);
    let log_det_r = log_det_lower(&l_r);
    let particles = process_bank(input, |i, p| {
        let pred = backend.predict(&p.state, &p.cov, model)?;
        let updated = kf_update(&pred, y)?;
        // Full proposal draw from the per-particle posterior Gaussian.
        let l = spd_sqrt(&updated.cov)?;
        if (0..n_x).any(|j| l[(j, j)] <= 0.0) {
            return Err(Error::Conditioning);
        }
        let mut rng = stream::rng(step_seed, &[tags::PARTICLE, i as u64]);
        let z = DVector::from_fn(n_x, |_, _| rng.sample::<f64, _>(StandardNormal));
        let state = &updated.mean + &l * &z;
        let log_q = logpdf_whitened(n_x, log_det_lower(&l), z.norm_squared());

        let predicted = model.transition(&p.state);
        let dq = l_q
            .solve_lower_triangular(&(&state - predicted))
            .ok_or(Error::Conditioning)?;
        let log_transition = logpdf_whitened(n_x, log_det_q, dq.norm_squared());

        let innovation = y - model.measurement(&state);
        let dr = l_r
            .solve_lower_triangular(&innovation)
            .ok_or(Error::Conditioning)?;
        let log_likelihood = logpdf_whitened(y.len(), log_det_r, dr.norm_squared());

        let log_weight = p.log_weight + log_likelihood + log_transition - log_q;
        if log_weight.is_nan() || log_weight == f64::INFINITY {
            return Err(Error::DegenerateWeight);
        }
        Ok(Particle {
            state,
            log_weight,
            cov: updated.cov,
        })
    });
    finish_step(particles, ens.step + 1)
}

/// EKF-proposal particle filter baseline: draws from the per-particle EKF
/// posterior and weights by `likelihood x transition / proposal`.
pub fn ekf_pf_step(
    ens: &Ensemble,
    y: &DVector<f64>,
    model: &StateSpaceModel,
    resample_threshold_frac: f64,
    step_seed: u64,
) -> Result<Ensemble> {
    pf_step(
        ens,
        y,
        model,
        Backend::Ekf,
        resample_threshold_frac,
        step_seed,
    )
}

/// UKF-proposal particle filter baseline.
pub fn ukf_pf_step(
    ens: &Ensemble,
    y: &DVector<f64>,
    model: &StateSpaceModel,
    ut: &UtParams,
    resample_threshold_frac: f64,
    step_seed: u64,
) -> Result<Ensemble> {
    pf_step(
        ens,
        y,
        model,
        Backend::Ukf(*ut),
        resample_threshold_frac,
        step_seed,
    )
}

/// One step of the reference implicit filter: minimize the per-particle
/// target, solve the radial random map, and weight by
/// `|J| exp(-min F)` (the constant reference term drops under
/// normalization). Covariance-free; the inverse Hessian at the mode is
/// stored per particle for diagnostics.
pub fn iipf_step(
    ens: &Ensemble,
    y: &DVector<f64>,
    model: &StateSpaceModel,
    alpha: f64,
    resample_threshold_frac: f64,
    step_seed: u64,
) -> Result<Ensemble> {
    check_step_inputs(ens, y, model)?;
    let resampled = resample_on_entry(ens, resample_threshold_frac, step_seed);
    let input = resampled.as_ref().unwrap_or(ens);
    let sampler = ReferenceSampler::new(model.n_x(), alpha)?;
    let factors = TargetFactors::new(model)?;
    let particles = process_bank(input, |i, p| {
        let target = LogTarget::with_factors(model, &factors, &p.state, y.clone())?;
        let init = target.linearized_init()?;
        let minimum = minimize_log_target(&target, &init)?;
        let mut rng = stream::rng(step_seed, &[tags::PARTICLE, i as u64]);
        let xi = sampler.sample(&mut rng);
        let solution = random_map_solve(&target, &minimum.x, minimum.value, &xi, alpha)?;
        let log_weight = p.log_weight + solution.log_jacobian - solution.phi;
        if log_weight.is_nan() || log_weight == f64::INFINITY {
            return Err(Error::DegenerateWeight);
        }
        Ok(Particle {
            state: solution.x,
            log_weight,
            cov: solution.mode_cov,
        })
    });
    finish_step(particles, ens.step + 1)
}

/// Dispatch one filter step by kind.
pub fn filter_step(
    ens: &Ensemble,
    y: &DVector<f64>,
    model: &StateSpaceModel,
    kind: FilterKind,
    params: &FilterParams,
    step_seed: u64,
) -> Result<Ensemble> {
    let frac = params.resample_threshold_frac;
    match kind {
        FilterKind::Epf => ekf_pf_step(ens, y, model, frac, step_seed),
        FilterKind::Upf => ukf_pf_step(ens, y, model, &params.ut, frac, step_seed),
        FilterKind::ExtendedIpf => {
            kf_ipf_step(ens, y, model, Backend::Ekf, params.alpha, frac, step_seed)
        }
        FilterKind::UnscentedIpf => kf_ipf_step(
            ens,
            y,
            model,
            Backend::Ukf(params.ut),
            params.alpha,
            frac,
            step_seed,
        ),
        FilterKind::IterativeIpf => iipf_step(ens, y, model, params.alpha, frac, step_seed),
    }
}

/// Serializable ensemble snapshot: states, log-weights, and the lower
/// Cholesky factor of each particle covariance (packed rows).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleSnapshot {
    pub step: usize,
    pub particles: Vec<ParticleSnapshot>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParticleSnapshot {
    pub state: Vec<f64>,
    pub log_weight: f64,
    pub cov_cholesky: Vec<Vec<f64>>,
}

impl Ensemble {
    pub fn snapshot(&self) -> Result<EnsembleSnapshot> {
        let particles = self
            .particles
            .iter()
            .map(|p| {
                let l = spd_sqrt(&p.cov)?;
                let rows = (0..l.nrows())
                    .map(|i| (0..=i).map(|j| l[(i, j)]).collect())
                    .collect();
                Ok(ParticleSnapshot {
                    state: p.state.iter().cloned().collect(),
                    log_weight: p.log_weight,
                    cov_cholesky: rows,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EnsembleSnapshot {
            step: self.step,
            particles,
        })
    }

    pub fn from_snapshot(snapshot: &EnsembleSnapshot) -> Result<Ensemble> {
        let particles = snapshot
            .particles
            .iter()
            .map(|p| {
                let dim = p.state.len();
                if p.cov_cholesky.len() != dim {
                    return Err(Error::InvalidConfig(
                        "snapshot Cholesky factor does not match state dimension".into(),
                    ));
                }
                let mut l = DMatrix::zeros(dim, dim);
                for (i, row) in p.cov_cholesky.iter().enumerate() {
                    if row.len() != i + 1 {
                        return Err(Error::InvalidConfig(
                            "snapshot Cholesky rows must be packed lower-triangular".into(),
                        ));
                    }
                    for (j, &v) in row.iter().enumerate() {
                        l[(i, j)] = v;
                    }
                }
                Ok(Particle {
                    state: DVector::from_vec(p.state.clone()),
                    log_weight: p.log_weight,
                    cov: &l * l.transpose(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Ensemble {
            particles,
            step: snapshot.step,
        })
    }
}
