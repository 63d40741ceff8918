//! Nonlinear state-space models and the Lorenz'96 benchmark system.
//!
//! The generic [`StateSpaceModel`] is the discrete system
//! `x_{k+1} = f(x_k) + w_k`, `y_k = h(x_k) + v_k` with zero-mean white noises
//! of covariance `Q` and `R`. The true noise laws live in the samplers and
//! may be non-Gaussian (uniform for the benchmark); filters only ever see
//! `Q` and `R`.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stream::{self, tags};

type Map = Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type JacobianMap = Box<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
type NoiseSampler = Box<dyn Fn(&mut dyn RngCore) -> DVector<f64> + Send + Sync>;

/// A nonlinear state-space model with additive noise.
pub struct StateSpaceModel {
    n_x: usize,
    n_y: usize,
    f: Map,
    h: Map,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    f_jacobian: Option<JacobianMap>,
    h_jacobian: Option<JacobianMap>,
    process_sampler: NoiseSampler,
    measurement_sampler: NoiseSampler,
}

impl StateSpaceModel {
    /// Build a model, validating dimensions and that `Q` and `R` are SPD
    /// (plain Cholesky must succeed, no jitter).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_x: usize,
        n_y: usize,
        f: Map,
        h: Map,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        process_sampler: NoiseSampler,
        measurement_sampler: NoiseSampler,
    ) -> Result<Self> {
        if n_x == 0 || n_y == 0 {
            return Err(Error::InvalidModel(
                "state and measurement dimensions must be positive".into(),
            ));
        }
        check_covariance("Q", &q, n_x)?;
        check_covariance("R", &r, n_y)?;
        Ok(Self {
            n_x,
            n_y,
            f,
            h,
            q,
            r,
            f_jacobian: None,
            h_jacobian: None,
            process_sampler,
            measurement_sampler,
        })
    }

    /// Attach an analytic transition Jacobian (opt-in fast path).
    pub fn with_transition_jacobian(mut self, jac: JacobianMap) -> Self {
        self.f_jacobian = Some(jac);
        self
    }

    /// Attach an analytic measurement Jacobian (opt-in fast path).
    pub fn with_measurement_jacobian(mut self, jac: JacobianMap) -> Self {
        self.h_jacobian = Some(jac);
        self
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn transition(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.f)(x)
    }

    pub fn measurement(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.h)(x)
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn analytic_transition_jacobian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        self.f_jacobian.as_ref().map(|j| j(x))
    }

    pub fn analytic_measurement_jacobian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        self.h_jacobian.as_ref().map(|j| j(x))
    }

    pub fn sample_process_noise(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        (self.process_sampler)(rng)
    }

    pub fn sample_measurement_noise(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        (self.measurement_sampler)(rng)
    }
}

fn check_covariance(name: &str, m: &DMatrix<f64>, dim: usize) -> Result<()> {
    if m.nrows() != dim || m.ncols() != dim {
        return Err(Error::InvalidModel(format!(
            "{name} must be {dim}x{dim}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let scale = m.amax().max(1e-300);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(Error::InvalidModel(format!("{name} is not symmetric")));
    }
    if m.clone().cholesky().is_none() {
        return Err(Error::InvalidModel(format!(
            "{name} is not positive definite"
        )));
    }
    Ok(())
}

/// Configuration of the cyclic Lorenz'96 benchmark system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Lorenz96Config {
    /// State dimension; cyclic indexing needs at least 4.
    pub n_x: usize,
    /// Forcing term.
    pub forcing: f64,
    /// Discretization step of the fourth-order Runge-Kutta scheme.
    pub dt: f64,
    /// Half-width of the uniform process and measurement noises; the implied
    /// covariance is `(halfwidth^2 / 3) * I` per dimension.
    pub noise_halfwidth: f64,
}

impl Default for Lorenz96Config {
    fn default() -> Self {
        Self {
            n_x: 40,
            forcing: 5.0,
            dt: 0.01,
            noise_halfwidth: 0.5,
        }
    }
}

impl Lorenz96Config {
    pub fn validate(&self) -> Result<()> {
        if self.n_x < 4 {
            return Err(Error::InvalidModel(format!(
                "n_x must be at least 4 for cyclic indexing, got {}",
                self.n_x
            )));
        }
        if self.dt.is_nan() || self.dt <= 0.0 {
            return Err(Error::InvalidModel(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if self.noise_halfwidth.is_nan() || self.noise_halfwidth <= 0.0 {
            return Err(Error::InvalidModel(format!(
                "noise_halfwidth must be positive, got {}",
                self.noise_halfwidth
            )));
        }
        Ok(())
    }

    /// Variance of `U(-halfwidth, halfwidth)`.
    pub fn noise_variance(&self) -> f64 {
        self.noise_halfwidth * self.noise_halfwidth / 3.0
    }
}

fn drift_into(x: &[f64], forcing: f64, out: &mut [f64]) {
    let n = x.len();
    for j in 0..n {
        let jp1 = if j + 1 == n { 0 } else { j + 1 };
        let jm1 = if j == 0 { n - 1 } else { j - 1 };
        let jm2 = if j < 2 { j + n - 2 } else { j - 2 };
        out[j] = (x[jp1] - x[jm2]) * x[jm1] - x[j] + forcing;
    }
}

/// Drift of the cyclic system: component `j` is
/// `(x_{j+1} - x_{j-2}) x_{j-1} - x_j + F` with indices wrapping.
pub fn lorenz96_drift(x: &DVector<f64>, forcing: f64) -> Result<DVector<f64>> {
    if x.len() < 4 {
        return Err(Error::InvalidModel(format!(
            "drift needs dimension >= 4, got {}",
            x.len()
        )));
    }
    let mut out = DVector::zeros(x.len());
    drift_into(x.as_slice(), forcing, out.as_mut_slice());
    Ok(out)
}

/// Analytic Jacobian of [`lorenz96_drift`]: tridiagonal-plus-cyclic pattern.
pub fn lorenz96_drift_jacobian(x: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = x.len();
    if n < 4 {
        return Err(Error::InvalidModel(format!(
            "drift Jacobian needs dimension >= 4, got {n}"
        )));
    }
    let mut j = DMatrix::zeros(n, n);
    for row in 0..n {
        let jp1 = (row + 1) % n;
        let jm1 = (row + n - 1) % n;
        let jm2 = (row + n - 2) % n;
        j[(row, row)] += -1.0;
        j[(row, jp1)] += x[jm1];
        j[(row, jm2)] += -x[jm1];
        j[(row, jm1)] += x[jp1] - x[jm2];
    }
    Ok(j)
}

fn rk4_step_unchecked(x: &DVector<f64>, forcing: f64, dt: f64) -> DVector<f64> {
    let n = x.len();
    let mut k1 = DVector::zeros(n);
    let mut k2 = DVector::zeros(n);
    let mut k3 = DVector::zeros(n);
    let mut k4 = DVector::zeros(n);
    let mut stage = DVector::zeros(n);

    drift_into(x.as_slice(), forcing, k1.as_mut_slice());
    stage.copy_from(x);
    stage.axpy(0.5 * dt, &k1, 1.0);
    drift_into(stage.as_slice(), forcing, k2.as_mut_slice());
    stage.copy_from(x);
    stage.axpy(0.5 * dt, &k2, 1.0);
    drift_into(stage.as_slice(), forcing, k3.as_mut_slice());
    stage.copy_from(x);
    stage.axpy(dt, &k3, 1.0);
    drift_into(stage.as_slice(), forcing, k4.as_mut_slice());

    let mut out = x.clone();
    out.axpy(dt / 6.0, &k1, 1.0);
    out.axpy(dt / 3.0, &k2, 1.0);
    out.axpy(dt / 3.0, &k3, 1.0);
    out.axpy(dt / 6.0, &k4, 1.0);
    out
}

/// One deterministic fourth-order Runge-Kutta step of the drift; noise is
/// added by the simulation loop, never inside the stages.
pub fn rk4_step(x: &DVector<f64>, cfg: &Lorenz96Config) -> Result<DVector<f64>> {
    if x.len() != cfg.n_x {
        return Err(Error::InvalidModel(format!(
            "state has dimension {}, config says {}",
            x.len(),
            cfg.n_x
        )));
    }
    if cfg.n_x < 4 {
        return Err(Error::InvalidModel("rk4_step needs dimension >= 4".into()));
    }
    Ok(rk4_step_unchecked(x, cfg.forcing, cfg.dt))
}

/// Analytic Jacobian of [`rk4_step`], chained through the four stages.
pub fn lorenz96_step_jacobian(x: &DVector<f64>, cfg: &Lorenz96Config) -> Result<DMatrix<f64>> {
    let n = x.len();
    if n != cfg.n_x || n < 4 {
        return Err(Error::InvalidModel(
            "step Jacobian dimension mismatch".into(),
        ));
    }
    let dt = cfg.dt;
    let eye = DMatrix::<f64>::identity(n, n);

    let mut k = DVector::zeros(n);
    drift_into(x.as_slice(), cfg.forcing, k.as_mut_slice());
    let mut s2 = x.clone();
    s2.axpy(0.5 * dt, &k, 1.0);
    drift_into(s2.as_slice(), cfg.forcing, k.as_mut_slice());
    let mut s3 = x.clone();
    s3.axpy(0.5 * dt, &k, 1.0);
    drift_into(s3.as_slice(), cfg.forcing, k.as_mut_slice());
    let mut s4 = x.clone();
    s4.axpy(dt, &k, 1.0);

    let a1 = lorenz96_drift_jacobian(x)?;
    let a2 = lorenz96_drift_jacobian(&s2)? * (&eye + 0.5 * dt * &a1);
    let a3 = lorenz96_drift_jacobian(&s3)? * (&eye + 0.5 * dt * &a2);
    let a4 = lorenz96_drift_jacobian(&s4)? * (&eye + dt * &a3);

    Ok(&eye + (dt / 6.0) * (&a1 + 2.0 * &a2 + 2.0 * &a3 + &a4))
}

fn measure_unchecked(x: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(x.len() / 2, |l, _| {
        let v = x[2 * l];
        v + v.sin()
    })
}

/// Partial nonlinear measurement: observes every other state component
/// through `x + sin(x)`.
pub fn measure(x: &DVector<f64>) -> Result<DVector<f64>> {
    if !x.len().is_multiple_of(2) {
        return Err(Error::InvalidModel(format!(
            "measurement needs an even state dimension, got {}",
            x.len()
        )));
    }
    Ok(measure_unchecked(x))
}

/// Analytic Jacobian of [`measure`]: `1 + cos(x)` on the observed entries.
pub fn measure_jacobian(x: &DVector<f64>) -> Result<DMatrix<f64>> {
    if !x.len().is_multiple_of(2) {
        return Err(Error::InvalidModel(
            "measurement Jacobian needs an even state dimension".into(),
        ));
    }
    let n = x.len();
    let mut h = DMatrix::zeros(n / 2, n);
    for l in 0..n / 2 {
        h[(l, 2 * l)] = 1.0 + x[2 * l].cos();
    }
    Ok(h)
}

fn uniform_noise_sampler(dim: usize, halfwidth: f64) -> NoiseSampler {
    Box::new(move |rng: &mut dyn RngCore| {
        DVector::from_fn(dim, |_, _| rng.random_range(-halfwidth..halfwidth))
    })
}

/// Assemble the benchmark model: RK4-discretized drift, every-other-component
/// measurement, and uniform noises with matching declared covariances.
/// Jacobians default to finite differences.
pub fn lorenz96_model(cfg: &Lorenz96Config) -> Result<StateSpaceModel> {
    cfg.validate()?;
    if !cfg.n_x.is_multiple_of(2) {
        return Err(Error::InvalidModel(format!(
            "benchmark model needs an even n_x (every other component observed), got {}",
            cfg.n_x
        )));
    }
    let n_x = cfg.n_x;
    let n_y = n_x / 2;
    let variance = cfg.noise_variance();
    let q = DMatrix::from_diagonal_element(n_x, n_x, variance);
    let r = DMatrix::from_diagonal_element(n_y, n_y, variance);
    let f_cfg = *cfg;
    let f: Map = Box::new(move |x| rk4_step_unchecked(x, f_cfg.forcing, f_cfg.dt));
    let h: Map = Box::new(measure_unchecked);
    StateSpaceModel::new(
        n_x,
        n_y,
        f,
        h,
        q,
        r,
        uniform_noise_sampler(n_x, cfg.noise_halfwidth),
        uniform_noise_sampler(n_y, cfg.noise_halfwidth),
    )
}

/// [`lorenz96_model`] with the analytic step and measurement Jacobians
/// attached.
pub fn lorenz96_model_analytic(cfg: &Lorenz96Config) -> Result<StateSpaceModel> {
    let jac_cfg = *cfg;
    Ok(lorenz96_model(cfg)?
        .with_transition_jacobian(Box::new(move |x| {
            lorenz96_step_jacobian(x, &jac_cfg).expect("dimension validated at construction")
        }))
        .with_measurement_jacobian(Box::new(|x| {
            measure_jacobian(x).expect("dimension validated at construction")
        })))
}

/// A simulated truth: `T + 1` states (including the initial one) and `T`
/// measurements.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub measurements: Vec<DVector<f64>>,
    pub seed: u64,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.measurements.len()
    }

    /// CSV with header `k, x_1..x_n, y_1..y_m`; the measurement cells are
    /// empty at `k = 0`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let n_x = self.states[0].len();
        let n_y = self.measurements.first().map_or(0, |y| y.len());
        write!(w, "k")?;
        for j in 1..=n_x {
            write!(w, ",x_{j}")?;
        }
        for j in 1..=n_y {
            write!(w, ",y_{j}")?;
        }
        writeln!(w)?;
        for (k, x) in self.states.iter().enumerate() {
            write!(w, "{k}")?;
            for v in x.iter() {
                write!(w, ",{v}")?;
            }
            if k == 0 {
                for _ in 0..n_y {
                    write!(w, ",")?;
                }
            } else {
                for v in self.measurements[k - 1].iter() {
                    write!(w, ",{v}")?;
                }
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// JSON sidecar written next to a trajectory CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySidecar {
    pub config: Lorenz96Config,
    pub seed: u64,
}

/// Simulate `x_{k+1} = f(x_k) + w_k`, `y_k = h(x_k) + v_k` for `k = 1..=steps`.
///
/// Process and measurement noises draw from disjoint streams derived from
/// `seed`, so the states do not depend on how many measurements are taken.
pub fn simulate_truth(
    model: &StateSpaceModel,
    x0: &DVector<f64>,
    steps: usize,
    seed: u64,
) -> Result<Trajectory> {
    if x0.len() != model.n_x() {
        return Err(Error::InvalidModel(format!(
            "initial state has dimension {}, model says {}",
            x0.len(),
            model.n_x()
        )));
    }
    let mut process_rng = stream::rng(seed, &[tags::PROCESS_NOISE]);
    let mut measurement_rng = stream::rng(seed, &[tags::MEASUREMENT_NOISE]);
    let mut states = Vec::with_capacity(steps + 1);
    let mut measurements = Vec::with_capacity(steps);
    states.push(x0.clone());
    for k in 0..steps {
        let mut next = model.transition(&states[k]);
        next += model.sample_process_noise(&mut process_rng);
        let mut y = model.measurement(&next);
        y += model.sample_measurement_noise(&mut measurement_rng);
        states.push(next);
        measurements.push(y);
    }
    Ok(Trajectory {
        states,
        measurements,
        seed,
    })
}

/// Draw an initial state near the attractor: the forcing fixed point plus a
/// unit-normal perturbation, then `spinup_steps` noiseless RK4 steps.
pub fn attractor_initial_state(
    cfg: &Lorenz96Config,
    seed: u64,
    spinup_steps: usize,
) -> Result<DVector<f64>> {
    cfg.validate()?;
    let mut rng = stream::rng(seed, &[tags::TRUTH_INIT]);
    let mut x = DVector::from_fn(cfg.n_x, |_, _| {
        cfg.forcing + rng.sample::<f64, _>(StandardNormal)
    });
    for _ in 0..spinup_steps {
        x = rk4_step_unchecked(&x, cfg.forcing, cfg.dt);
    }
    Ok(x)
}
