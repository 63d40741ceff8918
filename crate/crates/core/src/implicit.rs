//! Implicit importance sampling: the concentrated reference sampler, the
//! Gaussian particle map and weights used by the KF-realized filters, and the
//! optimization + random-map solver behind the iterative reference filter.
//!
//! The per-particle target is
//! `F(X) = -log( p(y | X) p(X | x_prev) )` built from Gaussian surrogate
//! densities `N(f(x_prev), Q)` and `N(h(X), R)`; the true (possibly uniform)
//! noise laws appear only in truth simulation. A reference draw `xi` from
//! `N(0, alpha I)` is mapped to a particle by solving
//! `F(X) - min F = |xi|^2 / (2 alpha)` along a random direction.

use std::borrow::Cow;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gaussian::{
    cholesky_jittered, gaussian_case_study_sample, log_det_lower, spd_sqrt, GaussianMoments,
};
use crate::kf_bank::{measurement_jacobian, predictive_loglik, PredictedMoments};
use crate::models::StateSpaceModel;

/// Draws from `N(0, alpha I)`. Small `alpha` concentrates draws near the
/// mode of the standard reference; `alpha = 0` degenerates to the zero
/// vector (deterministic particles).
#[derive(Debug, Clone, Copy)]
pub struct ReferenceSampler {
    dim: usize,
    alpha: f64,
}

impl ReferenceSampler {
    pub fn new(dim: usize, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidConfig(format!(
                "reference alpha must lie in [0, 1], got {alpha}"
            )));
        }
        Ok(Self { dim, alpha })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        if self.alpha == 0.0 {
            return DVector::zeros(self.dim);
        }
        let scale = self.alpha.sqrt();
        DVector::from_fn(self.dim, |_, _| {
            scale * rng.sample::<f64, _>(StandardNormal)
        })
    }
}

/// Map a reference draw through KF-updated moments: `x = mean + sqrt(cov) xi`.
pub fn map_particle(moments: &GaussianMoments, xi: &DVector<f64>) -> Result<DVector<f64>> {
    gaussian_case_study_sample(moments, xi)
}

/// Weight recursion of the KF-realized filters: the increment is the
/// predictive likelihood `p(y_k | x_{k-1}^i)` under the particle's
/// innovation Gaussian. Normalization is deferred to [`normalize_weights`].
pub fn ipf_log_weight(w_prev_log: f64, pred: &PredictedMoments, y: &DVector<f64>) -> Result<f64> {
    let loglik = predictive_loglik(pred, y)?;
    let w = w_prev_log + loglik;
    if w.is_nan() || w == f64::INFINITY {
        return Err(Error::DegenerateWeight);
    }
    Ok(w)
}

/// Log-sum-exp stabilized normalization. `-inf` entries map to zero weight;
/// if nothing is finite the ensemble is fully degenerate.
pub fn normalize_weights(log_weights: &[f64]) -> Result<Vec<f64>> {
    if log_weights.is_empty() {
        return Err(Error::InvalidConfig("no weights to normalize".into()));
    }
    if log_weights
        .iter()
        .any(|v| v.is_nan() || *v == f64::INFINITY)
    {
        return Err(Error::DegenerateWeight);
    }
    let max = log_weights
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::TotalDegeneracy);
    }
    let unnormalized: Vec<f64> = log_weights.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = unnormalized.iter().sum();
    Ok(unnormalized.into_iter().map(|w| w / total).collect())
}

fn diagonal_of(m: &DMatrix<f64>) -> Option<DVector<f64>> {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..n {
            if i != j && m[(i, j)] != 0.0 {
                return None;
            }
        }
    }
    Some(DVector::from_fn(n, |i, _| m[(i, i)]))
}

/// Noise factorizations shared by every particle of a step: Cholesky factors
/// of `Q` and `R`, `Q^{-1}`, and the joint normalization constant. Diagonal
/// covariances get a scaling fast path instead of triangular solves.
#[derive(Debug, Clone)]
pub struct TargetFactors {
    l_q: DMatrix<f64>,
    l_r: DMatrix<f64>,
    q_inv: DMatrix<f64>,
    q_inv_diag: Option<DVector<f64>>,
    q_whiten_diag: Option<DVector<f64>>,
    r_whiten_diag: Option<DVector<f64>>,
    log_norm: f64,
}

impl TargetFactors {
    pub fn new(model: &StateSpaceModel) -> Result<Self> {
        let l_q = cholesky_jittered(model.q())?.unpack();
        let l_r = cholesky_jittered(model.r())?.unpack();
        let n = model.n_x() as f64;
        let m = model.n_y() as f64;
        let log_norm = 0.5 * (n + m) * (2.0 * std::f64::consts::PI).ln()
            + log_det_lower(&l_q)
            + log_det_lower(&l_r);
        let q_diag = diagonal_of(model.q());
        let r_diag = diagonal_of(model.r());
        let q_inv = match &q_diag {
            Some(d) => DMatrix::from_diagonal(&d.map(|v| 1.0 / v)),
            None => {
                let identity = DMatrix::identity(model.n_x(), model.n_x());
                let w = l_q
                    .solve_lower_triangular(&identity)
                    .ok_or(Error::Conditioning)?;
                w.transpose() * w
            }
        };
        Ok(Self {
            l_q,
            l_r,
            q_inv,
            q_inv_diag: q_diag.as_ref().map(|d| d.map(|v| 1.0 / v)),
            q_whiten_diag: q_diag.map(|d| d.map(|v| 1.0 / v.sqrt())),
            r_whiten_diag: r_diag.map(|d| d.map(|v| 1.0 / v.sqrt())),
            log_norm,
        })
    }
}

fn whiten_in_place(
    v: &mut DVector<f64>,
    l: &DMatrix<f64>,
    diag: &Option<DVector<f64>>,
) -> Result<()> {
    match diag {
        Some(scale) => {
            v.component_mul_assign(scale);
            Ok(())
        }
        None => {
            if l.solve_lower_triangular_mut(v) {
                Ok(())
            } else {
                Err(Error::Conditioning)
            }
        }
    }
}

/// The negative log of `p(y | X) p(X | x_prev)` under the Gaussian
/// surrogates, with its normalization constant so that `exp(-F)` is the
/// unnormalized joint density.
pub struct LogTarget<'a> {
    model: &'a StateSpaceModel,
    factors: Cow<'a, TargetFactors>,
    y: DVector<f64>,
    f_prev: DVector<f64>,
}

impl<'a> LogTarget<'a> {
    pub fn new(model: &'a StateSpaceModel, x_prev: &DVector<f64>, y: DVector<f64>) -> Result<Self> {
        let factors = TargetFactors::new(model)?;
        Self::build(model, Cow::Owned(factors), x_prev, y)
    }

    /// Variant borrowing precomputed factors, shared across the particle
    /// bank within a step.
    pub fn with_factors(
        model: &'a StateSpaceModel,
        factors: &'a TargetFactors,
        x_prev: &DVector<f64>,
        y: DVector<f64>,
    ) -> Result<Self> {
        Self::build(model, Cow::Borrowed(factors), x_prev, y)
    }

    fn build(
        model: &'a StateSpaceModel,
        factors: Cow<'a, TargetFactors>,
        x_prev: &DVector<f64>,
        y: DVector<f64>,
    ) -> Result<Self> {
        if y.len() != model.n_y() || x_prev.len() != model.n_x() {
            return Err(Error::InvalidConfig(
                "log-target dimensions do not match the model".into(),
            ));
        }
        let f_prev = model.transition(x_prev);
        Ok(Self {
            model,
            factors,
            y,
            f_prev,
        })
    }

    pub fn predicted_mean(&self) -> &DVector<f64> {
        &self.f_prev
    }

    #[cfg(test)]
    pub(crate) fn log_norm(&self) -> f64 {
        self.factors.log_norm
    }

    fn whiten_transition(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let mut v = x - &self.f_prev;
        whiten_in_place(&mut v, &self.factors.l_q, &self.factors.q_whiten_diag)?;
        Ok(v)
    }

    fn whiten_innovation(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let mut v = &self.y - self.model.measurement(x);
        whiten_in_place(&mut v, &self.factors.l_r, &self.factors.r_whiten_diag)?;
        Ok(v)
    }

    /// `R^{-1} (y - h(x))`.
    fn weighted_innovation(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let mut v = &self.y - self.model.measurement(x);
        match &self.factors.r_whiten_diag {
            Some(scale) => {
                v.component_mul_assign(scale);
                v.component_mul_assign(scale);
            }
            None => {
                if !self.factors.l_r.solve_lower_triangular_mut(&mut v)
                    || !self.factors.l_r.tr_solve_lower_triangular_mut(&mut v)
                {
                    return Err(Error::Conditioning);
                }
            }
        }
        Ok(v)
    }

    pub fn eval(&self, x: &DVector<f64>) -> Result<f64> {
        let dq = self.whiten_transition(x)?;
        let dr = self.whiten_innovation(x)?;
        Ok(0.5 * (dq.norm_squared() + dr.norm_squared()) + self.factors.log_norm)
    }

    /// `Q^{-1}(x - f_prev) - H^T R^{-1} (y - h(x))`.
    pub fn grad(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let h_jac = measurement_jacobian(self.model, x)?;
        let weighted = self.weighted_innovation(x)?;
        let prior_pull = match &self.factors.q_inv_diag {
            Some(diag) => (x - &self.f_prev).component_mul(diag),
            None => &self.factors.q_inv * (x - &self.f_prev),
        };
        Ok(prior_pull - h_jac.tr_mul(&weighted))
    }

    /// Conditional mean of the target linearized around the predicted mean:
    /// `f_prev + Q H^T (H Q H^T + R)^{-1} (y - h(f_prev))`. For a linear
    /// measurement map this is the exact minimizer, which makes it a good
    /// optimization start.
    pub fn linearized_init(&self) -> Result<DVector<f64>> {
        let h_jac = measurement_jacobian(self.model, &self.f_prev)?;
        let p_xy = match &self.factors.q_inv_diag {
            Some(diag) => {
                let mut m = h_jac.transpose();
                for (i, q_inv) in diag.iter().enumerate() {
                    m.row_mut(i).scale_mut(1.0 / q_inv);
                }
                m
            }
            None => self.model.q() * h_jac.transpose(),
        };
        let p_y = &h_jac * &p_xy + self.model.r();
        let ch = cholesky_jittered(&p_y).map_err(|_| Error::Conditioning)?;
        let innovation = &self.y - self.model.measurement(&self.f_prev);
        Ok(&self.f_prev + &p_xy * ch.solve(&innovation))
    }

    fn gn_hessian_from_jacobian(&self, h_jac: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let whitened = match &self.factors.r_whiten_diag {
            Some(scale) => {
                let mut w = h_jac.clone();
                for (r, s) in scale.iter().enumerate() {
                    w.row_mut(r).scale_mut(*s);
                }
                w
            }
            None => self
                .factors
                .l_r
                .solve_lower_triangular(h_jac)
                .ok_or(Error::Conditioning)?,
        };
        let mut hess = whitened.tr_mul(&whitened);
        match &self.factors.q_inv_diag {
            Some(diag) => {
                for (i, v) in diag.iter().enumerate() {
                    hess[(i, i)] += v;
                }
            }
            None => hess += &self.factors.q_inv,
        }
        Ok(hess)
    }

    /// Gauss-Newton Hessian `Q^{-1} + H^T R^{-1} H`.
    pub fn gn_hessian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let h_jac = measurement_jacobian(self.model, x)?;
        self.gn_hessian_from_jacobian(&h_jac)
    }

    /// Gradient and Gauss-Newton Hessian sharing one Jacobian evaluation.
    fn grad_and_gn_hessian(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let h_jac = measurement_jacobian(self.model, x)?;
        let weighted = self.weighted_innovation(x)?;
        let prior_pull = match &self.factors.q_inv_diag {
            Some(diag) => (x - &self.f_prev).component_mul(diag),
            None => &self.factors.q_inv * (x - &self.f_prev),
        };
        let grad = prior_pull - h_jac.tr_mul(&weighted);
        let hess = self.gn_hessian_from_jacobian(&h_jac)?;
        Ok((grad, hess))
    }
}

#[derive(Debug, Clone)]
pub struct MinimizeResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

const GRAD_TOL: f64 = 1e-8;
const MAX_GN_ITERATIONS: usize = 100;
const ARMIJO_C: f64 = 1e-4;

/// Gauss-Newton with Armijo backtracking (halving steps). Terminates when
/// the gradient max-norm drops below 1e-8 or after 100 iterations; a
/// non-converged run still returns its best iterate, flagged.
pub fn minimize_log_target(target: &LogTarget, x_init: &DVector<f64>) -> Result<MinimizeResult> {
    let mut x = x_init.clone();
    let mut value = target.eval(&x)?;
    for iteration in 0..MAX_GN_ITERATIONS {
        let (grad, hess) = target.grad_and_gn_hessian(&x)?;
        if grad.amax() < GRAD_TOL {
            return Ok(MinimizeResult {
                x,
                value,
                iterations: iteration,
                converged: true,
            });
        }
        let ch = cholesky_jittered(&hess)?;
        let step = -ch.solve(&grad);
        let slope = grad.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-14 {
            let candidate = &x + t * &step;
            let cand_value = target.eval(&candidate)?;
            if cand_value <= value + ARMIJO_C * t * slope {
                x = candidate;
                value = cand_value;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Ok(MinimizeResult {
                x,
                value,
                iterations: iteration,
                converged: false,
            });
        }
    }
    Ok(MinimizeResult {
        x,
        value,
        iterations: MAX_GN_ITERATIONS,
        converged: false,
    })
}

/// A particle produced by the random-map solve.
#[derive(Debug, Clone)]
pub struct ImplicitSolution {
    pub x: DVector<f64>,
    /// `min F` carried over from the optimization.
    pub phi: f64,
    /// `log |det dX/dxi|` of the full reference-to-particle map.
    pub log_jacobian: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Inverse Gauss-Newton Hessian at the mode, kept for diagnostics.
    pub mode_cov: DMatrix<f64>,
}

/// Evaluates `F` along the ray `X = mu + t dir`. The transition term is an
/// exact quadratic in `t`, so only the measurement residual needs the model.
struct RayTarget<'t, 'm> {
    target: &'t LogTarget<'m>,
    mu: &'t DVector<f64>,
    dir: &'t DVector<f64>,
    half_a2: f64,
    ab: f64,
    b2: f64,
}

impl<'t, 'm> RayTarget<'t, 'm> {
    fn new(target: &'t LogTarget<'m>, mu: &'t DVector<f64>, dir: &'t DVector<f64>) -> Result<Self> {
        let a = target.whiten_transition(mu)?;
        let mut b = dir.clone();
        whiten_in_place(&mut b, &target.factors.l_q, &target.factors.q_whiten_diag)?;
        Ok(Self {
            target,
            mu,
            dir,
            half_a2: 0.5 * a.norm_squared(),
            ab: a.dot(&b),
            b2: b.norm_squared(),
        })
    }

    fn value(&self, t: f64) -> Result<f64> {
        let x = self.point(t);
        let dr = self.target.whiten_innovation(&x)?;
        Ok(0.5 * dr.norm_squared()
            + self.half_a2
            + t * self.ab
            + 0.5 * t * t * self.b2
            + self.target.factors.log_norm)
    }

    fn point(&self, t: f64) -> DVector<f64> {
        let mut x = self.mu.clone();
        x.axpy(t, self.dir, 1.0);
        x
    }
}

const RADIAL_TOL: f64 = 1e-11;
const RADIAL_MAX_ITERATIONS: usize = 200;
const RADIAL_MAX_EXPANSION: f64 = 1e12;

/// Solve `F(mu + t dir) - phi = rho` for `t > 0` by bracketing plus
/// secant-accelerated bisection. `g(0) = -rho < 0` by construction.
fn solve_radial(ray: &RayTarget, phi: f64, rho: f64, t_init: f64) -> Result<(f64, usize, bool)> {
    let level = phi + rho;
    let mut lo = 0.0_f64;
    let mut hi: Option<f64> = None;
    let mut t = t_init.max(1e-12);
    let mut prev: Option<(f64, f64)> = Some((0.0, -rho));
    for iteration in 1..=RADIAL_MAX_ITERATIONS {
        let g = ray.value(t)? - level;
        if g.abs() < RADIAL_TOL {
            return Ok((t, iteration, true));
        }
        if g < 0.0 {
            lo = lo.max(t);
        } else {
            hi = Some(hi.map_or(t, |h: f64| h.min(t)));
        }
        let secant = prev.and_then(|(tp, gp)| {
            let denom = g - gp;
            (denom.abs() > 1e-300).then(|| t - g * (t - tp) / denom)
        });
        prev = Some((t, g));
        t = match hi {
            Some(h) => match secant {
                Some(s) if s > lo && s < h => s,
                _ => 0.5 * (lo + h),
            },
            None => {
                let doubled = t * 2.0;
                if doubled > RADIAL_MAX_EXPANSION {
                    return Err(Error::MapSolve);
                }
                match secant {
                    Some(s) if s > t && s < doubled => s,
                    _ => doubled,
                }
            }
        };
    }
    Ok((t, RADIAL_MAX_ITERATIONS, false))
}

/// Map a reference draw to a particle by solving the radial implicit
/// equation `F(mu + t L xi) - phi = |xi|^2 / (2 alpha)` with
/// `L = sqrt(H^{-1})`, `H` the Gauss-Newton Hessian at the mode; for an
/// exactly quadratic target the solution is `t = 1/sqrt(alpha)`.
///
/// The map Jacobian is the rank-one update `t L + (L xi) (grad t)^T`, so by
/// the matrix determinant lemma and implicit differentiation of the radial
/// equation,
/// `log |J| = log det L + (n-1) log t + log(|xi|^2 / alpha) - log(dF/dt)`.
/// The finite-difference route through perturbed solves is kept as a test
/// oracle for this formula.
pub fn random_map_solve(
    target: &LogTarget,
    mu: &DVector<f64>,
    phi: f64,
    xi: &DVector<f64>,
    alpha: f64,
) -> Result<ImplicitSolution> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "random-map alpha must lie in (0, 1], got {alpha}"
        )));
    }
    let n = mu.len();
    let hess = target.gn_hessian(mu)?;
    let ch = cholesky_jittered(&hess)?;
    let log_det_h = 2.0 * log_det_lower(ch.l_dirty());
    let mode_cov = ch.inverse();
    let l = spd_sqrt(&mode_cov)?;

    if xi.norm() < 1e-14 {
        // Removable singularity of the radial parametrization: the local
        // quadratic map is X = mu + L xi / sqrt(alpha).
        let log_jacobian = -0.5 * n as f64 * alpha.ln() - 0.5 * log_det_h;
        return Ok(ImplicitSolution {
            x: mu.clone(),
            phi,
            log_jacobian,
            iterations: 0,
            converged: true,
            mode_cov,
        });
    }

    let dir = &l * xi;
    let ray = RayTarget::new(target, mu, &dir)?;
    let xi_norm_sq = xi.norm_squared();
    let rho = xi_norm_sq / (2.0 * alpha);
    let (t, iterations, converged) = solve_radial(&ray, phi, rho, 1.0)?;
    let x = ray.point(t);

    // dF/dt along the ray at the solution; positive where the level set is
    // crossed from below.
    let slope = target.grad(&x)?.dot(&dir);
    if slope.abs() <= 1e-300 || slope.is_nan() {
        return Err(Error::MapSolve);
    }
    let log_jacobian =
        -0.5 * log_det_h + (n as f64 - 1.0) * t.ln() + (xi_norm_sq / alpha).ln() - slope.abs().ln();

    Ok(ImplicitSolution {
        x,
        phi,
        log_jacobian,
        iterations,
        converged,
        mode_cov,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream;
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;

    fn scalar_model(q: f64, r: f64) -> StateSpaceModel {
        StateSpaceModel::new(
            1,
            1,
            Box::new(|x: &DVector<f64>| x.clone()),
            Box::new(|x: &DVector<f64>| x.clone()),
            DMatrix::from_vec(1, 1, vec![q]),
            DMatrix::from_vec(1, 1, vec![r]),
            Box::new(|_| DVector::zeros(1)),
            Box::new(|_| DVector::zeros(1)),
        )
        .unwrap()
    }

    fn linear_model(
        a: DMatrix<f64>,
        h: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
    ) -> StateSpaceModel {
        let n_x = a.nrows();
        let n_y = h.nrows();
        let a2 = a.clone();
        let h2 = h.clone();
        StateSpaceModel::new(
            n_x,
            n_y,
            Box::new(move |x| &a2 * x),
            Box::new(move |x| &h2 * x),
            q,
            r,
            Box::new(move |_| DVector::zeros(n_x)),
            Box::new(move |_| DVector::zeros(n_y)),
        )
        .unwrap()
    }

    fn random_linear_target(
        seed: u64,
        n: usize,
        m: usize,
    ) -> (StateSpaceModel, DVector<f64>, DVector<f64>) {
        let mut rng = stream::rng(seed, &[]);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.5..0.5));
        let h = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        // Non-diagonal SPD Q and R exercise the dense solve path.
        let q = {
            let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.4..0.4));
            &b * b.transpose() + DMatrix::<f64>::identity(n, n) * rng.random_range(0.3..1.0)
        };
        let r = {
            let b = DMatrix::from_fn(m, m, |_, _| rng.random_range(-0.4..0.4));
            &b * b.transpose() + DMatrix::<f64>::identity(m, m) * rng.random_range(0.3..1.0)
        };
        let model = linear_model(a, h, q, r);
        let x_prev = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
        (model, x_prev, y)
    }

    #[test]
    fn reference_sampler_moments() {
        let alpha = 0.05;
        let sampler = ReferenceSampler::new(3, alpha).unwrap();
        let mut rng = stream::rng(17, &[]);
        let n = 100_000;
        let mut sq: DVector<f64> = DVector::zeros(3);
        let mut cross = 0.0;
        for _ in 0..n {
            let xi = sampler.sample(&mut rng);
            for j in 0..3 {
                sq[j] += xi[j] * xi[j];
            }
            cross += xi[0] * xi[1];
        }
        for j in 0..3 {
            let var = sq[j] / n as f64;
            assert!((var - alpha).abs() / alpha < 0.05, "var[{j}] = {var}");
        }
        assert!((cross / n as f64).abs() < 0.05 * alpha);
    }

    #[test]
    fn reference_sampler_tiny_alpha_degenerates() {
        let sampler = ReferenceSampler::new(4, 1e-30).unwrap();
        let mut rng = stream::rng(1, &[]);
        assert!(sampler.sample(&mut rng).norm() < 1e-10);
        let zero = ReferenceSampler::new(4, 0.0).unwrap();
        assert_eq!(zero.sample(&mut rng), DVector::zeros(4));
    }

    #[test]
    fn reference_sampler_replays_stream() {
        let sampler = ReferenceSampler::new(5, 0.3).unwrap();
        let a = sampler.sample(&mut stream::rng(9, &[2]));
        let b = sampler.sample(&mut stream::rng(9, &[2]));
        assert_eq!(a, b);
    }

    #[test]
    fn map_particle_basics() {
        let m = GaussianMoments::new(DVector::from_vec(vec![2.0, -1.0]), DMatrix::identity(2, 2));
        assert_eq!(map_particle(&m, &DVector::zeros(2)).unwrap(), m.mean);
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        let shifted = map_particle(&m, &e1).unwrap();
        assert!((shifted - (&m.mean + e1)).amax() < 1e-15);
    }

    #[test]
    fn map_particle_law_scales_with_alpha() {
        // Over many draws xi ~ N(0, alpha I), the sample covariance of the
        // mapped particles approaches alpha * cov.
        let alpha = 0.05;
        let cov = DMatrix::from_vec(2, 2, vec![1.5, 0.4, 0.4, 0.8]);
        let moments = GaussianMoments::new(DVector::zeros(2), cov.clone());
        let sampler = ReferenceSampler::new(2, alpha).unwrap();
        let mut rng = stream::rng(23, &[]);
        let n = 100_000;
        let mut acc = DMatrix::zeros(2, 2);
        for _ in 0..n {
            let xi = sampler.sample(&mut rng);
            let x = map_particle(&moments, &xi).unwrap();
            acc += &x * x.transpose();
        }
        let emp = acc / n as f64;
        let want = &cov * alpha;
        assert!((emp - &want).amax() / want.amax() < 0.03);
    }

    #[test]
    fn normalize_weights_examples() {
        let w = normalize_weights(&[3.7, 3.7, 3.7, 3.7]).unwrap();
        for v in &w {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let w = normalize_weights(&[0.0, f64::NEG_INFINITY]).unwrap();
        assert_eq!(w, vec![1.0, 0.0]);
        let w =
            normalize_weights(&[1.0_f64.ln(), 2.0_f64.ln(), 3.0_f64.ln(), 4.0_f64.ln()]).unwrap();
        let want = [0.1, 0.2, 0.3, 0.4];
        for (got, want) in w.iter().zip(want) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_weights_total_degeneracy() {
        match normalize_weights(&[f64::NEG_INFINITY, f64::NEG_INFINITY]) {
            Err(Error::TotalDegeneracy) => {}
            other => panic!("expected total degeneracy, got {other:?}"),
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        #[test]
        fn normalize_weights_shift_invariant(
            raw in proptest::collection::vec(-30.0_f64..30.0, 1..12),
            shift in -200.0_f64..200.0,
        ) {
            let base = normalize_weights(&raw).unwrap();
            let shifted_input: Vec<f64> = raw.iter().map(|v| v + shift).collect();
            let shifted = normalize_weights(&shifted_input).unwrap();
            for (a, b) in base.iter().zip(&shifted) {
                proptest::prop_assert!((a - b).abs() < 1e-12);
            }
            let total: f64 = base.iter().sum();
            proptest::prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ipf_weight_examples() {
        // Two particles with log-likelihoods (0, log 3) and equal priors
        // normalize to (0.25, 0.75); a single particle always carries
        // weight 1.
        let w = normalize_weights(&[0.0, 3.0_f64.ln()]).unwrap();
        assert!((w[0] - 0.25).abs() < 1e-12);
        assert!((w[1] - 0.75).abs() < 1e-12);
        let single = normalize_weights(&[-123.4]).unwrap();
        assert_eq!(single, vec![1.0]);
    }

    #[test]
    fn gaussian_factor_weight_term_is_particle_independent() {
        // For the conditional Gaussian factor, the implicit-sampling term
        // |J| exp(-min F_c + min s) is identically 1: log |J| = 0.5 log det P
        // cancels against the mode value of the factor. This is why the
        // KF-realized weight reduces to the predictive likelihood alone.
        let mut rng = stream::rng(40, &[]);
        for _ in 0..10 {
            let n = 3;
            let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let cov = &b * b.transpose() + DMatrix::<f64>::identity(n, n) * 0.3;
            let l = spd_sqrt(&cov).unwrap();
            let log_j = log_det_lower(&l);
            let min_f_c =
                0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln() + 0.5 * cov.determinant().ln();
            let min_s = 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
            let log_term = log_j - min_f_c + min_s;
            assert!(log_term.abs() < 1e-10, "got {log_term}");
        }
    }

    #[test]
    fn log_target_gradient_matches_finite_differences() {
        let cfg = crate::models::Lorenz96Config {
            n_x: 8,
            ..Default::default()
        };
        let model = crate::models::lorenz96_model(&cfg).unwrap();
        let mut rng = stream::rng(50, &[]);
        let mut worst = 0.0_f64;
        for _ in 0..50 {
            let x_prev = DVector::from_fn(8, |_, _| rng.random_range(-2.0..7.0));
            let y = DVector::from_fn(4, |_, _| rng.random_range(-2.0..7.0));
            let target = LogTarget::new(&model, &x_prev, y).unwrap();
            let x = DVector::from_fn(8, |_, _| rng.random_range(-2.0..7.0));
            let grad = target.grad(&x).unwrap();
            let fd =
                crate::kf_bank::jacobian(|v| DVector::from_vec(vec![target.eval(v).unwrap()]), &x)
                    .unwrap();
            let rel = (grad.transpose() - fd.row(0)).amax() / grad.amax().max(1.0);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-5, "worst relative gradient error {worst}");
    }

    #[test]
    fn dense_and_diagonal_factor_paths_agree() {
        // Same diagonal noise expressed through both code paths.
        let cfg = crate::models::Lorenz96Config {
            n_x: 6,
            ..Default::default()
        };
        let model = crate::models::lorenz96_model(&cfg).unwrap();
        let mut factors = TargetFactors::new(&model).unwrap();
        assert!(factors.q_whiten_diag.is_some());
        let x_prev = DVector::from_element(6, 5.0);
        let y = DVector::from_vec(vec![4.0, 5.5, 4.5]);
        let fast = LogTarget::with_factors(&model, &factors, &x_prev, y.clone()).unwrap();
        let x = DVector::from_vec(vec![4.9, 5.2, 5.0, 4.8, 5.1, 5.3]);
        let v_fast = fast.eval(&x).unwrap();
        let g_fast = fast.grad(&x).unwrap();
        let h_fast = fast.gn_hessian(&x).unwrap();

        factors.q_whiten_diag = None;
        factors.q_inv_diag = None;
        factors.r_whiten_diag = None;
        let dense = LogTarget {
            model: &model,
            factors: Cow::Owned(factors),
            y,
            f_prev: model.transition(&x_prev),
        };
        assert!((v_fast - dense.eval(&x).unwrap()).abs() < 1e-12);
        assert!((g_fast - dense.grad(&x).unwrap()).amax() < 1e-10);
        assert!((h_fast - dense.gn_hessian(&x).unwrap()).amax() < 1e-10);
    }

    #[test]
    fn minimize_scalar_toy() {
        // f = h = id, Q = R = 1, x_prev = 0, y = 2: F(x) = x^2/2 + (2-x)^2/2
        // + log 2pi, minimized at 1 with value 1 + log 2pi.
        let model = scalar_model(1.0, 1.0);
        let target =
            LogTarget::new(&model, &DVector::zeros(1), DVector::from_vec(vec![2.0])).unwrap();
        let result = minimize_log_target(&target, &DVector::zeros(1)).unwrap();
        assert!(result.converged);
        assert!((result.x[0] - 1.0).abs() < 1e-10);
        let constant = (2.0 * std::f64::consts::PI).ln();
        assert!((result.value - constant - 1.0).abs() < 1e-10);
    }

    #[test]
    fn minimize_linear_matches_conditional_mean() {
        for seed in 0..5 {
            let (model, x_prev, y) = random_linear_target(60 + seed, 3, 2);
            let target = LogTarget::new(&model, &x_prev, y.clone()).unwrap();
            let init = target.predicted_mean().clone();
            let result = minimize_log_target(&target, &init).unwrap();
            assert!(result.converged);

            // Independent conditional-mean formula with explicit inverses.
            let f_prev = model.transition(&x_prev);
            let h = crate::kf_bank::jacobian(|v| model.measurement(v), &f_prev).unwrap();
            let q = model.q().clone();
            let p_y = &h * &q * h.transpose() + model.r();
            let gain = &q * h.transpose() * p_y.try_inverse().unwrap();
            let want = &f_prev + gain * (&y - &h * &f_prev);
            assert!(
                (&result.x - &want).amax() < 1e-8,
                "seed {seed}: minimizer {:?} want {:?}",
                result.x,
                want
            );
        }
    }

    #[test]
    fn minimize_consistent_point_has_zero_transition_term() {
        let cfg = crate::models::Lorenz96Config {
            n_x: 8,
            ..Default::default()
        };
        let model = crate::models::lorenz96_model(&cfg).unwrap();
        let x_prev = crate::models::attractor_initial_state(&cfg, 3, 100).unwrap();
        let f_prev = model.transition(&x_prev);
        let y = model.measurement(&f_prev);
        let target = LogTarget::new(&model, &x_prev, y).unwrap();
        // Both penalty terms vanish at f(x_prev), so it is the minimizer.
        let value = target.eval(&f_prev).unwrap();
        assert!((value - target.log_norm()).abs() < 1e-12);
        let result = minimize_log_target(&target, &f_prev).unwrap();
        assert!(result.converged);
        assert!((&result.x - &f_prev).amax() < 1e-8);
    }

    #[test]
    fn random_map_quadratic_scaling() {
        // For an exactly quadratic target the radial solution is
        // t = 1/sqrt(alpha): with alpha = 1 the map reduces to mu + L xi.
        let (model, x_prev, y) = random_linear_target(70, 3, 2);
        let target = LogTarget::new(&model, &x_prev, y).unwrap();
        let init = target.predicted_mean().clone();
        let min = minimize_log_target(&target, &init).unwrap();
        let hess = target.gn_hessian(&min.x).unwrap();
        let l = spd_sqrt(&hess.clone().try_inverse().unwrap()).unwrap();

        let mut rng = stream::rng(71, &[]);
        for &alpha in &[1.0, 0.05] {
            let sampler = ReferenceSampler::new(3, alpha).unwrap();
            let xi = sampler.sample(&mut rng);
            let sol = random_map_solve(&target, &min.x, min.value, &xi, alpha).unwrap();
            assert!(sol.converged);
            let want = &min.x + &l * &xi / alpha.sqrt();
            assert!(
                (&sol.x - &want).amax() < 1e-7,
                "alpha {alpha}: got {:?} want {want:?}",
                sol.x
            );
            // Residual contract.
            let rho = xi.norm_squared() / (2.0 * alpha);
            let residual = (target.eval(&sol.x).unwrap() - sol.phi - rho).abs();
            assert!(residual < 1e-10, "residual {residual}");
        }
    }

    #[test]
    fn random_map_quadratic_log_jacobian() {
        // Quadratic target, any alpha: |J| = alpha^{-n/2} det sqrt(H^{-1}).
        let (model, x_prev, y) = random_linear_target(72, 3, 2);
        let target = LogTarget::new(&model, &x_prev, y).unwrap();
        let init = target.predicted_mean().clone();
        let min = minimize_log_target(&target, &init).unwrap();
        let hess = target.gn_hessian(&min.x).unwrap();
        let alpha = 0.25_f64;
        let want = -0.5 * 3.0 * alpha.ln() - 0.5 * hess.determinant().ln();

        let sampler = ReferenceSampler::new(3, alpha).unwrap();
        let mut rng = stream::rng(73, &[]);
        let xi = sampler.sample(&mut rng);
        let sol = random_map_solve(&target, &min.x, min.value, &xi, alpha).unwrap();
        assert!(
            (sol.log_jacobian - want).abs() < 1e-7,
            "got {} want {want}",
            sol.log_jacobian
        );

        // The degenerate-xi branch uses the same quadratic-model value.
        let sol0 = random_map_solve(&target, &min.x, min.value, &DVector::zeros(3), alpha).unwrap();
        assert!((sol0.log_jacobian - want).abs() < 1e-10);
        assert_eq!(sol0.x, min.x);
    }

    #[test]
    fn closed_form_log_jacobian_matches_finite_differences() {
        // Finite-difference oracle through the public solve: perturb each
        // reference component, re-solve, difference the mapped particles.
        let cfg = crate::models::Lorenz96Config {
            n_x: 6,
            ..Default::default()
        };
        let model = crate::models::lorenz96_model(&cfg).unwrap();
        let mut rng = stream::rng(81, &[]);
        let alpha = 0.05;
        let sampler = ReferenceSampler::new(6, alpha).unwrap();
        for trial in 0..5 {
            let x_prev = crate::models::attractor_initial_state(&cfg, 400 + trial, 150).unwrap();
            let f_prev = model.transition(&x_prev);
            let mut y = model.measurement(&f_prev);
            for v in y.iter_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
            let target = LogTarget::new(&model, &x_prev, y).unwrap();
            // The Jacobian identity holds around any (mu, phi) pair the
            // optimizer returns, converged or not.
            let min = minimize_log_target(&target, &f_prev).unwrap();
            let xi = sampler.sample(&mut rng);
            let sol = random_map_solve(&target, &min.x, min.value, &xi, alpha).unwrap();
            assert!(sol.converged);

            let mut jac = DMatrix::zeros(6, 6);
            for j in 0..6 {
                let delta = 1e-6;
                let mut plus = xi.clone();
                plus[j] += delta;
                let mut minus = xi.clone();
                minus[j] -= delta;
                let xp = random_map_solve(&target, &min.x, min.value, &plus, alpha)
                    .unwrap()
                    .x;
                let xm = random_map_solve(&target, &min.x, min.value, &minus, alpha)
                    .unwrap()
                    .x;
                jac.set_column(j, &((xp - xm) / (2.0 * delta)));
            }
            let lu = jac.lu();
            let fd_log_det: f64 = (0..6).map(|i| lu.u()[(i, i)].abs().ln()).sum();
            assert!(
                (sol.log_jacobian - fd_log_det).abs() < 1e-4,
                "trial {trial}: closed form {} vs finite differences {fd_log_det}",
                sol.log_jacobian
            );
        }
    }

    #[test]
    fn random_map_gaussian_consistency() {
        // Quadratic target with alpha = 1: the empirical moments of the
        // mapped particles match N(mu, H^{-1}) within 3%.
        let (model, x_prev, y) = random_linear_target(74, 2, 2);
        let target = LogTarget::new(&model, &x_prev, y).unwrap();
        let init = target.predicted_mean().clone();
        let min = minimize_log_target(&target, &init).unwrap();
        let hess = target.gn_hessian(&min.x).unwrap();
        let want_cov = hess.try_inverse().unwrap();

        let sampler = ReferenceSampler::new(2, 1.0).unwrap();
        let mut rng = stream::rng(75, &[]);
        let n = 10_000;
        let mut sum = DVector::zeros(2);
        let mut sum_sq = DMatrix::zeros(2, 2);
        for _ in 0..n {
            let xi = sampler.sample(&mut rng);
            let sol = random_map_solve(&target, &min.x, min.value, &xi, 1.0).unwrap();
            sum += &sol.x;
            sum_sq += &sol.x * sol.x.transpose();
        }
        let mean = sum / n as f64;
        let cov = sum_sq / n as f64 - &mean * mean.transpose();
        assert!((&mean - &min.x).amax() / min.x.amax().max(1.0) < 0.03);
        assert!((&cov - &want_cov).amax() / want_cov.amax() < 0.03 * 3.0);
    }

    #[test]
    fn random_map_residual_contract_on_nonlinear_target() {
        let cfg = crate::models::Lorenz96Config {
            n_x: 8,
            ..Default::default()
        };
        let model = crate::models::lorenz96_model(&cfg).unwrap();
        let mut rng = stream::rng(76, &[]);
        let sampler = ReferenceSampler::new(8, 0.05).unwrap();
        for seed in 0..20 {
            let x_prev = crate::models::attractor_initial_state(&cfg, 200 + seed, 150).unwrap();
            let f_prev = model.transition(&x_prev);
            let mut y = model.measurement(&f_prev);
            for v in y.iter_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
            let target = LogTarget::new(&model, &x_prev, y).unwrap();
            let min = minimize_log_target(&target, &f_prev).unwrap();
            assert!(min.converged);
            let xi = sampler.sample(&mut rng);
            let rho = xi.norm_squared() / (2.0 * 0.05);
            let sol = random_map_solve(&target, &min.x, min.value, &xi, 0.05).unwrap();
            assert!(sol.converged);
            let residual = (target.eval(&sol.x).unwrap() - sol.phi - rho).abs();
            assert!(residual < 1e-10, "seed {seed}: residual {residual}");
        }
    }
}
