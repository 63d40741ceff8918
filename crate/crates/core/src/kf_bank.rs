//! Per-particle nonlinear Kalman prediction and update backends.
//!
//! [`ekf_predict`] and [`ukf_predict`] produce the five predicted statistics
//! (state mean/covariance, measurement mean/covariance, cross covariance)
//! that drive both the per-particle update and the predictive likelihood.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{
    self, cholesky_jittered, conditional_update_parts, log_det_lower, spd_sqrt, symmetrize,
    GaussianMoments,
};
use crate::models::StateSpaceModel;

/// The five KF-prediction statistics of one particle.
#[derive(Debug, Clone)]
pub struct PredictedMoments {
    pub m_bar: DVector<f64>,
    pub p_bar: DMatrix<f64>,
    pub y_bar: DVector<f64>,
    pub p_y: DMatrix<f64>,
    pub p_xy: DMatrix<f64>,
}

/// Scaled unscented-transform parameters.
///
/// Defaults are `alpha = 1`, `beta = 2`, `kappa = 0`, giving `lambda = 0` and
/// uniform sigma weights `1/(2 n)`; small `alpha` would produce a large
/// negative center weight at high dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UtParams {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for UtParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 2.0,
            kappa: 0.0,
        }
    }
}

impl UtParams {
    pub fn lambda(&self, n: usize) -> f64 {
        self.alpha * self.alpha * (n as f64 + self.kappa) - n as f64
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "UT alpha must be in (0, 1], got {}",
                self.alpha
            )));
        }
        if n as f64 + self.lambda(n) <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "UT parameters give n + lambda = {} <= 0",
                n as f64 + self.lambda(n)
            )));
        }
        Ok(())
    }
}

/// Central finite-difference Jacobian with per-component step
/// `1e-6 * max(1, |x_j|)`.
pub fn jacobian<F>(map: F, x: &DVector<f64>) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let check = |v: &DVector<f64>| -> Result<()> {
        for (i, value) in v.iter().enumerate() {
            if !value.is_finite() {
                return Err(Error::Evaluation { component: i });
            }
        }
        Ok(())
    };
    let base = map(x);
    check(&base)?;
    let rows = base.len();
    let cols = x.len();
    let mut jac = DMatrix::zeros(rows, cols);
    let mut probe = x.clone();
    for c in 0..cols {
        let step = 1e-6 * x[c].abs().max(1.0);
        probe[c] = x[c] + step;
        let plus = map(&probe);
        check(&plus)?;
        probe[c] = x[c] - step;
        let minus = map(&probe);
        check(&minus)?;
        probe[c] = x[c];
        let scale = 1.0 / (2.0 * step);
        for r in 0..rows {
            jac[(r, c)] = (plus[r] - minus[r]) * scale;
        }
    }
    Ok(jac)
}

/// Transition Jacobian: analytic when the model carries one, finite
/// differences otherwise.
pub fn transition_jacobian(model: &StateSpaceModel, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    match model.analytic_transition_jacobian(x) {
        Some(j) => Ok(j),
        None => jacobian(|v| model.transition(v), x),
    }
}

/// Measurement Jacobian: analytic when the model carries one, finite
/// differences otherwise.
pub fn measurement_jacobian(model: &StateSpaceModel, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    match model.analytic_measurement_jacobian(x) {
        Some(j) => Ok(j),
        None => jacobian(|v| model.measurement(v), x),
    }
}

/// EKF prediction of the five statistics from one particle's prior moments.
pub fn ekf_predict(
    x_prev: &DVector<f64>,
    p_prev: &DMatrix<f64>,
    model: &StateSpaceModel,
) -> Result<PredictedMoments> {
    let m_bar = model.transition(x_prev);
    let f_jac = transition_jacobian(model, x_prev)?;
    let mut p_bar = &f_jac * p_prev * f_jac.transpose() + model.q();
    symmetrize(&mut p_bar);

    let y_bar = model.measurement(&m_bar);
    let h_jac = measurement_jacobian(model, &m_bar)?;
    let p_xy = &p_bar * h_jac.transpose();
    let mut p_y = &h_jac * &p_xy + model.r();
    symmetrize(&mut p_y);

    Ok(PredictedMoments {
        m_bar,
        p_bar,
        y_bar,
        p_y,
        p_xy,
    })
}

struct SigmaPoints {
    points: DMatrix<f64>,
    w_mean: Vec<f64>,
    w_cov: Vec<f64>,
}

fn sigma_points(mean: &DVector<f64>, cov: &DMatrix<f64>, ut: &UtParams) -> Result<SigmaPoints> {
    let n = mean.len();
    let lambda = ut.lambda(n);
    let scale = (n as f64 + lambda).sqrt();
    let l = spd_sqrt(cov)?;
    let count = 2 * n + 1;
    let mut points = DMatrix::zeros(n, count);
    points.set_column(0, mean);
    for i in 0..n {
        let col = l.column(i) * scale;
        points.set_column(1 + i, &(mean + &col));
        points.set_column(1 + n + i, &(mean - &col));
    }
    let w0m = lambda / (n as f64 + lambda);
    let wi = 1.0 / (2.0 * (n as f64 + lambda));
    let mut w_mean = vec![wi; count];
    let mut w_cov = vec![wi; count];
    w_mean[0] = w0m;
    w_cov[0] = w0m + (1.0 - ut.alpha * ut.alpha + ut.beta);
    Ok(SigmaPoints {
        points,
        w_mean,
        w_cov,
    })
}

fn propagate<F>(sigma: &DMatrix<f64>, out_dim: usize, map: F) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut out = DMatrix::zeros(out_dim, sigma.ncols());
    for c in 0..sigma.ncols() {
        out.set_column(c, &map(&sigma.column(c).into_owned()));
    }
    out
}

fn weighted_mean(cols: &DMatrix<f64>, w: &[f64]) -> DVector<f64> {
    let mut mean = DVector::zeros(cols.nrows());
    for (c, &wc) in w.iter().enumerate() {
        mean.axpy(wc, &cols.column(c), 1.0);
    }
    mean
}

fn deviations(cols: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut dev = cols.clone();
    for mut col in dev.column_iter_mut() {
        col -= mean;
    }
    dev
}

fn scale_columns(m: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let mut out = m.clone();
    for (c, &wc) in w.iter().enumerate() {
        out.column_mut(c).scale_mut(wc);
    }
    out
}

/// UKF prediction via the scaled unscented transform with additive noise.
///
/// Measurement sigma points are re-drawn from the predicted `(m_bar, p_bar)`
/// rather than reusing the propagated points.
pub fn ukf_predict(
    x_prev: &DVector<f64>,
    p_prev: &DMatrix<f64>,
    model: &StateSpaceModel,
    ut: &UtParams,
) -> Result<PredictedMoments> {
    let n = model.n_x();
    ut.validate(n)?;

    let prior = sigma_points(x_prev, p_prev, ut)?;
    let through_f = propagate(&prior.points, n, |x| model.transition(x));
    let m_bar = weighted_mean(&through_f, &prior.w_mean);
    let dev_f = deviations(&through_f, &m_bar);
    let mut p_bar = scale_columns(&dev_f, &prior.w_cov) * dev_f.transpose() + model.q();
    symmetrize(&mut p_bar);

    let predicted = sigma_points(&m_bar, &p_bar, ut)?;
    let through_h = propagate(&predicted.points, model.n_y(), |x| model.measurement(x));
    let y_bar = weighted_mean(&through_h, &predicted.w_mean);
    let dev_x = deviations(&predicted.points, &m_bar);
    let dev_y = deviations(&through_h, &y_bar);
    let dev_y_w = scale_columns(&dev_y, &predicted.w_cov);
    let mut p_y = &dev_y_w * dev_y.transpose() + model.r();
    symmetrize(&mut p_y);
    let p_xy = dev_x * dev_y_w.transpose();

    Ok(PredictedMoments {
        m_bar,
        p_bar,
        y_bar,
        p_y,
        p_xy,
    })
}

/// Per-particle KF update: condition the predicted joint Gaussian on `y`.
pub fn kf_update(pred: &PredictedMoments, y: &DVector<f64>) -> Result<GaussianMoments> {
    conditional_update_parts(
        &pred.m_bar,
        &pred.y_bar,
        &pred.p_bar,
        &pred.p_y,
        &pred.p_xy,
        y,
    )
}

/// Log predictive likelihood of `y` under the particle's innovation Gaussian.
pub fn predictive_loglik(pred: &PredictedMoments, y: &DVector<f64>) -> Result<f64> {
    let ch = cholesky_jittered(&pred.p_y)?;
    let d = y - &pred.y_bar;
    let quad = d.dot(&ch.solve(&d));
    Ok(gaussian::logpdf_whitened(
        y.len(),
        log_det_lower(ch.l_dirty()),
        quad,
    ))
}
