//! Gaussian moment algebra: SPD square roots with jitter repair, conditional
//! (Kalman-style) updates, and log-densities.
//!
//! All covariance-producing operations symmetrize their output, and every
//! `(P^y)^{-1}` application goes through a Cholesky solve rather than an
//! explicit inverse. The jitter policy lives here so every module inherits
//! the same SPD repair.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// A mean/covariance pair.
#[derive(Debug, Clone)]
pub struct GaussianMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianMoments {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self { mean, cov }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Joint moments of a state/measurement pair, stored blockwise.
#[derive(Debug, Clone)]
pub struct JointMoments {
    pub mean_x: DVector<f64>,
    pub mean_y: DVector<f64>,
    pub p_x: DMatrix<f64>,
    pub p_y: DMatrix<f64>,
    pub p_xy: DMatrix<f64>,
}

/// Replace `m` with `(m + m^T)/2` in place.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

const JITTER_ATTEMPTS: usize = 7;
const JITTER_EPS_START: f64 = 1e-12;

/// Cholesky factorization with escalating diagonal jitter.
///
/// The matrix is symmetrized first. On failure, `eps * trace/n` is added to
/// the diagonal with `eps` escalating from 1e-12 to 1e-6 before giving up.
pub fn cholesky_jittered(p: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let n = p.nrows();
    assert_eq!(n, p.ncols(), "cholesky_jittered needs a square matrix");
    let mut sym = p.clone();
    symmetrize(&mut sym);
    if let Some(ch) = sym.cholesky() {
        return Ok(ch);
    }
    // Repair path: rebuild the symmetrized matrix (consumed above) and
    // escalate the diagonal jitter.
    let mut sym = p.clone();
    symmetrize(&mut sym);
    let scale = sym.trace() / n as f64;
    let mut eps = JITTER_EPS_START;
    for _ in 0..JITTER_ATTEMPTS {
        let mut jittered = sym.clone();
        for i in 0..n {
            jittered[(i, i)] += eps * scale;
        }
        if let Some(ch) = jittered.cholesky() {
            return Ok(ch);
        }
        eps *= 10.0;
    }
    Err(Error::SpdRepair {
        final_epsilon: eps / 10.0,
        dim: n,
    })
}

/// Lower-triangular `L` with `L L^T = P`, via [`cholesky_jittered`].
///
/// An exactly-zero matrix factors to zero so that degenerate covariances
/// (collapsed particles, zero initial spread) stay usable.
pub fn spd_sqrt(p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if p.iter().all(|&v| v == 0.0) {
        return Ok(DMatrix::zeros(p.nrows(), p.ncols()));
    }
    cholesky_jittered(p).map(|ch| ch.unpack())
}

pub(crate) fn log_det_lower(l: &DMatrix<f64>) -> f64 {
    (0..l.nrows()).map(|i| l[(i, i)].ln()).sum()
}

/// Shared implementation of the conditional update; see [`conditional_update`].
pub(crate) fn conditional_update_parts(
    mean_x: &DVector<f64>,
    mean_y: &DVector<f64>,
    p_x: &DMatrix<f64>,
    p_y: &DMatrix<f64>,
    p_xy: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<GaussianMoments> {
    if y.len() != mean_y.len() {
        return Err(Error::InvalidConfig(format!(
            "conditioning vector has length {}, expected {}",
            y.len(),
            mean_y.len()
        )));
    }
    let ch = cholesky_jittered(p_y).map_err(|_| Error::Conditioning)?;
    let innovation = y - mean_y;
    let mean = mean_x + p_xy * ch.solve(&innovation);
    let mut cov = p_x - p_xy * ch.solve(&p_xy.transpose());
    symmetrize(&mut cov);
    Ok(GaussianMoments { mean, cov })
}

/// Condition a joint Gaussian on an observed `y`.
///
/// Returns the moments of `x | y`:
/// mean = mean_x + P_xy P_y^{-1} (y - mean_y),
/// cov  = P_x - P_xy P_y^{-1} P_xy^T.
pub fn conditional_update(joint: &JointMoments, y: &DVector<f64>) -> Result<GaussianMoments> {
    conditional_update_parts(
        &joint.mean_x,
        &joint.mean_y,
        &joint.p_x,
        &joint.p_y,
        &joint.p_xy,
        y,
    )
}

/// Log-density of `N(mean, L L^T)` at a point, given the whitened residual.
pub(crate) fn logpdf_whitened(dim: usize, log_det_l: f64, whitened_norm_sq: f64) -> f64 {
    -0.5 * dim as f64 * (2.0 * std::f64::consts::PI).ln() - log_det_l - 0.5 * whitened_norm_sq
}

pub(crate) fn gaussian_logpdf_parts(
    x: &DVector<f64>,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<f64> {
    let ch = cholesky_jittered(cov)?;
    let d = x - mean;
    let quad = d.dot(&ch.solve(&d));
    let log_det_l = log_det_lower(ch.l_dirty());
    Ok(logpdf_whitened(x.len(), log_det_l, quad))
}

/// Gaussian log-density computed through the Cholesky factor:
/// `-(n/2) log 2pi - log det L - 0.5 || L^{-1}(x - mean) ||^2`.
pub fn gaussian_logpdf(x: &DVector<f64>, moments: &GaussianMoments) -> Result<f64> {
    gaussian_logpdf_parts(x, &moments.mean, &moments.cov)
}

/// Map a reference draw through the Gaussian: `mean + sqrt(cov) * xi`.
///
/// When every particle shares the same moments, the resulting normalized
/// weights are exactly `1/N`.
pub fn gaussian_case_study_sample(
    moments: &GaussianMoments,
    xi: &DVector<f64>,
) -> Result<DVector<f64>> {
    let l = spd_sqrt(&moments.cov)?;
    Ok(&moments.mean + l * xi)
}
