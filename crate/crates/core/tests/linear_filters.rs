//! Linear-Gaussian sanity: on a linear model with Gaussian noise every
//! filter's estimate tracks the closed-form Kalman filter mean, with
//! Monte Carlo error well below the posterior spread at N = 1000.

use ipf_core::filters::{estimate, filter_step, init_ensemble, FilterKind, FilterParams};
use ipf_core::models::{simulate_truth, StateSpaceModel};
use ipf_core::stream;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

struct LinearSystem {
    a: DMatrix<f64>,
    h: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl LinearSystem {
    fn model(&self) -> StateSpaceModel {
        let a = self.a.clone();
        let h = self.h.clone();
        let lq = self.q.clone().cholesky().unwrap().unpack();
        let lr = self.r.clone().cholesky().unwrap().unpack();
        let (n_x, n_y) = (self.a.nrows(), self.h.nrows());
        StateSpaceModel::new(
            n_x,
            n_y,
            Box::new(move |x| &a * x),
            Box::new(move |x| &h * x),
            self.q.clone(),
            self.r.clone(),
            Box::new(move |rng| {
                &lq * DVector::from_fn(n_x, |_, _| rng.sample::<f64, _>(StandardNormal))
            }),
            Box::new(move |rng| {
                &lr * DVector::from_fn(n_y, |_, _| rng.sample::<f64, _>(StandardNormal))
            }),
        )
        .unwrap()
    }

    /// Closed-form Kalman filter, explicit inverses: the oracle.
    fn kalman(
        &self,
        x0: &DVector<f64>,
        p0: &DMatrix<f64>,
        measurements: &[DVector<f64>],
    ) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>) {
        let mut x = x0.clone();
        let mut p = p0.clone();
        let mut means = Vec::new();
        let mut covs = Vec::new();
        for y in measurements {
            x = &self.a * x;
            p = &self.a * &p * self.a.transpose() + &self.q;
            let innovation_cov = &self.h * &p * self.h.transpose() + &self.r;
            let gain = &p * self.h.transpose() * innovation_cov.try_inverse().unwrap();
            x += &gain * (y - &self.h * &x);
            p = &p - &gain * &self.h * &p;
            means.push(x.clone());
            covs.push(p.clone());
        }
        (means, covs)
    }
}

#[test]
fn all_filters_track_the_kalman_mean() {
    let system = LinearSystem {
        a: DMatrix::from_vec(2, 2, vec![0.9, 0.1, -0.15, 0.8]),
        h: DMatrix::identity(2, 2),
        q: DMatrix::from_diagonal(&DVector::from_vec(vec![0.3, 0.2])),
        r: DMatrix::identity(2, 2) * 0.1,
    };
    let model = system.model();
    let x0 = DVector::from_vec(vec![1.0, -0.5]);
    let p0 = DMatrix::identity(2, 2) * 0.01;
    let steps = 200;
    let trajectory = simulate_truth(&model, &x0, steps, 2001).unwrap();
    let (kf_means, kf_covs) = system.kalman(&x0, &p0, &trajectory.measurements);

    let posterior_std = {
        let avg_var: f64 = kf_covs.iter().map(|p| p.trace() / 2.0).sum::<f64>() / steps as f64;
        avg_var.sqrt()
    };

    let params = FilterParams {
        alpha: 0.05,
        resample_threshold_frac: 1.0,
        ..Default::default()
    };
    for kind in FilterKind::ALL {
        let run_seed = stream::substream(909, &[kind as u64]);
        let mut ens = init_ensemble(1000, &x0, &p0, run_seed).unwrap();
        let mut sq_err = 0.0;
        for (k, y) in trajectory.measurements.iter().enumerate() {
            ens = filter_step(
                &ens,
                y,
                &model,
                kind,
                &params,
                stream::substream(run_seed, &[k as u64]),
            )
            .unwrap();
            let err = estimate(&ens) - &kf_means[k];
            sq_err += err.norm_squared() / 2.0;
        }
        let rmse = (sq_err / steps as f64).sqrt();
        assert!(
            rmse < 0.05 * posterior_std,
            "{kind}: rmse to KF mean {rmse:.4} exceeds 5% of posterior std {posterior_std:.4}"
        );
    }
}
