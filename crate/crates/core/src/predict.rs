//! Predictive marginals at test inputs, using `p(f|u)` at test time, and the
//! RMSE / mean log-likelihood metrics.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{GpError, Result};
use crate::kernel::kernel_matrix;
use crate::linalg::chol;
use crate::model::{GaussianQU, ModelState, Observations};
use crate::scalar::Scalar;

/// Negative variances above this are treated as round-off and clamped.
pub const CLAMP_FLOOR: f64 = -1e-10;

/// Marginal predictive means and variances.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictiveGaussian<T: Scalar> {
    pub mean: DVector<T>,
    pub variance: DVector<T>,
    /// How many variances were clamped up to zero.
    pub clamped: usize,
}

impl<T: Scalar> PredictiveGaussian<T> {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Maps a prediction of `(y - shift) / scale` back to `y`.
    pub fn rescale(&self, shift: T, scale: T) -> Self {
        Self {
            mean: self.mean.map(|m| m * scale + shift),
            variance: self.variance.map(|v| v * scale * scale),
            clamped: self.clamped,
        }
    }

    /// Lower and upper ends of `mean ± z·sd`.
    pub fn interval(&self, z: T) -> (DVector<T>, DVector<T>) {
        let sd = self.variance.map(|v| v.sqrt());
        (&self.mean - &sd * z, &self.mean + &sd * z)
    }
}

fn finish<T: Scalar>(mean: DVector<T>, mut variance: DVector<T>, noise: Option<T>) -> Result<PredictiveGaussian<T>> {
    let floor = T::from_f64(CLAMP_FLOOR).expect("representable");
    let mut clamped = 0;
    for (i, v) in variance.iter_mut().enumerate() {
        if *v < T::zero() {
            if *v < floor {
                return Err(GpError::EvaluationFailed(format!(
                    "predictive variance {:e} at test point {i}",
                    v.to_f64().unwrap_or(f64::NAN)
                )));
            }
            *v = T::zero();
            clamped += 1;
        }
        if let Some(n) = noise {
            *v += n;
        }
    }
    if clamped > 0 {
        log::warn!("{clamped} predictive variances clamped to zero");
    }
    Ok(PredictiveGaussian { mean, variance, clamped })
}

/// Mean `K_*u K_uu^{-1} m`, variance `k_** - q_** + a_*^T S a_*` per test row.
pub fn predict<T: Scalar>(
    x_test: &DMatrix<T>,
    state: &ModelState<T>,
    q: &GaussianQU<T>,
    include_noise: bool,
) -> Result<PredictiveGaussian<T>> {
    if q.dim() != state.num_inducing() {
        return Err(GpError::LengthMismatch { expected: state.num_inducing(), got: q.dim() });
    }
    let kuu = chol(&kernel_matrix(&state.inducing, &state.inducing, &state.kernel)?)?;
    let kus = kernel_matrix(&state.inducing, x_test, &state.kernel)?;
    let a = kuu.solve_lower(&kus);
    let w = kuu.solve_upper(&a);
    let b = q.cov_chol.lower().transpose() * &w;
    let mean = w.transpose() * &q.mean;
    let s2 = state.kernel.signal_variance();
    let var = DVector::from_fn(x_test.nrows(), |j, _| {
        let qss = a.column(j).norm_squared();
        let extra = b.column(j).norm_squared();
        s2 - qss + extra
    });
    finish(mean, var, include_noise.then(|| state.noise_variance()))
}

/// Dense exact-GP predictive marginals.
pub fn predict_exact<T: Scalar>(
    obs: &Observations<T>,
    x_test: &DMatrix<T>,
    state: &ModelState<T>,
    include_noise: bool,
) -> Result<PredictiveGaussian<T>> {
    let mut k = kernel_matrix(&obs.x, &obs.x, &state.kernel)?;
    let noise = state.noise_variance();
    for i in 0..obs.len() {
        k[(i, i)] += noise;
    }
    let l = chol(&k)?;
    let kfs = kernel_matrix(&obs.x, x_test, &state.kernel)?;
    let alpha = l.solve_vec(&obs.y);
    let mean = kfs.transpose() * alpha;
    let a = l.solve_lower(&kfs);
    let s2 = state.kernel.signal_variance();
    let var = DVector::from_fn(x_test.nrows(), |j, _| s2 - a.column(j).norm_squared());
    finish(mean, var, include_noise.then_some(noise))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mean_ll: f64,
}

/// RMSE and mean of `log N(y; mean, variance)`; `pred` should include noise.
pub fn metrics<T: Scalar>(pred: &PredictiveGaussian<T>, y_true: &DVector<T>) -> Result<Metrics> {
    if pred.len() != y_true.len() {
        return Err(GpError::LengthMismatch { expected: pred.len(), got: y_true.len() });
    }
    if pred.is_empty() {
        return Err(GpError::EmptyDataset);
    }
    let n = pred.len() as f64;
    let mut se = 0.0;
    let mut ll = 0.0;
    for i in 0..pred.len() {
        let mu = pred.mean[i].to_f64().unwrap_or(f64::NAN);
        let v = pred.variance[i].to_f64().unwrap_or(f64::NAN);
        let r = y_true[i].to_f64().unwrap_or(f64::NAN) - mu;
        se += r * r;
        ll += -0.5 * (2.0 * std::f64::consts::PI * v).ln() - 0.5 * r * r / v;
    }
    Ok(Metrics { rmse: (se / n).sqrt(), mean_ll: ll / n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::optimal_qu;
    use crate::kernel::{KernelParams, NoiseParam};
    use crate::linalg::{BlockDiagonal, Chol};
    use crate::verify::random_instance_seeded;
    use approx::assert_relative_eq;

    fn toy_state() -> ModelState<f64> {
        let z = DMatrix::from_row_slice(3, 1, &[-1.0, 0.0, 1.5]);
        ModelState::new(KernelParams::new(&[0.8], 1.3), NoiseParam::new(0.1), z).unwrap()
    }

    #[test]
    fn at_inducing_point_with_tiny_covariance() {
        let st = toy_state();
        let mean = DVector::from_vec(vec![0.3, -0.2, 0.7]);
        let l = DMatrix::identity(3, 3) * 1e-9;
        let q = GaussianQU::new(mean.clone(), Chol::from_lower(l).unwrap()).unwrap();
        let p = predict(&st.inducing, &st, &q, false).unwrap();
        for i in 0..3 {
            assert_relative_eq!(p.mean[i], mean[i], epsilon = 1e-9);
            assert!(p.variance[i] < 1e-9);
        }
    }

    #[test]
    fn far_test_point_reverts_to_prior() {
        let st = toy_state();
        let q = GaussianQU::new(DVector::from_vec(vec![1.0, 2.0, -1.0]), Chol::from_lower(DMatrix::identity(3, 3) * 0.3).unwrap())
            .unwrap();
        let p = predict(&DMatrix::from_row_slice(1, 1, &[1e3]), &st, &q, true).unwrap();
        assert!(p.mean[0].abs() < 1e-12);
        assert_relative_eq!(p.variance[0], 1.3 + 0.1, max_relative = 1e-12);
    }

    #[test]
    fn exact_posterior_matches_dense_gp() {
        let inst = random_instance_seeded(11);
        let mut st = inst.state.clone();
        st.inducing = inst.obs.x.clone();
        let q = optimal_qu(&inst.obs, &st, &BlockDiagonal::zeros(inst.partition.blocks().to_vec())).unwrap();
        let xt = DMatrix::from_fn(7, inst.obs.input_dim(), |i, j| -1.5 + 0.4 * i as f64 + 0.1 * j as f64);
        let a = predict(&xt, &st, &q, true).unwrap();
        let b = predict_exact(&inst.obs, &xt, &st, true).unwrap();
        for i in 0..7 {
            assert_relative_eq!(a.mean[i], b.mean[i], max_relative = 1e-7);
            assert_relative_eq!(a.variance[i], b.variance[i], max_relative = 1e-7);
        }
    }

    #[test]
    fn metrics_hand_values() {
        let y = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let unit = 1.0 / (2.0 * std::f64::consts::PI);
        let p = PredictiveGaussian { mean: y.clone(), variance: DVector::from_element(3, unit), clamped: 0 };
        let m = metrics(&p, &y).unwrap();
        assert_eq!(m.rmse, 0.0);
        assert!(m.mean_ll.abs() < 1e-15);

        let p = PredictiveGaussian { mean: y.add_scalar(1.0), variance: DVector::from_element(3, 0.7), clamped: 0 };
        assert_relative_eq!(metrics(&p, &y).unwrap().rmse, 1.0, max_relative = 1e-15);

        let p = PredictiveGaussian {
            mean: DVector::from_vec(vec![0.1, -0.4, 1.0]),
            variance: DVector::from_vec(vec![0.2, 1.5, 0.9]),
            clamped: 0,
        };
        let m = metrics(&p, &y).unwrap();
        let mut ll = 0.0;
        let mut se = 0.0;
        for (mu, v, t) in [(0.1, 0.2, 0.5), (-0.4, 1.5, -1.0), (1.0, 0.9, 2.0)] {
            let r: f64 = t - mu;
            se += r * r;
            ll += -0.5 * (2.0 * std::f64::consts::PI * v).ln() - r * r / (2.0 * v);
        }
        assert_relative_eq!(m.rmse, (se / 3.0).sqrt(), max_relative = 1e-15);
        assert_relative_eq!(m.mean_ll, ll / 3.0, max_relative = 1e-15);
    }

    #[test]
    fn metrics_length_mismatch() {
        let p = PredictiveGaussian { mean: DVector::zeros(2), variance: DVector::from_element(2, 1.0), clamped: 0 };
        assert!(matches!(metrics(&p, &DVector::zeros(3)), Err(GpError::LengthMismatch { .. })));
    }

    #[test]
    fn noise_lower_bounds_variance() {
        let inst = random_instance_seeded(3);
        let q = optimal_qu(&inst.obs, &inst.state, &BlockDiagonal::zeros(inst.partition.blocks().to_vec())).unwrap();
        let p = predict(&inst.obs.x, &inst.state, &q, true).unwrap();
        let s2 = inst.state.noise_variance();
        assert!(p.variance.iter().all(|&v| v >= s2));
    }
}
