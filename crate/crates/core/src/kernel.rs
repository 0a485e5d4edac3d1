//! ARD squared-exponential covariance and the matrices derived from it.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::linalg::{chol, Chol};
use crate::scalar::Scalar;

/// Log-parametrized ARD squared-exponential hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams<T: Scalar> {
    pub log_lengthscales: DVector<T>,
    pub log_signal_variance: T,
}

impl<T: Scalar> KernelParams<T> {
    pub fn new(lengthscales: &[T], signal_variance: T) -> Self {
        Self {
            log_lengthscales: DVector::from_iterator(lengthscales.len(), lengthscales.iter().map(|l| l.ln())),
            log_signal_variance: signal_variance.ln(),
        }
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn lengthscales(&self) -> DVector<T> {
        self.log_lengthscales.map(|l| l.exp())
    }

    pub fn signal_variance(&self) -> T {
        self.log_signal_variance.exp()
    }
}

/// Log-parametrized Gaussian observation noise variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParam<T: Scalar> {
    pub log_noise_variance: T,
}

impl<T: Scalar> NoiseParam<T> {
    pub fn new(variance: T) -> Self {
        Self { log_noise_variance: variance.ln() }
    }

    pub fn variance(&self) -> T {
        self.log_noise_variance.exp()
    }
}

fn check_dims<T: Scalar>(x1: &DMatrix<T>, x2: &DMatrix<T>, p: &KernelParams<T>) -> Result<()> {
    if x1.ncols() != p.dim() || x2.ncols() != p.dim() {
        return Err(GpError::DimensionMismatch(format!(
            "inputs have {} and {} columns but the kernel has {} lengthscales",
            x1.ncols(),
            x2.ncols(),
            p.dim()
        )));
    }
    Ok(())
}

/// `k(x1_i, x2_j) = s^2 exp(-1/2 sum_d (x1_id - x2_jd)^2 / l_d^2)`.
pub fn kernel_matrix<T: Scalar>(x1: &DMatrix<T>, x2: &DMatrix<T>, p: &KernelParams<T>) -> Result<DMatrix<T>> {
    check_dims(x1, x2, p)?;
    let inv_l: Vec<T> = p.log_lengthscales.iter().map(|l| (-*l).exp()).collect();
    let s2 = p.signal_variance();
    let half = T::lit(0.5);
    let d = p.dim();
    Ok(DMatrix::from_fn(x1.nrows(), x2.nrows(), |i, j| {
        let mut r2 = T::zero();
        for k in 0..d {
            let t = (x1[(i, k)] - x2[(j, k)]) * inv_l[k];
            r2 += t * t;
        }
        s2 * (-half * r2).exp()
    }))
}

/// `K_ff - K_fu K_uu^{-1} K_uf` with its diagonal clamped at zero.
#[derive(Debug, Clone)]
pub struct ConditionalGap<T: Scalar> {
    pub matrix: DMatrix<T>,
    /// Largest amount added to a diagonal entry by clamping.
    pub clamped: T,
    pub jitter_used: T,
}

pub fn conditional_gap<T: Scalar>(x: &DMatrix<T>, z: &DMatrix<T>, p: &KernelParams<T>) -> Result<ConditionalGap<T>> {
    let kff = kernel_matrix(x, x, p)?;
    if z.nrows() == 0 {
        return Ok(ConditionalGap { matrix: kff, clamped: T::zero(), jitter_used: T::zero() });
    }
    let kfu = kernel_matrix(x, z, p)?;
    let kuu = chol(&kernel_matrix(z, z, p)?)?;
    let v = kuu.solve_lower(&kfu.transpose());
    let mut d = kff - v.transpose() * v;
    let clamped = clamp_diagonal(&mut d);
    Ok(ConditionalGap { matrix: d, clamped, jitter_used: kuu.jitter_used() })
}

pub(crate) fn clamp_diagonal<T: Scalar>(d: &mut DMatrix<T>) -> T {
    let mut clamped = T::zero();
    for i in 0..d.nrows() {
        if d[(i, i)] < T::zero() {
            clamped = clamped.max(-d[(i, i)]);
            d[(i, i)] = T::zero();
        }
    }
    clamped
}

/// Factorized inducing prior covariance together with `K_uu` itself.
pub(crate) fn kuu_factor<T: Scalar>(z: &DMatrix<T>, p: &KernelParams<T>) -> Result<(DMatrix<T>, Chol<T>)> {
    let kuu = kernel_matrix(z, z, p)?;
    let c = chol(&kuu)?;
    Ok((kuu, c))
}

/// Gradient of `sum_ij adj_ij k(x1_i, x2_j)` with respect to the log
/// lengthscales, the log signal variance and (optionally) the rows of `x2`.
///
/// `k` must be `kernel_matrix(x1, x2, p)`.
pub(crate) fn kernel_cross_grad<T: Scalar>(
    x1: &DMatrix<T>,
    x2: &DMatrix<T>,
    k: &DMatrix<T>,
    adj: &DMatrix<T>,
    p: &KernelParams<T>,
    want_x2: bool,
) -> (DVector<T>, T, Option<DMatrix<T>>) {
    let d = p.dim();
    let inv_l2: Vec<T> = p.log_lengthscales.iter().map(|l| (-(*l + *l)).exp()).collect();
    let mut dlen = DVector::zeros(d);
    let mut dvar = T::zero();
    let mut dx2 = if want_x2 { Some(DMatrix::zeros(x2.nrows(), d)) } else { None };
    for j in 0..x2.nrows() {
        for i in 0..x1.nrows() {
            let w = adj[(i, j)] * k[(i, j)];
            if w == T::zero() {
                continue;
            }
            dvar += w;
            for q in 0..d {
                let diff = x1[(i, q)] - x2[(j, q)];
                dlen[q] += w * diff * diff * inv_l2[q];
                if let Some(g) = dx2.as_mut() {
                    g[(j, q)] += w * diff * inv_l2[q];
                }
            }
        }
    }
    (dlen, dvar, dx2)
}

/// Same as [`kernel_cross_grad`] for `K(z, z)` where both arguments move.
/// `adj` is symmetrized internally.
pub(crate) fn kernel_sym_grad<T: Scalar>(
    z: &DMatrix<T>,
    k: &DMatrix<T>,
    adj: &DMatrix<T>,
    p: &KernelParams<T>,
) -> (DVector<T>, T, DMatrix<T>) {
    let half = T::lit(0.5);
    let sym = (adj + adj.transpose()) * half;
    let (dlen, dvar, _) = kernel_cross_grad(z, z, k, &sym, p, false);
    let d = p.dim();
    let inv_l2: Vec<T> = p.log_lengthscales.iter().map(|l| (-(*l + *l)).exp()).collect();
    let two = T::lit(2.0);
    let mut dz = DMatrix::zeros(z.nrows(), d);
    for i in 0..z.nrows() {
        for j in 0..z.nrows() {
            if i == j {
                continue;
            }
            let w = sym[(i, j)] * k[(i, j)];
            for q in 0..d {
                // d k(z_i, z_j) / d z_iq = k (z_jq - z_iq) / l_q^2, counted for (i,j) and (j,i)
                dz[(i, q)] += two * w * (z[(j, q)] - z[(i, q)]) * inv_l2[q];
            }
        }
    }
    (dlen, dvar, dz)
}
