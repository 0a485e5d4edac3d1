//! Shared evaluation machinery: kernel quantities over a row subset, penalty
//! terms, and reverse-mode accumulation of matrix adjoints into parameter
//! gradients.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::kernel::{clamp_diagonal, kernel_cross_grad, kernel_matrix, kernel_sym_grad, kuu_factor};
use crate::linalg::{chol, gather_rows, trace_product, Chol};
use crate::model::ModelState;
use crate::scalar::Scalar;

/// Gradient of an objective with respect to the log-parametrized model state.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad<T: Scalar> {
    pub log_lengthscales: DVector<T>,
    pub log_signal_variance: T,
    pub log_noise_variance: T,
    pub inducing: DMatrix<T>,
    /// Only meaningful when the objective depends on `m`.
    pub log_m: T,
}

impl<T: Scalar> ParamGrad<T> {
    pub fn zeros(d: usize, m: usize) -> Self {
        Self {
            log_lengthscales: DVector::zeros(d),
            log_signal_variance: T::zero(),
            log_noise_variance: T::zero(),
            inducing: DMatrix::zeros(m, d),
            log_m: T::zero(),
        }
    }
}

/// Gradient with respect to `q(u)` in (mean, Cholesky factor) form, where the
/// diagonal of the factor is log-parametrized. Only the lower triangle is used.
#[derive(Debug, Clone, PartialEq)]
pub struct QGrad<T: Scalar> {
    pub mean: DVector<T>,
    pub chol: DMatrix<T>,
}

/// Kernel quantities restricted to a subset of training rows.
pub(crate) struct SparseTerms<T: Scalar> {
    pub xs: DMatrix<T>,
    pub kfu: DMatrix<T>,
    pub kuu: DMatrix<T>,
    pub luu: Chol<T>,
    /// `L_uu^{-1} K_uf`, M x n.
    pub v: DMatrix<T>,
    /// `K_fu K_uu^{-1}`, n x M.
    pub proj: DMatrix<T>,
    pub noise: T,
}

impl<T: Scalar> SparseTerms<T> {
    pub fn new(xs: DMatrix<T>, state: &ModelState<T>) -> Result<Self> {
        let (kuu, luu) = kuu_factor(&state.inducing, &state.kernel)?;
        let kfu = kernel_matrix(&xs, &state.inducing, &state.kernel)?;
        let v = luu.solve_lower(&kfu.transpose());
        let proj = luu.solve_upper(&v).transpose();
        Ok(Self { xs, kfu, kuu, luu, v, proj, noise: state.noise_variance() })
    }

    pub fn for_rows(x: &DMatrix<T>, rows: &[usize], state: &ModelState<T>) -> Result<Self> {
        Self::new(gather_rows(x, rows), state)
    }

    pub fn jitter_used(&self) -> T {
        self.luu.jitter_used()
    }

    /// `D_bb` over local row positions `idx` (diagonal clamped at zero) and the
    /// matching prior block `K_ff,bb`.
    pub fn gap_block(&self, idx: &[usize], state: &ModelState<T>) -> Result<Gap<T>> {
        let xb = gather_rows(&self.xs, idx);
        let kff = kernel_matrix(&xb, &xb, &state.kernel)?;
        let vb = DMatrix::from_fn(self.v.nrows(), idx.len(), |i, j| self.v[(i, idx[j])]);
        let mut d = &kff - vb.transpose() * vb;
        let clamped = clamp_diagonal(&mut d);
        if clamped > T::zero() {
            log::debug!("conditional gap diagonal clamped by {:e}", clamped.to_f64().unwrap_or(f64::NAN));
        }
        Ok(Gap { d, kff })
    }

    pub fn proj_rows(&self, idx: &[usize]) -> DMatrix<T> {
        gather_rows(&self.proj, idx)
    }
}

pub(crate) struct Gap<T: Scalar> {
    pub d: DMatrix<T>,
    pub kff: DMatrix<T>,
}

/// Accumulates `dF/dK_fu`, `dF/dK_uu`, `dF/dK_ff,bb` and `dF/d sigma^2`.
pub(crate) struct Adjoint<T: Scalar> {
    pub kfu: DMatrix<T>,
    pub kuu: DMatrix<T>,
    kff_blocks: Vec<(Vec<usize>, DMatrix<T>, DMatrix<T>)>,
    pub noise: T,
    pub log_m: T,
}

impl<T: Scalar> Adjoint<T> {
    pub fn new(n: usize, m: usize) -> Self {
        Self {
            kfu: DMatrix::zeros(n, m),
            kuu: DMatrix::zeros(m, m),
            kff_blocks: Vec::new(),
            noise: T::zero(),
            log_m: T::zero(),
        }
    }

    /// Pushes an adjoint of `D_bb = K_ff,bb - A_b K_uf,b` back to the kernel matrices.
    pub fn add_gap(&mut self, terms: &SparseTerms<T>, idx: &[usize], gap: &Gap<T>, p: DMatrix<T>) {
        let proj_b = terms.proj_rows(idx);
        let pa = &p * &proj_b;
        let two = T::lit(2.0);
        for (i, &gi) in idx.iter().enumerate() {
            for j in 0..self.kfu.ncols() {
                self.kfu[(gi, j)] -= two * pa[(i, j)];
            }
        }
        self.kuu += proj_b.transpose() * pa;
        self.kff_blocks.push((idx.to_vec(), gap.kff.clone(), p));
    }

    /// Adjoint of `A = K_fu,b K_uu^{-1}` for local rows `idx`.
    pub fn add_proj(&mut self, terms: &SparseTerms<T>, idx: &[usize], abar: &DMatrix<T>) {
        let kfu_adj = terms.luu.solve(&abar.transpose()).transpose();
        for (i, &gi) in idx.iter().enumerate() {
            for j in 0..self.kfu.ncols() {
                self.kfu[(gi, j)] += kfu_adj[(i, j)];
            }
        }
        let proj_b = terms.proj_rows(idx);
        self.kuu -= proj_b.transpose() * kfu_adj;
    }

    pub fn finish(self, terms: &SparseTerms<T>, state: &ModelState<T>) -> ParamGrad<T> {
        let p = &state.kernel;
        let z = &state.inducing;
        let (mut dlen, mut dvar, dz_cross) = kernel_cross_grad(&terms.xs, z, &terms.kfu, &self.kfu, p, true);
        let (dlen_u, dvar_u, dz_u) = kernel_sym_grad(z, &terms.kuu, &self.kuu, p);
        dlen += dlen_u;
        dvar += dvar_u;
        let mut dz = dz_u;
        if let Some(g) = dz_cross {
            dz += g;
        }
        for (idx, kff, adj) in &self.kff_blocks {
            let xb = gather_rows(&terms.xs, idx);
            let (dl, dv, _) = kernel_cross_grad(&xb, &xb, kff, adj, p, false);
            dlen += dl;
            dvar += dv;
        }
        ParamGrad {
            log_lengthscales: dlen,
            log_signal_variance: dvar,
            log_noise_variance: self.noise * terms.noise,
            inducing: dz,
            log_m: self.log_m,
        }
    }
}

/// Regularization term applied to the conditional gap blocks.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Penalty<T: Scalar> {
    /// `-(1/2 sigma^2) sum tr D_bb`
    Trace,
    /// `-(1/2) sum_n log(1 + d_nn / sigma^2)`
    Diag,
    /// `-coeff * sum_b log|I + weight D_bb / sigma^2|`
    LogDet { coeff: T, weight: T },
    /// `-(B/2) log|I + (1/(B sigma^2)) sum_b D_bb|`, equal-size blocks
    Shared,
}

pub(crate) struct PenaltyEval<T: Scalar> {
    pub value: T,
    /// Adjoint with respect to each `D_bb` (empty when gradients are not requested).
    pub gap_adj: Vec<DMatrix<T>>,
    pub noise_adj: T,
    pub weight_adj: T,
}

pub(crate) fn eval_penalty<T: Scalar>(
    penalty: Penalty<T>,
    gaps: &[&DMatrix<T>],
    noise: T,
    want_grad: bool,
) -> Result<PenaltyEval<T>> {
    let half = T::lit(0.5);
    let mut out = PenaltyEval { value: T::zero(), gap_adj: Vec::new(), noise_adj: T::zero(), weight_adj: T::zero() };
    match penalty {
        Penalty::Trace => {
            let inv = T::one() / noise;
            for d in gaps {
                let tr = d.trace();
                out.value -= half * inv * tr;
                if want_grad {
                    out.gap_adj.push(DMatrix::identity(d.nrows(), d.nrows()) * (-half * inv));
                    out.noise_adj += half * tr * inv * inv;
                }
            }
        }
        Penalty::Diag => {
            for d in gaps {
                let n = d.nrows();
                let mut adj = DMatrix::zeros(n, n);
                for i in 0..n {
                    let dii = d[(i, i)];
                    out.value -= half * (dii / noise).ln_1p();
                    if want_grad {
                        adj[(i, i)] = -half / (noise + dii);
                        out.noise_adj += half * dii / (noise * (noise + dii));
                    }
                }
                if want_grad {
                    out.gap_adj.push(adj);
                }
            }
        }
        Penalty::LogDet { coeff, weight } => {
            for d in gaps {
                let n = d.nrows();
                let mut a = *d * weight;
                for i in 0..n {
                    a[(i, i)] += noise;
                }
                let c = chol(&a)?;
                let logdet = c.logdet() - T::from_count(n) * noise.ln();
                out.value -= coeff * logdet;
                if want_grad {
                    let h = c.inverse();
                    out.noise_adj -= coeff * (h.trace() - T::from_count(n) / noise);
                    out.weight_adj -= coeff * trace_product(&h, d);
                    out.gap_adj.push(h * (-coeff * weight));
                }
            }
        }
        Penalty::Shared => {
            let b = gaps.len();
            if b == 0 {
                return Ok(out);
            }
            let n = gaps[0].nrows();
            let bs = T::from_count(b);
            let mut a = DMatrix::zeros(n, n);
            for d in gaps {
                a += *d;
            }
            for i in 0..n {
                a[(i, i)] += bs * noise;
            }
            let c = chol(&a)?;
            let logdet = c.logdet() - T::from_count(n) * (bs * noise).ln();
            out.value = -half * bs * logdet;
            if want_grad {
                let h = c.inverse();
                out.noise_adj = -half * bs * (bs * h.trace() - T::from_count(n) / noise);
                let g = h * (-half * bs);
                out.gap_adj = vec![g; b];
            }
        }
    }
    Ok(out)
}

/// Extra T-PEP terms `-(n/2 alpha) log(1 + alpha (m - 1)) + (n/2) log m` for `n` points.
pub(crate) fn m_terms<T: Scalar>(alpha: T, m: T, n: usize) -> (T, T) {
    let half = T::lit(0.5);
    let nn = T::from_count(n);
    let value = -half * nn / alpha * (alpha * (m - T::one())).ln_1p() + half * nn * m.ln();
    // derivative with respect to log m
    let dlogm = (-half * nn / (T::one() + alpha * (m - T::one())) + half * nn / m) * m;
    (value, dlogm)
}

