//! Variational objectives: exact marginal likelihood, the collapsed and
//! uncollapsed bounds with identity / spherical / diagonal / block-diagonal
//! scaling, the optimal `q(u)` and the dense general-C oracle.

use nalgebra::{DMatrix, DVector};

use super::collapsed::{collapsed, CollapsedSpec};
use super::engine::{Penalty, ParamGrad};
use super::uncollapsed::{kl_from_factors, uncollapsed, UncollapsedSpec};
use super::{check_oracle_size, dense_gap, BoundBreakdown, EXACT_DENSE_CAP};
use crate::error::{GpError, Result};
use crate::kernel::{kernel_cross_grad, kernel_matrix, kuu_factor};
use crate::linalg::{chol, logpdf_from_chol, psd_sqrt, BlockDiagonal, Chol, LowRankPlusBlocks};
use crate::model::{GaussianQU, ModelState, Observations, Partition};
use crate::scalar::Scalar;

/// Penalty applied to the conditional gap in the uncollapsed bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionalPenalty {
    /// `-(1/2 sigma^2) tr D` (identity scaling).
    Trace,
    /// `-(1/2) sum_n log(1 + d_nn / sigma^2)` (diagonal scaling).
    Diagonal,
    /// `-(1/2) sum_b log|I + D_bb / sigma^2|` (block-diagonal scaling).
    Block,
    /// One scaling matrix shared by all (equal-size) blocks.
    Shared,
}

impl ConditionalPenalty {
    fn engine<T: Scalar>(self) -> Penalty<T> {
        match self {
            Self::Trace => Penalty::Trace,
            Self::Diagonal => Penalty::Diag,
            Self::Block => Penalty::LogDet { coeff: T::lit(0.5), weight: T::one() },
            Self::Shared => Penalty::Shared,
        }
    }
}

/// Spherical bound together with its optimal scalar `m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalBound<T: Scalar> {
    pub bound: BoundBreakdown<T>,
    pub m: T,
}

/// `log N(y; 0, K_ff + sigma^2 I)`, evaluated densely.
pub fn exact_lml<T: Scalar>(obs: &Observations<T>, state: &ModelState<T>) -> Result<BoundBreakdown<T>> {
    Ok(exact_eval(obs, state, false)?.0)
}

pub(crate) fn exact_eval<T: Scalar>(
    obs: &Observations<T>,
    state: &ModelState<T>,
    want_grad: bool,
) -> Result<(BoundBreakdown<T>, Option<ParamGrad<T>>)> {
    let n = obs.len();
    if n > EXACT_DENSE_CAP {
        return Err(GpError::InvalidArgument(format!(
            "exact marginal likelihood is limited to N <= {EXACT_DENSE_CAP}, got N = {n}"
        )));
    }
    let kff = kernel_matrix(&obs.x, &obs.x, &state.kernel)?;
    let noise = state.noise_variance();
    let mut cov = kff.clone();
    for i in 0..n {
        cov[(i, i)] += noise;
    }
    let c = chol(&cov)?;
    let value = logpdf_from_chol(&obs.y, &c);
    let breakdown = BoundBreakdown::new(value, T::zero(), c.jitter_used());
    if !want_grad {
        return Ok((breakdown, None));
    }
    let half = T::lit(0.5);
    let beta = c.solve_vec(&obs.y);
    let g = (&beta * beta.transpose() - c.inverse()) * half;
    let (dlen, dvar, _) = kernel_cross_grad(&obs.x, &obs.x, &kff, &g, &state.kernel, false);
    let mut grad = ParamGrad::zeros(obs.input_dim(), state.num_inducing());
    grad.log_lengthscales = dlen;
    grad.log_signal_variance = dvar;
    grad.log_noise_variance = g.trace() * noise;
    Ok((breakdown, Some(grad)))
}

fn run<T: Scalar>(
    obs: &Observations<T>,
    state: &ModelState<T>,
    blocks: &[Vec<usize>],
    penalty: Penalty<T>,
) -> Result<BoundBreakdown<T>> {
    let spec = CollapsedSpec { blocks, inflation: T::zero(), penalty, tied: None };
    Ok(collapsed(obs, state, &spec, false)?.breakdown)
}

fn check_partition(obs_len: usize, partition: &Partition) -> Result<()> {
    if partition.len() != obs_len {
        return Err(GpError::LengthMismatch { expected: obs_len, got: partition.len() });
    }
    Ok(())
}

/// `log N(y; 0, Q_ff + sigma^2 I) - tr(D_ff) / (2 sigma^2)`.
pub fn sgpr_collapsed<T: Scalar>(obs: &Observations<T>, state: &ModelState<T>) -> Result<BoundBreakdown<T>> {
    run(obs, state, Partition::singletons(obs.len()).blocks(), Penalty::Trace)
}

/// `log N(y; 0, Q_ff + sigma^2 I) - (1/2) sum_n log(1 + d_nn / sigma^2)`.
pub fn tsgpr_collapsed<T: Scalar>(obs: &Observations<T>, state: &ModelState<T>) -> Result<BoundBreakdown<T>> {
    run(obs, state, Partition::singletons(obs.len()).blocks(), Penalty::Diag)
}

/// `log N(y; 0, Q_ff + sigma^2 I) - (1/2) sum_b log|I + D_bb / sigma^2|`.
pub fn btsgpr_collapsed<T: Scalar>(
    obs: &Observations<T>,
    state: &ModelState<T>,
    partition: &Partition,
) -> Result<BoundBreakdown<T>> {
    check_partition(obs.len(), partition)?;
    run(obs, state, partition.blocks(), Penalty::LogDet { coeff: T::lit(0.5), weight: T::one() })
}

/// Optimal block scaling `m_b = (I + D_bb / sigma^2)^{-1}`.
pub fn optimal_mb<T: Scalar>(
    obs: &Observations<T>,
    state: &ModelState<T>,
    partition: &Partition,
) -> Result<BlockDiagonal<T>> {
    check_partition(obs.len(), partition)?;
    let gap = dense_gap(obs, state)?;
    let noise = state.noise_variance();
    let blocks = partition
        .blocks()
        .iter()
        .map(|idx| {
            let mut a = DMatrix::from_fn(idx.len(), idx.len(), |i, j| gap[(idx[i], idx[j])] / noise);
            for i in 0..idx.len() {
                a[(i, i)] += T::one();
            }
            Ok(chol(&a)?.inverse())
        })
        .collect::<Result<Vec<_>>>()?;
    BlockDiagonal::new(partition.blocks().to_vec(), blocks)
}

/// `log N(y; 0, Q_ff + sigma^2 I) - (B/2) log|I + (1 / (B sigma^2)) sum_b D_bb|`.
pub fn sharedblock_collapsed<T: Scalar>(
    obs: &Observations<T>,
    state: &ModelState<T>,
    partition: &Partition,
) -> Result<BoundBreakdown<T>> {
    check_partition(obs.len(), partition)?;
    if !partition.equal_sizes() {
        return Err(GpError::InvalidArgument("shared-block bound needs equal block sizes".into()));
    }
    run(obs, state, partition.blocks(), Penalty::Shared)
}

/// Shared bound with block size one; `m = (1 + sum_n d_nn / (N sigma^2))^{-1}`.
pub fn spherical_collapsed<T: Scalar>(obs: &Observations<T>, state: &ModelState<T>) -> Result<SphericalBound<T>> {
    let n = obs.len();
    let single = Partition::singletons(n);
    let spec = CollapsedSpec {
        blocks: single.blocks(),
        inflation: T::zero(),
        penalty: Penalty::Shared,
        tied: None,
    };
    let out = collapsed(obs, state, &spec, false)?;
    let total_gap = out.gaps.iter().fold(T::zero(), |acc, d| acc + d[(0, 0)]);
    let m = T::one() / (T::one() + total_gap / (T::from_count(n) * state.noise_variance()));
    Ok(SphericalBound { bound: out.breakdown, m })
}

/// Optimal spherical `m` alone.
pub fn optimal_spherical_m<T: Scalar>(obs: &Observations<T>, state: &ModelState<T>) -> Result<T> {
    Ok(spherical_collapsed(obs, state)?.m)
}

/// `C = D^{1/2} M* D^{1/2}` with `M*` the optimal block scaling, together with `M*`.
pub fn optimal_c_dense<T: Scalar>(
    obs: &Observations<T>,
    state: &ModelState<T>,
    partition: &Partition,
) -> Result<(DMatrix<T>, BlockDiagonal<T>)> {
    check_oracle_size(obs.len())?;
    let mb = optimal_mb(obs, state, partition)?;
    let root = psd_sqrt(&dense_gap(obs, state)?);
    let c = &root * mb.to_dense() * &root;
    Ok((c, mb))
}

/// Dense evaluation of the collapsed bound for an arbitrary PSD conditional
/// covariance `C`:
/// `log N(y; 0, Q_ff + sigma^2 I) - (1/2) tr[(D^{-1} + I / sigma^2) C] - (1/2) log|C^{-1} D| + N/2`.
pub fn general_c_oracle<T: Scalar>(
    obs: &Observations<T>,
    state: &ModelState<T>,
    c: &DMatrix<T>,
) -> Result<BoundBreakdown<T>> {
    let n = obs.len();
    check_oracle_size(n)?;
    if c.nrows() != n || c.ncols() != n {
        return Err(GpError::DimensionMismatch(format!("C must be {n}x{n}, got {}x{}", c.nrows(), c.ncols())));
    }
    let (_, luu) = kuu_factor(&state.inducing, &state.kernel)?;
    let kfu = kernel_matrix(&obs.x, &state.inducing, &state.kernel)?;
    let v = luu.solve_lower(&kfu.transpose());
    let noise = state.noise_variance();
    let lr = LowRankPlusBlocks::new(&v, &BlockDiagonal::zeros(vec![(0..n).collect()]), noise)?;
    let fit = lr.logpdf(&obs.y);

    let d = dense_gap(obs, state)?;
    let dc = chol(&d)?;
    let cc = chol(c)?;
    let half = T::lit(0.5);
    let tr_dinv_c = dc.solve(c).trace();
    let reg = -half * (tr_dinv_c + c.trace() / noise) - half * (dc.logdet() - cc.logdet())
        + half * T::from_count(n);
    let jitter = luu.jitter_used().max(lr.jitter_used()).max(dc.jitter_used()).max(cc.jitter_used());
    Ok(BoundBreakdown::new(fit, reg, jitter))
}

/// Optimal `q(u)` for the Gaussian likelihood `N(y; K_fu K_uu^{-1} u, R)` with
/// `R = blkdiag(extra_b) + sigma^2 I`:
/// `S = L_uu B^{-1} L_uu^T`, `mean = L_uu B^{-1} V R^{-1} y`, `B = I + V R^{-1} V^T`.
pub fn optimal_qu<T: Scalar>(
    obs: &Observations<T>,
    state: &ModelState<T>,
    extra: &BlockDiagonal<T>,
) -> Result<GaussianQU<T>> {
    let (_, luu) = kuu_factor(&state.inducing, &state.kernel)?;
    let kfu = kernel_matrix(&obs.x, &state.inducing, &state.kernel)?;
    let v = luu.solve_lower(&kfu.transpose());
    qu_from_parts(&luu, &v, &obs.y, extra, state.noise_variance())
}

pub(crate) fn qu_from_parts<T: Scalar>(
    luu: &Chol<T>,
    v: &DMatrix<T>,
    y: &DVector<T>,
    extra: &BlockDiagonal<T>,
    noise: T,
) -> Result<GaussianQU<T>> {
    let m = v.nrows();
    let lr = LowRankPlusBlocks::new(v, extra, noise)?;
    let rinv_vt = lr.a_solve(&v.transpose());
    let mut b = v * &rinv_vt;
    for i in 0..m {
        b[(i, i)] += T::one();
    }
    let bc = chol(&b)?;
    let ym = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
    let rhs = rinv_vt.transpose() * ym;
    let mean = luu.lower() * bc.solve(&rhs);
    let w = bc.solve_lower(&luu.lower().transpose());
    let s = w.transpose() * w;
    let s_chol = chol(&s)?;
    GaussianQU::new(DVector::from_column_slice(mean.as_slice()), s_chol)
}

/// `KL[q(u) || p(u)]` with `p(u) = N(0, K_uu)`.
pub fn kl_qu<T: Scalar>(q: &GaussianQU<T>, state: &ModelState<T>) -> Result<T> {
    if q.dim() != state.num_inducing() {
        return Err(GpError::LengthMismatch { expected: state.num_inducing(), got: q.dim() });
    }
    let (_, luu) = kuu_factor(&state.inducing, &state.kernel)?;
    Ok(kl_from_factors(q, &luu))
}

/// Uncollapsed bound with an explicit `q(u)`; `penalty` selects the scaling
/// structure (identity, diagonal, block-diagonal or shared).
pub fn btsgpr_uncollapsed<T: Scalar>(
    obs: &Observations<T>,
    state: &ModelState<T>,
    partition: &Partition,
    q: &GaussianQU<T>,
    penalty: ConditionalPenalty,
) -> Result<BoundBreakdown<T>> {
    check_partition(obs.len(), partition)?;
    if penalty == ConditionalPenalty::Shared && !partition.equal_sizes() {
        return Err(GpError::InvalidArgument("shared-block bound needs equal block sizes".into()));
    }
    let spec = UncollapsedSpec { inflation: T::zero(), penalty: penalty.engine(), tied: None };
    let all: Vec<usize> = (0..partition.num_blocks()).collect();
    Ok(uncollapsed(obs, state, partition.blocks(), &all, T::one(), q, &spec, false)?.breakdown)
}

/// One-block estimator `-KL[q||p] + B * (block term of block_index)` of the
/// block-diagonal uncollapsed bound.
pub fn btsgpr_stochastic<T: Scalar>(
    obs: &Observations<T>,
    state: &ModelState<T>,
    partition: &Partition,
    q: &GaussianQU<T>,
    block_index: usize,
) -> Result<T> {
    check_partition(obs.len(), partition)?;
    if block_index >= partition.num_blocks() {
        return Err(GpError::IndexOutOfRange { index: block_index, len: partition.num_blocks() });
    }
    let spec = UncollapsedSpec {
        inflation: T::zero(),
        penalty: ConditionalPenalty::Block.engine(),
        tied: None,
    };
    let weight = T::from_count(partition.num_blocks());
    let out = uncollapsed(obs, state, partition.blocks(), &[block_index], weight, q, &spec, false)?;
    Ok(out.breakdown.total)
}
