//! Variational and Power-EP objectives for sparse GP regression.
//!
//! Every objective is evaluated in `O(N M^2 + M^3 + sum_b N_b^3)` except the
//! dense oracles, which are restricted to small `N`.

mod collapsed;
mod engine;
pub mod pep;
mod uncollapsed;
pub mod vi;

use nalgebra::DMatrix;
use serde::Serialize;

pub use engine::{ParamGrad, QGrad};
pub use pep::{
    general_pep_oracle, pep_collapsed, pep_iterate, tpep_collapsed, tpep_optimal_qu, tpep_uncollapsed,
    verify_site_fixed_point, FixedPointReport, PepConfig, PepRun, SiteFactor,
};
pub use vi::{
    btsgpr_collapsed, btsgpr_stochastic, btsgpr_uncollapsed, exact_lml, general_c_oracle, kl_qu, optimal_mb,
    optimal_qu, sgpr_collapsed, sharedblock_collapsed, spherical_collapsed, tsgpr_collapsed, ConditionalPenalty,
    SphericalBound,
};

use crate::error::{GpError, Result};
use crate::model::{BoundSpec, GaussianQU, Method, ModelState, Observations, Partition};
use crate::scalar::Scalar;

use collapsed::{collapsed, CollapsedSpec, TiedScale};
use engine::Penalty;
use uncollapsed::{uncollapsed, UncollapsedSpec};

/// Largest N for which the exact log marginal likelihood is evaluated.
pub const EXACT_DENSE_CAP: usize = 5000;
/// Largest N accepted by the dense general-C / general-PEP oracles.
pub const ORACLE_CAP: usize = 200;

/// Objective value split into its data-fit and regularization parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundBreakdown<T: Scalar> {
    pub total: T,
    pub fit_term: T,
    pub regularizer: T,
    pub jitter_used: T,
}

impl<T: Scalar> BoundBreakdown<T> {
    pub fn new(fit_term: T, regularizer: T, jitter_used: T) -> Self {
        Self { total: fit_term + regularizer, fit_term, regularizer, jitter_used }
    }
}

/// Which blocks of an uncollapsed objective to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockSelection {
    All,
    /// One block, scaled by the block count (unbiased estimator of the full sum).
    One(usize),
}

fn check_oracle_size(n: usize) -> Result<()> {
    if n > ORACLE_CAP {
        return Err(GpError::InvalidArgument(format!(
            "dense oracle is limited to N <= {ORACLE_CAP}, got N = {n}"
        )));
    }
    Ok(())
}

fn m_of<T: Scalar>(state: &ModelState<T>) -> T {
    state.m_scale().unwrap_or_else(T::one)
}

fn alpha_of<T: Scalar>(spec: &BoundSpec) -> Result<T> {
    spec.alpha
        .map(T::lit)
        .ok_or_else(|| GpError::InvalidArgument(format!("alpha: required by method {}", spec.method)))
}

/// Evaluates the collapsed objective selected by `spec` and, optionally, its
/// gradient with respect to the model state.
///
/// `partition` supplies the blocks for block-structured methods; methods with
/// block size one ignore it unless they are PEP families configured with blocks.
pub fn evaluate<T: Scalar>(
    obs: &Observations<T>,
    state: &ModelState<T>,
    spec: &BoundSpec,
    partition: &Partition,
    want_grad: bool,
) -> Result<(BoundBreakdown<T>, Option<ParamGrad<T>>)> {
    spec.validate_for(obs.len())?;
    let n = obs.len();
    let half = T::lit(0.5);
    let singletons;
    let blocks: &[Vec<usize>] = match spec.method {
        Method::Sgpr | Method::TSgpr | Method::Spherical => {
            singletons = Partition::singletons(n);
            singletons.blocks()
        }
        _ => {
            if partition.len() != n {
                return Err(GpError::LengthMismatch { expected: n, got: partition.len() });
            }
            partition.blocks()
        }
    };
    let cspec = match spec.method {
        Method::Exact => return vi::exact_eval(obs, state, want_grad),
        Method::GeneralCOracle => {
            let (c, _) = vi::optimal_c_dense(obs, state, partition)?;
            return Ok((vi::general_c_oracle(obs, state, &c)?, None));
        }
        Method::GeneralPepOracle => {
            let mb = vi::optimal_mb(obs, state, partition)?;
            return Ok((pep::general_pep_oracle(obs, state, alpha_of(spec)?, partition, &mb)?, None));
        }
        Method::Sgpr => CollapsedSpec { blocks, inflation: T::zero(), penalty: Penalty::Trace, tied: None },
        Method::TSgpr => CollapsedSpec { blocks, inflation: T::zero(), penalty: Penalty::Diag, tied: None },
        Method::BtSgpr => CollapsedSpec {
            blocks,
            inflation: T::zero(),
            penalty: Penalty::LogDet { coeff: half, weight: T::one() },
            tied: None,
        },
        Method::SharedBlock | Method::Spherical => {
            if !partition.equal_sizes() && spec.method == Method::SharedBlock {
                return Err(GpError::InvalidArgument("shared-block bound needs equal block sizes".into()));
            }
            CollapsedSpec { blocks, inflation: T::zero(), penalty: Penalty::Shared, tied: None }
        }
        Method::Pep => {
            let alpha: T = alpha_of(spec)?;
            CollapsedSpec {
                blocks,
                inflation: alpha,
                penalty: Penalty::LogDet { coeff: (T::one() - alpha) / (alpha + alpha), weight: alpha },
                tied: None,
            }
        }
        Method::TPep => {
            let alpha: T = alpha_of(spec)?;
            let m = m_of(state);
            pep::check_tpep(alpha, m)?;
            CollapsedSpec {
                blocks,
                inflation: alpha * m,
                penalty: Penalty::LogDet { coeff: (T::one() - alpha) / (alpha + alpha), weight: alpha * m },
                tied: Some(TiedScale { alpha, m, trainable: true }),
            }
        }
    };
    let out = collapsed(obs, state, &cspec, want_grad)?;
    Ok((out.breakdown, out.grad))
}

/// Evaluates the uncollapsed counterpart of `spec` for an explicit `q(u)`.
pub fn evaluate_uncollapsed<T: Scalar>(
    obs: &Observations<T>,
    state: &ModelState<T>,
    spec: &BoundSpec,
    partition: &Partition,
    q: &GaussianQU<T>,
    selection: BlockSelection,
    want_grad: bool,
) -> Result<(BoundBreakdown<T>, Option<(ParamGrad<T>, QGrad<T>)>)> {
    spec.validate_for(obs.len())?;
    let n = obs.len();
    let half = T::lit(0.5);
    let (uspec, blocks) = match spec.method {
        Method::Sgpr => (UncollapsedSpec { inflation: T::zero(), penalty: Penalty::Trace, tied: None }, None),
        Method::TSgpr => (UncollapsedSpec { inflation: T::zero(), penalty: Penalty::Diag, tied: None }, None),
        Method::BtSgpr => (
            UncollapsedSpec { inflation: T::zero(), penalty: Penalty::LogDet { coeff: half, weight: T::one() }, tied: None },
            None,
        ),
        Method::SharedBlock | Method::Spherical => {
            if selection != BlockSelection::All {
                return Err(GpError::InvalidArgument(format!(
                    "{} penalty couples all blocks; the one-block estimator is not defined",
                    spec.method
                )));
            }
            if spec.method == Method::SharedBlock && !partition.equal_sizes() {
                return Err(GpError::InvalidArgument("shared-block bound needs equal block sizes".into()));
            }
            let single = (spec.method == Method::Spherical).then(|| Partition::singletons(n));
            (UncollapsedSpec { inflation: T::zero(), penalty: Penalty::Shared, tied: None }, single)
        }
        Method::Pep => {
            let alpha: T = alpha_of(spec)?;
            (
                UncollapsedSpec {
                    inflation: alpha,
                    penalty: Penalty::LogDet { coeff: (T::one() - alpha) / (alpha + alpha), weight: alpha },
                    tied: None,
                },
                None,
            )
        }
        Method::TPep => {
            let alpha: T = alpha_of(spec)?;
            let m = m_of(state);
            pep::check_tpep(alpha, m)?;
            (
                UncollapsedSpec {
                    inflation: alpha * m,
                    penalty: Penalty::LogDet { coeff: (T::one() - alpha) / (alpha + alpha), weight: alpha * m },
                    tied: Some(TiedScale { alpha, m, trainable: true }),
                },
                None,
            )
        }
        Method::Exact | Method::GeneralCOracle | Method::GeneralPepOracle => {
            return Err(GpError::InvalidArgument(format!("method: {} has no uncollapsed form", spec.method)))
        }
    };
    let part = blocks.as_ref().unwrap_or(partition);
    if part.len() != n {
        return Err(GpError::LengthMismatch { expected: n, got: part.len() });
    }
    let (selected, weight): (Vec<usize>, T) = match selection {
        BlockSelection::All => ((0..part.num_blocks()).collect(), T::one()),
        BlockSelection::One(b) => {
            if b >= part.num_blocks() {
                return Err(GpError::IndexOutOfRange { index: b, len: part.num_blocks() });
            }
            (vec![b], T::from_count(part.num_blocks()))
        }
    };
    let out = uncollapsed(obs, state, part.blocks(), &selected, weight, q, &uspec, want_grad)?;
    Ok((out.breakdown, out.grad))
}

/// Optimal `q(u)` associated with a collapsed objective: the VI posterior for
/// variational methods, the Power-EP posterior for PEP families.
pub fn method_optimal_qu<T: Scalar>(
    obs: &Observations<T>,
    state: &ModelState<T>,
    spec: &BoundSpec,
    partition: &Partition,
) -> Result<GaussianQU<T>> {
    match spec.method {
        Method::Pep | Method::TPep => {
            let alpha: T = alpha_of(spec)?;
            let m = if spec.method == Method::TPep { m_of(state) } else { T::one() };
            let part = if spec.num_blocks.is_some() { partition.clone() } else { Partition::singletons(obs.len()) };
            tpep_optimal_qu(obs, state, &PepConfig { alpha, m_scale: m, partition: part })
        }
        _ => vi::optimal_qu(obs, state, &crate::linalg::BlockDiagonal::zeros(Partition::singletons(obs.len()).blocks().to_vec())),
    }
}

pub(crate) fn dense_gap<T: Scalar>(obs: &Observations<T>, state: &ModelState<T>) -> Result<DMatrix<T>> {
    Ok(crate::kernel::conditional_gap(&obs.x, &state.inducing, &state.kernel)?.matrix)
}
