//! Collapsed objectives of the form
//! `log N(y; 0, Q_ff + c blkdiag(D_bb) + sigma^2 I) + penalty(D) [+ m terms]`.

use nalgebra::{DMatrix, DVector};

use super::engine::{eval_penalty, m_terms, Adjoint, Gap, ParamGrad, Penalty, SparseTerms};
use super::BoundBreakdown;
use crate::error::Result;
use crate::linalg::{trace_product, BlockDiagonal, LowRankPlusBlocks};
use crate::model::{ModelState, Observations};
use crate::scalar::Scalar;

/// Dependence of the inflation and penalty weight on the scalar `m`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct TiedScale<T: Scalar> {
    pub alpha: T,
    pub m: T,
    /// Whether `d/d log m` is requested.
    pub trainable: bool,
}

pub(crate) struct CollapsedSpec<'a, T: Scalar> {
    pub blocks: &'a [Vec<usize>],
    /// `c` in `c blkdiag(D_bb) + sigma^2 I`.
    pub inflation: T,
    pub penalty: Penalty<T>,
    /// Present for T-PEP: inflation and penalty weight both equal `alpha m`,
    /// and the `m` terms are added.
    pub tied: Option<TiedScale<T>>,
}

pub(crate) struct CollapsedEval<T: Scalar> {
    pub breakdown: BoundBreakdown<T>,
    pub grad: Option<ParamGrad<T>>,
    pub gaps: Vec<DMatrix<T>>,
}

pub(crate) fn collapsed<T: Scalar>(
    obs: &Observations<T>,
    state: &ModelState<T>,
    spec: &CollapsedSpec<'_, T>,
    want_grad: bool,
) -> Result<CollapsedEval<T>> {
    let n = obs.len();
    let terms = SparseTerms::new(obs.x.clone(), state)?;
    let noise = terms.noise;
    let gaps: Vec<Gap<T>> = spec.blocks.iter().map(|idx| terms.gap_block(idx, state)).collect::<Result<_>>()?;

    let inflation = spec.inflation;
    let a = if inflation == T::zero() {
        BlockDiagonal::zeros(spec.blocks.to_vec())
    } else {
        BlockDiagonal::new(spec.blocks.to_vec(), gaps.iter().map(|g| &g.d * inflation).collect())?
    };
    let lr = LowRankPlusBlocks::new(&terms.v, &a, noise)?;
    let fit = lr.logpdf(&obs.y);

    let gap_refs: Vec<&DMatrix<T>> = gaps.iter().map(|g| &g.d).collect();
    let pen = eval_penalty(spec.penalty, &gap_refs, noise, want_grad)?;
    let (mval, mgrad) = match spec.tied {
        Some(t) => m_terms(t.alpha, t.m, n),
        None => (T::zero(), T::zero()),
    };
    let regularizer = pen.value + mval;
    let jitter = terms.jitter_used().max(lr.jitter_used());
    let breakdown = BoundBreakdown::new(fit, regularizer, jitter);

    if !want_grad {
        return Ok(CollapsedEval { breakdown, grad: None, gaps: gaps.into_iter().map(|g| g.d).collect() });
    }

    let half = T::lit(0.5);
    let m = state.num_inducing();
    let mut adj = Adjoint::new(n, m);
    let beta = lr.solve_vec(&obs.y);
    let s_proj = lr.solve(&terms.proj);
    let pb = terms.proj.transpose() * &beta;
    // G = (beta beta^T - Sigma^{-1}) / 2, pushed through Q = K_fu K_uu^{-1} K_uf
    let g_proj = (&beta * pb.transpose() - &s_proj) * half;
    adj.kfu += &g_proj * T::lit(2.0);
    adj.kuu -= (&pb * pb.transpose() - terms.proj.transpose() * &s_proj) * half;

    let mut inflation_adj = T::zero();
    let mut gap_adj = pen.gap_adj;
    for (b, idx) in spec.blocks.iter().enumerate() {
        let beta_b = DVector::from_fn(idx.len(), |i, _| beta[idx[i]]);
        let g_bb = (&beta_b * beta_b.transpose() - lr.inverse_block(b)) * half;
        adj.noise += g_bb.trace();
        if inflation != T::zero() {
            inflation_adj += trace_product(&g_bb, &gaps[b].d);
            gap_adj[b] += g_bb * inflation;
        }
    }
    adj.noise += pen.noise_adj;
    if let Some(t) = spec.tied {
        if t.trainable {
            adj.log_m = (inflation_adj + pen.weight_adj) * t.alpha * t.m + mgrad;
        }
    }
    for ((idx, gap), p) in spec.blocks.iter().zip(&gaps).zip(gap_adj) {
        adj.add_gap(&terms, idx, gap, p);
    }
    let grad = adj.finish(&terms, state);
    Ok(CollapsedEval { breakdown, grad: Some(grad), gaps: gaps.into_iter().map(|g| g.d).collect() })
}
