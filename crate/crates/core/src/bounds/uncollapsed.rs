//! Uncollapsed objectives with an explicit `q(u)`:
//! `-KL[q||p] + w sum_b { E_q log N(y_b; A_b u, c D_bb + sigma^2 I) + penalty_b }`.

use nalgebra::{DMatrix, DVector};

use super::collapsed::TiedScale;
use super::engine::{eval_penalty, m_terms, Adjoint, Gap, ParamGrad, Penalty, QGrad, SparseTerms};
use super::BoundBreakdown;
use crate::error::{GpError, Result};
use crate::linalg::{chol, trace_product, Chol};
use crate::model::{GaussianQU, ModelState, Observations};
use crate::scalar::Scalar;

pub(crate) struct UncollapsedSpec<T: Scalar> {
    pub inflation: T,
    pub penalty: Penalty<T>,
    pub tied: Option<TiedScale<T>>,
}

pub(crate) struct UncollapsedEval<T: Scalar> {
    pub breakdown: BoundBreakdown<T>,
    pub grad: Option<(ParamGrad<T>, QGrad<T>)>,
}

/// `KL[N(m, S) || N(0, K_uu)]`.
pub(crate) fn kl_from_factors<T: Scalar>(q: &GaussianQU<T>, luu: &Chol<T>) -> T {
    let half = T::lit(0.5);
    let ls = q.cov_chol.lower();
    let a = luu.solve_lower(ls);
    let tr = a.iter().fold(T::zero(), |acc, &v| acc + v * v);
    let mm = DMatrix::from_column_slice(q.dim(), 1, q.mean.as_slice());
    let w = luu.solve_lower(&mm);
    let quad = w.iter().fold(T::zero(), |acc, &v| acc + v * v);
    half * (tr + quad - T::from_count(q.dim()) + luu.logdet() - q.cov_chol.logdet())
}

/// Evaluates the selected blocks of the uncollapsed objective, scaling the data
/// terms by `weight` (1 for the full bound, B for the one-block estimator).
#[allow(clippy::too_many_arguments)]
pub(crate) fn uncollapsed<T: Scalar>(
    obs: &Observations<T>,
    state: &ModelState<T>,
    blocks: &[Vec<usize>],
    selected: &[usize],
    weight: T,
    q: &GaussianQU<T>,
    spec: &UncollapsedSpec<T>,
    want_grad: bool,
) -> Result<UncollapsedEval<T>> {
    let m = state.num_inducing();
    if q.dim() != m {
        return Err(GpError::LengthMismatch { expected: m, got: q.dim() });
    }
    let mut rows = Vec::new();
    let mut local = Vec::with_capacity(selected.len());
    for &b in selected {
        let blk = blocks.get(b).ok_or(GpError::IndexOutOfRange { index: b, len: blocks.len() })?;
        local.push((rows.len()..rows.len() + blk.len()).collect::<Vec<usize>>());
        rows.extend_from_slice(blk);
    }
    let terms = SparseTerms::for_rows(&obs.x, &rows, state)?;
    let noise = terms.noise;
    let half = T::lit(0.5);
    let log2pi = T::two_pi().ln();
    let s = q.cov();

    let gaps: Vec<Gap<T>> = local.iter().map(|idx| terms.gap_block(idx, state)).collect::<Result<_>>()?;
    let gap_refs: Vec<&DMatrix<T>> = gaps.iter().map(|g| &g.d).collect();
    let pen = eval_penalty(spec.penalty, &gap_refs, noise, want_grad)?;
    let (mval, mgrad) = match spec.tied {
        Some(t) => m_terms(t.alpha, t.m, rows.len()),
        None => (T::zero(), T::zero()),
    };

    let mut adj = Adjoint::new(rows.len(), m);
    let mut dmean = DVector::zeros(m);
    let mut ds = DMatrix::zeros(m, m);
    let mut inflation_adj = T::zero();
    let mut gap_adj: Vec<DMatrix<T>> = pen.gap_adj.into_iter().map(|g| g * weight).collect();
    let mut fit = T::zero();
    let mut jitter = terms.jitter_used();

    for (b, idx) in local.iter().enumerate() {
        let nb = idx.len();
        let a = terms.proj_rows(idx);
        let yb = DVector::from_fn(nb, |i, _| obs.y[rows[idx[i]]]);
        let resid = &yb - &a * &q.mean;
        let al = &a * q.cov_chol.lower();
        // R = c D_bb + sigma^2 I; with c = 0 it is a multiple of the identity
        let rc = if spec.inflation != T::zero() {
            let mut r_cov = &gaps[b].d * spec.inflation;
            for i in 0..nb {
                r_cov[(i, i)] += noise;
            }
            let rc = chol(&r_cov)?;
            jitter = jitter.max(rc.jitter_used());
            Some(rc)
        } else {
            None
        };
        let (rho, logdet_r, tr) = match &rc {
            Some(rc) => {
                let w = rc.solve_lower(&al);
                (rc.solve_vec(&resid), rc.logdet(), w.iter().fold(T::zero(), |acc, &v| acc + v * v))
            }
            None => (
                &resid / noise,
                T::from_count(nb) * noise.ln(),
                al.iter().fold(T::zero(), |acc, &v| acc + v * v) / noise,
            ),
        };
        fit += -half * resid.dot(&rho) - half * logdet_r - half * T::from_count(nb) * log2pi - half * tr;

        if want_grad {
            let rinv_a = match &rc {
                Some(rc) => rc.solve(&a),
                None => &a / noise,
            };
            let abar = (&rho * q.mean.transpose() - &rinv_a * &s) * weight;
            dmean += a.transpose() * &rho * weight;
            ds -= a.transpose() * &rinv_a * (half * weight);
            let mut rbar = &rho * rho.transpose() + &rinv_a * &s * rinv_a.transpose();
            match &rc {
                Some(rc) => rbar -= rc.inverse(),
                None => {
                    for i in 0..nb {
                        rbar[(i, i)] -= T::one() / noise;
                    }
                }
            }
            let rbar = rbar * (half * weight);
            adj.noise += rbar.trace();
            if spec.inflation != T::zero() {
                inflation_adj += trace_product(&rbar, &gaps[b].d);
                gap_adj[b] += &rbar * spec.inflation;
            }
            adj.add_proj(&terms, idx, &abar);
        }
    }

    let kl = kl_from_factors(q, &terms.luu);
    let fit_term = fit * weight;
    let regularizer = -kl + (pen.value + mval) * weight;
    let breakdown = BoundBreakdown::new(fit_term, regularizer, jitter);
    if !want_grad {
        return Ok(UncollapsedEval { breakdown, grad: None });
    }

    // -KL contributions
    let kinv = terms.luu.inverse();
    let kinv_m = &kinv * &q.mean;
    dmean -= &kinv_m;
    let sinv = q.cov_chol.inverse();
    ds -= (&kinv - &sinv) * half;
    adj.kuu -= (&kinv - &kinv * &s * &kinv - &kinv_m * kinv_m.transpose()) * half;

    adj.noise += pen.noise_adj * weight;
    if let Some(t) = spec.tied {
        if t.trainable {
            adj.log_m = (inflation_adj + pen.weight_adj * weight) * t.alpha * t.m + mgrad * weight;
        }
    }
    for ((idx, gap), p) in local.iter().zip(&gaps).zip(gap_adj) {
        adj.add_gap(&terms, idx, gap, p);
    }
    let grad = adj.finish(&terms, state);

    let l = q.cov_chol.lower();
    let sym = (&ds + ds.transpose()) * half;
    let mut gl = (sym * l) * T::lit(2.0);
    for j in 0..m {
        for i in 0..j {
            gl[(i, j)] = T::zero();
        }
        gl[(j, j)] *= l[(j, j)];
    }
    Ok(UncollapsedEval { breakdown, grad: Some((grad, QGrad { mean: dmean, chol: gl })) })
}
