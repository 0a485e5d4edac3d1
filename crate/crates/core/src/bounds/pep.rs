//! Power-EP objectives with the tractable scaling `M = m I`, the dense
//! general block-diagonal oracle, the site fixed-point check and a desk-scale
//! message-passing iteration.

use nalgebra::{DMatrix, DVector};

use super::collapsed::{collapsed, CollapsedSpec, TiedScale};
use super::engine::{Penalty, SparseTerms};
use super::uncollapsed::{uncollapsed, UncollapsedSpec};
use super::vi::qu_from_parts;
use super::{check_oracle_size, dense_gap, BoundBreakdown};
use crate::error::{GpError, Result};
use crate::linalg::{chol, gather_vec, logpdf_from_chol, psd_sqrt, BlockDiagonal, Chol, LowRankPlusBlocks};
use crate::model::{GaussianQU, ModelState, Observations, Partition};
use crate::scalar::Scalar;

/// Largest N accepted by [`pep_iterate`].
pub const PEP_ITERATE_CAP: usize = 500;
/// Relative tolerance of [`verify_site_fixed_point`].
pub const FIXED_POINT_RTOL: f64 = 1e-7;
/// Convergence threshold on the largest natural-parameter change in one sweep.
pub const PEP_TOLERANCE: f64 = 1e-8;

/// Power `alpha`, scalar `m` of `M = m I` and the block partition.
#[derive(Debug, Clone, PartialEq)]
pub struct PepConfig<T: Scalar> {
    pub alpha: T,
    pub m_scale: T,
    pub partition: Partition,
}

impl<T: Scalar> PepConfig<T> {
    pub fn new(alpha: T, m_scale: T, partition: Partition) -> Result<Self> {
        check_tpep(alpha, m_scale)?;
        Ok(Self { alpha, m_scale, partition })
    }
}

/// Site `t_b(u) = N(K_{f_b u} K_uu^{-1} u; g, v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteFactor<T: Scalar> {
    pub block: usize,
    pub g: DVector<T>,
    pub v: DMatrix<T>,
}

/// Result of [`pep_iterate`].
#[derive(Debug, Clone)]
pub struct PepRun<T: Scalar> {
    pub q: GaussianQU<T>,
    pub sites: Vec<SiteFactor<T>>,
    /// Power-EP approximate log marginal likelihood at the last iterate.
    pub energy: T,
    pub converged: bool,
    pub sweeps: usize,
    /// Largest natural-parameter change in the last sweep.
    pub last_change: T,
}

/// Outcome of a successful fixed-point check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointReport {
    pub blocks_checked: usize,
    /// Largest relative deviation between the dense and closed-form natural parameters.
    pub max_deviation: f64,
}

pub(crate) fn check_tpep<T: Scalar>(alpha: T, m: T) -> Result<()> {
    if !(alpha > T::zero() && alpha <= T::one()) {
        return Err(GpError::InvalidArgument(format!("alpha: must lie in (0, 1], got {alpha}")));
    }
    if !(m > T::zero()) || !m.is_finite_scalar() {
        return Err(GpError::InvalidArgument(format!("m_scale: must be positive, got {m}")));
    }
    if !(T::one() + alpha * (m - T::one()) > T::zero()) {
        return Err(GpError::InvalidArgument(format!(
            "m_scale: 1 + alpha (m - 1) must be positive (alpha = {alpha}, m = {m})"
        )));
    }
    Ok(())
}

fn check_partition<T: Scalar>(obs: &Observations<T>, partition: &Partition) -> Result<()> {
    if partition.len() != obs.len() {
        return Err(GpError::LengthMismatch { expected: obs.len(), got: partition.len() });
    }
    Ok(())
}

fn tpep_spec<'a, T: Scalar>(cfg: &'a PepConfig<T>) -> CollapsedSpec<'a, T> {
    let (alpha, m) = (cfg.alpha, cfg.m_scale);
    CollapsedSpec {
        blocks: cfg.partition.blocks(),
        inflation: alpha * m,
        penalty: Penalty::LogDet { coeff: (T::one() - alpha) / (alpha + alpha), weight: alpha * m },
        tied: Some(TiedScale { alpha, m, trainable: false }),
    }
}

/// `log N(y; 0, Q_ff + alpha blkdiag(D) + sigma^2 I) - ((1 - alpha) / 2 alpha) sum_b log|I + alpha D_bb / sigma^2|`.
///
/// `cfg.m_scale` must be 1.
pub fn pep_collapsed<T: Scalar>(
    obs: &Observations<T>,
    state: &ModelState<T>,
    cfg: &PepConfig<T>,
) -> Result<BoundBreakdown<T>> {
    if cfg.m_scale != T::one() {
        return Err(GpError::InvalidArgument(format!("m_scale: PEP uses m = 1, got {}", cfg.m_scale)));
    }
    tpep_collapsed(obs, state, cfg)
}

/// Power-EP energy with `M = m I`:
/// `log N(y; 0, Q_ff + alpha m blkdiag(D) + sigma^2 I) - ((1 - alpha) / 2 alpha) sum_b log|I + alpha m D_bb / sigma^2|
///  - (N / 2 alpha) log(1 + alpha (m - 1)) + (N / 2) log m`.
pub fn tpep_collapsed<T: Scalar>(
    obs: &Observations<T>,
    state: &ModelState<T>,
    cfg: &PepConfig<T>,
) -> Result<BoundBreakdown<T>> {
    check_tpep(cfg.alpha, cfg.m_scale)?;
    check_partition(obs, &cfg.partition)?;
    Ok(collapsed(obs, state, &tpep_spec(cfg), false)?.breakdown)
}

/// Power-EP posterior `q(u) ∝ p(u) N(y; K_fu K_uu^{-1} u, alpha m blkdiag(D) + sigma^2 I)`.
pub fn tpep_optimal_qu<T: Scalar>(
    obs: &Observations<T>,
    state: &ModelState<T>,
    cfg: &PepConfig<T>,
) -> Result<GaussianQU<T>> {
    check_tpep(cfg.alpha, cfg.m_scale)?;
    check_partition(obs, &cfg.partition)?;
    let terms = SparseTerms::new(obs.x.clone(), state)?;
    let scale = cfg.alpha * cfg.m_scale;
    let blocks = cfg
        .partition
        .blocks()
        .iter()
        .map(|idx| Ok(terms.gap_block(idx, state)?.d * scale))
        .collect::<Result<Vec<_>>>()?;
    let extra = BlockDiagonal::new(cfg.partition.blocks().to_vec(), blocks)?;
    qu_from_parts(&terms.luu, &terms.v, &obs.y, &extra, terms.noise)
}

/// Uncollapsed Power-EP objective for an explicit `q(u)`.
pub fn tpep_uncollapsed<T: Scalar>(
    obs: &Observations<T>,
    state: &ModelState<T>,
    cfg: &PepConfig<T>,
    q: &GaussianQU<T>,
) -> Result<BoundBreakdown<T>> {
    check_tpep(cfg.alpha, cfg.m_scale)?;
    check_partition(obs, &cfg.partition)?;
    let c = tpep_spec(cfg);
    let spec = UncollapsedSpec { inflation: c.inflation, penalty: c.penalty, tied: c.tied };
    let all: Vec<usize> = (0..cfg.partition.num_blocks()).collect();
    Ok(uncollapsed(obs, state, cfg.partition.blocks(), &all, T::one(), q, &spec, false)?.breakdown)
}

/// Dense evaluation of the Power-EP energy for a general block-diagonal
/// scaling `M = blkdiag(m_b)`, with `C = D^{1/2} M D^{1/2}`:
/// `log N(y; 0, Q_ff + alpha blkdiag(C_bb) + sigma^2 I)
///  + sum_b [-((1 - alpha) / 2 alpha) log|I + alpha C_bb / sigma^2| - (1 / 2 alpha) log|I + alpha (m_b - I)| + (1/2) log|m_b|]`.
pub fn general_pep_oracle<T: Scalar>(
    obs: &Observations<T>,
    state: &ModelState<T>,
    alpha: T,
    partition: &Partition,
    mmat: &BlockDiagonal<T>,
) -> Result<BoundBreakdown<T>> {
    let n = obs.len();
    check_oracle_size(n)?;
    check_partition(obs, partition)?;
    if !(alpha > T::zero() && alpha <= T::one()) {
        return Err(GpError::InvalidArgument(format!("alpha: must lie in (0, 1], got {alpha}")));
    }
    if mmat.index() != partition.blocks() {
        return Err(GpError::DimensionMismatch("scaling matrix blocks must follow the partition".into()));
    }
    let root = psd_sqrt(&dense_gap(obs, state)?);
    let c = &root * mmat.to_dense() * &root;
    let noise = state.noise_variance();
    let half = T::lit(0.5);
    let mut fit_blocks = Vec::with_capacity(partition.num_blocks());
    let mut reg = T::zero();
    let mut jitter = T::zero();
    for (idx, mb) in partition.blocks().iter().zip(mmat.blocks()) {
        let nb = idx.len();
        let cbb = DMatrix::from_fn(nb, nb, |i, j| c[(idx[i], idx[j])]);
        let mut a = &cbb * (alpha / noise);
        let mut e = mb * alpha;
        for i in 0..nb {
            a[(i, i)] += T::one();
            e[(i, i)] += T::one() - alpha;
        }
        let ac = chol(&a)?;
        let ec = chol(&e)?;
        let mc = chol(mb)?;
        jitter = jitter.max(ac.jitter_used()).max(ec.jitter_used()).max(mc.jitter_used());
        reg += -(T::one() - alpha) / (alpha + alpha) * ac.logdet() - ec.logdet() / (alpha + alpha)
            + half * mc.logdet();
        fit_blocks.push(cbb * alpha);
    }
    let terms = SparseTerms::new(obs.x.clone(), state)?;
    let lr = LowRankPlusBlocks::new(&terms.v, &BlockDiagonal::new(partition.blocks().to_vec(), fit_blocks)?, noise)?;
    let fit = lr.logpdf(&obs.y);
    jitter = jitter.max(terms.jitter_used()).max(lr.jitter_used());
    Ok(BoundBreakdown::new(fit, reg, jitter))
}

/// Checks, block by block, that an `alpha` fraction of the exact likelihood
/// integrated against `q(f_b | u)` has the same natural parameters (as a
/// function of `K_{f_b u} K_uu^{-1} u`) as `t_b^alpha` with `g_b = y_b` and
/// `v_b = alpha m D_bb + sigma^2 I`.
///
/// The integral is evaluated through the whitened substitution
/// `f = mu + C^{1/2} e`, independently of the closed form.
pub fn verify_site_fixed_point<T: Scalar>(
    obs: &Observations<T>,
    state: &ModelState<T>,
    cfg: &PepConfig<T>,
) -> Result<FixedPointReport> {
    check_oracle_size(obs.len())?;
    check_tpep(cfg.alpha, cfg.m_scale)?;
    check_partition(obs, &cfg.partition)?;
    let terms = SparseTerms::new(obs.x.clone(), state)?;
    let noise = terms.noise;
    let a = cfg.alpha / noise;
    let mut worst = 0.0f64;
    for idx in cfg.partition.blocks() {
        let nb = idx.len();
        let cbb = terms.gap_block(idx, state)?.d * cfg.m_scale;
        let yb = gather_vec(&obs.y, idx);

        // dense route
        let root = psd_sqrt(&cbb);
        let mut p = &cbb * a;
        for i in 0..nb {
            p[(i, i)] += T::one();
        }
        let pc = chol(&p)?;
        let mut lam_dense = &root * pc.solve(&root) * (-(a * a));
        for i in 0..nb {
            lam_dense[(i, i)] += a;
        }
        let eta_dense = &lam_dense * &yb;

        // closed form: alpha * v_b^{-1}, v_b = alpha C + sigma^2 I
        let mut v = &cbb * cfg.alpha;
        for i in 0..nb {
            v[(i, i)] += noise;
        }
        let lam_closed = chol(&v)?.inverse() * cfg.alpha;
        let g = yb.clone();
        let eta_closed = &lam_closed * g;

        let scale_l = lam_closed.amax().max(T::lit(f64::MIN_POSITIVE));
        let scale_e = eta_closed.amax().max(T::lit(f64::MIN_POSITIVE));
        let dl = ((lam_dense - &lam_closed).amax() / scale_l).as_f64();
        let de = ((eta_dense - &eta_closed).amax() / scale_e).as_f64();
        worst = worst.max(dl).max(de);
    }
    if !(worst <= FIXED_POINT_RTOL) {
        return Err(GpError::FixedPointMismatch { max_deviation: worst });
    }
    Ok(FixedPointReport { blocks_checked: cfg.partition.num_blocks(), max_deviation: worst })
}

/// Whitened log-partition `G(q) = (1/2) log|S| + (1/2) m^T S^{-1} m` from the
/// precision `P = S^{-1}` and `h = S^{-1} m` (the constant `M/2 log 2 pi` cancels).
fn log_partition<T: Scalar>(pc: &Chol<T>, h: &DVector<T>) -> T {
    let half = T::lit(0.5);
    -half * pc.logdet() + half * h.dot(&pc.solve_vec(h))
}

/// Runs damped Power-EP over the blocks until the largest natural-parameter
/// change in a sweep falls below [`PEP_TOLERANCE`] or `max_sweeps` is reached.
///
/// Works in whitened coordinates `v = L_uu^{-1} u`, where the prior is
/// `N(0, I)` and block `b` observes `V_b^T v`. Sites are stored by their
/// natural parameters in the projected space of each block.
pub fn pep_iterate<T: Scalar>(
    obs: &Observations<T>,
    state: &ModelState<T>,
    cfg: &PepConfig<T>,
    damping: T,
    max_sweeps: usize,
) -> Result<PepRun<T>> {
    let n = obs.len();
    if n > PEP_ITERATE_CAP {
        return Err(GpError::InvalidArgument(format!("PEP iteration is limited to N <= {PEP_ITERATE_CAP}, got N = {n}")));
    }
    if !(damping > T::zero() && damping <= T::one()) {
        return Err(GpError::InvalidArgument(format!("damping: must lie in (0, 1], got {damping}")));
    }
    check_tpep(cfg.alpha, cfg.m_scale)?;
    check_partition(obs, &cfg.partition)?;
    let alpha = cfg.alpha;
    let terms = SparseTerms::new(obs.x.clone(), state)?;
    let noise = terms.noise;
    let m = state.num_inducing();
    let blocks = cfg.partition.blocks();
    let proj: Vec<DMatrix<T>> =
        blocks.iter().map(|idx| DMatrix::from_fn(idx.len(), m, |i, j| terms.v[(j, idx[i])])).collect();
    let covs: Vec<DMatrix<T>> =
        blocks.iter().map(|idx| Ok(terms.gap_block(idx, state)?.d * cfg.m_scale)).collect::<Result<_>>()?;
    let ys: Vec<DVector<T>> = blocks.iter().map(|idx| gather_vec(&obs.y, idx)).collect();

    let mut lam: Vec<DMatrix<T>> = blocks.iter().map(|idx| DMatrix::zeros(idx.len(), idx.len())).collect();
    let mut eta: Vec<DVector<T>> = blocks.iter().map(|idx| DVector::zeros(idx.len())).collect();
    let mut prec = DMatrix::<T>::identity(m, m);
    let mut h = DVector::<T>::zeros(m);
    let tilted_noise = noise / alpha;

    let mut converged = false;
    let mut sweeps = 0;
    let mut last_change = T::zero();
    while sweeps < max_sweeps {
        sweeps += 1;
        let mut change = T::zero();
        for b in 0..blocks.len() {
            let a = &proj[b];
            // deletion
            let pc = &prec - a.transpose() * &lam[b] * a * alpha;
            let hc = &h - a.transpose() * &eta[b] * alpha;
            let cav = chol(&pc)?;
            let mc = cav.solve_vec(&hc);
            let mf = a * &mc;
            let vf = a * cav.solve(&a.transpose());
            // projection through the derivatives of log Z~
            let mut sig = &vf + &covs[b];
            for i in 0..sig.nrows() {
                sig[(i, i)] += tilted_noise;
            }
            let sc = chol(&sig)?;
            let d1 = sc.solve_vec(&(&ys[b] - &mf));
            let neg_d2_inv = sig;
            // alpha-fraction site N(A v; g, v_alpha)
            let v_alpha = &neg_d2_inv - &vf;
            let g = &mf + &neg_d2_inv * d1;
            let lam_new = chol(&v_alpha)?.inverse() / alpha;
            let eta_new = &lam_new * g;
            // damped update
            let lam_upd = &lam[b] * (T::one() - damping) + lam_new * damping;
            let eta_upd = &eta[b] * (T::one() - damping) + eta_new * damping;
            let dl = &lam_upd - &lam[b];
            let de = &eta_upd - &eta[b];
            change = change.max(dl.amax()).max(de.amax());
            prec += a.transpose() * &dl * a;
            h += a.transpose() * &de;
            lam[b] = lam_upd;
            eta[b] = eta_upd;
        }
        last_change = change;
        if change < T::lit(PEP_TOLERANCE) {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("PEP iteration stopped after {sweeps} sweeps, last change {last_change:e}");
    }

    // energy
    let half = T::lit(0.5);
    let pq = chol(&prec)?;
    let g_q = log_partition(&pq, &h);
    let mut energy = g_q;
    let log_c = |nb: usize| {
        let nbt = T::from_count(nb);
        half * (T::one() - alpha) * nbt * (T::two_pi() * noise).ln() - half * nbt * alpha.ln()
    };
    for b in 0..blocks.len() {
        let a = &proj[b];
        let pc = &prec - a.transpose() * &lam[b] * a * alpha;
        let hc = &h - a.transpose() * &eta[b] * alpha;
        let cav = chol(&pc)?;
        let mc = cav.solve_vec(&hc);
        let mut sig = a * cav.solve(&a.transpose()) + &covs[b];
        for i in 0..sig.nrows() {
            sig[(i, i)] += tilted_noise;
        }
        let log_z = log_c(blocks[b].len()) + logpdf_from_chol(&(&ys[b] - a * &mc), &chol(&sig)?);
        energy += (log_z + log_partition(&cav, &hc) - g_q) / alpha;
    }
    let nt = T::from_count(n);
    energy += -half * nt / alpha * (alpha * (cfg.m_scale - T::one())).ln_1p() + half * nt * cfg.m_scale.ln();

    // back to u-space: mean = L_uu S_v h, chol(S_u) = L_uu chol(S_v)
    let s_v = pq.inverse();
    let mean = terms.luu.lower() * (&s_v * &h);
    let lsv = chol(&s_v)?;
    let q = GaussianQU::new(mean, Chol::from_lower(terms.luu.lower() * lsv.lower())?)?;
    let sites = (0..blocks.len())
        .map(|b| {
            let v = chol(&lam[b])?.inverse();
            let g = &v * &eta[b];
            Ok(SiteFactor { block: b, g, v })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PepRun { q, sites, energy, converged, sweeps, last_change })
}
