//! Dense PSD linear algebra: jittered Cholesky, log-determinants and the
//! low-rank-plus-block-diagonal Gaussian density used by every collapsed bound.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{GpError, Result};
use crate::scalar::Scalar;

const JITTER_START: f64 = 1e-10;
const JITTER_CAP: f64 = 1e-2;
const JITTER_GROWTH: f64 = 10.0;

/// Lower Cholesky factor of `A + jitter_used * I`.
#[derive(Debug, Clone)]
pub struct Chol<T: Scalar> {
    lower: DMatrix<T>,
    jitter_used: T,
}

impl<T: Scalar> Chol<T> {
    /// Wraps an existing lower-triangular factor. The strictly upper part is zeroed.
    pub fn from_lower(mut lower: DMatrix<T>) -> Result<Self> {
        if !lower.is_square() {
            return Err(GpError::DimensionMismatch(format!(
                "cholesky factor must be square, got {}x{}",
                lower.nrows(),
                lower.ncols()
            )));
        }
        let n = lower.nrows();
        for j in 0..n {
            for i in 0..j {
                lower[(i, j)] = T::zero();
            }
            if !(lower[(j, j)] > T::zero()) {
                return Err(GpError::NotPositiveDefinite { cap: 0.0 });
            }
        }
        Ok(Self { lower, jitter_used: T::zero() })
    }

    pub fn lower(&self) -> &DMatrix<T> {
        &self.lower
    }

    pub fn jitter_used(&self) -> T {
        self.jitter_used
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn logdet(&self) -> T {
        logdet(self)
    }

    /// `L^{-1} B`.
    pub fn solve_lower(&self, b: &DMatrix<T>) -> DMatrix<T> {
        if self.dim() == 0 {
            return b.clone();
        }
        self.lower
            .solve_lower_triangular(b)
            .expect("factor has a positive diagonal")
    }

    /// `L^{-T} B`.
    pub fn solve_upper(&self, b: &DMatrix<T>) -> DMatrix<T> {
        if self.dim() == 0 {
            return b.clone();
        }
        self.lower
            .tr_solve_lower_triangular(b)
            .expect("factor has a positive diagonal")
    }

    /// `(L L^T)^{-1} B`.
    pub fn solve(&self, b: &DMatrix<T>) -> DMatrix<T> {
        self.solve_upper(&self.solve_lower(b))
    }

    pub fn solve_vec(&self, b: &DVector<T>) -> DVector<T> {
        let m = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
        DVector::from_column_slice(self.solve(&m).as_slice())
    }

    pub fn inverse(&self) -> DMatrix<T> {
        self.solve(&DMatrix::identity(self.dim(), self.dim()))
    }

    /// `L L^T`, i.e. the (jittered) matrix this factor represents.
    pub fn reconstruct(&self) -> DMatrix<T> {
        &self.lower * self.lower.transpose()
    }
}

/// Replaces `a` with `(a + a^T) / 2`.
pub fn symmetrize<T: Scalar>(a: &DMatrix<T>) -> DMatrix<T> {
    let half = T::lit(0.5);
    (a + a.transpose()) * half
}

/// Cholesky factorization with multiplicative jitter escalation.
///
/// Jitter starts at zero, then `1e-10 * mean(diag)` growing by 10x per retry
/// until the factorization succeeds or the jitter exceeds `1e-2 * mean(diag)`.
pub fn chol<T: Scalar>(a: &DMatrix<T>) -> Result<Chol<T>> {
    if !a.is_square() {
        return Err(GpError::DimensionMismatch(format!(
            "cholesky input must be square, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let n = a.nrows();
    if n == 0 {
        return Ok(Chol { lower: DMatrix::zeros(0, 0), jitter_used: T::zero() });
    }
    let sym = symmetrize(a);
    let mean_diag = sym.diagonal().sum() / T::from_count(n);
    let scale = if mean_diag > T::zero() && mean_diag.is_finite_scalar() { mean_diag } else { T::one() };
    let cap = T::lit(JITTER_CAP) * scale;
    if sym.iter().any(|v| !v.is_finite_scalar()) {
        return Err(GpError::NotPositiveDefinite { cap: cap.as_f64() });
    }

    let mut jitter = T::zero();
    loop {
        let mut trial = sym.clone();
        if jitter > T::zero() {
            for i in 0..n {
                trial[(i, i)] += jitter;
            }
        }
        if let Some(c) = nalgebra::linalg::Cholesky::new(trial) {
            let lower = c.unpack();
            if lower.diagonal().iter().all(|&d| d > T::zero() && d.is_finite_scalar()) {
                return Ok(Chol { lower, jitter_used: jitter });
            }
        }
        jitter = if jitter == T::zero() {
            T::lit(JITTER_START) * scale
        } else {
            jitter * T::lit(JITTER_GROWTH)
        };
        if jitter > cap {
            return Err(GpError::NotPositiveDefinite { cap: cap.as_f64() });
        }
    }
}

/// `2 * sum(log(diag(L)))`.
pub fn logdet<T: Scalar>(f: &Chol<T>) -> T {
    let two = T::lit(2.0);
    f.lower.diagonal().iter().fold(T::zero(), |acc, &d| acc + two * d.ln())
}

/// Symmetric PSD square root via eigendecomposition, negative eigenvalues clamped to zero.
pub fn psd_sqrt<T: Scalar>(a: &DMatrix<T>) -> DMatrix<T> {
    let n = a.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = SymmetricEigen::new(symmetrize(a));
    let roots = eig.eigenvalues.map(|l| if l > T::zero() { l.sqrt() } else { T::zero() });
    let scaled = &eig.eigenvectors * DMatrix::from_diagonal(&roots);
    symmetrize(&(scaled * eig.eigenvectors.transpose()))
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues<T: Scalar>(a: &DMatrix<T>) -> Vec<T> {
    if a.nrows() == 0 {
        return Vec::new();
    }
    let mut ev: Vec<T> = SymmetricEigen::new(symmetrize(a)).eigenvalues.iter().copied().collect();
    ev.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
    ev
}

/// `log N(y; 0, cov)` evaluated densely.
pub fn dense_gauss_logpdf<T: Scalar>(y: &DVector<T>, cov: &DMatrix<T>) -> Result<T> {
    if cov.nrows() != y.len() {
        return Err(GpError::DimensionMismatch(format!(
            "covariance is {}x{} but y has length {}",
            cov.nrows(),
            cov.ncols(),
            y.len()
        )));
    }
    let c = chol(cov)?;
    Ok(logpdf_from_chol(y, &c))
}

pub(crate) fn logpdf_from_chol<T: Scalar>(y: &DVector<T>, c: &Chol<T>) -> T {
    let n = y.len();
    let ym = DMatrix::from_column_slice(n, 1, y.as_slice());
    let w = c.solve_lower(&ym);
    let quad = w.iter().fold(T::zero(), |acc, &v| acc + v * v);
    let half = T::lit(0.5);
    -half * quad - half * c.logdet() - half * T::from_count(n) * T::two_pi().ln()
}

pub(crate) fn gather_rows<T: Scalar>(x: &DMatrix<T>, idx: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(idx.len(), x.ncols(), |i, j| x[(idx[i], j)])
}

pub(crate) fn gather_vec<T: Scalar>(x: &DVector<T>, idx: &[usize]) -> DVector<T> {
    DVector::from_fn(idx.len(), |i, _| x[idx[i]])
}

pub(crate) fn trace_product<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    // tr(A B) for conformable A (n x k) and B (k x n)
    a.iter()
        .zip(b.transpose().iter())
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Block-diagonal matrix whose blocks are aligned to arbitrary (not necessarily
/// contiguous) index sets partitioning `0..n`.
#[derive(Debug, Clone)]
pub struct BlockDiagonal<T: Scalar> {
    index: Vec<Vec<usize>>,
    blocks: Vec<DMatrix<T>>,
}

impl<T: Scalar> BlockDiagonal<T> {
    pub fn new(index: Vec<Vec<usize>>, blocks: Vec<DMatrix<T>>) -> Result<Self> {
        if index.len() != blocks.len() {
            return Err(GpError::DimensionMismatch(format!(
                "{} index sets but {} blocks",
                index.len(),
                blocks.len()
            )));
        }
        for (b, (idx, blk)) in index.iter().zip(&blocks).enumerate() {
            if !blk.is_square() || blk.nrows() != idx.len() {
                return Err(GpError::DimensionMismatch(format!(
                    "block {b} is {}x{} but its index set has {} entries",
                    blk.nrows(),
                    blk.ncols(),
                    idx.len()
                )));
            }
        }
        Ok(Self { index, blocks })
    }

    /// All-zero blocks over the given index sets.
    pub fn zeros(index: Vec<Vec<usize>>) -> Self {
        let blocks = index.iter().map(|i| DMatrix::zeros(i.len(), i.len())).collect();
        Self { index, blocks }
    }

    pub fn index(&self) -> &[Vec<usize>] {
        &self.index
    }

    pub fn blocks(&self) -> &[DMatrix<T>] {
        &self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn size(&self) -> usize {
        self.index.iter().map(Vec::len).sum()
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        let n = self.size();
        let mut out = DMatrix::zeros(n, n);
        for (idx, blk) in self.index.iter().zip(&self.blocks) {
            for (i, &gi) in idx.iter().enumerate() {
                for (j, &gj) in idx.iter().enumerate() {
                    out[(gi, gj)] = blk[(i, j)];
                }
            }
        }
        out
    }

    pub fn scaled(&self, s: T) -> Self {
        Self { index: self.index.clone(), blocks: self.blocks.iter().map(|b| b * s).collect() }
    }
}

/// Factorized covariance `V^T V + A` with `A = blkdiag(noise * I + A_b)`.
///
/// Never forms the N x N matrix: solves and log-determinants go through the
/// matrix inversion and determinant lemmas, O(N M^2 + M^3 + sum_b N_b^3).
#[derive(Debug, Clone)]
pub struct LowRankPlusBlocks<T: Scalar> {
    n: usize,
    index: Vec<Vec<usize>>,
    a_chol: Vec<Chol<T>>,
    // P = L_inner^{-1} V A^{-1}, so that Sigma^{-1} = A^{-1} - P^T P
    p: DMatrix<T>,
    logdet: T,
    jitter_used: T,
}

impl<T: Scalar> LowRankPlusBlocks<T> {
    /// `v` is M x N (typically `L_uu^{-1} K_uf`).
    pub fn new(v: &DMatrix<T>, a: &BlockDiagonal<T>, noise: T) -> Result<Self> {
        let n = v.ncols();
        if a.size() != n {
            return Err(GpError::DimensionMismatch(format!(
                "low-rank factor has {n} columns but block-diagonal part covers {}",
                a.size()
            )));
        }
        let mut jitter_used = T::zero();
        let mut logdet_a = T::zero();
        let mut a_chol = Vec::with_capacity(a.num_blocks());
        for blk in a.blocks() {
            let mut ab = blk.clone();
            for i in 0..ab.nrows() {
                ab[(i, i)] += noise;
            }
            let c = chol(&ab)?;
            jitter_used = jitter_used.max(c.jitter_used());
            logdet_a += c.logdet();
            a_chol.push(c);
        }
        let mut this = Self {
            n,
            index: a.index().to_vec(),
            a_chol,
            p: DMatrix::zeros(v.nrows(), n),
            logdet: T::zero(),
            jitter_used,
        };
        let m = v.nrows();
        // W^T = V A^{-1}  (M x N)
        let wt = this.a_solve(&v.transpose()).transpose();
        let mut inner = &wt * v.transpose();
        for i in 0..m {
            inner[(i, i)] += T::one();
        }
        let inner = chol(&inner)?;
        this.jitter_used = this.jitter_used.max(inner.jitter_used());
        this.logdet = logdet_a + inner.logdet();
        this.p = inner.solve_lower(&wt);
        Ok(this)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn jitter_used(&self) -> T {
        self.jitter_used
    }

    pub fn logdet(&self) -> T {
        self.logdet
    }

    /// `A^{-1} X` for an N x k matrix `X`.
    pub fn a_solve(&self, x: &DMatrix<T>) -> DMatrix<T> {
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        for (idx, c) in self.index.iter().zip(&self.a_chol) {
            let xb = gather_rows(x, idx);
            let sb = c.solve(&xb);
            for (i, &gi) in idx.iter().enumerate() {
                for j in 0..x.ncols() {
                    out[(gi, j)] = sb[(i, j)];
                }
            }
        }
        out
    }

    /// `Sigma^{-1} X`.
    pub fn solve(&self, x: &DMatrix<T>) -> DMatrix<T> {
        let px = &self.p * x;
        self.a_solve(x) - self.p.transpose() * px
    }

    pub fn solve_vec(&self, y: &DVector<T>) -> DVector<T> {
        let m = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
        DVector::from_column_slice(self.solve(&m).as_slice())
    }

    /// Diagonal block `[Sigma^{-1}]_{bb}`.
    pub fn inverse_block(&self, b: usize) -> DMatrix<T> {
        let idx = &self.index[b];
        let pb = DMatrix::from_fn(self.p.nrows(), idx.len(), |i, j| self.p[(i, idx[j])]);
        self.a_chol[b].inverse() - pb.transpose() * pb
    }

    /// `log N(y; 0, Sigma)`.
    pub fn logpdf(&self, y: &DVector<T>) -> T {
        let ym = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
        let ay = self.a_solve(&ym);
        let py = &self.p * &ym;
        let quad = ym.dot(&ay) - py.dot(&py);
        let half = T::lit(0.5);
        -half * quad - half * self.logdet - half * T::from_count(self.n) * T::two_pi().ln()
    }
}

/// `log N(y; 0, K_fu K_uu^{-1} K_uf + blkdiag(A_b) + noise * I)` without forming the N x N covariance.
pub fn gauss_logpdf_lowrank<T: Scalar>(
    y: &DVector<T>,
    kfu: &DMatrix<T>,
    kuu: &Chol<T>,
    a: &BlockDiagonal<T>,
    noise: T,
) -> Result<T> {
    if kfu.nrows() != y.len() || kfu.ncols() != kuu.dim() {
        return Err(GpError::DimensionMismatch(format!(
            "K_fu is {}x{}, y has {} entries, K_uu is {}x{}",
            kfu.nrows(),
            kfu.ncols(),
            y.len(),
            kuu.dim(),
            kuu.dim()
        )));
    }
    let v = kuu.solve_lower(&kfu.transpose());
    Ok(LowRankPlusBlocks::new(&v, a, noise)?.logpdf(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn det_cofactor(a: &DMatrix<f64>) -> f64 {
        let n = a.nrows();
        if n == 1 {
            return a[(0, 0)];
        }
        (0..n)
            .map(|j| {
                let minor = a.clone().remove_row(0).remove_column(j);
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                sign * a[(0, j)] * det_cofactor(&minor)
            })
            .sum()
    }

    #[test]
    fn identity_factor_is_identity() {
        let c = chol(&DMatrix::<f64>::identity(3, 3)).unwrap();
        assert_eq!(c.lower(), &DMatrix::identity(3, 3));
        assert_eq!(c.jitter_used(), 0.0);
        assert_eq!(c.logdet(), 0.0);
    }

    #[test]
    fn two_by_two_factor() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let c = chol(&a).unwrap();
        assert_relative_eq!(c.lower()[(0, 0)], 2.0, epsilon = 1e-14);
        assert_relative_eq!(c.lower()[(1, 0)], 1.0, epsilon = 1e-14);
        assert_relative_eq!(c.lower()[(1, 1)], 2f64.sqrt(), epsilon = 1e-14);
        assert_eq!(c.lower()[(0, 1)], 0.0);
        assert!((c.reconstruct() - a).amax() < 1e-14);
    }

    #[test]
    fn rank_deficient_needs_jitter() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let c = chol(&a).unwrap();
        assert!(c.jitter_used() > 0.0);
        let target = &a + DMatrix::identity(2, 2) * c.jitter_used();
        assert!((c.reconstruct() - target).amax() <= 1e-8 * a.amax());
    }

    #[test]
    fn indefinite_fails_past_cap() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(chol(&a), Err(GpError::NotPositiveDefinite { .. })));
    }

    #[test]
    fn diagonal_logdet() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 8.0]));
        assert_relative_eq!(chol(&a).unwrap().logdet(), 16f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn logdet_matches_cofactor_expansion() {
        let b = DMatrix::from_fn(5, 5, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.4);
        let a = &b * b.transpose() + DMatrix::identity(5, 5) * 0.3;
        let direct = det_cofactor(&a).ln();
        assert_relative_eq!(chol(&a).unwrap().logdet(), direct, max_relative = 1e-10);
    }

    #[test]
    fn lowrank_matches_dense_with_block() {
        // N = 4, M = 1, one 2x2 block plus two singletons.
        let kfu = DMatrix::from_column_slice(4, 1, &[0.9, 0.4, -0.3, 0.2]);
        let kuu = DMatrix::from_element(1, 1, 1.3);
        let a = BlockDiagonal::new(
            vec![vec![1, 3], vec![0], vec![2]],
            vec![
                DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.2, 0.4]),
                DMatrix::from_element(1, 1, 0.1),
                DMatrix::from_element(1, 1, 0.0),
            ],
        )
        .unwrap();
        let y = DVector::from_vec(vec![0.3, -1.2, 0.8, 0.05]);
        let noise = 0.25;
        let fast = gauss_logpdf_lowrank(&y, &kfu, &chol(&kuu).unwrap(), &a, noise).unwrap();
        let cov = &kfu * kfu.transpose() / 1.3 + a.to_dense() + DMatrix::identity(4, 4) * noise;
        let dense = dense_gauss_logpdf(&y, &cov).unwrap();
        assert_relative_eq!(fast, dense, max_relative = 1e-12);
    }

    #[test]
    fn inverse_block_matches_dense_inverse() {
        let kfu = DMatrix::from_fn(5, 2, |i, j| ((i + 2 * j) as f64 * 0.37).sin());
        let kuu = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]);
        let index = vec![vec![4, 0], vec![1, 2, 3]];
        let a = BlockDiagonal::new(
            index.clone(),
            vec![
                DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.2]),
                DMatrix::from_fn(3, 3, |i, j| if i == j { 0.2 } else { 0.05 }),
            ],
        )
        .unwrap();
        let kc = chol(&kuu).unwrap();
        let v = kc.solve_lower(&kfu.transpose());
        let f = LowRankPlusBlocks::new(&v, &a, 0.1).unwrap();
        let cov = v.transpose() * &v + a.to_dense() + DMatrix::identity(5, 5) * 0.1;
        let inv = cov.clone().try_inverse().unwrap();
        for (b, idx) in index.iter().enumerate() {
            let got = f.inverse_block(b);
            let want = DMatrix::from_fn(idx.len(), idx.len(), |i, j| inv[(idx[i], idx[j])]);
            assert!((got - want).amax() < 1e-12);
        }
        let x = DMatrix::from_fn(5, 2, |i, j| (i as f64) - (j as f64) * 0.5);
        assert!((f.solve(&x) - &inv * &x).amax() < 1e-11);
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let b = DMatrix::from_fn(4, 2, |i, j| (i as f64 + 1.0) * (j as f64 - 0.5));
        let a = &b * b.transpose();
        let r = psd_sqrt(&a);
        assert!((&r * &r - &a).amax() < 1e-10);
    }

    #[test]
    fn works_in_single_precision() {
        let a = DMatrix::<f32>::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let c = chol(&a).unwrap();
        assert!((c.logdet() - 8f32.ln()).abs() < 1e-5);
    }
}
