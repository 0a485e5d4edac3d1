//! Trainable model state, block partitions and objective selection.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::kernel::{KernelParams, NoiseParam};
use crate::linalg::Chol;
use crate::scalar::Scalar;

/// Training inputs `x` (N x D) and targets `y` (N).
#[derive(Debug, Clone, PartialEq)]
pub struct Observations<T: Scalar> {
    pub x: DMatrix<T>,
    pub y: DVector<T>,
}

impl<T: Scalar> Observations<T> {
    pub fn new(x: DMatrix<T>, y: DVector<T>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(GpError::LengthMismatch { expected: x.nrows(), got: y.len() });
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x: crate::linalg::gather_rows(&self.x, idx),
            y: crate::linalg::gather_vec(&self.y, idx),
        }
    }
}

/// Everything an objective depends on besides the data: kernel, noise,
/// inducing locations and, for T-PEP, the log of the scalar `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState<T: Scalar> {
    pub kernel: KernelParams<T>,
    pub noise: NoiseParam<T>,
    pub inducing: DMatrix<T>,
    pub log_m: Option<T>,
}

impl<T: Scalar> ModelState<T> {
    pub fn new(kernel: KernelParams<T>, noise: NoiseParam<T>, inducing: DMatrix<T>) -> Result<Self> {
        let s = Self { kernel, noise, inducing, log_m: None };
        s.validate()?;
        Ok(s)
    }

    pub fn with_m(mut self, m: T) -> Self {
        self.log_m = Some(m.ln());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.inducing.nrows() == 0 {
            return Err(GpError::InvalidArgument("at least one inducing point is required".into()));
        }
        if self.inducing.ncols() != self.kernel.dim() {
            return Err(GpError::DimensionMismatch(format!(
                "inducing points have {} columns, kernel has {} lengthscales",
                self.inducing.ncols(),
                self.kernel.dim()
            )));
        }
        if self.inducing.iter().any(|v| !v.is_finite_scalar()) {
            return Err(GpError::InvalidArgument("inducing locations must be finite".into()));
        }
        Ok(())
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.nrows()
    }

    pub fn noise_variance(&self) -> T {
        self.noise.variance()
    }

    pub fn m_scale(&self) -> Option<T> {
        self.log_m.map(|l| l.exp())
    }
}

/// Disjoint blocks of training indices covering `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    blocks: Vec<Vec<usize>>,
}

impl Partition {
    pub fn new(blocks: Vec<Vec<usize>>, n: usize) -> Result<Self> {
        let mut seen = vec![false; n];
        for (b, blk) in blocks.iter().enumerate() {
            if blk.is_empty() {
                return Err(GpError::InvalidArgument(format!("block {b} is empty")));
            }
            for &i in blk {
                if i >= n {
                    return Err(GpError::IndexOutOfRange { index: i, len: n });
                }
                if seen[i] {
                    return Err(GpError::InvalidArgument(format!("index {i} appears in more than one block")));
                }
                seen[i] = true;
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(GpError::InvalidArgument(format!("index {i} is not covered by any block")));
        }
        Ok(Self { blocks })
    }

    /// One block per training point.
    pub fn singletons(n: usize) -> Self {
        Self { blocks: (0..n).map(|i| vec![i]).collect() }
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn equal_sizes(&self) -> bool {
        self.blocks.windows(2).all(|w| w[0].len() == w[1].len())
    }

    pub fn max_block_size(&self) -> usize {
        self.blocks.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// Random balanced partition: a seeded permutation of `0..n` cut into
/// `num_blocks` consecutive chunks whose sizes differ by at most one.
///
/// Because the permutation only depends on `(n, seed)`, partitions with
/// `B` and `2B` blocks of the same seed are nested whenever `2B` divides `n`.
pub fn make_partition(n: usize, num_blocks: usize, seed: u64) -> Result<Partition> {
    if num_blocks == 0 || num_blocks > n {
        return Err(GpError::InvalidArgument(format!(
            "number of blocks must be in 1..={n}, got {num_blocks}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = n / num_blocks;
    let extra = n % num_blocks;
    let mut blocks = Vec::with_capacity(num_blocks);
    let mut start = 0;
    for b in 0..num_blocks {
        let len = base + usize::from(b < extra);
        let mut blk = perm[start..start + len].to_vec();
        blk.sort_unstable();
        blocks.push(blk);
        start += len;
    }
    Partition::new(blocks, n)
}

/// Family of objectives, following the method lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    Exact,
    #[serde(rename = "SGPR")]
    Sgpr,
    #[serde(rename = "T-SGPR")]
    TSgpr,
    #[serde(rename = "BT-SGPR")]
    BtSgpr,
    SharedBlock,
    Spherical,
    #[serde(rename = "PEP")]
    Pep,
    #[serde(rename = "T-PEP")]
    TPep,
    #[serde(rename = "GeneralC-Oracle")]
    GeneralCOracle,
    #[serde(rename = "GeneralPEP-Oracle")]
    GeneralPepOracle,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Exact,
        Method::Sgpr,
        Method::TSgpr,
        Method::BtSgpr,
        Method::SharedBlock,
        Method::Spherical,
        Method::Pep,
        Method::TPep,
        Method::GeneralCOracle,
        Method::GeneralPepOracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Exact => "Exact",
            Method::Sgpr => "SGPR",
            Method::TSgpr => "T-SGPR",
            Method::BtSgpr => "BT-SGPR",
            Method::SharedBlock => "SharedBlock",
            Method::Spherical => "Spherical",
            Method::Pep => "PEP",
            Method::TPep => "T-PEP",
            Method::GeneralCOracle => "GeneralC-Oracle",
            Method::GeneralPepOracle => "GeneralPEP-Oracle",
        }
    }

    pub fn uses_alpha(self) -> bool {
        matches!(self, Method::Pep | Method::TPep | Method::GeneralPepOracle)
    }

    /// Methods whose block count must be given explicitly.
    pub fn requires_blocks(self) -> bool {
        matches!(
            self,
            Method::BtSgpr | Method::SharedBlock | Method::GeneralCOracle | Method::GeneralPepOracle
        )
    }

    /// Methods that accept a block count (PEP families default to block size one).
    pub fn accepts_blocks(self) -> bool {
        self.requires_blocks() || matches!(self, Method::Pep | Method::TPep)
    }

    pub fn uses_m(self) -> bool {
        matches!(self, Method::TPep)
    }

    pub fn is_oracle(self) -> bool {
        matches!(self, Method::GeneralCOracle | Method::GeneralPepOracle)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = GpError;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Method::ALL
            .into_iter()
            .find(|m| {
                m.name().chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase() == key
            })
            .ok_or_else(|| GpError::InvalidArgument(format!("method: unknown method `{s}`")))
    }
}

/// Which objective to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundSpec {
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// `None` for PEP families means one block per training point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_blocks: Option<usize>,
}

impl BoundSpec {
    pub fn new(method: Method, alpha: Option<f64>, num_blocks: Option<usize>) -> Result<Self> {
        let spec = Self { method, alpha, num_blocks };
        spec.validate()?;
        Ok(spec)
    }

    pub fn simple(method: Method) -> Self {
        Self { method, alpha: None, num_blocks: None }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.method.uses_alpha(), self.alpha) {
            (true, None) => {
                return Err(GpError::InvalidArgument(format!("alpha: required by method {}", self.method)))
            }
            (true, Some(a)) if !(a > 0.0 && a <= 1.0) => {
                return Err(GpError::InvalidArgument(format!("alpha: must lie in (0, 1], got {a}")))
            }
            (false, Some(_)) => {
                return Err(GpError::InvalidArgument(format!("alpha: not accepted by method {}", self.method)))
            }
            _ => {}
        }
        match (self.num_blocks, self.method.requires_blocks(), self.method.accepts_blocks()) {
            (None, true, _) => {
                Err(GpError::InvalidArgument(format!("num_blocks: required by method {}", self.method)))
            }
            (Some(_), _, false) => {
                Err(GpError::InvalidArgument(format!("num_blocks: not accepted by method {}", self.method)))
            }
            (Some(0), _, _) => Err(GpError::InvalidArgument("num_blocks: must be positive".into())),
            _ => Ok(()),
        }
    }

    /// Checks the block count against the training-set size.
    pub fn validate_for(&self, n: usize) -> Result<()> {
        self.validate()?;
        if let Some(b) = self.num_blocks {
            if b > n {
                return Err(GpError::InvalidArgument(format!("num_blocks: {b} exceeds N = {n}")));
            }
        }
        Ok(())
    }

    /// Partition this objective uses for `n` training points.
    pub fn partition(&self, n: usize, seed: u64) -> Result<Partition> {
        match self.num_blocks {
            Some(b) => make_partition(n, b, seed),
            None => Ok(Partition::singletons(n)),
        }
    }

    pub fn label(&self) -> String {
        let mut s = self.method.name().to_string();
        if let Some(a) = self.alpha {
            s.push_str(&format!("[alpha={a}]"));
        }
        if let Some(b) = self.num_blocks {
            s.push_str(&format!("[B={b}]"));
        }
        s
    }
}

/// `q(u) = N(mean, S)` with `S` held through its Cholesky factor.
#[derive(Debug, Clone)]
pub struct GaussianQU<T: Scalar> {
    pub mean: DVector<T>,
    pub cov_chol: Chol<T>,
}

impl<T: Scalar> GaussianQU<T> {
    pub fn new(mean: DVector<T>, cov_chol: Chol<T>) -> Result<Self> {
        if mean.len() != cov_chol.dim() {
            return Err(GpError::LengthMismatch { expected: cov_chol.dim(), got: mean.len() });
        }
        Ok(Self { mean, cov_chol })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cov(&self) -> DMatrix<T> {
        self.cov_chol.reconstruct()
    }
}
