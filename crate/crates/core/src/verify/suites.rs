//! Invariant suites over seeded random instances. Each suite reports the
//! number of cases, the failures and the first failing case.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::{equal_block_instance, random_instance, random_instance_seeded, spread_instance, Shape};
use crate::bounds::{
    btsgpr_collapsed, btsgpr_stochastic, btsgpr_uncollapsed, evaluate, evaluate_uncollapsed, exact_lml,
    general_c_oracle, general_pep_oracle, method_optimal_qu, optimal_mb, optimal_qu, pep_collapsed, pep_iterate,
    sgpr_collapsed, sharedblock_collapsed, spherical_collapsed, tpep_collapsed, tpep_optimal_qu, tpep_uncollapsed,
    tsgpr_collapsed, vi::optimal_c_dense, BlockSelection, ConditionalPenalty, PepConfig,
};
use crate::error::Result;
use crate::kernel::conditional_gap;
use crate::linalg::{chol, dense_gauss_logpdf, psd_sqrt, BlockDiagonal};
use crate::model::{BoundSpec, GaussianQU, Method, Observations, Partition};
use crate::training::{gradient, CollapsedObjective, GradientMode, UncollapsedObjective};

/// Problem counts: `Small` uses the acceptance counts, `Full` several times more.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Scale {
    Small,
    Full,
}

impl std::str::FromStr for Scale {
    type Err = crate::error::GpError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "small" => Ok(Self::Small),
            "full" => Ok(Self::Full),
            _ => Err(crate::error::GpError::InvalidArgument(format!("scale: expected small or full, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyConfig {
    pub scale: Scale,
    pub seed: u64,
    /// Test hook: added to every T-SGPR value inside the ordering suite.
    pub tamper_tsgpr: Option<f64>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { scale: Scale::Small, seed: 0, tamper_tsgpr: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriterionResult {
    pub id: u32,
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    /// Largest observed deviation, in the units of the criterion's tolerance test.
    pub worst: f64,
    pub first_failure: Option<String>,
    #[serde(skip)]
    pub seconds: f64,
    #[serde(skip)]
    pub time_limit: Option<f64>,
}

impl CriterionResult {
    pub fn within_time(&self) -> bool {
        self.time_limit.is_none_or(|t| self.seconds < t)
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.cases > 0 && self.within_time()
    }

    /// One-line summary without timings, so repeated runs print identically.
    pub fn line(&self) -> String {
        let mut s = format!(
            "[{}] criterion {:>2} {:<28} cases={:<6} failures={:<4} worst={:.3e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.cases,
            self.failures,
            self.worst
        );
        if !self.within_time() {
            let _ = write!(s, " time limit {:.0}s exceeded", self.time_limit.unwrap_or(0.0));
        }
        if let Some(f) = &self.first_failure {
            let _ = write!(s, " first failure: {f}");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub scale: Scale,
    pub results: Vec<CriterionResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CriterionResult::passed)
    }

    pub fn failed_names(&self) -> Vec<String> {
        self.results.iter().filter(|r| !r.passed()).map(|r| r.name.clone()).collect()
    }

    pub fn render(&self) -> String {
        let mut s = format!("verify scale={:?} seed={}\n", self.scale, self.seed);
        for r in &self.results {
            s.push_str(&r.line());
            s.push('\n');
        }
        s.push_str(if self.passed() { "all criteria passed\n" } else { "some criteria failed\n" });
        s
    }
}

struct Tally {
    cases: usize,
    failures: usize,
    worst: f64,
    first: Option<String>,
}

impl Tally {
    fn new() -> Self {
        Self { cases: 0, failures: 0, worst: 0.0, first: None }
    }

    /// Records one case; `deviation` is compared against `limit`.
    fn check(&mut self, deviation: f64, limit: f64, what: impl FnOnce() -> String) {
        self.cases += 1;
        let dev = if deviation.is_nan() { f64::INFINITY } else { deviation };
        self.worst = self.worst.max(dev);
        if dev > limit {
            self.failures += 1;
            if self.first.is_none() {
                self.first = Some(format!("{} (deviation {dev:.3e} > {limit:.1e})", what()));
            }
        }
    }

    fn error(&mut self, what: String) {
        self.cases += 1;
        self.failures += 1;
        self.worst = f64::INFINITY;
        if self.first.is_none() {
            self.first = Some(what);
        }
    }

    fn finish(self, id: u32, name: &str, started: Instant, time_limit: Option<f64>) -> CriterionResult {
        CriterionResult {
            id,
            name: name.to_string(),
            cases: self.cases,
            failures: self.failures,
            worst: self.worst,
            first_failure: self.first,
            seconds: started.elapsed().as_secs_f64(),
            time_limit,
        }
    }
}

/// `|a - b| / max(|a|, |b|)`.
pub fn rel_diff(a: f64, b: f64) -> f64 {
    let s = a.abs().max(b.abs());
    if s == 0.0 {
        0.0
    } else {
        (a - b).abs() / s
    }
}

/// `max |a - b| / max |b|` over entries.
pub fn rel_diff_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let s = b.amax().max(a.amax());
    if s == 0.0 {
        0.0
    } else {
        (a - b).amax() / s
    }
}

fn rel_diff_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let s = b.amax().max(a.amax());
    if s == 0.0 {
        0.0
    } else {
        (a - b).amax() / s
    }
}

fn counts(scale: Scale, small: usize, full: usize) -> usize {
    match scale {
        Scale::Small => small,
        Scale::Full => full,
    }
}

fn seed_for(cfg: &VerifyConfig, criterion: u64, i: usize) -> u64 {
    cfg.seed.wrapping_mul(1_000_003).wrapping_add(criterion * 100_000 + i as u64)
}

/// sgpr <= spherical <= tsgpr <= btsgpr <= exact, sharedblock <= btsgpr and
/// the per-block Hadamard inequality.
pub fn ordering_chain(cfg: &VerifyConfig) -> CriterionResult {
    let started = Instant::now();
    let mut t = Tally::new();
    let tol = 1e-9;
    for i in 0..counts(cfg.scale, 200, 1000) {
        let inst = random_instance_seeded(seed_for(cfg, 1, i));
        let res = (|| -> Result<()> {
            let (obs, st, part) = (&inst.obs, &inst.state, &inst.partition);
            let sg = sgpr_collapsed(obs, st)?.total;
            let sp = spherical_collapsed(obs, st)?.bound.total;
            let ts = tsgpr_collapsed(obs, st)?.total + cfg.tamper_tsgpr.unwrap_or(0.0);
            let bt = btsgpr_collapsed(obs, st, part)?.total;
            let ex = exact_lml(obs, st)?.total;
            let label = |a: &str, b: &str| format!("instance {} ({a} <= {b})", inst.seed);
            t.check(sg - sp, tol, || label("sgpr", "spherical"));
            t.check(sp - ts, tol, || label("spherical", "tsgpr"));
            t.check(ts - bt, tol, || label("tsgpr", "btsgpr"));
            t.check(bt - ex, tol, || label("btsgpr", "exact"));
            let eq = equal_block_instance(&inst);
            let sh = sharedblock_collapsed(&eq.obs, st, &eq.partition)?.total;
            let bt_eq = btsgpr_collapsed(&eq.obs, st, &eq.partition)?.total;
            t.check(sh - bt_eq, tol, || label("sharedblock", "btsgpr"));
            let gap = conditional_gap(&obs.x, &st.inducing, &st.kernel)?.matrix;
            let noise = st.noise_variance();
            let mut worst = f64::NEG_INFINITY;
            for idx in part.blocks() {
                let mut a = DMatrix::from_fn(idx.len(), idx.len(), |r, c| gap[(idx[r], idx[c])] / noise);
                let diag_sum: f64 = (0..idx.len()).map(|r| a[(r, r)].ln_1p()).sum();
                for r in 0..idx.len() {
                    a[(r, r)] += 1.0;
                }
                worst = worst.max(chol(&a)?.logdet() - diag_sum);
            }
            t.check(worst, tol, || format!("instance {} (Hadamard)", inst.seed));
            Ok(())
        })();
        if let Err(e) = res {
            t.error(format!("instance {}: {e}", inst.seed));
        }
    }
    t.finish(1, "ordering-chain", started, Some(30.0))
}

/// Uncollapsed objectives at their closed-form optimal `q(u)` equal the collapsed ones.
pub fn collapse_identities(cfg: &VerifyConfig) -> CriterionResult {
    let started = Instant::now();
    let mut t = Tally::new();
    let tol = 1e-8;
    let alphas = [0.25, 0.5, 1.0];
    for i in 0..counts(cfg.scale, 50, 200) {
        let inst = random_instance_seeded(seed_for(cfg, 2, i));
        let res = (|| -> Result<()> {
            let (obs, st, part) = (&inst.obs, &inst.state, &inst.partition);
            let b = part.num_blocks();
            let vi_q = optimal_qu(obs, st, &BlockDiagonal::zeros(part.blocks().to_vec()))?;
            let pairs = [
                ("sgpr", ConditionalPenalty::Trace, sgpr_collapsed(obs, st)?.total),
                ("tsgpr", ConditionalPenalty::Diagonal, tsgpr_collapsed(obs, st)?.total),
                ("btsgpr", ConditionalPenalty::Block, btsgpr_collapsed(obs, st, part)?.total),
            ];
            for (name, pen, collapsed) in pairs {
                let un = btsgpr_uncollapsed(obs, st, part, &vi_q, pen)?.total;
                t.check(rel_diff(un, collapsed), tol, || format!("instance {} {name}", inst.seed));
            }
            let eq = equal_block_instance(&inst);
            let q_eq = optimal_qu(&eq.obs, st, &BlockDiagonal::zeros(eq.partition.blocks().to_vec()))?;
            let sh_u = btsgpr_uncollapsed(&eq.obs, st, &eq.partition, &q_eq, ConditionalPenalty::Shared)?.total;
            let sh_c = sharedblock_collapsed(&eq.obs, st, &eq.partition)?.total;
            t.check(rel_diff(sh_u, sh_c), tol, || format!("instance {} sharedblock", inst.seed));
            let sp = BoundSpec::simple(Method::Spherical);
            let single = Partition::singletons(obs.len());
            let sp_u = evaluate_uncollapsed(obs, st, &sp, &single, &vi_q, BlockSelection::All, false)?.0.total;
            let sp_c = spherical_collapsed(obs, st)?.bound.total;
            t.check(rel_diff(sp_u, sp_c), tol, || format!("instance {} spherical", inst.seed));

            let alpha = alphas[i % 3];
            let m = [0.5, 1.0, 1.5][(i / 3) % 3];
            let pc = PepConfig::new(alpha, m, part.clone())?;
            let q = tpep_optimal_qu(obs, st, &pc)?;
            let tu = tpep_uncollapsed(obs, st, &pc, &q)?.total;
            let tc = tpep_collapsed(obs, st, &pc)?.total;
            t.check(rel_diff(tu, tc), tol, || format!("instance {} tpep alpha={alpha} m={m} B={b}", inst.seed));
            Ok(())
        })();
        if let Err(e) = res {
            t.error(format!("instance {}: {e}", inst.seed));
        }
    }
    t.finish(2, "collapse-identities", started, None)
}

/// Dense `log N(y; 0, Q_ff + diag(D_ff) + sigma^2 I)`.
pub fn dense_fitc(obs: &Observations<f64>, st: &crate::model::ModelState<f64>) -> Result<f64> {
    let gap = conditional_gap(&obs.x, &st.inducing, &st.kernel)?.matrix;
    let kff = crate::kernel::kernel_matrix(&obs.x, &obs.x, &st.kernel)?;
    let q = &kff - &gap;
    let mut cov = q;
    for i in 0..obs.len() {
        cov[(i, i)] += gap[(i, i)] + st.noise_variance();
    }
    dense_gauss_logpdf(&obs.y, &cov)
}

/// Limits of the Power-EP family: small alpha recovers the variational
/// bounds, alpha = 1 recovers FITC, m = 1 recovers PEP.
pub fn limit_lattice(cfg: &VerifyConfig) -> CriterionResult {
    let started = Instant::now();
    let mut t = Tally::new();
    let small = 1e-6;
    for i in 0..counts(cfg.scale, 20, 100) {
        let seed = seed_for(cfg, 3, i);
        let inst = random_instance_seeded(seed);
        let n = inst.obs.len();
        let res = (|| -> Result<()> {
            let (obs, st, part) = (&inst.obs, &inst.state, &inst.partition);
            let single = Partition::singletons(n);
            let pep0 = pep_collapsed(obs, st, &PepConfig::new(small, 1.0, single.clone())?)?.total;
            let sg = sgpr_collapsed(obs, st)?.total;
            t.check((pep0 - sg).abs(), 1e-4, || format!("instance {seed} pep(alpha->0) vs sgpr"));

            let sph = spherical_collapsed(obs, st)?;
            let tp0 = tpep_collapsed(obs, st, &PepConfig::new(small, sph.m, single.clone())?)?.total;
            t.check((tp0 - sph.bound.total).abs(), 1e-4, || format!("instance {seed} tpep(alpha->0) vs spherical"));

            let mb = optimal_mb(obs, st, part)?;
            let gp0 = general_pep_oracle(obs, st, small, part, &mb)?.total;
            let bt = btsgpr_collapsed(obs, st, part)?.total;
            t.check((gp0 - bt).abs(), 1e-4, || format!("instance {seed} oracle(alpha->0) vs btsgpr"));

            let fitc = pep_collapsed(obs, st, &PepConfig::new(1.0, 1.0, single)?)?.total;
            t.check(rel_diff(fitc, dense_fitc(obs, st)?), 1e-8, || format!("instance {seed} pep(alpha=1) vs FITC"));

            for alpha in [0.25, 0.5, 1.0] {
                let pc = PepConfig::new(alpha, 1.0, part.clone())?;
                let a = tpep_collapsed(obs, st, &pc)?.total;
                let p = pep_collapsed(obs, st, &pc)?.total;
                t.check(rel_diff(a, p), 1e-10, || format!("instance {seed} tpep(m=1) vs pep alpha={alpha}"));
            }
            Ok(())
        })();
        if let Err(e) = res {
            t.error(format!("instance {seed}: {e}"));
        }
    }
    t.finish(3, "limit-lattice", started, None)
}

/// Site fixed point and converged Power-EP iteration against the closed forms.
pub fn pep_fixed_point(cfg: &VerifyConfig) -> CriterionResult {
    let started = Instant::now();
    let mut t = Tally::new();
    for i in 0..counts(cfg.scale, 50, 150) {
        let seed = seed_for(cfg, 4, i);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(10..=40);
        let shape = Shape {
            n,
            d: rng.random_range(1..=3),
            m: rng.random_range(2..=6),
            blocks: rng.random_range(1..=n),
        };
        let inst = random_instance(seed, shape);
        let alpha = [0.25, 0.5, 1.0][i % 3];
        let m = [0.5, 1.0, 1.5][(i / 3) % 3];
        let res = (|| -> Result<()> {
            let (obs, st) = (&inst.obs, &inst.state);
            let pc = PepConfig::new(alpha, m, inst.partition.clone())?;
            let what = || format!("instance {seed} alpha={alpha} m={m}");
            match crate::bounds::verify_site_fixed_point(obs, st, &pc) {
                Ok(r) => t.check(r.max_deviation, 1e-7, || format!("{} site", what())),
                Err(e) => t.error(format!("{}: {e}", what())),
            }
            let run = pep_iterate(obs, st, &pc, 0.5, 200)?;
            t.check(if run.converged { 0.0 } else { f64::INFINITY }, 0.0, || format!("{} convergence", what()));
            let q = tpep_optimal_qu(obs, st, &pc)?;
            t.check(rel_diff_vec(&run.q.mean, &q.mean), 1e-6, || format!("{} mean", what()));
            t.check(rel_diff_mat(&run.q.cov(), &q.cov()), 1e-6, || format!("{} covariance", what()));
            let e = tpep_collapsed(obs, st, &pc)?.total;
            t.check(rel_diff(run.energy, e), 1e-6, || format!("{} energy", what()));
            Ok(())
        })();
        if let Err(e) = res {
            t.error(format!("instance {seed}: {e}"));
        }
    }
    t.finish(4, "pep-fixed-point", started, None)
}

/// Randomly perturbed copy of `q`.
pub fn perturb_q(q: &GaussianQU<f64>, rng: &mut impl Rng, scale: f64) -> Result<GaussianQU<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let m = q.dim();
    let mean = DVector::from_fn(m, |i, _| q.mean[i] + scale * normal.sample(rng));
    let mut l = q.cov_chol.lower().clone();
    for j in 0..m {
        l[(j, j)] *= (scale * normal.sample(rng)).exp();
        for i in j + 1..m {
            l[(i, j)] += scale * 0.3 * normal.sample(rng) * l[(j, j)];
        }
    }
    GaussianQU::new(mean, crate::linalg::Chol::from_lower(l)?)
}

/// The block average of the one-block estimator equals the full uncollapsed bound.
pub fn stochastic_unbiasedness(cfg: &VerifyConfig) -> CriterionResult {
    let started = Instant::now();
    let mut t = Tally::new();
    for i in 0..counts(cfg.scale, 50, 200) {
        let seed = seed_for(cfg, 5, i);
        let inst = random_instance_seeded(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let res = (|| -> Result<()> {
            let (obs, st, part) = (&inst.obs, &inst.state, &inst.partition);
            let q0 = optimal_qu(obs, st, &BlockDiagonal::zeros(part.blocks().to_vec()))?;
            let q = perturb_q(&q0, &mut rng, 0.3)?;
            let full = btsgpr_uncollapsed(obs, st, part, &q, ConditionalPenalty::Block)?.total;
            let b = part.num_blocks();
            let mut sum = 0.0;
            for k in 0..b {
                sum += btsgpr_stochastic(obs, st, part, &q, k)?;
            }
            t.check(rel_diff(sum / b as f64, full), 1e-12, || format!("instance {seed} B={b}"));
            Ok(())
        })();
        if let Err(e) = res {
            t.error(format!("instance {seed}: {e}"));
        }
    }
    t.finish(5, "stochastic-unbiasedness", started, None)
}

fn random_spd(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let g = DMatrix::from_fn(n, n, |_, _| normal.sample(rng));
    let mut a = &g * g.transpose() / n as f64;
    for i in 0..n {
        a[(i, i)] += 0.05;
    }
    a
}

/// The general-C collapsed bound is maximized by `C = D^{1/2} M* D^{1/2}`
/// over block-structured `C`, where it equals the block-diagonal bound; with
/// one block it is maximized over every PSD `C`.
pub fn general_c_optimality(cfg: &VerifyConfig) -> CriterionResult {
    let started = Instant::now();
    let mut t = Tally::new();
    let tol = 1e-7;
    let per_instance = 100;
    for i in 0..counts(cfg.scale, 10, 30) {
        let seed = seed_for(cfg, 6, i);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(10..=30);
        let b = rng.random_range(1..=n / 2);
        let inst = spread_instance(seed, n, rng.random_range(1..=3), rng.random_range(2..=5), b);
        let res = (|| -> Result<()> {
            let (obs, st, part) = (&inst.obs, &inst.state, &inst.partition);
            let bt = btsgpr_collapsed(obs, st, part)?.total;
            let (c_opt, _) = optimal_c_dense(obs, st, part)?;
            let at_opt = general_c_oracle(obs, st, &c_opt)?.total;
            t.check(rel_diff(at_opt, bt), tol, || format!("instance {seed} value at optimal C"));

            let root = psd_sqrt(&conditional_gap(&obs.x, &st.inducing, &st.kernel)?.matrix);
            let scale = bt.abs().max(1.0);
            for k in 0..per_instance {
                let blocks: Vec<DMatrix<f64>> = part.blocks().iter().map(|idx| random_spd(idx.len(), &mut rng)).collect();
                let mm = BlockDiagonal::new(part.blocks().to_vec(), blocks)?.to_dense();
                let c = &root * mm * &root;
                let v = general_c_oracle(obs, st, &c)?.total;
                // strictly below the optimum by more than the tolerance
                t.check((v - bt) / scale + tol, 0.0, || format!("instance {seed} block-structured C #{k}"));
            }

            let one = Partition::new(vec![(0..n).collect()], n)?;
            let bt1 = btsgpr_collapsed(obs, st, &one)?.total;
            let (c1, _) = optimal_c_dense(obs, st, &one)?;
            t.check(rel_diff(general_c_oracle(obs, st, &c1)?.total, bt1), 1e-8, || {
                format!("instance {seed} one block at optimal C")
            });
            let scale1 = bt1.abs().max(1.0);
            for k in 0..per_instance {
                let c = &root * random_spd(n, &mut rng) * &root;
                let v = general_c_oracle(obs, st, &c)?.total;
                t.check((v - bt1) / scale1 + tol, 0.0, || format!("instance {seed} unrestricted C #{k}"));
            }
            Ok(())
        })();
        if let Err(e) = res {
            t.error(format!("instance {seed}: {e}"));
        }
    }
    t.finish(6, "general-c-optimality", started, None)
}

/// Specs exercised by the gradient suite for a partition with `b` blocks.
pub fn gradient_specs(b: usize) -> Vec<BoundSpec> {
    vec![
        BoundSpec::simple(Method::Exact),
        BoundSpec::simple(Method::Sgpr),
        BoundSpec::simple(Method::TSgpr),
        BoundSpec { method: Method::BtSgpr, alpha: None, num_blocks: Some(b) },
        BoundSpec { method: Method::SharedBlock, alpha: None, num_blocks: Some(b) },
        BoundSpec::simple(Method::Spherical),
        BoundSpec { method: Method::Pep, alpha: Some(0.5), num_blocks: Some(b) },
        BoundSpec { method: Method::TPep, alpha: Some(0.3), num_blocks: Some(b) },
    ]
}

fn grad_deviation(a: &DVector<f64>, f: &DVector<f64>) -> f64 {
    // rtol 1e-4 with a 1e-6 absolute floor, expressed as a ratio to the allowance
    (0..a.len())
        .map(|i| (a[i] - f[i]).abs() / (1e-4 * a[i].abs().max(f[i].abs()) + 1e-6))
        .fold(0.0, f64::max)
}

/// Analytic gradients against central finite differences for every trainable family.
pub fn gradient_checks(cfg: &VerifyConfig) -> CriterionResult {
    let started = Instant::now();
    let mut t = Tally::new();
    for i in 0..counts(cfg.scale, 20, 50) {
        let seed = seed_for(cfg, 7, i);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(12..=24);
        let shape = Shape { n, d: rng.random_range(1..=3), m: rng.random_range(2..=5), blocks: rng.random_range(2..=n / 3) };
        let base = random_instance(seed, shape);
        let eq = equal_block_instance(&base);
        let res = (|| -> Result<()> {
            for spec in gradient_specs(base.partition.num_blocks()) {
                let inst = if spec.method == Method::SharedBlock { &eq } else { &base };
                let mut st = inst.state.clone();
                if spec.method == Method::TPep {
                    st.log_m = Some(rng.random_range(-0.4..0.4));
                }
                let obj = CollapsedObjective::new(&inst.obs, &st, spec, inst.partition.clone())?;
                let th = obj.initial();
                let a = gradient(&obj, &th, GradientMode::Analytic, 1e-5)?;
                let f = gradient(&obj, &th, GradientMode::FiniteDifference, 1e-5)?;
                t.check(grad_deviation(&a, &f), 1.0, || format!("instance {seed} collapsed {}", spec.label()));
                if spec.method == Method::Exact {
                    continue;
                }
                let q0 = method_optimal_qu(&inst.obs, &st, &spec, &inst.partition)?;
                let q = perturb_q(&q0, &mut rng, 0.1)?;
                let mut un = UncollapsedObjective::new(&inst.obs, &st, spec, inst.partition.clone())?;
                let th = un.pack(&st, &q);
                let mut selections = vec![BlockSelection::All];
                if !matches!(spec.method, Method::SharedBlock | Method::Spherical) {
                    selections.push(BlockSelection::One(rng.random_range(0..inst.partition.num_blocks())));
                }
                for sel in selections {
                    un.selection = sel;
                    let a = gradient(&un, &th, GradientMode::Analytic, 1e-5)?;
                    let f = gradient(&un, &th, GradientMode::FiniteDifference, 1e-5)?;
                    t.check(grad_deviation(&a, &f), 1.0, || {
                        format!("instance {seed} uncollapsed {} {sel:?}", spec.label())
                    });
                }
            }
            Ok(())
        })();
        if let Err(e) = res {
            t.error(format!("instance {seed}: {e}"));
        }
    }
    t.finish(7, "gradient-checks", started, None)
}

/// With `Z = X` every bound equals the exact log marginal likelihood.
pub fn exactness_at_inputs(cfg: &VerifyConfig) -> CriterionResult {
    let started = Instant::now();
    let mut t = Tally::new();
    for i in 0..counts(cfg.scale, 20, 60) {
        let seed = seed_for(cfg, 9, i);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(8..=30);
        let b = rng.random_range(1..=n / 2);
        let mut inst = spread_instance(seed, n, rng.random_range(1..=3), 2, b);
        inst.state.inducing = inst.obs.x.clone();
        let res = (|| -> Result<()> {
            let (obs, st, part) = (&inst.obs, &inst.state, &inst.partition);
            let ex = exact_lml(obs, st)?.total;
            let eq = equal_block_instance(&inst);
            let ex_eq = exact_lml(&eq.obs, st)?.total;
            let mut st_eq = st.clone();
            st_eq.inducing = eq.obs.x.clone();
            let mut vals = vec![
                ("sgpr", sgpr_collapsed(obs, st)?.total, ex),
                ("tsgpr", tsgpr_collapsed(obs, st)?.total, ex),
                ("btsgpr", btsgpr_collapsed(obs, st, part)?.total, ex),
                ("spherical", spherical_collapsed(obs, st)?.bound.total, ex),
                ("sharedblock", sharedblock_collapsed(&eq.obs, &st_eq, &eq.partition)?.total, exact_lml(&eq.obs, &st_eq)?.total),
            ];
            let _ = ex_eq;
            for alpha in [0.25, 0.5, 1.0] {
                vals.push(("pep blocks", pep_collapsed(obs, st, &PepConfig::new(alpha, 1.0, part.clone())?)?.total, ex));
                vals.push((
                    "pep singletons",
                    pep_collapsed(obs, st, &PepConfig::new(alpha, 1.0, Partition::singletons(n))?)?.total,
                    ex,
                ));
                let spec = BoundSpec { method: Method::TPep, alpha: Some(alpha), num_blocks: Some(b) };
                vals.push(("tpep", evaluate(obs, st, &spec, part, false)?.0.total, ex));
            }
            for (name, v, e) in vals {
                t.check(rel_diff(v, e), 1e-7, || format!("instance {seed} {name}"));
            }
            Ok(())
        })();
        if let Err(e) = res {
            t.error(format!("instance {seed}: {e}"));
        }
    }
    t.finish(9, "exactness-at-inputs", started, None)
}

/// Final objective and noise of one trained method.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitSummary {
    pub label: String,
    pub objective: f64,
    pub sigma2: f64,
    pub kernel_variance: f64,
}

/// Trains SGPR, T-SGPR and BT-SGPR with 20 and 10 blocks by L-BFGS from one
/// shared initialization on 1-D toy data (N = 200, M = 5 random training
/// inputs, median lengthscale, unit signal variance, noise 0.1) and checks
/// that the final objectives tighten along the chain and the learned noise
/// does not grow by more than 5% from one method to the next.
pub fn qualitative_reproduction(cfg: &VerifyConfig) -> (CriterionResult, Vec<FitSummary>) {
    let started = Instant::now();
    let mut t = Tally::new();
    let mut fits = Vec::new();
    let res = (|| -> Result<()> {
        let obs = super::snelson_like(cfg.seed, 200);
        let ds = crate::data::Dataset::new(obs.x.clone(), obs.y.clone())?;
        let z = crate::data::init_inducing_subset(&ds, 5, cfg.seed)?;
        let kernel = crate::data::init_lengthscales_median(&ds, cfg.seed)?;
        let init = crate::model::ModelState::new(kernel, crate::kernel::NoiseParam::new(0.1), z)?;
        let specs = [
            BoundSpec::simple(Method::Sgpr),
            BoundSpec::simple(Method::TSgpr),
            BoundSpec { method: Method::BtSgpr, alpha: None, num_blocks: Some(20) },
            BoundSpec { method: Method::BtSgpr, alpha: None, num_blocks: Some(10) },
        ];
        for spec in specs {
            let part = spec.partition(obs.len(), cfg.seed)?;
            let (st, trace) = crate::training::fit_collapsed(&obs, &init, &part, &crate::training::TrainConfig::lbfgs(spec))?;
            let objective = evaluate(&obs, &st, &spec, &part, false)?.0.total;
            log::debug!("{}: {} iterations", spec.label(), trace.len());
            fits.push(FitSummary {
                label: spec.label(),
                objective,
                sigma2: st.noise_variance(),
                kernel_variance: st.kernel.signal_variance(),
            });
        }
        for w in fits.windows(2) {
            t.check(w[0].objective - w[1].objective, 1e-6, || format!("objective {} > {}", w[0].label, w[1].label));
        }
        for w in fits[..3].windows(2) {
            t.check(w[1].sigma2 / w[0].sigma2 - 1.0, 0.05, || format!("noise {} -> {}", w[0].label, w[1].label));
        }
        t.check(fits[3].sigma2 / fits[1].sigma2 - 1.0, 0.05, || format!("noise {} -> {}", fits[1].label, fits[3].label));
        Ok(())
    })();
    if let Err(e) = res {
        t.error(format!("training failed: {e}"));
    }
    (t.finish(8, "qualitative-reproduction", started, Some(300.0)), fits)
}

/// Runs the criteria 1-7 and 9 suites.
pub fn run_all(cfg: &VerifyConfig) -> VerifyReport {
    let results = vec![
        ordering_chain(cfg),
        collapse_identities(cfg),
        limit_lattice(cfg),
        pep_fixed_point(cfg),
        stochastic_unbiasedness(cfg),
        general_c_optimality(cfg),
        gradient_checks(cfg),
        exactness_at_inputs(cfg),
    ];
    VerifyReport { seed: cfg.seed, scale: cfg.scale, results }
}
