//! Seeded random problem instances and the invariant suites run by the
//! `verify` command and the acceptance tests.

mod suites;
pub use suites::*;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::kernel::{KernelParams, NoiseParam};
use crate::model::{make_partition, ModelState, Observations, Partition};

/// A small regression problem with a model state and a partition.
#[derive(Debug, Clone)]
pub struct Instance {
    pub obs: Observations<f64>,
    pub state: ModelState<f64>,
    pub partition: Partition,
    pub seed: u64,
}

/// Sizes of a random instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub blocks: usize,
}

/// Draws sizes in the ranges used by the ordering suite: N in [20, 60],
/// D in [1, 4], M in [2, 8], and a block count leaving some block of size >= 2.
pub fn random_shape(rng: &mut impl Rng) -> Shape {
    let n = rng.random_range(20..=60);
    let d = rng.random_range(1..=4);
    let m = rng.random_range(2..=8);
    let blocks = rng.random_range(1..=n / 2);
    Shape { n, d, m, blocks }
}

/// Random instance with the given sizes.
///
/// Inputs are uniform on `[-2, 2]^D`, targets are a smooth function plus
/// noise, inducing points are jittered training inputs.
pub fn random_instance(seed: u64, shape: Shape) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let Shape { n, d, m, blocks } = shape;
    let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0));
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let w: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
    let y = DVector::from_fn(n, |i, _| {
        let t: f64 = (0..d).map(|k| w[k] * x[(i, k)]).sum();
        t.sin() + 0.3 * (2.0 * t).cos() + 0.2 * normal.sample(&mut rng)
    });
    let lengthscales: Vec<f64> = (0..d).map(|_| rng.random_range(0.6..1.6)).collect();
    let kernel = KernelParams::new(&lengthscales, rng.random_range(0.5..2.0));
    let noise = NoiseParam::new(rng.random_range(0.05..0.5));
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(&mut rng);
    // keep inducing inputs at least half a lengthscale apart so K_uu stays well conditioned
    let scaled_dist = |a: usize, b: usize| -> f64 {
        (0..d).map(|k| ((x[(a, k)] - x[(b, k)]) / lengthscales[k]).powi(2)).sum::<f64>().sqrt()
    };
    let mut chosen: Vec<usize> = Vec::with_capacity(m);
    for &r in &rows {
        if chosen.len() == m {
            break;
        }
        if chosen.iter().all(|&c| scaled_dist(r, c) >= 0.5) {
            chosen.push(r);
        }
    }
    for &r in &rows {
        if chosen.len() == m {
            break;
        }
        if !chosen.contains(&r) {
            chosen.push(r);
        }
    }
    let z = DMatrix::from_fn(m, d, |i, k| x[(chosen[i], k)] + 0.05 * normal.sample(&mut rng));
    let state = ModelState::new(kernel, noise, z).expect("valid random state");
    let partition = make_partition(n, blocks, seed ^ 0x5eed).expect("valid block count");
    let obs = Observations::new(x, y).expect("matching lengths");
    Instance { obs, state, partition, seed }
}

/// Instance with sizes drawn by [`random_shape`] from the same seed.
pub fn random_instance_seeded(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let shape = random_shape(&mut rng);
    random_instance(seed, shape)
}

/// Random instance with well-separated inputs (scaled pairwise distance at
/// least 1), so that `K_ff` and `D_ff` are comfortably invertible. Used by
/// the dense oracles.
pub fn spread_instance(seed: u64, n: usize, d: usize, m: usize, blocks: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let lengthscales: Vec<f64> = (0..d).map(|_| rng.random_range(0.4..0.8)).collect();
    let half_width = 0.6 * (n as f64).powf(1.0 / d as f64) + 1.0;
    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut tries = 0;
    while pts.len() < n {
        let p: Vec<f64> = (0..d).map(|_| rng.random_range(-half_width..half_width)).collect();
        tries += 1;
        let far = pts.iter().all(|q| {
            (0..d).map(|k| ((p[k] - q[k]) / lengthscales[k]).powi(2)).sum::<f64>().sqrt() >= 1.0
        });
        if far || tries > 100_000 {
            pts.push(p);
        }
    }
    let x = DMatrix::from_fn(n, d, |i, k| pts[i][k]);
    let y = DVector::from_fn(n, |i, _| (x[(i, 0)]).sin() + 0.25 * normal.sample(&mut rng));
    let kernel = KernelParams::new(&lengthscales, rng.random_range(0.5..1.5));
    let noise = NoiseParam::new(rng.random_range(0.1..0.5));
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(&mut rng);
    let z = DMatrix::from_fn(m, d, |i, k| x[(rows[i], k)] + 0.2 * lengthscales[k] * normal.sample(&mut rng));
    let state = ModelState::new(kernel, noise, z).expect("valid random state");
    let partition = make_partition(n, blocks, seed ^ 0x5eed).expect("valid block count");
    let obs = Observations::new(x, y).expect("matching lengths");
    Instance { obs, state, partition, seed }
}

/// Copy of `inst` restricted to its first `B * floor(N / B)` points with an
/// equal-size partition of `B` blocks.
pub fn equal_block_instance(inst: &Instance) -> Instance {
    let b = inst.partition.num_blocks();
    let n = (inst.obs.len() / b) * b;
    let idx: Vec<usize> = (0..n).collect();
    let partition = make_partition(n, b, inst.seed ^ 0xb10c).expect("valid block count");
    Instance { obs: inst.obs.subset(&idx), state: inst.state.clone(), partition, seed: inst.seed }
}

/// Smooth 1-D toy regression data in the style of the Snelson dataset:
/// `x ~ U(0, 6)`, `y = sin(1.5x)/(1 + x/3) + 0.4 cos(x) + noise` with noise sd 0.3.
pub fn snelson_like(seed: u64, n: usize) -> Observations<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.3).expect("normal");
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..6.0)).collect();
    let y = DVector::from_fn(n, |i, _| {
        let x = xs[i];
        (1.5 * x).sin() / (1.0 + x / 3.0) + 0.4 * x.cos() + normal.sample(&mut rng)
    });
    Observations::new(DMatrix::from_column_slice(n, 1, &xs), y).expect("matching lengths")
}
