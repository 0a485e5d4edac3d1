use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use structgp::bounds::*;
use structgp::kernel::{conditional_gap, kernel_matrix};
use structgp::linalg::dense_gauss_logpdf;
use structgp::verify::{perturb_q, random_instance, random_instance_seeded, spread_instance, Shape};
use structgp::{BlockDiagonal, BoundSpec, GpError, Method, Partition};

fn identity_blocks(p: &Partition, scale: f64) -> BlockDiagonal<f64> {
    let blocks = p.blocks().iter().map(|idx| DMatrix::identity(idx.len(), idx.len()) * scale).collect();
    BlockDiagonal::new(p.blocks().to_vec(), blocks).unwrap()
}

fn gap_blocks(inst: &structgp::verify::Instance, p: &Partition, scale: f64) -> DMatrix<f64> {
    let gap = conditional_gap(&inst.obs.x, &inst.state.inducing, &inst.state.kernel).unwrap().matrix;
    let n = inst.obs.len();
    let mut out = DMatrix::zeros(n, n);
    for idx in p.blocks() {
        for &i in idx {
            for &j in idx {
                out[(i, j)] = gap[(i, j)] * scale;
            }
        }
    }
    out
}

fn dense_cov(inst: &structgp::verify::Instance, extra: &DMatrix<f64>) -> DMatrix<f64> {
    let st = &inst.state;
    let kff = kernel_matrix(&inst.obs.x, &inst.obs.x, &st.kernel).unwrap();
    let gap = conditional_gap(&inst.obs.x, &st.inducing, &st.kernel).unwrap().matrix;
    let mut c = kff - gap + extra;
    for i in 0..inst.obs.len() {
        c[(i, i)] += st.noise_variance();
    }
    c
}

#[test]
fn config_validation_names_field() {
    let p = Partition::singletons(3);
    let e = PepConfig::new(0.0, 1.0, p.clone()).unwrap_err();
    assert!(e.to_string().contains("alpha"));
    let e = PepConfig::new(0.5, -1.0, p).unwrap_err();
    assert!(e.to_string().contains("m_scale"));
}

#[test]
fn pep_rejects_m_other_than_one() {
    let inst = random_instance_seeded(1);
    let cfg = PepConfig::new(0.5, 0.7, inst.partition.clone()).unwrap();
    assert!(matches!(pep_collapsed(&inst.obs, &inst.state, &cfg), Err(GpError::InvalidArgument(_))));
}

#[test]
fn pep_alpha_one_singletons_is_fitc() {
    let inst = random_instance_seeded(2);
    let n = inst.obs.len();
    let cfg = PepConfig::new(1.0, 1.0, Partition::singletons(n)).unwrap();
    let gap = conditional_gap(&inst.obs.x, &inst.state.inducing, &inst.state.kernel).unwrap().matrix;
    let fitc = dense_gauss_logpdf(&inst.obs.y, &dense_cov(&inst, &DMatrix::from_diagonal(&gap.diagonal()))).unwrap();
    assert_relative_eq!(pep_collapsed(&inst.obs, &inst.state, &cfg).unwrap().total, fitc, max_relative = 1e-8);
}

#[test]
fn pep_small_alpha_approaches_sgpr_linearly() {
    let inst = random_instance(4, Shape { n: 30, d: 1, m: 6, blocks: 30 });
    let n = inst.obs.len();
    let sg = sgpr_collapsed(&inst.obs, &inst.state).unwrap().total;
    let dev = |a: f64| {
        pep_collapsed(&inst.obs, &inst.state, &PepConfig::new(a, 1.0, Partition::singletons(n)).unwrap()).unwrap().total - sg
    };
    let (d5, d6) = (dev(1e-5), dev(1e-6));
    assert!(d6.abs() < 1e-4, "{d6}");
    // first-order remainder: shrinks tenfold with alpha
    assert_relative_eq!(d5 / d6, 10.0, max_relative = 5e-2);
}

#[test]
fn pep_matches_oracle_with_identity_scaling() {
    let inst = spread_instance(7, 10, 1, 2, 5);
    let cfg = PepConfig::new(0.5, 1.0, inst.partition.clone()).unwrap();
    let o = general_pep_oracle(&inst.obs, &inst.state, 0.5, &inst.partition, &identity_blocks(&inst.partition, 1.0)).unwrap();
    assert_relative_eq!(o.total, pep_collapsed(&inst.obs, &inst.state, &cfg).unwrap().total, max_relative = 1e-8);
}

#[test]
fn tpep_examples() {
    let inst = random_instance_seeded(9);
    let p = &inst.partition;
    let pep = pep_collapsed(&inst.obs, &inst.state, &PepConfig::new(0.4, 1.0, p.clone()).unwrap()).unwrap();
    let t1 = tpep_collapsed(&inst.obs, &inst.state, &PepConfig::new(0.4, 1.0, p.clone()).unwrap()).unwrap();
    assert_relative_eq!(t1.fit_term, pep.fit_term, max_relative = 1e-12);
    assert_relative_eq!(t1.regularizer, pep.regularizer, max_relative = 1e-12);

    let m = 1.7;
    let t = tpep_collapsed(&inst.obs, &inst.state, &PepConfig::new(1.0, m, p.clone()).unwrap()).unwrap().total;
    let want = dense_gauss_logpdf(&inst.obs.y, &dense_cov(&inst, &gap_blocks(&inst, p, m))).unwrap();
    assert_relative_eq!(t, want, max_relative = 1e-10);

    let o = general_pep_oracle(&inst.obs, &inst.state, 0.3, p, &identity_blocks(p, m)).unwrap().total;
    let t = tpep_collapsed(&inst.obs, &inst.state, &PepConfig::new(0.3, m, p.clone()).unwrap()).unwrap().total;
    assert_relative_eq!(o, t, max_relative = 1e-7);

    assert!(PepConfig::new(1.0, 0.0, p.clone()).is_err());
}

#[test]
fn tpep_small_alpha_at_optimal_m_is_spherical() {
    let inst = random_instance(13, Shape { n: 30, d: 2, m: 6, blocks: 30 });
    let n = inst.obs.len();
    let sph = spherical_collapsed(&inst.obs, &inst.state).unwrap();
    let f = |m: f64| {
        tpep_collapsed(&inst.obs, &inst.state, &PepConfig::new(1e-6, m, Partition::singletons(n)).unwrap()).unwrap().total
    };
    assert!((f(sph.m) - sph.bound.total).abs() < 1e-4);
    // dF/dm from the analytic log-m gradient (finite differences lose
    // several digits to the 1/alpha factors at this alpha)
    let slope = |alpha: f64| {
        let spec = BoundSpec { method: Method::TPep, alpha: Some(alpha), num_blocks: Some(n) };
        let st = inst.state.clone().with_m(sph.m);
        let (_, g) = evaluate(&inst.obs, &st, &spec, &Partition::singletons(n), true).unwrap();
        g.unwrap().log_m / sph.m
    };
    let (s6, s7) = (slope(1e-6), slope(1e-7));
    // the slope is first order in alpha
    assert_relative_eq!(s6 / s7, 10.0, max_relative = 1e-3);
    assert!(s6.abs() < 1e-3, "{s6}");
}

#[test]
fn tpep_optimal_qu_examples() {
    let inst = random_instance(17, Shape { n: 10, d: 1, m: 3, blocks: 10 });
    let p = Partition::singletons(10);
    let vi = optimal_qu(&inst.obs, &inst.state, &BlockDiagonal::zeros(p.blocks().to_vec())).unwrap();
    let small = tpep_optimal_qu(&inst.obs, &inst.state, &PepConfig::new(1e-9, 1.3, p.clone()).unwrap()).unwrap();
    assert!((&small.mean - &vi.mean).amax() < 1e-6 * vi.mean.amax());

    // FITC posterior from the dense linear model with R = diag(D) + sigma^2 I
    let st = &inst.state;
    let gap = conditional_gap(&inst.obs.x, &st.inducing, &st.kernel).unwrap().matrix;
    let mut r = DMatrix::from_diagonal(&gap.diagonal());
    for i in 0..10 {
        r[(i, i)] += st.noise_variance();
    }
    let kuu = kernel_matrix(&st.inducing, &st.inducing, &st.kernel).unwrap();
    let kinv = kuu.try_inverse().unwrap();
    let phi = kernel_matrix(&inst.obs.x, &st.inducing, &st.kernel).unwrap() * &kinv;
    let rinv = r.try_inverse().unwrap();
    let cov = (&kinv + phi.transpose() * &rinv * &phi).try_inverse().unwrap();
    let mean = &cov * phi.transpose() * &rinv * &inst.obs.y;
    let fitc = tpep_optimal_qu(&inst.obs, st, &PepConfig::new(1.0, 1.0, p.clone()).unwrap()).unwrap();
    assert!((&fitc.mean - mean).amax() < 1e-8 * fitc.mean.amax());
    assert!((fitc.cov() - &cov).amax() < 1e-8 * cov.amax());

    let mut zero = inst.obs.clone();
    zero.y = DVector::zeros(10);
    assert_eq!(tpep_optimal_qu(&zero, st, &PepConfig::new(0.5, 0.8, p).unwrap()).unwrap().mean.amax(), 0.0);
}

#[test]
fn tpep_uncollapsed_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..8 {
        let inst = random_instance_seeded(200 + seed);
        let cfg = PepConfig::new(0.5, 1.2, inst.partition.clone()).unwrap();
        let q0 = tpep_optimal_qu(&inst.obs, &inst.state, &cfg).unwrap();
        let c = tpep_collapsed(&inst.obs, &inst.state, &cfg).unwrap().total;
        assert_relative_eq!(tpep_uncollapsed(&inst.obs, &inst.state, &cfg, &q0).unwrap().total, c, max_relative = 1e-8);
        for _ in 0..5 {
            let q = perturb_q(&q0, &mut rng, 0.2).unwrap();
            assert!(tpep_uncollapsed(&inst.obs, &inst.state, &cfg, &q).unwrap().total <= c + 1e-9 * c.abs());
        }
    }
    let inst = random_instance(3, Shape { n: 20, d: 1, m: 5, blocks: 20 });
    let p = Partition::singletons(20);
    let q0 = optimal_qu(&inst.obs, &inst.state, &BlockDiagonal::zeros(p.blocks().to_vec())).unwrap();
    let q = perturb_q(&q0, &mut rng, 0.2).unwrap();
    let f1 = btsgpr_uncollapsed(&inst.obs, &inst.state, &p, &q, ConditionalPenalty::Trace).unwrap().total;
    let t = tpep_uncollapsed(&inst.obs, &inst.state, &PepConfig::new(1e-6, 1.0, p).unwrap(), &q).unwrap().total;
    assert!((t - f1).abs() < 1e-4, "{}", t - f1);
}

#[test]
fn oracle_small_alpha_optimal_scaling_is_btsgpr() {
    let inst = spread_instance(21, 16, 1, 4, 4);
    let mb = optimal_mb(&inst.obs, &inst.state, &inst.partition).unwrap();
    let o = general_pep_oracle(&inst.obs, &inst.state, 1e-6, &inst.partition, &mb).unwrap().total;
    let bt = btsgpr_collapsed(&inst.obs, &inst.state, &inst.partition).unwrap().total;
    assert!((o - bt).abs() < 1e-4, "{}", o - bt);
}

#[test]
fn site_fixed_point_examples() {
    let inst = random_instance_seeded(30);
    let cfg = PepConfig::new(0.5, 0.7, inst.partition.clone()).unwrap();
    let r = verify_site_fixed_point(&inst.obs, &inst.state, &cfg).unwrap();
    assert_eq!(r.blocks_checked, inst.partition.num_blocks());
    assert!(r.max_deviation <= 1e-7);

    // alpha = m = 1: site covariance D_bb + sigma^2 I
    let cfg = PepConfig::new(1.0, 1.0, inst.partition.clone()).unwrap();
    let run = pep_iterate(&inst.obs, &inst.state, &cfg, 0.5, 200).unwrap();
    assert!(run.converged);
    let gap = conditional_gap(&inst.obs.x, &inst.state.inducing, &inst.state.kernel).unwrap().matrix;
    for s in &run.sites {
        let idx = &inst.partition.blocks()[s.block];
        let mut want = DMatrix::from_fn(idx.len(), idx.len(), |i, j| gap[(idx[i], idx[j])]);
        for i in 0..idx.len() {
            want[(i, i)] += inst.state.noise_variance();
        }
        assert!((&s.v - &want).amax() < 1e-6 * want.amax());
    }

    // zero gap: sigma^2 I for any alpha, m
    let mut st = inst.state.clone();
    st.inducing = inst.obs.x.clone();
    let cfg = PepConfig::new(0.3, 1.4, inst.partition.clone()).unwrap();
    verify_site_fixed_point(&inst.obs, &st, &cfg).unwrap();
    let sub = spread_instance(2, 8, 1, 2, 2);
    let mut st = sub.state.clone();
    st.inducing = sub.obs.x.clone();
    let run = pep_iterate(&sub.obs, &st, &PepConfig::new(0.3, 1.4, sub.partition.clone()).unwrap(), 0.5, 200).unwrap();
    for s in &run.sites {
        let want = DMatrix::identity(s.v.nrows(), s.v.nrows()) * st.noise_variance();
        assert!((&s.v - want).amax() < 1e-6);
    }
}

#[test]
fn pep_iterate_small_alpha_matches_vi_posterior() {
    let inst = random_instance(40, Shape { n: 24, d: 2, m: 4, blocks: 6 });
    let cfg = PepConfig::new(1e-6, 1.0, inst.partition.clone()).unwrap();
    let run = pep_iterate(&inst.obs, &inst.state, &cfg, 0.5, 200).unwrap();
    assert!(run.converged);
    let vi = optimal_qu(&inst.obs, &inst.state, &BlockDiagonal::zeros(inst.partition.blocks().to_vec())).unwrap();
    assert!((&run.q.mean - &vi.mean).amax() <= 1e-4 * vi.mean.amax());
    assert!((run.q.cov() - vi.cov()).amax() <= 1e-4 * vi.cov().amax());
}

#[test]
fn pep_iterate_rejects_bad_damping() {
    let inst = random_instance_seeded(1);
    let cfg = PepConfig::new(0.5, 1.0, inst.partition.clone()).unwrap();
    assert!(pep_iterate(&inst.obs, &inst.state, &cfg, 0.0, 10).is_err());
}
