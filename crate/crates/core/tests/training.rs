use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use structgp::bounds::{btsgpr_uncollapsed, optimal_qu, sgpr_collapsed, ConditionalPenalty};
use structgp::data::{init_inducing_kmeans, Dataset};
use structgp::training::*;
use structgp::verify::{random_instance, snelson_like, Shape};
use structgp::{make_partition, BlockDiagonal, BoundSpec, GpError, KernelParams, Method, ModelState, NoiseParam, Partition};

#[test]
fn gradient_of_constant_and_quadratic() {
    let c = FnObjective::new(3, |_: &DVector<f64>| Ok(4.2));
    let th = DVector::from_vec(vec![0.3, -2.0, 7.0]);
    let g = gradient(&c, &th, GradientMode::FiniteDifference, 1e-5).unwrap();
    assert!(g.amax() == 0.0);
    let q = FnObjective::new(3, |t: &DVector<f64>| Ok(0.5 * t.norm_squared()));
    let g = gradient(&q, &th, GradientMode::FiniteDifference, 1e-5).unwrap();
    assert!((g - &th).amax() < 1e-8);
    // no analytic gradient available: falls back to differences
    let g = gradient(&q, &th, GradientMode::Analytic, 1e-5).unwrap();
    assert!((g - &th).amax() < 1e-8);
}

#[test]
fn sgpr_gradient_matches_differences() {
    let inst = random_instance(5, Shape { n: 20, d: 2, m: 4, blocks: 4 });
    let obj = CollapsedObjective::new(&inst.obs, &inst.state, BoundSpec::simple(Method::Sgpr), inst.partition.clone()).unwrap();
    let th = obj.initial();
    let a = gradient(&obj, &th, GradientMode::Analytic, 1e-5).unwrap();
    let f = gradient(&obj, &th, GradientMode::FiniteDifference, 1e-5).unwrap();
    for i in 0..a.len() {
        assert!((a[i] - f[i]).abs() <= 1e-4 * a[i].abs().max(f[i].abs()) + 1e-6, "{i}: {} vs {}", a[i], f[i]);
    }
}

#[test]
fn failing_evaluation_is_reported() {
    let obj = FnObjective::new(1, |t: &DVector<f64>| {
        if t[0] > 0.0 {
            Err(GpError::NotPositiveDefinite { cap: 1.0 })
        } else {
            Ok(t[0])
        }
    });
    let r = gradient(&obj, &DVector::from_vec(vec![0.0]), GradientMode::FiniteDifference, 1e-5);
    assert!(matches!(r, Err(GpError::EvaluationFailed(_))));
}

#[test]
fn lbfgs_stays_at_optimum() {
    let obj = FnObjective::new(1, |t: &DVector<f64>| Ok(-(t[0] - 2.0).powi(2)));
    let mut cfg = TrainConfig::lbfgs(BoundSpec::simple(Method::Sgpr));
    cfg.epochs = 10;
    let r = lbfgs_maximize(&obj, DVector::from_vec(vec![2.0]), &cfg, |_, _| {}).unwrap();
    assert!((r.theta[0] - 2.0).abs() < 1e-6);
    let r = lbfgs_maximize(&obj, DVector::from_vec(vec![-3.0]), &TrainConfig::lbfgs(BoundSpec::simple(Method::Sgpr)), |_, _| {})
        .unwrap();
    assert!((r.theta[0] - 2.0).abs() < 1e-6);
    assert!(r.converged);
}

fn snelson_start(n: usize) -> (structgp::Observations<f64>, ModelState<f64>) {
    let obs = snelson_like(3, n);
    let z = obs.x.select_rows(&[3, n / 5, 2 * n / 5, 3 * n / 5, 4 * n / 5]);
    let st = ModelState::new(KernelParams::new(&[1.0], 1.0), NoiseParam::new(0.1), z).unwrap();
    (obs, st)
}

#[test]
fn adam_trace_has_one_row_per_step() {
    let (obs, st) = snelson_start(200);
    let cfg = TrainConfig::adam(BoundSpec::simple(Method::Sgpr), 300);
    let (fit, trace) = fit_collapsed(&obs, &st, &Partition::singletons(200), &cfg).unwrap();
    assert_eq!(trace.len(), 300);
    assert!(trace.rows.iter().enumerate().all(|(i, r)| r.step == i));
    let end = sgpr_collapsed(&obs, &fit).unwrap().total;
    assert!(end > trace.rows[0].objective);
    assert!(fit.inducing != st.inducing);
}

#[test]
fn lbfgs_block_bound_beats_sgpr_at_its_optimum() {
    let (obs, st) = snelson_start(200);
    let part = make_partition(200, 10, 1).unwrap();
    let (sg, _) = fit_collapsed(&obs, &st, &part, &TrainConfig::lbfgs(BoundSpec::simple(Method::Sgpr))).unwrap();
    let spec = BoundSpec { method: Method::BtSgpr, alpha: None, num_blocks: Some(10) };
    let (_, trace) = fit_collapsed(&obs, &st, &part, &TrainConfig::lbfgs(spec)).unwrap();
    let sg_val = sgpr_collapsed(&obs, &sg).unwrap().total;
    assert!(trace.rows.last().unwrap().objective >= sg_val - 1e-6);
    let bt_at_sg = structgp::bounds::btsgpr_collapsed(&obs, &sg, &part).unwrap().total;
    assert!(bt_at_sg >= sg_val - 1e-9);
}

#[test]
fn tpep_training_updates_m() {
    let (obs, st) = snelson_start(60);
    let spec = BoundSpec { method: Method::TPep, alpha: Some(0.5), num_blocks: Some(6) };
    let part = make_partition(60, 6, 0).unwrap();
    let (fit, trace) = fit_collapsed(&obs, &st, &part, &TrainConfig::adam(spec, 50)).unwrap();
    assert!(trace.rows.iter().all(|r| r.m.is_some()));
    assert!(fit.m_scale().unwrap() != 1.0);
}

#[test]
fn one_block_stochastic_equals_full_batch() {
    let inst = random_instance(8, Shape { n: 30, d: 1, m: 4, blocks: 1 });
    let one = Partition::new(vec![(0..30).collect()], 30).unwrap();
    let q0 = optimal_qu(&inst.obs, &inst.state, &BlockDiagonal::zeros(one.blocks().to_vec())).unwrap();
    let spec = BoundSpec { method: Method::BtSgpr, alpha: None, num_blocks: Some(1) };
    let cfg = TrainConfig::adam(spec, 25);
    let (_, _, a) = fit_stochastic(&inst.obs, &inst.state, &one, &q0, &cfg).unwrap();
    let (_, _, b) = fit_uncollapsed(&inst.obs, &inst.state, &one, &q0, &cfg).unwrap();
    assert_eq!(a.objectives(), b.objectives());
}

#[test]
fn stochastic_training_is_reproducible() {
    let inst = random_instance(9, Shape { n: 40, d: 2, m: 5, blocks: 4 });
    let q0 = optimal_qu(&inst.obs, &inst.state, &BlockDiagonal::zeros(inst.partition.blocks().to_vec())).unwrap();
    let spec = BoundSpec { method: Method::BtSgpr, alpha: None, num_blocks: Some(4) };
    let mut cfg = TrainConfig::adam(spec, 10);
    cfg.seed = 77;
    let (s1, q1, a) = fit_stochastic(&inst.obs, &inst.state, &inst.partition, &q0, &cfg).unwrap();
    let (s2, q2, b) = fit_stochastic(&inst.obs, &inst.state, &inst.partition, &q0, &cfg).unwrap();
    assert_eq!(a.len(), 40);
    assert_eq!(a.objectives(), b.objectives());
    assert_eq!(s1, s2);
    assert_eq!(q1.mean, q2.mean);
    // q(u) covariance stays positive definite through its Cholesky factor
    assert!(q1.cov().symmetric_eigen().eigenvalues.iter().all(|&e| e > 0.0));
}

/// Smooth 2-D surface on [-3, 3]^2; k-means inducing points keep `K_uu` well conditioned.
fn surface(n: usize, seed: u64) -> structgp::Observations<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: DMatrix<f64> = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-3.0..3.0));
    let y = DVector::from_fn(n, |i, _| x[(i, 0)].sin() * (0.7 * x[(i, 1)]).cos() + 0.2 * rng.random_range(-1.0..1.0));
    structgp::Observations::new(x, y).unwrap()
}

#[test]
fn stochastic_close_to_full_batch_on_larger_problem() {
    let obs = surface(1000, 5);
    let ds = Dataset::new(obs.x.clone(), obs.y.clone()).unwrap();
    let z = init_inducing_kmeans(&ds, 32, 1).unwrap();
    let st = ModelState::new(KernelParams::new(&[1.0, 1.0], 1.0), NoiseParam::new(0.1), z).unwrap();
    let part = make_partition(1000, 2, 4).unwrap();
    let q0 = optimal_qu(&obs, &st, &BlockDiagonal::zeros(part.blocks().to_vec())).unwrap();
    let spec = BoundSpec { method: Method::BtSgpr, alpha: None, num_blocks: Some(2) };
    let mut cfg = TrainConfig::adam(spec, 40);
    cfg.learning_rate = 0.05;
    let (ss, qs, _) = fit_stochastic(&obs, &st, &part, &q0, &cfg).unwrap();
    let (sf, qf, _) = fit_uncollapsed(&obs, &st, &part, &q0, &cfg).unwrap();
    let elbo = |s: &ModelState<f64>, q| btsgpr_uncollapsed(&obs, s, &part, q, ConditionalPenalty::Block).unwrap().total;
    let (es, ef, e0) = (elbo(&ss, &qs), elbo(&sf, &qf), elbo(&st, &q0));
    assert!(es > e0 && ef > e0);
    assert_relative_eq!(es, ef, max_relative = 5e-2);
}

#[test]
fn config_validation_names_field() {
    let mut cfg = TrainConfig::adam(BoundSpec::simple(Method::Sgpr), 10);
    cfg.learning_rate = 0.0;
    assert!(cfg.validate().unwrap_err().to_string().contains("learning_rate"));
    let mut cfg = TrainConfig::adam(BoundSpec::simple(Method::Sgpr), 10);
    cfg.fd_step = -1.0;
    assert!(cfg.validate().unwrap_err().to_string().contains("fd_step"));
}
