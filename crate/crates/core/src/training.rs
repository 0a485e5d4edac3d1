//! Gradient provider, optimizers and training loops.
//!
//! Objectives are maximized; the optimizers minimize the negated objective.
//! Parameters are packed into one flat vector:
//! `[log l (D), log s^2, log sigma^2, Z row-major (M * D), log m (T-PEP only)]`,
//! followed for uncollapsed objectives by the `q(u)` mean (M) and the lower
//! triangle of its Cholesky factor, column by column, with log diagonal.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::{evaluate, evaluate_uncollapsed, BlockSelection, ParamGrad, QGrad};
use crate::error::{GpError, Result};
use crate::linalg::Chol;
use crate::model::{BoundSpec, GaussianQU, Method, ModelState, Observations, Partition};
use crate::scalar::Scalar;

/// Which optimizer drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam,
    #[serde(rename = "LBFGS")]
    Lbfgs,
}

/// How gradients are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradientMode {
    Analytic,
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: BoundSpec,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Adam steps (collapsed), full block cycles (stochastic) or the L-BFGS iteration cap.
    pub epochs: usize,
    pub seed: u64,
    pub gradient_mode: GradientMode,
    pub fd_step: f64,
    /// L-BFGS stops once the gradient norm falls below this value.
    pub grad_tol: f64,
    /// L-BFGS history length.
    pub memory: usize,
}

impl TrainConfig {
    /// L-BFGS, at most 1000 iterations, gradient-norm tolerance 1e-6.
    pub fn lbfgs(objective: BoundSpec) -> Self {
        Self {
            objective,
            optimizer: OptimizerKind::Lbfgs,
            learning_rate: 1.0,
            epochs: 1000,
            seed: 0,
            gradient_mode: GradientMode::Analytic,
            fd_step: 1e-5,
            grad_tol: 1e-6,
            memory: 10,
        }
    }

    /// Adam with learning rate 0.005.
    pub fn adam(objective: BoundSpec, epochs: usize) -> Self {
        Self { optimizer: OptimizerKind::Adam, learning_rate: 0.005, epochs, ..Self::lbfgs(objective) }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(GpError::InvalidArgument(format!("learning_rate: must be positive, got {}", self.learning_rate)));
        }
        if !(self.fd_step > 0.0 && self.fd_step.is_finite()) {
            return Err(GpError::InvalidArgument(format!("fd_step: must be positive, got {}", self.fd_step)));
        }
        if self.epochs == 0 {
            return Err(GpError::InvalidArgument("epochs: must be positive".into()));
        }
        if self.memory == 0 {
            return Err(GpError::InvalidArgument("memory: must be positive".into()));
        }
        Ok(())
    }
}

/// One row of a training trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub objective: f64,
    pub sigma2: f64,
    pub kernel_var: f64,
    pub lengthscales: Vec<f64>,
    pub m: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn objectives(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.objective).collect()
    }

    fn push<T: Scalar>(&mut self, objective: T, state: &ModelState<T>, started: Instant) {
        self.rows.push(TraceRow {
            step: self.rows.len(),
            objective: objective.as_f64(),
            sigma2: state.noise_variance().as_f64(),
            kernel_var: state.kernel.signal_variance().as_f64(),
            lengthscales: state.kernel.lengthscales().iter().map(|l| l.as_f64()).collect(),
            m: state.m_scale().map(Scalar::as_f64),
            seconds: started.elapsed().as_secs_f64(),
        });
    }
}

/// A scalar function of a flat parameter vector, to be maximized.
pub trait Objective<T: Scalar> {
    fn dim(&self) -> usize;
    fn value(&self, theta: &DVector<T>) -> Result<T>;
    /// Value and analytic gradient, if the objective provides one.
    fn value_grad(&self, _theta: &DVector<T>) -> Option<Result<(T, DVector<T>)>> {
        None
    }
}

/// Objective defined by a closure (no analytic gradient).
pub struct FnObjective<F> {
    dim: usize,
    f: F,
}

impl<F> FnObjective<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<T: Scalar, F: Fn(&DVector<T>) -> Result<T>> Objective<T> for FnObjective<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, theta: &DVector<T>) -> Result<T> {
        (self.f)(theta)
    }
}

fn central_difference<T: Scalar, O: Objective<T> + ?Sized>(obj: &O, theta: &DVector<T>, i: usize, h: T) -> Result<T> {
    let mut tp = theta.clone();
    tp[i] += h;
    let mut tm = theta.clone();
    tm[i] -= h;
    let fp = obj.value(&tp)?;
    let fm = obj.value(&tm)?;
    if !fp.is_finite_scalar() || !fm.is_finite_scalar() {
        return Err(GpError::EvaluationFailed(format!("non-finite objective while differencing coordinate {i}")));
    }
    Ok((fp - fm) / (h + h))
}

/// Gradient of `obj` at `theta`.
///
/// Finite differences are central with step `fd_step * max(1, |theta_i|)`; a
/// failed evaluation is retried once with half the step. Analytic mode falls
/// back to finite differences for objectives without an analytic gradient.
pub fn gradient<T: Scalar, O: Objective<T> + ?Sized>(
    obj: &O,
    theta: &DVector<T>,
    mode: GradientMode,
    fd_step: f64,
) -> Result<DVector<T>> {
    if theta.len() != obj.dim() {
        return Err(GpError::LengthMismatch { expected: obj.dim(), got: theta.len() });
    }
    if mode == GradientMode::Analytic {
        if let Some(r) = obj.value_grad(theta) {
            return r.map(|(_, g)| g);
        }
    }
    let mut g = DVector::zeros(theta.len());
    for i in 0..theta.len() {
        let h = T::lit(fd_step) * theta[i].abs().max(T::one());
        g[i] = match central_difference(obj, theta, i, h) {
            Ok(v) => v,
            Err(_) => central_difference(obj, theta, i, h * T::lit(0.5)).map_err(|e| {
                GpError::EvaluationFailed(format!("finite difference failed at coordinate {i} after retry: {e}"))
            })?,
        };
    }
    Ok(g)
}

fn value_and_gradient<T: Scalar, O: Objective<T> + ?Sized>(
    obj: &O,
    theta: &DVector<T>,
    mode: GradientMode,
    fd_step: f64,
) -> Result<(T, DVector<T>)> {
    if mode == GradientMode::Analytic {
        if let Some(r) = obj.value_grad(theta) {
            return r;
        }
    }
    Ok((obj.value(theta)?, gradient(obj, theta, GradientMode::FiniteDifference, fd_step)?))
}

/// Number of packed model parameters.
pub fn model_param_len<T: Scalar>(state: &ModelState<T>, with_m: bool) -> usize {
    let d = state.kernel.dim();
    d + 2 + state.num_inducing() * d + usize::from(with_m)
}

pub fn pack_model<T: Scalar>(state: &ModelState<T>, with_m: bool) -> DVector<T> {
    let d = state.kernel.dim();
    let m = state.num_inducing();
    let mut out = Vec::with_capacity(model_param_len(state, with_m));
    out.extend(state.kernel.log_lengthscales.iter().copied());
    out.push(state.kernel.log_signal_variance);
    out.push(state.noise.log_noise_variance);
    for i in 0..m {
        for j in 0..d {
            out.push(state.inducing[(i, j)]);
        }
    }
    if with_m {
        out.push(state.log_m.unwrap_or_else(T::zero));
    }
    DVector::from_vec(out)
}

/// Writes packed parameters into a copy of `template`.
pub fn unpack_model<T: Scalar>(template: &ModelState<T>, theta: &[T], with_m: bool) -> Result<ModelState<T>> {
    let need = model_param_len(template, with_m);
    if theta.len() < need {
        return Err(GpError::LengthMismatch { expected: need, got: theta.len() });
    }
    let d = template.kernel.dim();
    let m = template.num_inducing();
    let mut s = template.clone();
    s.kernel.log_lengthscales = DVector::from_column_slice(&theta[..d]);
    s.kernel.log_signal_variance = theta[d];
    s.noise.log_noise_variance = theta[d + 1];
    s.inducing = DMatrix::from_row_slice(m, d, &theta[d + 2..d + 2 + m * d]);
    if with_m {
        s.log_m = Some(theta[d + 2 + m * d]);
    }
    Ok(s)
}

fn pack_grad<T: Scalar>(g: &ParamGrad<T>, with_m: bool, out: &mut Vec<T>) {
    out.extend(g.log_lengthscales.iter().copied());
    out.push(g.log_signal_variance);
    out.push(g.log_noise_variance);
    for i in 0..g.inducing.nrows() {
        for j in 0..g.inducing.ncols() {
            out.push(g.inducing[(i, j)]);
        }
    }
    if with_m {
        out.push(g.log_m);
    }
}

pub fn pack_q<T: Scalar>(q: &GaussianQU<T>) -> Vec<T> {
    let m = q.dim();
    let l = q.cov_chol.lower();
    let mut out: Vec<T> = q.mean.iter().copied().collect();
    for j in 0..m {
        out.push(l[(j, j)].ln());
        for i in j + 1..m {
            out.push(l[(i, j)]);
        }
    }
    out
}

pub fn unpack_q<T: Scalar>(theta: &[T], m: usize) -> Result<GaussianQU<T>> {
    let need = m + m * (m + 1) / 2;
    if theta.len() != need {
        return Err(GpError::LengthMismatch { expected: need, got: theta.len() });
    }
    let mean = DVector::from_column_slice(&theta[..m]);
    let mut l = DMatrix::zeros(m, m);
    let mut k = m;
    for j in 0..m {
        l[(j, j)] = theta[k].exp();
        k += 1;
        for i in j + 1..m {
            l[(i, j)] = theta[k];
            k += 1;
        }
    }
    GaussianQU::new(mean, Chol::from_lower(l)?)
}

fn pack_qgrad<T: Scalar>(g: &QGrad<T>, out: &mut Vec<T>) {
    let m = g.mean.len();
    out.extend(g.mean.iter().copied());
    for j in 0..m {
        for i in j..m {
            out.push(g.chol[(i, j)]);
        }
    }
}

/// Whether the packed model parameters include `log m` for this method.
pub fn trains_m(spec: &BoundSpec) -> bool {
    spec.method.uses_m()
}

/// Collapsed objective over the packed model parameters.
pub struct CollapsedObjective<'a, T: Scalar> {
    pub obs: &'a Observations<T>,
    pub template: ModelState<T>,
    pub spec: BoundSpec,
    pub partition: Partition,
}

impl<'a, T: Scalar> CollapsedObjective<'a, T> {
    pub fn new(obs: &'a Observations<T>, template: &ModelState<T>, spec: BoundSpec, partition: Partition) -> Result<Self> {
        spec.validate_for(obs.len())?;
        if spec.method.is_oracle() {
            return Err(GpError::InvalidArgument(format!("method: {} is an oracle and cannot be trained", spec.method)));
        }
        let mut template = template.clone();
        if spec.method.uses_m() && template.log_m.is_none() {
            template.log_m = Some(T::zero());
        }
        Ok(Self { obs, template, spec, partition })
    }

    pub fn with_m(&self) -> bool {
        trains_m(&self.spec)
    }

    pub fn initial(&self) -> DVector<T> {
        pack_model(&self.template, self.with_m())
    }

    pub fn state(&self, theta: &DVector<T>) -> Result<ModelState<T>> {
        unpack_model(&self.template, theta.as_slice(), self.with_m())
    }
}

impl<T: Scalar> Objective<T> for CollapsedObjective<'_, T> {
    fn dim(&self) -> usize {
        model_param_len(&self.template, self.with_m())
    }

    fn value(&self, theta: &DVector<T>) -> Result<T> {
        let s = self.state(theta)?;
        Ok(evaluate(self.obs, &s, &self.spec, &self.partition, false)?.0.total)
    }

    fn value_grad(&self, theta: &DVector<T>) -> Option<Result<(T, DVector<T>)>> {
        Some((|| {
            let s = self.state(theta)?;
            let (b, g) = evaluate(self.obs, &s, &self.spec, &self.partition, true)?;
            let g = g.ok_or_else(|| GpError::EvaluationFailed("objective returned no gradient".into()))?;
            let mut out = Vec::with_capacity(self.dim());
            pack_grad(&g, self.with_m(), &mut out);
            Ok((b.total, DVector::from_vec(out)))
        })())
    }
}

/// Uncollapsed objective over packed model parameters followed by `q(u)`.
pub struct UncollapsedObjective<'a, T: Scalar> {
    pub obs: &'a Observations<T>,
    pub template: ModelState<T>,
    pub spec: BoundSpec,
    pub partition: Partition,
    pub selection: BlockSelection,
}

impl<'a, T: Scalar> UncollapsedObjective<'a, T> {
    pub fn new(obs: &'a Observations<T>, template: &ModelState<T>, spec: BoundSpec, partition: Partition) -> Result<Self> {
        spec.validate_for(obs.len())?;
        if matches!(spec.method, Method::Exact) || spec.method.is_oracle() {
            return Err(GpError::InvalidArgument(format!("method: {} has no uncollapsed form", spec.method)));
        }
        let mut template = template.clone();
        if spec.method.uses_m() && template.log_m.is_none() {
            template.log_m = Some(T::zero());
        }
        Ok(Self { obs, template, spec, partition, selection: BlockSelection::All })
    }

    pub fn with_m(&self) -> bool {
        trains_m(&self.spec)
    }

    fn split(&self) -> usize {
        model_param_len(&self.template, self.with_m())
    }

    pub fn pack(&self, state: &ModelState<T>, q: &GaussianQU<T>) -> DVector<T> {
        let mut v: Vec<T> = pack_model(state, self.with_m()).iter().copied().collect();
        v.extend(pack_q(q));
        DVector::from_vec(v)
    }

    pub fn unpack(&self, theta: &DVector<T>) -> Result<(ModelState<T>, GaussianQU<T>)> {
        let k = self.split();
        let s = unpack_model(&self.template, &theta.as_slice()[..k.min(theta.len())], self.with_m())?;
        let q = unpack_q(&theta.as_slice()[k..], self.template.num_inducing())?;
        Ok((s, q))
    }
}

impl<T: Scalar> Objective<T> for UncollapsedObjective<'_, T> {
    fn dim(&self) -> usize {
        let m = self.template.num_inducing();
        self.split() + m + m * (m + 1) / 2
    }

    fn value(&self, theta: &DVector<T>) -> Result<T> {
        let (s, q) = self.unpack(theta)?;
        Ok(evaluate_uncollapsed(self.obs, &s, &self.spec, &self.partition, &q, self.selection, false)?.0.total)
    }

    fn value_grad(&self, theta: &DVector<T>) -> Option<Result<(T, DVector<T>)>> {
        Some((|| {
            let (s, q) = self.unpack(theta)?;
            let (b, g) = evaluate_uncollapsed(self.obs, &s, &self.spec, &self.partition, &q, self.selection, true)?;
            let (pg, qg) = g.ok_or_else(|| GpError::EvaluationFailed("objective returned no gradient".into()))?;
            let mut out = Vec::with_capacity(self.dim());
            pack_grad(&pg, self.with_m(), &mut out);
            pack_qgrad(&qg, &mut out);
            Ok((b.total, DVector::from_vec(out)))
        })())
    }
}

/// Adam state for ascent on an objective.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    m: DVector<T>,
    v: DVector<T>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(dim: usize, lr: f64) -> Self {
        Self {
            lr: T::lit(lr),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            m: DVector::zeros(dim),
            v: DVector::zeros(dim),
            t: 0,
        }
    }

    /// One ascent step along `grad`.
    pub fn step(&mut self, theta: &mut DVector<T>, grad: &DVector<T>) {
        self.t += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.t);
        let c2 = one - self.beta2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (one - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (one - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            theta[i] += self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Outcome of an L-BFGS run.
#[derive(Debug, Clone)]
pub struct LbfgsResult<T: Scalar> {
    pub theta: DVector<T>,
    pub value: T,
    pub iterations: usize,
    pub converged: bool,
}

/// Maximizes `obj` with L-BFGS and a backtracking Armijo line search.
/// `on_step` is called after every accepted step with the new point and value.
/// Stops at `grad_tol`, after `epochs` iterations, or once a step no longer
/// improves the objective.
pub fn lbfgs_maximize<T: Scalar, O: Objective<T> + ?Sized>(
    obj: &O,
    theta0: DVector<T>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&DVector<T>, T),
) -> Result<LbfgsResult<T>> {
    let eval = |th: &DVector<T>| -> Result<(T, DVector<T>)> {
        let (f, g) = value_and_gradient(obj, th, cfg.gradient_mode, cfg.fd_step)?;
        Ok((-f, -g))
    };
    let mut x = theta0;
    let (mut f, mut g) = eval(&x)?;
    if !f.is_finite_scalar() {
        return Err(GpError::Diverged { step: 0 });
    }
    let mut s_hist: Vec<DVector<T>> = Vec::new();
    let mut y_hist: Vec<DVector<T>> = Vec::new();
    let tol = T::lit(cfg.grad_tol);
    let c1 = T::lit(1e-4);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.epochs {
        if g.norm() < tol {
            converged = true;
            break;
        }
        // two-loop recursion
        let k = s_hist.len();
        let mut q = g.clone();
        let mut alphas = vec![T::zero(); k];
        let rhos: Vec<T> = (0..k).map(|i| T::one() / y_hist[i].dot(&s_hist[i])).collect();
        for i in (0..k).rev() {
            alphas[i] = rhos[i] * s_hist[i].dot(&q);
            q -= &y_hist[i] * alphas[i];
        }
        let gamma = if k > 0 {
            s_hist[k - 1].dot(&y_hist[k - 1]) / y_hist[k - 1].dot(&y_hist[k - 1])
        } else {
            T::one() / g.norm().max(T::one())
        };
        let mut dir = q * gamma;
        for i in 0..k {
            let beta = rhos[i] * y_hist[i].dot(&dir);
            dir += &s_hist[i] * (alphas[i] - beta);
        }
        dir = -dir;
        let mut slope = g.dot(&dir);
        if !(slope < T::zero()) {
            // not a descent direction: reset to steepest descent
            s_hist.clear();
            y_hist.clear();
            dir = -&g / g.norm().max(T::one());
            slope = g.dot(&dir);
        }
        let mut step = T::one();
        let mut accepted = None;
        for _ in 0..40 {
            let xn = &x + &dir * step;
            if let Ok((fn_, gn)) = eval(&xn) {
                if fn_.is_finite_scalar() && fn_ <= f + c1 * step * slope {
                    accepted = Some((xn, fn_, gn));
                    break;
                }
            }
            step *= T::lit(0.5);
        }
        let Some((xn, fn_, gn)) = accepted else {
            log::debug!("L-BFGS line search failed after {iterations} iterations");
            break;
        };
        if xn == x || !(fn_ < f) {
            log::debug!("L-BFGS stalled at |g| = {:e} after {iterations} iterations", g.norm().as_f64());
            break;
        }
        iterations += 1;
        let s = &xn - &x;
        let y = &gn - &g;
        if s.dot(&y) > T::zero() {
            if s_hist.len() == cfg.memory {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
        }
        x = xn;
        f = fn_;
        g = gn;
        on_step(&x, -f);
    }
    Ok(LbfgsResult { theta: x, value: -f, iterations, converged })
}

/// Full-batch training of a collapsed objective.
pub fn fit_collapsed<T: Scalar>(
    obs: &Observations<T>,
    state: &ModelState<T>,
    partition: &Partition,
    cfg: &TrainConfig,
) -> Result<(ModelState<T>, TrainTrace)> {
    cfg.validate()?;
    let obj = CollapsedObjective::new(obs, state, cfg.objective, partition.clone())?;
    let started = Instant::now();
    let mut trace = TrainTrace::default();
    let theta = match cfg.optimizer {
        OptimizerKind::Adam => {
            let mut theta = obj.initial();
            let mut adam = Adam::new(theta.len(), cfg.learning_rate);
            for step in 0..cfg.epochs {
                let (f, g) = value_and_gradient(&obj, &theta, cfg.gradient_mode, cfg.fd_step)?;
                if !f.is_finite_scalar() || g.iter().any(|v| !v.is_finite_scalar()) {
                    return Err(GpError::Diverged { step });
                }
                trace.push(f, &obj.state(&theta)?, started);
                adam.step(&mut theta, &g);
            }
            theta
        }
        OptimizerKind::Lbfgs => {
            let mut failed: Option<GpError> = None;
            let res = lbfgs_maximize(&obj, obj.initial(), cfg, |th, f| {
                match obj.state(th) {
                    Ok(s) => trace.push(f, &s, started),
                    Err(e) => failed = Some(e),
                }
            })?;
            if let Some(e) = failed {
                return Err(e);
            }
            res.theta
        }
    };
    Ok((obj.state(&theta)?, trace))
}

/// Full-batch Adam training of an uncollapsed objective; returns the model,
/// `q(u)` and the trace.
pub fn fit_uncollapsed<T: Scalar>(
    obs: &Observations<T>,
    state: &ModelState<T>,
    partition: &Partition,
    q0: &GaussianQU<T>,
    cfg: &TrainConfig,
) -> Result<(ModelState<T>, GaussianQU<T>, TrainTrace)> {
    cfg.validate()?;
    let obj = UncollapsedObjective::new(obs, state, cfg.objective, partition.clone())?;
    let mut theta = obj.pack(&obj.template, q0);
    let mut adam = Adam::new(theta.len(), cfg.learning_rate);
    let started = Instant::now();
    let mut trace = TrainTrace::default();
    for step in 0..cfg.epochs {
        let (f, g) = value_and_gradient(&obj, &theta, cfg.gradient_mode, cfg.fd_step)?;
        if !f.is_finite_scalar() || g.iter().any(|v| !v.is_finite_scalar()) {
            return Err(GpError::Diverged { step });
        }
        trace.push(f, &obj.unpack(&theta)?.0, started);
        adam.step(&mut theta, &g);
    }
    let (s, q) = obj.unpack(&theta)?;
    Ok((s, q, trace))
}

/// Stochastic training: each epoch visits the blocks in a seeded shuffled
/// order and takes one Adam step on the one-block estimator per block.
pub fn fit_stochastic<T: Scalar>(
    obs: &Observations<T>,
    state: &ModelState<T>,
    partition: &Partition,
    q0: &GaussianQU<T>,
    cfg: &TrainConfig,
) -> Result<(ModelState<T>, GaussianQU<T>, TrainTrace)> {
    cfg.validate()?;
    let mut obj = UncollapsedObjective::new(obs, state, cfg.objective, partition.clone())?;
    let mut theta = obj.pack(&obj.template, q0);
    let mut adam = Adam::new(theta.len(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let started = Instant::now();
    let mut trace = TrainTrace::default();
    let mut order: Vec<usize> = (0..partition.num_blocks()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &b in &order {
            obj.selection = BlockSelection::One(b);
            let (f, g) = value_and_gradient(&obj, &theta, cfg.gradient_mode, cfg.fd_step)?;
            if !f.is_finite_scalar() || g.iter().any(|v| !v.is_finite_scalar()) {
                return Err(GpError::Diverged { step });
            }
            trace.push(f, &obj.unpack(&theta)?.0, started);
            adam.step(&mut theta, &g);
            step += 1;
        }
    }
    let (s, q) = obj.unpack(&theta)?;
    Ok((s, q, trace))
}
