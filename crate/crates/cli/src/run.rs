//! The `fit`, `compare` and `predict` pipelines.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use structgp::bounds::{evaluate, evaluate_uncollapsed, method_optimal_qu, BlockSelection};
use structgp::data::{self, Dataset, Standardization};
use structgp::predict::{metrics, predict, predict_exact};
use structgp::training::{fit_collapsed, fit_stochastic, fit_uncollapsed, TrainTrace};
use structgp::{BoundSpec, Chol, GaussianQU, GpError, KernelParams, Method, ModelState, NoiseParam, Observations, PredictiveGaussian};

use crate::config::{inner, DataSource, ExperimentConfig, InducingInit, TrainingMode};
use crate::output::{self, f17, ser_f64, ser_opt, ser_rows, ser_vec, Stamp};
use crate::CliError;

/// Two-sided 95% normal quantile.
const Z95: f64 = 1.959963984540054;

fn run_err(context: &str, e: GpError) -> CliError {
    CliError::Run(format!("{context}: {e}"))
}

/// `InvalidArgument` means a configuration value does not fit the data.
fn classify(context: &str, e: GpError) -> CliError {
    match e {
        GpError::InvalidArgument(m) => CliError::Config(m),
        other => run_err(context, other),
    }
}

fn load(cfg: &ExperimentConfig, source: &DataSource) -> Result<Dataset, CliError> {
    match source {
        DataSource::Csv { path, target } => data::load_csv(path, target).map_err(|e| run_err(&format!("loading {}", path.display()), e)),
        DataSource::Snelson { n } => {
            let obs = structgp::verify::snelson_like(cfg.seed, *n);
            Dataset::new(obs.x, obs.y).map_err(|e| run_err("generating data", e))
        }
    }
}

/// Data split, scaling and the shared initial model of one experiment.
pub struct Prepared {
    pub cfg: ExperimentConfig,
    pub stamp: Stamp,
    /// Training set on the model scale.
    pub train: Observations<f64>,
    pub train_x_orig: DMatrix<f64>,
    pub train_y_orig: DVector<f64>,
    /// Held-out inputs on the model scale and targets on the original scale.
    pub test: Option<(DMatrix<f64>, DVector<f64>)>,
    pub stats: Option<Standardization>,
    pub init: ModelState<f64>,
}

impl Prepared {
    pub fn new(cfg: &ExperimentConfig, specs: &[BoundSpec]) -> Result<Self, CliError> {
        cfg.validate(specs)?;
        let stamp = Stamp { version: structgp::VERSION.to_string(), config_hash: cfg.hash(), seed: cfg.seed };
        let all = load(cfg, &cfg.data)?;
        let (train, test) = match cfg.test_fraction {
            Some(f) => {
                let (a, b) = data::split(&all, f, cfg.seed).map_err(|e| classify("splitting", e))?;
                (a, Some(b))
            }
            None => (all, None),
        };
        let (train_x_orig, train_y_orig) = (train.x.clone(), train.y.clone());
        let (train, stats) = if cfg.standardize {
            let s = data::standardize(&train).map_err(|e| run_err("standardizing", e))?;
            let stats = s.stats.clone();
            (s, stats)
        } else {
            (train, None)
        };
        let test = test.map(|t| {
            let x = match &stats {
                Some(st) => data::standardize_inputs(&t.x, st),
                None => t.x.clone(),
            };
            (x, t.y)
        });
        for spec in specs {
            spec.validate_for(train.len()).map_err(|e| CliError::Config(inner(e)))?;
        }
        let z = match cfg.inducing_init {
            InducingInit::Subset => data::init_inducing_subset(&train, cfg.num_inducing, cfg.seed),
            InducingInit::Kmeans => data::init_inducing_kmeans(&train, cfg.num_inducing, cfg.seed),
        }
        .map_err(|e| classify("initializing inducing inputs", e))?;
        let kernel = data::init_lengthscales_median(&train, cfg.seed).map_err(|e| run_err("initializing lengthscales", e))?;
        let init = ModelState::new(kernel, NoiseParam::new(cfg.initial_noise), z).map_err(|e| run_err("initial model", e))?;
        let obs = train.observations().map_err(|e| run_err("training data", e))?;
        Ok(Self { cfg: cfg.clone(), stamp, train: obs, train_x_orig, train_y_orig, test, stats, init })
    }

    fn dim(&self) -> usize {
        self.train.input_dim()
    }

    fn to_model_inputs(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.stats {
            Some(st) => data::standardize_inputs(x, st),
            None => x.clone(),
        }
    }

    /// Predictive distribution of `y` on the original scale.
    fn predict(&self, fit: &Fitted, x_model: &DMatrix<f64>) -> Result<PredictiveGaussian<f64>, CliError> {
        let p = match &fit.q {
            Some(q) => predict(x_model, &fit.state, q, true),
            None => predict_exact(&self.train, x_model, &fit.state, true),
        }
        .map_err(|e| run_err("predicting", e))?;
        Ok(match &self.stats {
            Some(st) => p.rescale(st.y_mean, st.y_std),
            None => p,
        })
    }

    /// RMSE and mean log-likelihood on the held-out set, or on the training set without one.
    fn evaluate_metrics(&self, fit: &Fitted) -> Result<(structgp::Metrics, &'static str, usize), CliError> {
        let (x, y, on) = match &self.test {
            Some((x, y)) => (x.clone(), y.clone(), "test"),
            None => (self.train.x.clone(), self.train_y_orig.clone(), "train"),
        };
        let p = self.predict(fit, &x)?;
        let m = metrics(&p, &y).map_err(|e| run_err("metrics", e))?;
        Ok((m, on, y.len()))
    }

    /// Prediction curve over the training range padded by 10% on each side (1-D only).
    fn curve(&self, fit: &Fitted) -> Result<Option<String>, CliError> {
        if self.dim() != 1 {
            return Ok(None);
        }
        let (lo, hi) = (self.train_x_orig.min(), self.train_x_orig.max());
        let pad = 0.1 * (hi - lo).max(f64::EPSILON);
        let k = self.cfg.grid_points;
        let grid = DMatrix::from_fn(k, 1, |i, _| lo - pad + (hi - lo + 2.0 * pad) * i as f64 / (k - 1) as f64);
        let p = self.predict(fit, &self.to_model_inputs(&grid))?;
        let (lower, upper) = p.interval(Z95);
        let rows = (0..k).map(|i| vec![grid[(i, 0)], p.mean[i], lower[i], upper[i]]);
        Ok(Some(output::table_csv(&self.stamp, &["x_grid", "mean", "lower", "upper"], rows)))
    }
}

/// A trained model.
pub struct Fitted {
    pub spec: BoundSpec,
    pub state: ModelState<f64>,
    /// `None` for the exact GP, which predicts from the training data.
    pub q: Option<GaussianQU<f64>>,
    pub trace: TrainTrace,
    pub initial_objective: f64,
    pub objective: f64,
    pub jitter_used: f64,
}

pub fn train(p: &Prepared, spec: BoundSpec) -> Result<Fitted, CliError> {
    let label = spec.label();
    let ctx = |what: &str| format!("{label}: {what}");
    let obs = &p.train;
    let part = spec.partition(obs.len(), p.cfg.seed).map_err(|e| classify(&ctx("partition"), e))?;
    let initial_objective = evaluate(obs, &p.init, &spec, &part, false).map_err(|e| run_err(&ctx("initial objective"), e))?.0.total;
    let tc = p.cfg.train_config(spec);
    let (state, q, trace, bound) = match p.cfg.training {
        TrainingMode::Collapsed => {
            let (state, trace) = fit_collapsed(obs, &p.init, &part, &tc).map_err(|e| run_err(&ctx("training"), e))?;
            let q = if spec.method == Method::Exact {
                None
            } else {
                Some(method_optimal_qu(obs, &state, &spec, &part).map_err(|e| run_err(&ctx("optimal q(u)"), e))?)
            };
            let bound = evaluate(obs, &state, &spec, &part, false).map_err(|e| run_err(&ctx("final objective"), e))?.0;
            (state, q, trace, bound)
        }
        TrainingMode::Uncollapsed | TrainingMode::Stochastic => {
            let q0 = method_optimal_qu(obs, &p.init, &spec, &part).map_err(|e| run_err(&ctx("initial q(u)"), e))?;
            let fitted = if p.cfg.training == TrainingMode::Stochastic {
                fit_stochastic(obs, &p.init, &part, &q0, &tc)
            } else {
                fit_uncollapsed(obs, &p.init, &part, &q0, &tc)
            };
            let (state, q, trace) = fitted.map_err(|e| run_err(&ctx("training"), e))?;
            let bound = evaluate_uncollapsed(obs, &state, &spec, &part, &q, BlockSelection::All, false)
                .map_err(|e| run_err(&ctx("final objective"), e))?
                .0;
            (state, Some(q), trace, bound)
        }
    };
    Ok(Fitted { spec, state, q, trace, initial_objective, objective: bound.total, jitter_used: bound.jitter_used })
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub method: String,
    #[serde(serialize_with = "ser_f64")]
    pub objective: f64,
    #[serde(serialize_with = "ser_f64")]
    pub rmse: f64,
    #[serde(serialize_with = "ser_f64")]
    pub mean_ll: f64,
    #[serde(serialize_with = "ser_f64")]
    pub sigma2: f64,
    #[serde(serialize_with = "ser_f64")]
    pub kernel_variance: f64,
    #[serde(serialize_with = "ser_vec")]
    pub lengthscales: Vec<f64>,
    #[serde(serialize_with = "ser_opt")]
    pub m: Option<f64>,
    #[serde(serialize_with = "ser_f64")]
    pub jitter_used: f64,
    #[serde(serialize_with = "ser_f64")]
    pub initial_objective: f64,
    pub steps: usize,
    pub metrics_on: &'static str,
    pub n_train: usize,
    pub n_eval: usize,
    pub standardized: bool,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
}

fn report(p: &Prepared, fit: &Fitted) -> Result<Report, CliError> {
    let (m, on, n_eval) = p.evaluate_metrics(fit)?;
    Ok(Report {
        method: fit.spec.label(),
        objective: fit.objective,
        rmse: m.rmse,
        mean_ll: m.mean_ll,
        sigma2: fit.state.noise_variance(),
        kernel_variance: fit.state.kernel.signal_variance(),
        lengthscales: fit.state.kernel.lengthscales().iter().copied().collect(),
        m: fit.state.m_scale(),
        jitter_used: fit.jitter_used,
        initial_objective: fit.initial_objective,
        steps: fit.trace.len(),
        metrics_on: on,
        n_train: p.train.len(),
        n_eval,
        standardized: p.stats.is_some(),
        version: p.stamp.version.clone(),
        config_hash: p.stamp.config_hash.clone(),
        seed: p.stamp.seed,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QSnapshot {
    #[serde(serialize_with = "ser_vec")]
    pub mean: Vec<f64>,
    /// Lower Cholesky factor of the covariance, row by row.
    #[serde(serialize_with = "ser_rows")]
    pub cov_chol: Vec<Vec<f64>>,
}

/// Everything `predict` needs to rebuild a trained model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Snapshot {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub spec: BoundSpec,
    #[serde(serialize_with = "ser_vec")]
    pub lengthscales: Vec<f64>,
    #[serde(serialize_with = "ser_f64")]
    pub kernel_variance: f64,
    #[serde(serialize_with = "ser_f64")]
    pub sigma2: f64,
    #[serde(serialize_with = "ser_opt")]
    pub m: Option<f64>,
    #[serde(serialize_with = "ser_rows")]
    pub inducing: Vec<Vec<f64>>,
    pub q: Option<QSnapshot>,
    pub config: ExperimentConfig,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn from_rows(r: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, CliError> {
    let cols = r.first().map_or(0, Vec::len);
    if r.iter().any(|row| row.len() != cols) {
        return Err(CliError::Run(format!("model: ragged {what} matrix")));
    }
    Ok(DMatrix::from_fn(r.len(), cols, |i, j| r[i][j]))
}

impl Snapshot {
    fn new(p: &Prepared, fit: &Fitted) -> Self {
        Self {
            version: p.stamp.version.clone(),
            config_hash: p.stamp.config_hash.clone(),
            seed: p.stamp.seed,
            spec: fit.spec,
            lengthscales: fit.state.kernel.lengthscales().iter().copied().collect(),
            kernel_variance: fit.state.kernel.signal_variance(),
            sigma2: fit.state.noise_variance(),
            m: fit.state.m_scale(),
            inducing: rows(&fit.state.inducing),
            q: fit.q.as_ref().map(|q| QSnapshot { mean: q.mean.iter().copied().collect(), cov_chol: rows(q.cov_chol.lower()) }),
            config: p.cfg.clone(),
        }
    }

    fn restore(&self, trace: TrainTrace) -> Result<Fitted, CliError> {
        let bad = |e: GpError| CliError::Run(format!("model: {e}"));
        let kernel = KernelParams::new(&self.lengthscales, self.kernel_variance);
        let mut state = ModelState::new(kernel, NoiseParam::new(self.sigma2), from_rows(&self.inducing, "inducing")?).map_err(bad)?;
        if let Some(m) = self.m {
            state = state.with_m(m);
        }
        let q = match &self.q {
            Some(q) => {
                let l = Chol::from_lower(from_rows(&q.cov_chol, "cov_chol")?).map_err(bad)?;
                Some(GaussianQU::new(DVector::from_vec(q.mean.clone()), l).map_err(bad)?)
            }
            None => None,
        };
        Ok(Fitted { spec: self.spec, state, q, trace, initial_objective: f64::NAN, objective: f64::NAN, jitter_used: 0.0 })
    }
}

/// Writes `model.json`, `trace.csv`, `report.json` and, for 1-D data, `curve.csv` into `dir`.
fn write_fit(p: &Prepared, fit: &Fitted, dir: &Path) -> Result<Report, CliError> {
    let rep = report(p, fit)?;
    output::write_json(&dir.join("model.json"), &Snapshot::new(p, fit))?;
    output::write(&dir.join("trace.csv"), &output::trace_csv(&p.stamp, &fit.trace, p.dim()))?;
    output::write_json(&dir.join("report.json"), &rep)?;
    if let Some(c) = p.curve(fit)? {
        output::write(&dir.join("curve.csv"), &c)?;
    }
    Ok(rep)
}

pub fn cmd_fit(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let spec = cfg.spec();
    let p = Prepared::new(cfg, &[spec])?;
    let fit = train(&p, spec)?;
    write_fit(&p, &fit, &cfg.out)
}

#[derive(Debug, Serialize)]
struct CompareFile<'a> {
    version: &'a str,
    config_hash: &'a str,
    seed: u64,
    methods: &'a [Report],
}

/// Trains every method from the same initialization and split; writes one
/// subdirectory per method plus `compare.csv` and `compare.json`.
pub fn cmd_compare(cfg: &ExperimentConfig) -> Result<Vec<Report>, CliError> {
    if cfg.methods.len() < 2 {
        return Err(CliError::Config(format!("methods: compare needs at least two methods, got {}", cfg.methods.len())));
    }
    let specs: Vec<BoundSpec> = cfg.methods.iter().map(|e| e.spec()).collect();
    let p = Prepared::new(cfg, &specs)?;
    let mut reports = Vec::new();
    for spec in &specs {
        let fit = train(&p, *spec)?;
        reports.push(write_fit(&p, &fit, &cfg.out.join(output::slug(&spec.label())))?);
    }
    let d = p.dim();
    let mut csv = p.stamp.csv_comment();
    csv.push_str("method,initial_objective,objective,rmse,mean_ll,sigma,kernel_variance");
    for k in 1..=d {
        csv.push_str(&format!(",lengthscale_{k}"));
    }
    csv.push_str(",m\n");
    for r in &reports {
        let mut cells = vec![r.method.clone()];
        cells.extend([r.initial_objective, r.objective, r.rmse, r.mean_ll, r.sigma2.sqrt(), r.kernel_variance].map(f17));
        cells.extend(r.lengthscales.iter().map(|&l| f17(l)));
        cells.push(r.m.map(f17).unwrap_or_default());
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    output::write(&cfg.out.join("compare.csv"), &csv)?;
    let file = CompareFile { version: &p.stamp.version, config_hash: &p.stamp.config_hash, seed: p.stamp.seed, methods: &reports };
    output::write_json(&cfg.out.join("compare.json"), &file)?;
    Ok(reports)
}

/// Predicts with a saved model. Without `data`, uses the held-out split of
/// the training configuration (or its training set when it has none);
/// with `data`, every row of that source.
pub fn cmd_predict(model: &Path, data: Option<&ExperimentConfig>, out: &Path) -> Result<Report, CliError> {
    let text = std::fs::read_to_string(model).map_err(|e| CliError::Config(format!("model: cannot read {}: {e}", model.display())))?;
    let snap: Snapshot = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("model: {}: {e}", model.display())))?;
    let p = Prepared::new(&snap.config, &[snap.spec])?;
    let mut fit = snap.restore(TrainTrace::default())?;
    let part = snap.spec.partition(p.train.len(), snap.config.seed).map_err(|e| classify("partition", e))?;
    let bound = evaluate(&p.train, &fit.state, &snap.spec, &part, false).map_err(|e| run_err("objective", e))?.0;
    fit.objective = bound.total;
    fit.initial_objective = bound.total;
    fit.jitter_used = bound.jitter_used;

    let (x_orig, x_model, y) = match data {
        Some(c) => {
            let d = load(c, &c.data)?;
            if d.dim() != p.dim() {
                return Err(CliError::Config(format!("data: {} input columns, the model expects {}", d.dim(), p.dim())));
            }
            let xm = p.to_model_inputs(&d.x);
            (d.x, xm, d.y)
        }
        None => match &p.test {
            Some((xm, y)) => (held_out_inputs(&p, xm), xm.clone(), y.clone()),
            None => (p.train_x_orig.clone(), p.train.x.clone(), p.train_y_orig.clone()),
        },
    };
    let pred = p.predict(&fit, &x_model)?;
    let m = metrics(&pred, &y).map_err(|e| run_err("metrics", e))?;
    let (lower, upper) = pred.interval(Z95);
    let d = p.dim();
    let mut header: Vec<String> = (1..=d).map(|k| format!("x_{k}")).collect();
    header.extend(["y", "mean", "variance", "lower", "upper"].map(String::from));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let table = (0..y.len()).map(|i| {
        let mut r: Vec<f64> = x_orig.row(i).iter().copied().collect();
        r.extend([y[i], pred.mean[i], pred.variance[i], lower[i], upper[i]]);
        r
    });
    output::write(&out.join("predictions.csv"), &output::table_csv(&p.stamp, &header, table))?;
    if let Some(c) = p.curve(&fit)? {
        output::write(&out.join("curve.csv"), &c)?;
    }
    let rep = Report {
        method: snap.spec.label(),
        objective: fit.objective,
        rmse: m.rmse,
        mean_ll: m.mean_ll,
        sigma2: fit.state.noise_variance(),
        kernel_variance: fit.state.kernel.signal_variance(),
        lengthscales: fit.state.kernel.lengthscales().iter().copied().collect(),
        m: fit.state.m_scale(),
        jitter_used: fit.jitter_used,
        initial_objective: fit.initial_objective,
        steps: 0,
        metrics_on: if data.is_some() { "data" } else if p.test.is_some() { "test" } else { "train" },
        n_train: p.train.len(),
        n_eval: y.len(),
        standardized: p.stats.is_some(),
        version: p.stamp.version.clone(),
        config_hash: p.stamp.config_hash.clone(),
        seed: p.stamp.seed,
    };
    output::write_json(&out.join("report.json"), &rep)?;
    Ok(rep)
}

fn held_out_inputs(p: &Prepared, x_model: &DMatrix<f64>) -> DMatrix<f64> {
    match &p.stats {
        Some(st) => DMatrix::from_fn(x_model.nrows(), x_model.ncols(), |i, j| st.x_mean[j] + st.x_std[j] * x_model[(i, j)]),
        None => x_model.clone(),
    }
}

/// Default output directory of `predict`: next to the model file.
pub fn default_predict_out(model: &Path) -> PathBuf {
    model.parent().map_or_else(|| PathBuf::from("."), |d| d.join("predict"))
}
