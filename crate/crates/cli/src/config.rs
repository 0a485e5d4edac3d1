//! Experiment configuration: a JSON file with explicit keys, overridden by
//! command-line flags, validated before anything runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use structgp::training::{GradientMode, OptimizerKind, TrainConfig};
use structgp::{BoundSpec, Method, TargetColumn};

use crate::CliError;

/// Where the observations come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// CSV file; `target` is a column index or header name, last column if omitted.
    Csv {
        path: PathBuf,
        #[serde(default)]
        target: TargetColumn,
    },
    /// Seeded 1-D toy data on `[0, 6]`.
    Snelson { n: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InducingInit {
    /// `M` random training inputs.
    Subset,
    Kmeans,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainingMode {
    /// Hyperparameters only; `q(u)` is recovered in closed form.
    Collapsed,
    /// Full-batch Adam on hyperparameters and `q(u)`.
    Uncollapsed,
    /// Adam with one step per block, cycling over the blocks.
    Stochastic,
}

/// One entry of a comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodEntry {
    pub method: Method,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub blocks: Option<usize>,
}

impl MethodEntry {
    pub fn spec(&self) -> BoundSpec {
        BoundSpec { method: self.method, alpha: self.alpha, num_blocks: self.blocks }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub standardize: bool,
    /// Held-out fraction; metrics are computed on the training data when absent.
    pub test_fraction: Option<f64>,
    pub method: Method,
    pub alpha: Option<f64>,
    pub blocks: Option<usize>,
    /// Methods for `compare`; all share one initialization and split.
    pub methods: Vec<MethodEntry>,
    pub num_inducing: usize,
    pub inducing_init: InducingInit,
    pub initial_noise: f64,
    pub training: TrainingMode,
    pub optimizer: OptimizerKind,
    /// Adam steps, stochastic epochs or the L-BFGS iteration cap.
    pub epochs: usize,
    pub learning_rate: f64,
    pub gradient_mode: GradientMode,
    pub fd_step: f64,
    pub grad_tol: f64,
    pub seed: u64,
    pub grid_points: usize,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Snelson { n: 200 },
            standardize: false,
            test_fraction: None,
            method: Method::Sgpr,
            alpha: None,
            blocks: None,
            methods: Vec::new(),
            num_inducing: 5,
            inducing_init: InducingInit::Subset,
            initial_noise: 0.1,
            training: TrainingMode::Collapsed,
            optimizer: OptimizerKind::Lbfgs,
            epochs: 1000,
            learning_rate: 0.005,
            gradient_mode: GradientMode::Analytic,
            fd_step: 1e-5,
            grad_tol: 1e-6,
            seed: 0,
            grid_points: 200,
            out: PathBuf::from("out"),
        }
    }
}

/// Values given on the command line; each one replaces the file value.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// JSON experiment configuration.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "INT")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Method name; for `compare` a comma-separated list.
    #[arg(long, value_name = "NAME")]
    pub method: Option<String>,
    #[arg(long, value_name = "FLOAT")]
    pub alpha: Option<f64>,
    #[arg(long, value_name = "INT")]
    pub blocks: Option<usize>,
    #[arg(long = "num-inducing", value_name = "INT")]
    pub num_inducing: Option<usize>,
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("config: cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| invalid(format!("config: {}: {e}", path.display())))
    }

    /// Loads the file named by `--config` (defaults otherwise) and applies the flags.
    pub fn resolve(o: &Overrides, list_methods: bool) -> Result<Self, CliError> {
        let mut cfg = match &o.config {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        if let Some(s) = o.seed {
            cfg.seed = s;
        }
        if let Some(d) = &o.out {
            cfg.out = d.clone();
        }
        if let Some(m) = o.num_inducing {
            cfg.num_inducing = m;
        }
        if list_methods {
            if let Some(names) = &o.method {
                cfg.methods = names
                    .split(',')
                    .map(|n| {
                        let method = n.trim().parse().map_err(|e: structgp::GpError| invalid(e.to_string()))?;
                        Ok(MethodEntry { method, alpha: None, blocks: None })
                    })
                    .collect::<Result<_, CliError>>()?;
            }
            for e in &mut cfg.methods {
                if o.alpha.is_some() && e.method.uses_alpha() {
                    e.alpha = o.alpha;
                }
                if o.blocks.is_some() && e.method.accepts_blocks() {
                    e.blocks = o.blocks;
                }
            }
        } else {
            if let Some(m) = &o.method {
                cfg.method = m.parse().map_err(|e: structgp::GpError| invalid(e.to_string()))?;
            }
            if o.alpha.is_some() {
                cfg.alpha = o.alpha;
            }
            if o.blocks.is_some() {
                cfg.blocks = o.blocks;
            }
        }
        Ok(cfg)
    }

    pub fn spec(&self) -> BoundSpec {
        BoundSpec { method: self.method, alpha: self.alpha, num_blocks: self.blocks }
    }

    pub fn train_config(&self, spec: BoundSpec) -> TrainConfig {
        TrainConfig {
            objective: spec,
            optimizer: self.optimizer,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            seed: self.seed,
            gradient_mode: self.gradient_mode,
            fd_step: self.fd_step,
            grad_tol: self.grad_tol,
            memory: 10,
        }
    }

    /// Checks that do not need the data.
    pub fn validate(&self, specs: &[BoundSpec]) -> Result<(), CliError> {
        for spec in specs {
            self.check_spec(spec)?;
        }
        if self.num_inducing == 0 {
            return Err(invalid("num_inducing: must be positive"));
        }
        if let Some(f) = self.test_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(invalid(format!("test_fraction: must lie in (0, 1), got {f}")));
            }
        }
        if !(self.initial_noise > 0.0 && self.initial_noise.is_finite()) {
            return Err(invalid(format!("initial_noise: must be positive, got {}", self.initial_noise)));
        }
        if self.grid_points < 2 {
            return Err(invalid("grid_points: must be at least 2"));
        }
        if let DataSource::Snelson { n } = self.data {
            if n < 2 {
                return Err(invalid("data.n: must be at least 2"));
            }
        }
        Ok(())
    }

    fn check_spec(&self, spec: &BoundSpec) -> Result<(), CliError> {
        spec.validate().map_err(|e| invalid(inner(e)))?;
        self.train_config(*spec).validate().map_err(|e| invalid(inner(e)))?;
        if spec.method.is_oracle() {
            return Err(invalid(format!("method: {} is a dense oracle and cannot be trained", spec.method)));
        }
        if self.training != TrainingMode::Collapsed {
            if spec.method == Method::Exact {
                return Err(invalid("training: the exact marginal likelihood has no uncollapsed form"));
            }
            if self.optimizer != OptimizerKind::Adam {
                return Err(invalid("optimizer: uncollapsed and stochastic training use Adam"));
            }
        }
        Ok(())
    }

    /// SHA-256 of the configuration with the output directory removed.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Drops the "invalid argument: " prefix so the message starts with the field name.
pub fn inner(e: structgp::GpError) -> String {
    match e {
        structgp::GpError::InvalidArgument(m) => m,
        other => other.to_string(),
    }
}
