//! Sparse Gaussian-process regression with structured variational bounds and
//! Power-EP.
//!
//! The numerical core is generic over the scalar type ([`Scalar`] is
//! implemented for `f32` and `f64`); the aliases at the crate root fix it to
//! `f64`, which the bound-ordering checks need.

pub mod bounds;
pub mod data;
pub mod error;
pub mod kernel;
pub mod linalg;
pub mod model;
pub mod predict;
pub mod scalar;
pub mod training;
pub mod verify;

pub use bounds::{BlockSelection, BoundBreakdown, ParamGrad, QGrad};
pub use error::{GpError, Result};
pub use kernel::{KernelParams, NoiseParam};
pub use linalg::{BlockDiagonal, Chol};
pub use data::{Dataset, TargetColumn};
pub use predict::{Metrics, PredictiveGaussian};
pub use model::{make_partition, BoundSpec, GaussianQU, Method, ModelState, Observations, Partition};
pub use scalar::Scalar;

/// Library version embedded in experiment outputs.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub type Model = ModelState<f64>;
pub type Data = Observations<f64>;
pub type Posterior = GaussianQU<f64>;
pub type Bound = BoundBreakdown<f64>;
pub type Kernel = KernelParams<f64>;
