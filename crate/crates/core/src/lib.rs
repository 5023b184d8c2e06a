//! Gaussian-process regression with sparse pseudo-input approximations.
//!
//! The crate provides an exact GP baseline and the sparse pseudo-input GP
//! (SPGP) in four flavours:
//!
//! * `Plain`: ARD squared-exponential covariance, pseudo-inputs in input space.
//! * `Dr`: inputs mapped through a learned `G x D` projection; pseudo-inputs
//!   live in the projected space.
//! * `Hs`: each pseudo-input carries a learned uncertainty that is added to the
//!   diagonal of the pseudo-input covariance, giving input-dependent noise.
//! * `DrHs`: both at once.
//!
//! All sparse computations use the low-rank-plus-diagonal structure of the
//! covariance and never form an `N x N` matrix, so training costs `O(M^2 N)`
//! per likelihood evaluation and prediction costs `O(M)` (mean) and `O(M^2)`
//! (variance) per test point.
//!
//! Hyperparameters and pseudo-inputs are learned by minimising the negative
//! log marginal likelihood with analytic gradients (see [`gradients`]) and a
//! limited-memory quasi-Newton optimizer (see [`optimizer`]).

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod data;
pub mod error;
pub mod eval;
pub mod exact_gp;
pub mod gradients;
pub mod kernels;
pub mod model;
pub mod model_file;
pub mod optimizer;
pub mod spgp;

pub use data::{Dataset, Preprocessing, Scenario};
pub use error::{Error, Result};
pub use eval::{mse, nlpd, ScoreReport};
pub use exact_gp::{GpModel, GpParams};
pub use gradients::{GradResult, ModelKind, ModelParams, ParamLayout, ParamVector, ProblemSize};
pub use kernels::{ArdParams, KernelMatrix, ProjParams};
pub use model::{Gaussian, Prediction, TrainedModel};
pub use optimizer::{FitShape, OptConfig, OptTrace, Termination};
pub use spgp::{SpgpKernel, SpgpParams, SpgpPrecompute, SpgpVariant};

/// Dense column-major matrix used throughout the crate. Point sets are stored
/// one point per row.
pub type Matrix = nalgebra::DMatrix<f64>;
/// Dense column vector.
pub type Vector = nalgebra::DVector<f64>;

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;
