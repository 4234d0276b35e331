//! Out-of-distribution detection under long-tailed class distributions with
//! partial and asymmetric supervised contrastive learning.
//!
//! - [`diffcore`]: reverse-mode tape and finite-difference checks
//! - [`synth`]: long-tailed synthetic benchmark
//! - [`objectives`]: losses and OOD scores
//! - [`metrics`]: detection and classification metrics
//! - [`dualnet`]: dual-branch network with per-branch batch norm
//! - [`twostage`]: training pipeline, evaluation and ablation grids
//!
//! The numeric core is generic over [`scalar::Real`]; the aliases below fix
//! the scalar type.

// `!(x > 0.0)` is how NaN gets rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diffcore;
pub mod error;
pub mod gradsuite;
pub mod scalar;
pub mod synth;
pub mod objectives;
pub mod metrics;
pub mod dualnet;
pub mod twostage;

pub use error::{PasclError, Result};

pub type Tape64 = diffcore::Tape<f64>;
pub type Tape32 = diffcore::Tape<f32>;
pub type Tensor64 = diffcore::TensorBuf<f64>;
pub type Tensor32 = diffcore::TensorBuf<f32>;
pub type Network64 = dualnet::DualBranchNetwork<f64>;
pub type Network32 = dualnet::DualBranchNetwork<f32>;
pub type Scored64 = metrics::ScoredExample<f64>;
