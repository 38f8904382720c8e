//! Gradient-based neural architecture search over TDNN super-networks.
//!
//! The crate builds a small reverse-mode autodiff tape, the layers of the
//! search space (dilated temporal convolutions, dense, layer-norm/dropout),
//! frame cross-entropy and CTC losses with synthetic desk-scale tasks, a
//! super-network of searching blocks with three architecture-gradient
//! strategies (continuous mixture, Gumbel-Softmax, straight-through), the
//! warm-up / bi-level search / retrain pipeline, and instrumented memory and
//! compute accounting for comparing the estimators.
//!
//! Compute kernels are data-parallel via rayon under the default `parallel`
//! feature and fall back to sequential loops without it; both paths are
//! bit-identical.

pub mod check;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod estimator;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod runner;
pub mod scalar;
pub mod supernet;
pub mod tape;

pub use error::{Error, Result};
pub use scalar::Scalar;
