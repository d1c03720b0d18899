//! Probabilistic spatio-temporal forecasting of snow water equivalent (SWE).
//!
//! The pipeline couples an attention-based encoder over multi-resolution
//! station histories with a linear-coregionalization Gaussian process head
//! that produces calibrated predictive intervals. A raw-feature GP baseline,
//! a synthetic data generator, a hydrological metric suite, and a CLI driver
//! round out the crate.
//!
//! The crate is organized bottom-up:
//!
//! * [`numerics`]: dense matrices, row softmax, Cholesky solves, and a
//!   reverse-mode gradient tape over named parameters.
//! * [`geo`]: great-circle distance, elevation-aware angularity, and the
//!   normalized pairwise bias matrices consumed by spatial attention.
//! * [`data`]: station/daily schemas, CSV ingestion, synthetic generation,
//!   window construction, and peak-SWE station grouping.
//! * [`model`]: the attention encoder and its mean-squared-error pretraining.
//! * [`gp`]: the coregionalized GP (exact and sparse variational), predictive
//!   intervals, and horizon forecasting.
//! * [`rawgp`]: the 21-feature raw GP baseline.
//! * [`metrics`]: NSE, relative bias, NLL, ECE/coverage, and report assembly.
//! * [`pipeline`]: end-to-end orchestration, checkpoints, benchmarking, and
//!   the CLI surface.
//!
//! Core math is generic over the scalar type via [`scalar::Scalar`]; the
//! aliases below pin the concrete precision used by the shipped pipeline.

pub mod data;
pub mod geo;
pub mod gp;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod rawgp;
pub mod scalar;

/// Scalar precision used by the shipped pipeline.
///
/// Gaussian-process marginal likelihoods are conditioning-sensitive, so the
/// pipeline runs everything in 64-bit floats even though the math modules
/// are generic.
pub type Real = f64;

/// Dense matrix at pipeline precision.
pub type Mat = numerics::Matrix<Real>;

/// Gradient tape at pipeline precision.
pub type Tape = numerics::GradientTape<Real>;
