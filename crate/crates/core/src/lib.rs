//! Noise-aware autotuning over a cluster of workers.
//!
//! The pipeline: an ask/tell optimizer proposes configurations at worker-count
//! budgets, a scheduler spreads each evaluation across distinct workers, the
//! relative-range detector flags unstable configurations, a metrics-driven
//! noise model de-noises stable samples, and worst-case aggregation reports a
//! single score back to the optimizer. A deterministic simulated cluster
//! reproduces the noise phenomenology end to end; an external-command backend
//! drives real systems through the same loop.
//!
//! Numeric kernels are generic over [`scalar::Scalar`]; the pipeline itself
//! uses the `f64` aliases below.

pub mod analysis;
pub mod catalog;
pub mod cluster;
pub mod configspace;
pub mod error;
pub mod forest;
pub mod noisemodel;
pub mod objective;
pub mod optimizer;
pub mod rng;
pub mod runner;
pub mod scalar;
pub mod simulator;
pub mod stability;
pub mod stats;

/// The pipeline's working scalar type.
pub type Real = f64;

pub type Forest = forest::ForestModel<Real>;
pub type ForestStandardizer = forest::Standardizer<Real>;
pub type NoiseAdjuster = noisemodel::NoiseModel<Real>;
pub type Verdict = stability::StabilityVerdict<Real>;
pub type WorstCasePolicy = stability::AggregationPolicy<Real>;

pub use catalog::{Catalog, RunManifest, TrialRecord, TrialStatus};
pub use optimizer::{OptimizerKind, RunMode, Suggestion};
pub use runner::{RunOutput, RunSettings};
pub use configspace::{ConfigSpace, Configuration, ParamValue, ParameterDef};
pub use error::{Error, Result};
pub use objective::{Direction, ObjectiveSpec};


