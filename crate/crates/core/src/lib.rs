//! Re-weighted gradient descent.
//!
//! Each minibatch step scales per-sample gradients by a clipped function of
//! the sample's loss, `w = exp(min(l, tau) / (tau + 1))` for the KL rule, and
//! hands `(1/B) sum_i w_i grad l_i` to SGD or Adam. Around that update the
//! crate provides hand-differentiated models, tilted-ERM and moving-average
//! baselines, an exact solver for finite-support DRO problems used as a
//! correctness oracle, synthetic dataset generators and an experiment harness.

pub mod datagen;
pub mod dro;
pub mod error;
pub mod harness;
pub mod models;
pub mod optim;
pub mod reweight;
pub mod verify;

pub use datagen::{DataSplits, Dataset, DatasetMetadata, DatasetSpec};
pub use dro::{DiscreteDistribution, DroDivergence, DroInstance, DroSolution, DualCertificate};
pub use error::{Error, Result};
pub use harness::{
    run_experiment, sweep, Baseline, ExperimentConfig, Metric, RunSummary, Split, SweepFile, SweepSpec, Trace,
    TraceFormat, TraceRecord,
};
pub use models::{Batch, ModelKind, ModelSpec, ModelState, Targets};
pub use optim::{
    plain_step, rgd_step, AdamParams, BoxProjection, OptimizerKind, OptimizerState, Schedule, TrainConfig,
};
pub use reweight::{Divergence, LossVector, WeightStats, WeightVector, WeightingRule};
