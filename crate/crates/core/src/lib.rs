//! Differential-diagnosis toolkit.
//!
//! The pipeline has three stages:
//!
//! 1. [`simulate`] generates labeled clinical cases from an expert knowledge
//!    base ([`kb`]), labeling each case with the differential produced by the
//!    stand-in inference engine in [`expert`].
//! 2. [`trainer`] fits the embedding-bag diagnosis model of [`model`] by
//!    minimizing the KL divergence between the soft labels and the model
//!    output, using minibatch Adam.
//! 3. [`eval`] scores a diagnoser (model or expert engine) by top-k accuracy.
//!
//! Data-parallel loops (case generation, per-case gradients, evaluation) run
//! on rayon when the `parallel` feature is enabled and fall back to plain
//! iteration otherwise. Results are bit-identical either way.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod exec;
pub mod expert;
pub mod kb;
pub mod model;
pub mod rng;
pub mod simulate;
pub mod synthetic;
pub mod trainer;

pub use dataset::{CaseSet, Vocabulary};
pub use error::{Error, Result};
pub use exec::Execution;
pub use expert::DifferentialDiagnosis;
pub use kb::KnowledgeBase;
pub use model::{ModelInput, ModelParameters};
pub use simulate::{ClinicalCase, SimConfig};
pub use trainer::TrainConfig;
