//! Hallucination flagging for neural machine translation from the way the
//! MMD between stochastic and beam-search embeddings moves with sampling
//! temperature.
//!
//! Inputs are [`ExampleBundle`]s. [`kernels::calibrate`] fixes the kernel
//! bandwidth and padding length on known-correct bundles, then
//! [`flagger::flag_bundle`] builds the trajectory and applies the flag rule.

pub mod aggregation;
pub mod baselines;
pub mod dataio;
pub mod evaluation;
pub mod flagger;
pub mod kernels;
pub mod mmd;
pub mod model;
pub mod stats;
pub mod synthetic;

pub use aggregation::{aggregate, AggregationMode, AggregationSpec};
pub use flagger::{flag, flag_all, flag_bundle, FlagDecision, FlagRule, FlaggerConfig, MmdTrajectory, Verdict};
pub use kernels::{calibrate, Calibration, CalibrationOptions, CalibrationScope, KernelFamily, KernelSpec};
pub use mmd::{mmd2, mmd2_beam, EstimatorMode};
pub use model::{validate_bundle, ExampleBundle, LabelPolicy, Matrix, ValidationError};
