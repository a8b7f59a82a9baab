//! Effective run configuration: command-line flags override the `--config`
//! TOML file, which overrides the built-in defaults.

use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use mmd_flagger::baselines::{ThresholdScope, DEFAULT_THRESHOLD_PERCENTILE};
use mmd_flagger::flagger::DEFAULT_TAU0;
use mmd_flagger::kernels::DEFAULT_PERCENTILE;
use mmd_flagger::{AggregationMode, CalibrationScope, EstimatorMode, KernelFamily};
use serde::{Deserialize, Serialize};

/// Distance-computation cap applied to calibration vectors unless overridden.
pub const DEFAULT_MAX_VECTORS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Avg,
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Linear,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Unbiased,
    Biased,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Scope {
    Global,
    PerLangPair,
}

impl From<Aggregation> for AggregationMode {
    fn from(a: Aggregation) -> Self {
        match a {
            Aggregation::Avg => AggregationMode::Avg,
            Aggregation::Concat => AggregationMode::Concat,
        }
    }
}

impl From<Kernel> for KernelFamily {
    fn from(k: Kernel) -> Self {
        match k {
            Kernel::Linear => KernelFamily::Linear,
            Kernel::Gaussian => KernelFamily::Gaussian,
        }
    }
}

impl From<Estimator> for EstimatorMode {
    fn from(e: Estimator) -> Self {
        match e {
            Estimator::Unbiased => EstimatorMode::Unbiased,
            Estimator::Biased => EstimatorMode::Biased,
        }
    }
}

impl From<Scope> for CalibrationScope {
    fn from(s: Scope) -> Self {
        match s {
            Scope::Global => CalibrationScope::Global,
            Scope::PerLangPair => CalibrationScope::PerLangPair,
        }
    }
}

impl From<Scope> for ThresholdScope {
    fn from(s: Scope) -> Self {
        match s {
            Scope::Global => ThresholdScope::Global,
            Scope::PerLangPair => ThresholdScope::PerLangPair,
        }
    }
}

/// Every field optional; both the TOML file and the flag set parse into this.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    pub aggregation: Option<Aggregation>,
    pub kernel: Option<Kernel>,
    pub percentile: Option<f64>,
    pub estimator: Option<Estimator>,
    pub tau0: Option<f64>,
    pub smooth: Option<usize>,
    pub threshold_percentile: Option<f64>,
    pub scope: Option<Scope>,
    pub seed: Option<u64>,
    pub max_vectors: Option<usize>,
}

impl Overrides {
    fn or(self, lower: Overrides) -> Overrides {
        Overrides {
            aggregation: self.aggregation.or(lower.aggregation),
            kernel: self.kernel.or(lower.kernel),
            percentile: self.percentile.or(lower.percentile),
            estimator: self.estimator.or(lower.estimator),
            tau0: self.tau0.or(lower.tau0),
            smooth: self.smooth.or(lower.smooth),
            threshold_percentile: self.threshold_percentile.or(lower.threshold_percentile),
            scope: self.scope.or(lower.scope),
            seed: self.seed.or(lower.seed),
            max_vectors: self.max_vectors.or(lower.max_vectors),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub aggregation: Aggregation,
    pub kernel: Kernel,
    pub percentile: f64,
    pub estimator: Estimator,
    pub tau0: f64,
    pub smooth: Option<usize>,
    pub threshold_percentile: f64,
    pub scope: Scope,
    pub seed: u64,
    /// 0 disables the cap.
    pub max_vectors: usize,
    /// Fields the user set explicitly (flags or config file).
    #[serde(skip)]
    pub explicit: Overrides,
}

impl RunConfig {
    pub fn resolve(flags: Overrides, file: Option<&Path>) -> Result<Self> {
        let file_overrides = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
            }
            None => Overrides::default(),
        };
        let explicit = flags.or(file_overrides);
        let e = explicit.clone();
        let cfg = RunConfig {
            aggregation: e.aggregation.unwrap_or(Aggregation::Avg),
            kernel: e.kernel.unwrap_or(Kernel::Gaussian),
            percentile: e.percentile.unwrap_or(DEFAULT_PERCENTILE),
            estimator: e.estimator.unwrap_or(Estimator::Unbiased),
            tau0: e.tau0.unwrap_or(DEFAULT_TAU0),
            smooth: e.smooth,
            threshold_percentile: e.threshold_percentile.unwrap_or(DEFAULT_THRESHOLD_PERCENTILE),
            scope: e.scope.unwrap_or(Scope::Global),
            seed: e.seed.unwrap_or(0),
            max_vectors: e.max_vectors.unwrap_or(DEFAULT_MAX_VECTORS),
            explicit,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        for (name, p) in [("percentile", self.percentile), ("threshold-percentile", self.threshold_percentile)] {
            if !(p > 0.0 && p < 100.0) {
                bail!("--{name} must lie in (0, 100), got {p}");
            }
        }
        if !self.tau0.is_finite() {
            bail!("--tau0 must be finite");
        }
        if matches!(self.smooth, Some(w) if w < 2) {
            bail!("--smooth window must be at least 2");
        }
        Ok(())
    }
}
