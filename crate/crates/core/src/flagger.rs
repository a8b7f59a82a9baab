//! MMD-vs-temperature trajectories and the U-shape flagging rule.
//!
//! For every temperature block the beam output is compared, as a point mass,
//! against the stochastic generations of that block. A bundle is flagged when
//! the trajectory's minimum sits above the minimal temperature `tau0`: a
//! correct output is closest to low-temperature samples, a hallucinated one
//! reaches its minimum somewhere inside the grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{aggregate, aggregate_all, AggregationError, AggregationSpec};
use crate::kernels::{Calibration, KernelSpec};
use crate::mmd::{mmd2_beam, EstimatorMode, MmdError};
use crate::model::ExampleBundle;

pub const DEFAULT_TAU0: f64 = 0.11;

/// The default temperature grid 0.1, 0.2, ..., 1.0.
pub fn default_grid() -> Vec<f64> {
    (1..=10).map(|i| f64::from(i) / 10.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub temperature: f64,
    pub mmd2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Smoothing {
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdTrajectory {
    points: Vec<TrajectoryPoint>,
    smoothing: Option<Smoothing>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrajectoryError {
    #[error("trajectory needs at least {needed} points, got {found}")]
    TooFewPoints { needed: usize, found: usize },
    #[error("trajectory temperatures must be strictly increasing")]
    NonMonotone,
    #[error("smoothing window {window} must be between 2 and the trajectory length {len}")]
    WindowTooLarge { window: usize, len: usize },
}

impl MmdTrajectory {
    /// A raw trajectory: at least two points, strictly increasing temperatures.
    pub fn new(points: Vec<TrajectoryPoint>) -> Result<Self, TrajectoryError> {
        if points.len() < 2 {
            return Err(TrajectoryError::TooFewPoints {
                needed: 2,
                found: points.len(),
            });
        }
        if points.windows(2).any(|w| !(w[0].temperature < w[1].temperature)) {
            return Err(TrajectoryError::NonMonotone);
        }
        Ok(Self {
            points,
            smoothing: None,
        })
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self, TrajectoryError> {
        Self::new(
            pairs
                .iter()
                .map(|&(temperature, mmd2)| TrajectoryPoint { temperature, mmd2 })
                .collect(),
        )
    }

    pub fn points(&self) -> &[TrajectoryPoint] {
        &self.points
    }

    pub fn smoothing(&self) -> Option<Smoothing> {
        self.smoothing
    }

    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.mmd2).collect()
    }

    pub fn temperatures(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.temperature).collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Moving average over `window` consecutive points; each output point takes
/// the temperature of its window's first element.
pub fn smooth(traj: &MmdTrajectory, window: usize) -> Result<MmdTrajectory, TrajectoryError> {
    let len = traj.points.len();
    if window < 2 || window > len {
        return Err(TrajectoryError::WindowTooLarge { window, len });
    }
    let points = traj
        .points
        .windows(window)
        .map(|w| TrajectoryPoint {
            temperature: w[0].temperature,
            mmd2: w.iter().map(|p| p.mmd2).sum::<f64>() / window as f64,
        })
        .collect();
    Ok(MmdTrajectory {
        points,
        smoothing: Some(Smoothing { window }),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// Lowest temperature among equal minima.
    #[default]
    FirstMin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlagRule {
    pub tau0: f64,
    pub tie_break: TieBreak,
}

impl Default for FlagRule {
    fn default() -> Self {
        Self {
            tau0: DEFAULT_TAU0,
            tie_break: TieBreak::FirstMin,
        }
    }
}

impl FlagRule {
    pub fn new(tau0: f64) -> Option<Self> {
        (tau0 > 0.0 && tau0.is_finite()).then_some(Self {
            tau0,
            tie_break: TieBreak::FirstMin,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verdict {
    pub tau_min: f64,
    pub flagged: bool,
}

/// Argmin of the trajectory (first occurrence on ties), flagged when strictly
/// above `tau0`.
pub fn flag(traj: &MmdTrajectory, rule: &FlagRule) -> Verdict {
    let mut best = traj.points[0];
    for p in &traj.points[1..] {
        match rule.tie_break {
            TieBreak::FirstMin => {
                if p.mmd2 < best.mmd2 {
                    best = *p;
                }
            }
        }
    }
    Verdict {
        tau_min: best.temperature,
        flagged: best.temperature > rule.tau0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlagDecision {
    pub id: String,
    pub tau_min: f64,
    pub flagged: bool,
    pub trajectory: MmdTrajectory,
    /// Present when the verdict was taken on a smoothed trajectory.
    pub smoothed: Option<MmdTrajectory>,
    pub rule: FlagRule,
}

impl FlagDecision {
    pub fn decide(
        id: impl Into<String>,
        trajectory: MmdTrajectory,
        window: Option<usize>,
        rule: FlagRule,
    ) -> Result<Self, TrajectoryError> {
        let smoothed = window.map(|w| smooth(&trajectory, w)).transpose()?;
        let verdict = flag(smoothed.as_ref().unwrap_or(&trajectory), &rule);
        Ok(Self {
            id: id.into(),
            tau_min: verdict.tau_min,
            flagged: verdict.flagged,
            trajectory,
            smoothed,
            rule,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlagErrorKind {
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Mmd(#[from] MmdError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("no calibration group matches lang_pair {0:?}")]
    ScopeMismatch(Option<String>),
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{id}: {kind}")]
pub struct FlagError {
    pub id: String,
    pub kind: FlagErrorKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuiltTrajectory {
    pub trajectory: MmdTrajectory,
    /// Generations (beam included) that concat had to truncate.
    pub truncated: usize,
}

/// One point per temperature block, in block order.
pub fn build_trajectory(
    bundle: &ExampleBundle,
    agg: &AggregationSpec,
    spec: &KernelSpec,
    mode: EstimatorMode,
) -> Result<BuiltTrajectory, FlagError> {
    let wrap = |kind: FlagErrorKind| FlagError {
        id: bundle.id.clone(),
        kind,
    };
    let beam = aggregate(&bundle.beam.embedding, agg).map_err(|e| wrap(e.into()))?;
    let mut truncated = usize::from(beam.truncated_from.is_some());
    let mut points = Vec::with_capacity(bundle.blocks.len());
    for block in &bundle.blocks {
        let (h, cut) = aggregate_all(block.generations.iter().map(|g| &g.embedding), agg)
            .map_err(|e| wrap(e.into()))?;
        truncated += cut;
        let value = mmd2_beam(&beam.vector, &h, spec, mode).map_err(|e| wrap(e.into()))?;
        points.push(TrajectoryPoint {
            temperature: block.temperature,
            mmd2: value,
        });
    }
    let trajectory = MmdTrajectory::new(points).map_err(|e| wrap(e.into()))?;
    Ok(BuiltTrajectory {
        trajectory,
        truncated,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlaggerConfig {
    pub estimator: EstimatorMode,
    pub rule: FlagRule,
    pub smoothing: Option<usize>,
}

impl Default for FlaggerConfig {
    fn default() -> Self {
        Self {
            estimator: EstimatorMode::Unbiased,
            rule: FlagRule::default(),
            smoothing: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlagOutcome {
    pub decision: FlagDecision,
    pub truncated: usize,
}

pub fn flag_bundle(
    bundle: &ExampleBundle,
    calibration: &Calibration,
    config: &FlaggerConfig,
) -> Result<FlagOutcome, FlagError> {
    let group = calibration
        .group_for(bundle.lang_pair.as_deref())
        .ok_or_else(|| FlagError {
            id: bundle.id.clone(),
            kind: FlagErrorKind::ScopeMismatch(bundle.lang_pair.clone()),
        })?;
    let built = build_trajectory(bundle, &group.aggregation, &group.kernel, config.estimator)?;
    let decision = FlagDecision::decide(bundle.id.clone(), built.trajectory, config.smoothing, config.rule)
        .map_err(|e| FlagError {
            id: bundle.id.clone(),
            kind: e.into(),
        })?;
    Ok(FlagOutcome {
        decision,
        truncated: built.truncated,
    })
}

/// Flags every bundle in parallel on the current rayon pool; the output is in
/// input order.
pub fn flag_all(
    bundles: &[ExampleBundle],
    calibration: &Calibration,
    config: &FlaggerConfig,
) -> Vec<Result<FlagOutcome, FlagError>> {
    bundles
        .par_iter()
        .map(|b| flag_bundle(b, calibration, config))
        .collect()
}
