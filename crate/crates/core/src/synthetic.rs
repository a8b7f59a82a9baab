//! Seeded bundle generator with known trajectory regimes, and the
//! sample-size stability harness built on it.
//!
//! Every profile fixes one beam vector `b` and one unit direction `u`. A
//! stochastic generation at temperature `t` is drawn from an isotropic normal
//! with mean `b + delta * max(0, tau_star - t) * u` and standard deviation
//! `s0 * t`. With `delta = 0` (correct kind) the samples collapse onto `b` as
//! `t` falls, so the trajectory rises with temperature; a positive `delta`
//! pushes low-temperature samples away from `b` and moves the minimum to
//! `tau_star`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flagger::{default_grid, flag_bundle, FlaggerConfig};
use crate::kernels::{calibrate, Calibration, CalibrationOptions};
use crate::model::{EmbeddingMatrix, ExampleBundle, Generation, Matrix, TemperatureBlock, TokenSequence};
use crate::stats;

/// Identifies the random stream layout so other implementations can
/// reproduce generated files.
pub const RNG_ALGORITHM: &str = "ChaCha8 (rand_chacha 0.9, seed_from_u64(seed)); \
bundle stream = kind_tag << 32 | index, layout stream = u64::MAX; \
normals via rand_distr::StandardNormal";

const LAYOUT_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileKind {
    Correct,
    Hallucination,
}

impl ProfileKind {
    fn tag(self) -> u64 {
        match self {
            ProfileKind::Correct => 1,
            ProfileKind::Hallucination => 2,
        }
    }

    fn id_prefix(self) -> &'static str {
        match self {
            ProfileKind::Correct => "syn-c",
            ProfileKind::Hallucination => "syn-h",
        }
    }

    pub fn labels(self) -> Vec<String> {
        match self {
            ProfileKind::Correct => vec![],
            ProfileKind::Hallucination => vec!["error-full".to_owned()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProfile {
    pub kind: ProfileKind,
    pub dim: usize,
    pub n_per_temp: usize,
    pub tau_grid: Vec<f64>,
    /// Noise scale `s0`; the per-temperature standard deviation is `s0 * t`.
    pub base_noise: f64,
    /// Offset magnitude `delta` (ignored for the correct kind).
    pub offset_scale: f64,
    /// Temperature `tau_star` at which the offset reaches zero.
    pub offset_cutoff: f64,
    pub seed: u64,
    /// When set, each generation has a uniformly random token count in
    /// `1..=max`, every row drawn independently.
    pub max_tokens: Option<usize>,
}

impl Default for SyntheticProfile {
    fn default() -> Self {
        Self {
            kind: ProfileKind::Hallucination,
            dim: 8,
            n_per_temp: 25,
            tau_grid: default_grid(),
            base_noise: 0.05,
            offset_scale: 1.0,
            offset_cutoff: 0.5,
            seed: 0,
            max_tokens: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProfileError {
    #[error("dimension, samples per temperature and bundle count must be positive")]
    ZeroSize,
    #[error("temperature grid must be non-empty, positive and strictly increasing")]
    BadGrid,
    #[error("noise and offset scales must be finite and non-negative")]
    BadScale,
    #[error("offset cutoff {0} must lie strictly inside the temperature grid")]
    CutoffOutsideGrid(f64),
}

impl SyntheticProfile {
    pub fn with_kind(mut self, kind: ProfileKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        if self.dim == 0 || self.n_per_temp == 0 || self.max_tokens == Some(0) {
            return Err(ProfileError::ZeroSize);
        }
        let g = &self.tau_grid;
        if g.is_empty() || !(g[0] > 0.0) || g.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(ProfileError::BadGrid);
        }
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.base_noise) || !ok(self.offset_scale) {
            return Err(ProfileError::BadScale);
        }
        if self.kind == ProfileKind::Hallucination {
            let (lo, hi) = (g[0], g[g.len() - 1]);
            if !(self.offset_cutoff > lo && self.offset_cutoff < hi) {
                return Err(ProfileError::CutoffOutsideGrid(self.offset_cutoff));
            }
        }
        Ok(())
    }

    fn offset_at(&self, t: f64) -> f64 {
        match self.kind {
            ProfileKind::Correct => 0.0,
            ProfileKind::Hallucination => self.offset_scale * (self.offset_cutoff - t).max(0.0),
        }
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Beam vector and unit offset direction shared by every bundle of a seed.
fn layout(profile: &SyntheticProfile) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    rng.set_stream(LAYOUT_STREAM);
    let beam = normal_vec(&mut rng, profile.dim);
    let mut dir = normal_vec(&mut rng, profile.dim);
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    dir.iter_mut().for_each(|v| *v /= norm);
    (beam, dir)
}

fn placeholder_tokens(n: usize) -> TokenSequence {
    TokenSequence::new((0..n).map(|i| format!("<tok{i}>")))
}

fn single_bundle(profile: &SyntheticProfile, beam: &[f64], dir: &[f64], index: usize) -> ExampleBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    rng.set_stream(profile.kind.tag() << 32 | index as u64);
    let d = profile.dim;

    let beam_rows = profile.max_tokens.map_or(1, |max| rng.random_range(1..=max));
    let beam_data: Vec<f64> = (0..beam_rows).flat_map(|_| beam.iter().copied()).collect();
    let beam_gen = Generation {
        sequence: placeholder_tokens(beam_rows),
        embedding: EmbeddingMatrix::new(Matrix::from_flat(beam_rows, d, beam_data).expect("shape"), 0),
    };

    let blocks = profile
        .tau_grid
        .iter()
        .map(|&t| {
            let shift = profile.offset_at(t);
            let sd = profile.base_noise * t;
            let mean: Vec<f64> = beam.iter().zip(dir).map(|(b, u)| b + shift * u).collect();
            let generations = (0..profile.n_per_temp)
                .map(|_| {
                    let rows = profile.max_tokens.map_or(1, |max| rng.random_range(1..=max));
                    let mut data = Vec::with_capacity(rows * d);
                    for _ in 0..rows {
                        for m in &mean {
                            let z: f64 = rng.sample(StandardNormal);
                            data.push(m + sd * z);
                        }
                    }
                    Generation {
                        sequence: placeholder_tokens(rows),
                        embedding: EmbeddingMatrix::new(Matrix::from_flat(rows, d, data).expect("shape"), 0),
                    }
                })
                .collect();
            TemperatureBlock {
                temperature: t,
                generations,
            }
        })
        .collect();

    ExampleBundle {
        id: format!("{}-{index:05}", profile.kind.id_prefix()),
        lang_pair: None,
        labels: profile.kind.labels(),
        source_text: format!("synthetic source {index}"),
        reference_text: None,
        beam: beam_gen,
        blocks,
        mc_dropout: None,
    }
}

/// `count` bundles of the profile's kind. Bundle `i` depends only on
/// `(profile, i)`, so the output is identical however the work is split.
pub fn generate(profile: &SyntheticProfile, count: usize) -> Result<Vec<ExampleBundle>, ProfileError> {
    profile.validate()?;
    if count == 0 {
        return Err(ProfileError::ZeroSize);
    }
    let (beam, dir) = layout(profile);
    Ok((0..count)
        .into_par_iter()
        .map(|i| single_bundle(profile, &beam, &dir, i))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityOptions {
    pub sample_sizes: Vec<usize>,
    pub repetitions: usize,
    /// Hallucination bundles per repetition.
    pub bundles: usize,
    /// Correct bundles used once to fix the bandwidth.
    pub calibration_bundles: usize,
    pub calibration: CalibrationOptions,
    pub flagger: FlaggerConfig,
}

impl Default for StabilityOptions {
    fn default() -> Self {
        Self {
            sample_sizes: vec![10, 25, 50, 100],
            repetitions: 10,
            bundles: 50,
            calibration_bundles: 10,
            calibration: CalibrationOptions::default(),
            flagger: FlaggerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityRow {
    pub n: usize,
    pub mean_recall: f64,
    /// Population variance of recall across repetitions.
    pub recall_variance: f64,
    /// Set when a single repetition makes the variance meaningless.
    pub degenerate: bool,
    /// Variance of each mmd2 value across repetitions, averaged over bundle
    /// slots and temperatures.
    pub mean_trajectory_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StabilityError {
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("stability study needs positive sample sizes and at least one repetition")]
    BadOptions,
    #[error("calibration failed: {0}")]
    Calibration(#[from] crate::kernels::KernelError),
    #[error(transparent)]
    Flag(#[from] crate::flagger::FlagError),
}

fn repetition_seed(base: u64, n: usize, rep: usize) -> u64 {
    // splitmix64 finaliser over the (seed, n, rep) triple
    let mut z = base ^ (n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (rep as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Recall of the flagger on hallucination bundles, repeated with independent
/// seeds at each sample size. The bandwidth is calibrated once, on correct
/// bundles of the base profile, and shared by every run.
pub fn stability_study(profile: &SyntheticProfile, opts: &StabilityOptions) -> Result<Vec<StabilityRow>, StabilityError> {
    if opts.repetitions == 0 || opts.bundles == 0 || opts.sample_sizes.contains(&0) {
        return Err(StabilityError::BadOptions);
    }
    let cal_profile = profile.clone().with_kind(ProfileKind::Correct);
    let cal_bundles = generate(&cal_profile, opts.calibration_bundles.max(1))?;
    let calibration: Calibration = calibrate(&cal_bundles, &opts.calibration)?;

    let mut rows = Vec::with_capacity(opts.sample_sizes.len());
    for &n in &opts.sample_sizes {
        let mut recalls = Vec::with_capacity(opts.repetitions);
        // trajectories[rep][bundle][temp]
        let mut trajectories: Vec<Vec<Vec<f64>>> = Vec::with_capacity(opts.repetitions);
        for rep in 0..opts.repetitions {
            let p = SyntheticProfile {
                kind: ProfileKind::Hallucination,
                n_per_temp: n,
                seed: repetition_seed(profile.seed, n, rep),
                ..profile.clone()
            };
            let bundles = generate(&p, opts.bundles)?;
            let outcomes = bundles
                .par_iter()
                .map(|b| flag_bundle(b, &calibration, &opts.flagger))
                .collect::<Result<Vec<_>, _>>()?;
            let flagged = outcomes.iter().filter(|o| o.decision.flagged).count();
            recalls.push(flagged as f64 / outcomes.len() as f64);
            trajectories.push(outcomes.iter().map(|o| o.decision.trajectory.values()).collect());
        }
        let mut per_slot = Vec::new();
        for b in 0..opts.bundles {
            for t in 0..profile.tau_grid.len() {
                let vals: Vec<f64> = trajectories.iter().map(|rep| rep[b][t]).collect();
                per_slot.push(stats::variance(&vals));
            }
        }
        rows.push(StabilityRow {
            n,
            mean_recall: stats::mean(&recalls),
            recall_variance: if opts.repetitions > 1 { stats::variance(&recalls) } else { 0.0 },
            degenerate: opts.repetitions == 1,
            mean_trajectory_variance: stats::mean(&per_slot),
        });
    }
    Ok(rows)
}
