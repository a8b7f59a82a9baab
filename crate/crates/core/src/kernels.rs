//! Linear and Gaussian kernels, Gram blocks, and percentile-based bandwidth
//! calibration.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{aggregate_all, AggregationError, AggregationMode, AggregationSpec};
use crate::model::{ExampleBundle, Matrix};
use crate::stats::percentile_sorted;

pub const DEFAULT_PERCENTILE: f64 = 25.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Linear,
    Gaussian,
}

impl KernelFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            KernelFamily::Linear => "linear",
            KernelFamily::Gaussian => "gaussian",
        }
    }
}

/// How a Gaussian bandwidth was obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationInfo {
    pub percentile: f64,
    /// Number of vectors the pairwise distances were taken over.
    pub sample_count: usize,
    pub distance_metric: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub gamma: Option<f64>,
    pub calibration: Option<CalibrationInfo>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KernelError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("gaussian bandwidth must be positive and finite, got {0:?}")]
    InvalidBandwidth(Option<f64>),
    #[error("percentile must lie in (0, 100), got {0}")]
    InvalidPercentile(f64),
    #[error("bandwidth calibration needs at least 2 vectors, got {0}")]
    TooFewVectors(usize),
    #[error("degenerate calibration: every pairwise distance is zero")]
    DegenerateCalibration,
    #[error("the {0}th percentile of pairwise distances is zero; too many calibration vectors coincide")]
    ZeroBandwidth(f64),
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("calibration group {group}: {source}")]
    Group {
        group: String,
        #[source]
        source: Box<KernelError>,
    },
    #[error("per-language-pair calibration: bundle {id} has no lang_pair")]
    MissingLangPair { id: String },
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
}

impl KernelSpec {
    pub fn linear() -> Self {
        Self {
            family: KernelFamily::Linear,
            gamma: None,
            calibration: None,
        }
    }

    pub fn gaussian(gamma: f64) -> Result<Self, KernelError> {
        let spec = Self {
            family: KernelFamily::Gaussian,
            gamma: Some(gamma),
            calibration: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        if self.family == KernelFamily::Gaussian {
            match self.gamma {
                Some(g) if g > 0.0 && g.is_finite() => {}
                other => return Err(KernelError::InvalidBandwidth(other)),
            }
        }
        Ok(())
    }

    /// Kernel value without the dimension check. `a` and `b` must have equal
    /// length.
    #[inline]
    pub(crate) fn eval_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.family {
            KernelFamily::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            KernelFamily::Gaussian => {
                let g = self.gamma.expect("validated gaussian");
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-d2 / (2.0 * g * g)).exp()
            }
        }
    }
}

pub fn kernel_eval(a: &[f64], b: &[f64], spec: &KernelSpec) -> Result<f64, KernelError> {
    if a.len() != b.len() {
        return Err(KernelError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    spec.validate()?;
    Ok(spec.eval_unchecked(a, b))
}

// Below this many scalar multiply-adds the rayon fan-out costs more than it saves.
const PARALLEL_GRAM_WORK: usize = 1 << 16;

/// `K[i][j] = k(A_i, B_j)`.
pub fn gram_block(a: &Matrix, b: &Matrix, spec: &KernelSpec) -> Result<Matrix, KernelError> {
    if a.ncols() != b.ncols() {
        return Err(KernelError::DimensionMismatch {
            left: a.ncols(),
            right: b.ncols(),
        });
    }
    spec.validate()?;
    let (n, m) = (a.nrows(), b.nrows());
    let mut out = Matrix::zeros(n, m);
    if m == 0 {
        return Ok(out);
    }
    let fill = |(i, row): (usize, &mut [f64])| {
        let ai = a.row(i);
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = spec.eval_unchecked(ai, b.row(j));
        }
    };
    let slots = out.as_mut_slice();
    if n * m * a.ncols().max(1) >= PARALLEL_GRAM_WORK {
        slots.par_chunks_mut(m).enumerate().for_each(fill);
    } else {
        slots.chunks_mut(m).enumerate().for_each(fill);
    }
    Ok(out)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// All `i < j` Euclidean distances, row-major over `i`.
pub fn pairwise_distances(h: &Matrix) -> Vec<f64> {
    let n = h.nrows();
    (0..n)
        .into_par_iter()
        .flat_map_iter(|i| (i + 1..n).map(move |j| euclidean(h.row(i), h.row(j))))
        .collect()
}

/// Bandwidth as the given percentile of the pairwise Euclidean distances of
/// `h` (unsquared, linear interpolation between order statistics).
pub fn calibrate_bandwidth(h: &Matrix, percentile: f64) -> Result<f64, KernelError> {
    if !(percentile > 0.0 && percentile < 100.0) {
        return Err(KernelError::InvalidPercentile(percentile));
    }
    if h.nrows() < 2 {
        return Err(KernelError::TooFewVectors(h.nrows()));
    }
    let mut dists = pairwise_distances(h);
    dists.par_sort_unstable_by(f64::total_cmp);
    if dists.last().is_some_and(|&d| d == 0.0) {
        return Err(KernelError::DegenerateCalibration);
    }
    let gamma = percentile_sorted(&dists, percentile);
    if gamma > 0.0 {
        Ok(gamma)
    } else {
        Err(KernelError::ZeroBandwidth(percentile))
    }
}

/// Longest token count over every beam and stochastic generation.
pub fn derive_t_max(calibration: &[ExampleBundle]) -> Result<usize, KernelError> {
    calibration
        .iter()
        .flat_map(|b| b.all_generations())
        .map(|g| g.sequence.len())
        .max()
        .ok_or(KernelError::EmptyCalibration)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationScope {
    Global,
    PerLangPair,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOptions {
    pub family: KernelFamily,
    pub aggregation: AggregationMode,
    pub percentile: f64,
    pub scope: CalibrationScope,
    /// Deterministically thins the calibration vectors to at most this many
    /// (evenly strided) before the quadratic distance computation.
    pub max_vectors: Option<usize>,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            family: KernelFamily::Gaussian,
            aggregation: AggregationMode::Avg,
            percentile: DEFAULT_PERCENTILE,
            scope: CalibrationScope::Global,
            max_vectors: None,
        }
    }
}

/// Calibration products for one scope group.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationGroup {
    pub lang_pair: Option<String>,
    pub kernel: KernelSpec,
    pub aggregation: AggregationSpec,
    /// Number of calibration bundles in the group.
    pub bundle_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub scope: CalibrationScope,
    pub groups: Vec<CalibrationGroup>,
}

impl Calibration {
    /// A calibration with no data behind it: linear kernel, avg aggregation.
    pub fn uncalibrated_linear() -> Self {
        Self {
            scope: CalibrationScope::Global,
            groups: vec![CalibrationGroup {
                lang_pair: None,
                kernel: KernelSpec::linear(),
                aggregation: AggregationSpec::avg(),
                bundle_count: 0,
            }],
        }
    }

    pub fn group_for(&self, lang_pair: Option<&str>) -> Option<&CalibrationGroup> {
        match self.scope {
            CalibrationScope::Global => self.groups.first(),
            CalibrationScope::PerLangPair => {
                let lp = lang_pair?;
                self.groups.iter().find(|g| g.lang_pair.as_deref() == Some(lp))
            }
        }
    }
}

fn strided(m: Matrix, max: Option<usize>) -> Matrix {
    match max {
        Some(k) if k >= 2 && m.nrows() > k => {
            let n = m.nrows();
            let cols = m.ncols();
            let mut data = Vec::with_capacity(k * cols);
            for i in 0..k {
                data.extend_from_slice(m.row(i * n / k));
            }
            Matrix::from_flat(k, cols, data).expect("shape")
        }
        _ => m,
    }
}

fn calibrate_group(
    bundles: &[&ExampleBundle],
    lang_pair: Option<String>,
    opts: &CalibrationOptions,
) -> Result<CalibrationGroup, KernelError> {
    let t_max = bundles
        .iter()
        .flat_map(|b| b.all_generations())
        .map(|g| g.sequence.len())
        .max()
        .ok_or(KernelError::EmptyCalibration)?;
    let aggregation = match opts.aggregation {
        AggregationMode::Avg => AggregationSpec {
            mode: AggregationMode::Avg,
            t_max: Some(t_max),
        },
        AggregationMode::Concat => AggregationSpec::concat(t_max)?,
    };
    let kernel = match opts.family {
        KernelFamily::Linear => KernelSpec::linear(),
        KernelFamily::Gaussian => {
            let (h, _) = aggregate_all(
                bundles
                    .iter()
                    .flat_map(|b| b.all_generations())
                    .map(|g| &g.embedding),
                &aggregation,
            )?;
            let h = strided(h, opts.max_vectors);
            let gamma = calibrate_bandwidth(&h, opts.percentile)?;
            KernelSpec {
                family: KernelFamily::Gaussian,
                gamma: Some(gamma),
                calibration: Some(CalibrationInfo {
                    percentile: opts.percentile,
                    sample_count: h.nrows(),
                    distance_metric: "euclidean".into(),
                }),
            }
        }
    };
    Ok(CalibrationGroup {
        lang_pair,
        kernel,
        aggregation,
        bundle_count: bundles.len(),
    })
}

/// Calibrates bandwidth and `t_max` from a set of (correct) bundles, once
/// globally or once per language pair.
///
/// The calibration vectors are the aggregated beam and stochastic
/// generations of every bundle across all temperatures.
pub fn calibrate(bundles: &[ExampleBundle], opts: &CalibrationOptions) -> Result<Calibration, KernelError> {
    if bundles.is_empty() {
        return Err(KernelError::EmptyCalibration);
    }
    if !(opts.percentile > 0.0 && opts.percentile < 100.0) {
        return Err(KernelError::InvalidPercentile(opts.percentile));
    }
    let groups = match opts.scope {
        CalibrationScope::Global => {
            let all: Vec<&ExampleBundle> = bundles.iter().collect();
            vec![calibrate_group(&all, None, opts)?]
        }
        CalibrationScope::PerLangPair => {
            let mut by_pair: BTreeMap<&str, Vec<&ExampleBundle>> = BTreeMap::new();
            for b in bundles {
                let lp = b
                    .lang_pair
                    .as_deref()
                    .ok_or_else(|| KernelError::MissingLangPair { id: b.id.clone() })?;
                by_pair.entry(lp).or_default().push(b);
            }
            by_pair
                .into_iter()
                .map(|(lp, members)| {
                    calibrate_group(&members, Some(lp.to_owned()), opts).map_err(|e| KernelError::Group {
                        group: lp.to_owned(),
                        source: Box::new(e),
                    })
                })
                .collect::<Result<_, _>>()?
        }
    };
    Ok(Calibration {
        scope: opts.scope,
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::bundle;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn col(values: &[f64]) -> Matrix {
        Matrix::from_rows(&values.iter().map(|&v| vec![v]).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn gaussian_values() {
        let spec = KernelSpec::gaussian(1.5).unwrap();
        assert_eq!(kernel_eval(&[0.3, -2.0], &[0.3, -2.0], &spec).unwrap(), 1.0);
        // ||a-b||^2 = 2 gamma^2
        let g = 1.5f64;
        let a = [0.0, 0.0];
        let b = [g, g];
        assert_relative_eq!(kernel_eval(&a, &b, &spec).unwrap(), (-1.0f64).exp(), epsilon = 1e-15);
        assert_relative_eq!((-1.0f64).exp(), 0.367879, epsilon = 1e-6);
    }

    #[test]
    fn linear_dot_product() {
        assert_eq!(kernel_eval(&[1.0, 2.0], &[3.0, 4.0], &KernelSpec::linear()).unwrap(), 11.0);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        assert!(matches!(
            kernel_eval(&[1.0], &[1.0, 2.0], &KernelSpec::linear()),
            Err(KernelError::DimensionMismatch { left: 1, right: 2 })
        ));
        let a = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(gram_block(&a, &b, &KernelSpec::linear()).is_err());
    }

    #[test]
    fn invalid_bandwidth_rejected() {
        assert!(KernelSpec::gaussian(0.0).is_err());
        assert!(KernelSpec::gaussian(f64::NAN).is_err());
    }

    #[test]
    fn linear_gram_block() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0, 1.0], vec![2.0, 0.0]]).unwrap();
        let k = gram_block(&a, &b, &KernelSpec::linear()).unwrap();
        assert_eq!(k.to_rows(), vec![vec![1.0, 2.0], vec![1.0, 0.0]]);
    }

    #[test]
    fn gaussian_gram_has_unit_diagonal() {
        let a = Matrix::from_rows(&[vec![0.1, 2.0], vec![-1.0, 0.5], vec![3.0, 3.0]]).unwrap();
        let k = gram_block(&a, &a, &KernelSpec::gaussian(0.7).unwrap()).unwrap();
        for i in 0..3 {
            assert_eq!(k.get(i, i), 1.0);
        }
        let one = gram_block(
            &Matrix::from_rows(&[a.row(0)]).unwrap(),
            &Matrix::from_rows(&[a.row(2)]).unwrap(),
            &KernelSpec::gaussian(0.7).unwrap(),
        )
        .unwrap();
        assert_eq!(
            one.get(0, 0),
            kernel_eval(a.row(0), a.row(2), &KernelSpec::gaussian(0.7).unwrap()).unwrap()
        );
    }

    #[test]
    fn large_gram_block_matches_entrywise() {
        let rows: Vec<Vec<f64>> = (0..80)
            .map(|i| (0..16).map(|j| ((i * 7 + j * 3) % 11) as f64 * 0.1).collect())
            .collect();
        let a = Matrix::from_rows(&rows).unwrap();
        let spec = KernelSpec::gaussian(0.9).unwrap();
        let k = gram_block(&a, &a, &spec).unwrap();
        for i in (0..80).step_by(13) {
            for j in (0..80).step_by(7) {
                assert_eq!(k.get(i, j), kernel_eval(a.row(i), a.row(j), &spec).unwrap());
            }
        }
    }

    #[test]
    fn bandwidth_percentiles_on_three_points() {
        // distances {3, 1, 4} -> sorted {1, 3, 4}
        let h = col(&[0.0, 3.0, 4.0]);
        assert_eq!(calibrate_bandwidth(&h, 50.0).unwrap(), 3.0);
        assert_eq!(calibrate_bandwidth(&h, 25.0).unwrap(), 2.0);
    }

    #[test]
    fn identical_points_are_degenerate() {
        let h = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(calibrate_bandwidth(&h, 25.0), Err(KernelError::DegenerateCalibration));
        let mostly_same = col(&[0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(calibrate_bandwidth(&mostly_same, 25.0), Err(KernelError::ZeroBandwidth(25.0)));
        assert!(matches!(calibrate_bandwidth(&col(&[1.0]), 25.0), Err(KernelError::TooFewVectors(1))));
        assert!(matches!(
            calibrate_bandwidth(&col(&[0.0, 1.0]), 100.0),
            Err(KernelError::InvalidPercentile(_))
        ));
    }

    fn one_token_bundle(id: &str, lens: &[usize]) -> ExampleBundle {
        let beam: Vec<Vec<f64>> = vec![vec![0.0]; lens[0]];
        let gens: Vec<Vec<Vec<f64>>> = lens[1..].iter().map(|&t| vec![vec![1.0]; t]).collect();
        bundle(id, &beam, &[(0.1, gens)])
    }

    #[test]
    fn t_max_is_longest_generation() {
        assert_eq!(derive_t_max(&[one_token_bundle("a", &[3, 7, 2])]).unwrap(), 7);
        assert_eq!(
            derive_t_max(&[one_token_bundle("a", &[5, 1]), one_token_bundle("b", &[2, 9])]).unwrap(),
            9
        );
        assert!(derive_t_max(&[]).is_err());
    }

    #[test]
    fn per_language_pair_calibration() {
        let mut a = bundle("a", &[vec![0.0]], &[(0.1, vec![vec![vec![1.0]], vec![vec![2.0]]])]);
        a.lang_pair = Some("de-en".into());
        let mut b = bundle("b", &[vec![0.0]], &[(0.1, vec![vec![vec![10.0]], vec![vec![20.0]]])]);
        b.lang_pair = Some("fr-en".into());
        let opts = CalibrationOptions {
            scope: CalibrationScope::PerLangPair,
            percentile: 50.0,
            ..Default::default()
        };
        let cal = calibrate(&[a.clone(), b.clone()], &opts).unwrap();
        assert_eq!(cal.groups.len(), 2);
        // de-en distances {1, 2, 1} -> median 1; fr-en {10, 20, 10} -> 10
        assert_eq!(cal.group_for(Some("de-en")).unwrap().kernel.gamma, Some(1.0));
        assert_eq!(cal.group_for(Some("fr-en")).unwrap().kernel.gamma, Some(10.0));
        assert!(cal.group_for(None).is_none());

        b.lang_pair = None;
        assert!(matches!(calibrate(&[a, b], &opts), Err(KernelError::MissingLangPair { .. })));
    }

    #[test]
    fn striding_caps_vector_count() {
        let m = col(&(0..10).map(f64::from).collect::<Vec<_>>());
        let s = strided(m, Some(4));
        assert_eq!(s.nrows(), 4);
        assert_eq!(s.as_slice(), &[0.0, 2.0, 5.0, 7.0]);
    }

    fn points() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..4).prop_flat_map(|d| {
            proptest::collection::vec(proptest::collection::vec(-3.0..3.0f64, d), 3..12)
        })
    }

    proptest! {
        #[test]
        fn kernel_is_symmetric(a in proptest::collection::vec(-5.0..5.0f64, 3), b in proptest::collection::vec(-5.0..5.0f64, 3), g in 0.1..4.0f64) {
            let lin = KernelSpec::linear();
            prop_assert_eq!(kernel_eval(&a, &b, &lin).unwrap(), kernel_eval(&b, &a, &lin).unwrap());
            let gau = KernelSpec::gaussian(g).unwrap();
            let (x, y) = (kernel_eval(&a, &b, &gau).unwrap(), kernel_eval(&b, &a, &gau).unwrap());
            prop_assert!((x - y).abs() <= f64::EPSILON * x.abs());
        }

        #[test]
        fn bandwidth_permutation_invariant_and_monotone(rows in points(), k in 0usize..20) {
            let h = Matrix::from_rows(&rows).unwrap();
            let mut perm = rows.clone();
            perm.rotate_left(k % rows.len());
            perm.reverse();
            let hp = Matrix::from_rows(&perm).unwrap();
            let grid = [12.5, 25.0, 50.0, 62.5, 75.0, 87.5];
            let mut last = 0.0;
            for p in grid {
                let g = calibrate_bandwidth(&h, p).unwrap();
                prop_assert!(g > 0.0);
                prop_assert_eq!(g, calibrate_bandwidth(&hp, p).unwrap());
                prop_assert!(g >= last);
                last = g;
            }
        }
    }
}
