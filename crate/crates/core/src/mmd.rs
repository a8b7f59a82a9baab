//! Empirical squared MMD between two vector sets, and the point-mass form
//! used when one side is the single beam output.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::{gram_block, KernelError, KernelSpec};
use crate::model::Matrix;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorMode {
    /// Within-set terms average over off-diagonal pairs only (U-statistic).
    #[default]
    Unbiased,
    /// Within-set terms average over all n^2 pairs (V-statistic).
    Biased,
}

impl EstimatorMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorMode::Unbiased => "unbiased",
            EstimatorMode::Biased => "biased",
        }
    }

    fn min_samples(&self) -> usize {
        match self {
            EstimatorMode::Unbiased => 2,
            EstimatorMode::Biased => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MmdError {
    #[error("{mode} estimator needs at least {needed} samples per set, got {found}")]
    InsufficientSamples {
        mode: &'static str,
        needed: usize,
        found: usize,
    },
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

fn check_count(mode: EstimatorMode, n: usize) -> Result<(), MmdError> {
    if n < mode.min_samples() {
        return Err(MmdError::InsufficientSamples {
            mode: mode.as_str(),
            needed: mode.min_samples(),
            found: n,
        });
    }
    Ok(())
}

/// Within-set mean kernel value of a square Gram matrix, summed row-major.
fn within_term(gram: &Matrix, mode: EstimatorMode) -> f64 {
    let n = gram.nrows();
    let mut sum = 0.0;
    for i in 0..n {
        let row = gram.row(i);
        for (j, &v) in row.iter().enumerate() {
            if mode == EstimatorMode::Biased || i != j {
                sum += v;
            }
        }
    }
    let nf = n as f64;
    match mode {
        EstimatorMode::Unbiased => sum / (nf * (nf - 1.0)),
        EstimatorMode::Biased => sum / (nf * nf),
    }
}

/// Squared MMD estimate between the rows of `a` and the rows of `b`.
///
/// The cross term is summed in ascending value order, which makes the result
/// exactly symmetric in its two arguments. The unbiased form can be negative.
pub fn mmd2(a: &Matrix, b: &Matrix, spec: &KernelSpec, mode: EstimatorMode) -> Result<f64, MmdError> {
    if a.ncols() != b.ncols() {
        return Err(KernelError::DimensionMismatch {
            left: a.ncols(),
            right: b.ncols(),
        }
        .into());
    }
    check_count(mode, a.nrows())?;
    check_count(mode, b.nrows())?;
    let kaa = within_term(&gram_block(a, a, spec)?, mode);
    let kbb = within_term(&gram_block(b, b, spec)?, mode);
    let mut cross_values = gram_block(a, b, spec)?.as_slice().to_vec();
    cross_values.sort_unstable_by(f64::total_cmp);
    let cross = cross_values.iter().sum::<f64>() / (a.nrows() as f64 * b.nrows() as f64);
    Ok(kaa + kbb - 2.0 * cross)
}

/// Squared MMD between a point mass at `h_beam` and the rows of `h`.
///
/// The point-mass within term is exactly `k(h, h)`; the stochastic side
/// follows `mode`.
pub fn mmd2_beam(h_beam: &[f64], h: &Matrix, spec: &KernelSpec, mode: EstimatorMode) -> Result<f64, MmdError> {
    if h_beam.len() != h.ncols() {
        return Err(KernelError::DimensionMismatch {
            left: h_beam.len(),
            right: h.ncols(),
        }
        .into());
    }
    spec.validate()?;
    check_count(mode, h.nrows())?;
    let self_term = spec.eval_unchecked(h_beam, h_beam);
    let within = within_term(&gram_block(h, h, spec)?, mode);
    let mut cross = 0.0;
    for row in h.row_iter() {
        cross += spec.eval_unchecked(h_beam, row);
    }
    let m = h.nrows() as f64;
    Ok(self_term + within - 2.0 * cross / m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn identical_unit_vectors_unbiased_linear() {
        // term1 = 0, term2 = 0, cross = 1
        let a = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let v = mmd2(&a, &a, &KernelSpec::linear(), EstimatorMode::Unbiased).unwrap();
        assert_eq!(v, -1.0);
    }

    #[test]
    fn biased_linear_is_squared_mean_gap() {
        let a = m(&[&[0.0], &[2.0]]);
        let b = m(&[&[1.0], &[3.0]]);
        assert_eq!(mmd2(&a, &b, &KernelSpec::linear(), EstimatorMode::Biased).unwrap(), 1.0);
    }

    #[test]
    fn biased_identical_sets_vanish() {
        let a = m(&[&[0.3, 1.0], &[-2.0, 0.5], &[1.0, 1.0]]);
        for spec in [KernelSpec::linear(), KernelSpec::gaussian(0.8).unwrap()] {
            let v = mmd2(&a, &a, &spec, EstimatorMode::Biased).unwrap();
            assert!(v.abs() < 1e-15, "{v}");
        }
    }

    #[test]
    fn beam_point_mass_examples() {
        let lin = KernelSpec::linear();
        let same = m(&[&[1.0], &[1.0]]);
        assert_eq!(mmd2_beam(&[1.0], &same, &lin, EstimatorMode::Unbiased).unwrap(), 0.0);
        assert_eq!(mmd2_beam(&[1.0], &same, &lin, EstimatorMode::Biased).unwrap(), 0.0);
        let h = m(&[&[1.0], &[3.0]]);
        assert_eq!(mmd2_beam(&[0.0], &h, &lin, EstimatorMode::Biased).unwrap(), 4.0);
        assert_eq!(mmd2_beam(&[0.0], &h, &lin, EstimatorMode::Unbiased).unwrap(), 3.0);
    }

    #[test]
    fn sample_count_preconditions() {
        let one = m(&[&[1.0]]);
        let two = m(&[&[1.0], &[2.0]]);
        let lin = KernelSpec::linear();
        assert!(matches!(
            mmd2(&one, &two, &lin, EstimatorMode::Unbiased),
            Err(MmdError::InsufficientSamples { found: 1, .. })
        ));
        assert!(mmd2(&one, &two, &lin, EstimatorMode::Biased).is_ok());
        assert!(mmd2_beam(&[0.0], &one, &lin, EstimatorMode::Unbiased).is_err());
        assert!(mmd2_beam(&[0.0], &one, &lin, EstimatorMode::Biased).is_ok());
        assert!(matches!(
            mmd2_beam(&[0.0, 1.0], &two, &lin, EstimatorMode::Biased),
            Err(MmdError::Kernel(KernelError::DimensionMismatch { .. }))
        ));
    }

    #[test]
    fn exact_symmetry_in_arguments() {
        let a = m(&[&[0.1, 0.7], &[1.3, -0.2], &[0.5, 0.5]]);
        let b = m(&[&[2.0, 0.0], &[-0.4, 0.9]]);
        for mode in [EstimatorMode::Unbiased, EstimatorMode::Biased] {
            for spec in [KernelSpec::linear(), KernelSpec::gaussian(0.6).unwrap()] {
                assert_eq!(
                    mmd2(&a, &b, &spec, mode).unwrap(),
                    mmd2(&b, &a, &spec, mode).unwrap()
                );
            }
        }
    }
}
