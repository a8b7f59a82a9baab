//! Turning a variable-length embedding matrix into one fixed-length vector.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EmbeddingMatrix, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    /// Arithmetic mean of the token vectors.
    Avg,
    /// Token vectors laid end to end, zero-padded to `t_max` tokens.
    Concat,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AggregationError {
    #[error("concat aggregation needs t_max >= 1")]
    MissingTMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregationSpec {
    pub mode: AggregationMode,
    /// Only meaningful for `Concat`.
    pub t_max: Option<usize>,
}

impl AggregationSpec {
    pub fn avg() -> Self {
        Self {
            mode: AggregationMode::Avg,
            t_max: None,
        }
    }

    pub fn concat(t_max: usize) -> Result<Self, AggregationError> {
        if t_max == 0 {
            return Err(AggregationError::MissingTMax);
        }
        Ok(Self {
            mode: AggregationMode::Concat,
            t_max: Some(t_max),
        })
    }

    pub fn validate(&self) -> Result<(), AggregationError> {
        match (self.mode, self.t_max) {
            (AggregationMode::Concat, None | Some(0)) => Err(AggregationError::MissingTMax),
            _ => Ok(()),
        }
    }

    /// Length of the aggregated vector for embeddings of dimension `dim`.
    pub fn output_dim(&self, dim: usize) -> usize {
        match self.mode {
            AggregationMode::Avg => dim,
            AggregationMode::Concat => self.t_max.unwrap_or(0) * dim,
        }
    }
}

/// Aggregated vector plus the original token count when concat had to cut
/// the matrix down to `t_max` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregated {
    pub vector: Vec<f64>,
    pub truncated_from: Option<usize>,
}

pub fn aggregate(m: &EmbeddingMatrix, spec: &AggregationSpec) -> Result<Aggregated, AggregationError> {
    aggregate_rows(&m.vectors, spec)
}

pub(crate) fn aggregate_rows(rows: &Matrix, spec: &AggregationSpec) -> Result<Aggregated, AggregationError> {
    spec.validate()?;
    let dim = rows.ncols();
    let t = rows.nrows();
    match spec.mode {
        AggregationMode::Avg => {
            let mut out = vec![0.0; dim];
            for row in rows.row_iter() {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            let n = t as f64;
            out.iter_mut().for_each(|o| *o /= n);
            Ok(Aggregated {
                vector: out,
                truncated_from: None,
            })
        }
        AggregationMode::Concat => {
            let t_max = spec.t_max.expect("validated");
            let kept = t.min(t_max);
            let mut out = Vec::with_capacity(t_max * dim);
            out.extend_from_slice(&rows.as_slice()[..kept * dim]);
            out.resize(t_max * dim, 0.0);
            Ok(Aggregated {
                vector: out,
                truncated_from: (t > t_max).then_some(t),
            })
        }
    }
}

/// Aggregates a list of embeddings into an `n x output_dim` matrix, returning
/// how many of them were truncated.
pub fn aggregate_all<'a, I>(items: I, spec: &AggregationSpec) -> Result<(Matrix, usize), AggregationError>
where
    I: IntoIterator<Item = &'a EmbeddingMatrix>,
{
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = 0;
    let mut truncated = 0;
    for m in items {
        let agg = aggregate(m, spec)?;
        cols = agg.vector.len();
        truncated += usize::from(agg.truncated_from.is_some());
        data.extend(agg.vector);
        rows += 1;
    }
    Ok((
        Matrix::from_flat(rows, cols, data).expect("uniform dimension"),
        truncated,
    ))
}
