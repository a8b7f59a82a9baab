//! Shared domain types: token sequences, embedding matrices, temperature
//! blocks, example bundles and the label policy that maps raw dataset labels
//! onto the binary hallucination ground truth.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

/// Dense row-major matrix of `f64`. Rows are the unit of meaning everywhere
/// in this crate (one token, or one aggregated generation).
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ShapeError {
    #[error("row {row} has {found} columns, expected {expected}")]
    Ragged {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("buffer holds {found} values, expected {rows}x{cols}")]
    BufferSize {
        rows: usize,
        cols: usize,
        found: usize,
    },
}

impl Matrix {
    pub fn from_flat(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, ShapeError> {
        if data.len() != rows * cols {
            return Err(ShapeError::BufferSize {
                rows,
                cols,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. An empty slice gives a `0 x 0` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, ShapeError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(ShapeError::Ragged {
                    row: i,
                    expected: cols,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row_iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact panics on a zero chunk size
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.row_iter().map(<[f64]>::to_vec).collect()
    }
}

/// Token strings of one generated output, with optional natural-log
/// probabilities (one per token).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub token_logprobs: Option<Vec<f64>>,
}

impl TokenSequence {
    pub fn new<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Self {
        Self {
            tokens: tokens.into_iter().map(Into::into).collect(),
            token_logprobs: None,
        }
    }

    /// Whitespace tokenization of a plain string.
    pub fn from_whitespace(text: &str) -> Self {
        Self::new(text.split_whitespace())
    }

    pub fn with_logprobs(mut self, logprobs: Vec<f64>) -> Self {
        self.token_logprobs = Some(logprobs);
        self
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Per-token vectors of one generation, tagged with the layer they were taken
/// from (0 = word embeddings, k >= 1 = decoder layer k).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub vectors: Matrix,
    pub layer: u32,
}

impl EmbeddingMatrix {
    pub fn new(vectors: Matrix, layer: u32) -> Self {
        Self { vectors, layer }
    }

    pub fn token_count(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub sequence: TokenSequence,
    pub embedding: EmbeddingMatrix,
}

/// The stochastic generations sampled at one temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureBlock {
    pub temperature: f64,
    pub generations: Vec<Generation>,
}

/// One source input together with everything the detectors need.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleBundle {
    pub id: String,
    pub lang_pair: Option<String>,
    pub labels: Vec<String>,
    pub source_text: String,
    pub reference_text: Option<String>,
    pub beam: Generation,
    pub blocks: Vec<TemperatureBlock>,
    pub mc_dropout: Option<Vec<TokenSequence>>,
}

impl ExampleBundle {
    pub fn dim(&self) -> usize {
        self.beam.embedding.dim()
    }

    pub fn temperatures(&self) -> impl Iterator<Item = f64> + '_ {
        self.blocks.iter().map(|b| b.temperature)
    }

    /// Beam output followed by every stochastic generation in block order.
    pub fn all_generations(&self) -> impl Iterator<Item = &Generation> + '_ {
        std::iter::once(&self.beam).chain(self.blocks.iter().flat_map(|b| b.generations.iter()))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValidationError {
    #[error("bundle id must be non-empty")]
    EmptyId,
    #[error("{id}: {field}: dimension mismatch (expected {expected}, found {found})")]
    DimensionMismatch {
        id: String,
        field: String,
        expected: usize,
        found: usize,
    },
    #[error("{id}: {field}: embedding dimension must be positive")]
    ZeroDimension { id: String, field: String },
    #[error("{id}: {field}: empty generation set")]
    EmptyGenerationSet { id: String, field: String },
    #[error("{id}: {field}: temperature {found} does not exceed previous {previous}")]
    NonMonotoneTemperatures {
        id: String,
        field: String,
        previous: f64,
        found: f64,
    },
    #[error("{id}: {field}: duplicate temperature {temperature}")]
    DuplicateTemperature {
        id: String,
        field: String,
        temperature: f64,
    },
    #[error("{id}: {field}: temperature must be positive and finite, got {value}")]
    InvalidTemperature { id: String, field: String, value: f64 },
    #[error("{id}: {field}: token list is empty")]
    EmptyTokens { id: String, field: String },
    #[error("{id}: {field}: {found} log-probabilities for {expected} tokens")]
    LogprobLength {
        id: String,
        field: String,
        expected: usize,
        found: usize,
    },
    #[error("{id}: {field}: log-probability {value} at token {index} is positive or not finite")]
    InvalidLogprob {
        id: String,
        field: String,
        index: usize,
        value: f64,
    },
    #[error("{id}: {field}: {rows} vector rows for {tokens} tokens")]
    RowCountMismatch {
        id: String,
        field: String,
        tokens: usize,
        rows: usize,
    },
    #[error("{id}: {field}: layer {found} differs from beam layer {expected}")]
    LayerMismatch {
        id: String,
        field: String,
        expected: u32,
        found: u32,
    },
    #[error("{id}: {field}: non-finite embedding value")]
    NonFiniteValue { id: String, field: String },
    #[error("{id}: bundle has no temperature blocks")]
    NoBlocks { id: String },
}

impl ValidationError {
    /// The offending field path, when the error is tied to one.
    pub fn field(&self) -> Option<&str> {
        use ValidationError::*;
        match self {
            EmptyId | NoBlocks { .. } => None,
            DimensionMismatch { field, .. }
            | ZeroDimension { field, .. }
            | EmptyGenerationSet { field, .. }
            | NonMonotoneTemperatures { field, .. }
            | DuplicateTemperature { field, .. }
            | InvalidTemperature { field, .. }
            | EmptyTokens { field, .. }
            | LogprobLength { field, .. }
            | InvalidLogprob { field, .. }
            | RowCountMismatch { field, .. }
            | LayerMismatch { field, .. }
            | NonFiniteValue { field, .. } => Some(field),
        }
    }
}

fn check_sequence(id: &str, field: &str, seq: &TokenSequence) -> Result<(), ValidationError> {
    if seq.tokens.is_empty() {
        return Err(ValidationError::EmptyTokens {
            id: id.to_owned(),
            field: format!("{field}.tokens"),
        });
    }
    if let Some(lp) = &seq.token_logprobs {
        if lp.len() != seq.tokens.len() {
            return Err(ValidationError::LogprobLength {
                id: id.to_owned(),
                field: format!("{field}.token_logprobs"),
                expected: seq.tokens.len(),
                found: lp.len(),
            });
        }
        if let Some((index, &value)) = lp.iter().enumerate().find(|(_, v)| !(**v <= 0.0)) {
            return Err(ValidationError::InvalidLogprob {
                id: id.to_owned(),
                field: format!("{field}.token_logprobs"),
                index,
                value,
            });
        }
    }
    Ok(())
}

fn check_generation(
    id: &str,
    field: &str,
    gen: &Generation,
    dim: usize,
    layer: u32,
) -> Result<(), ValidationError> {
    check_sequence(id, field, &gen.sequence)?;
    let emb = &gen.embedding;
    if emb.dim() == 0 {
        return Err(ValidationError::ZeroDimension {
            id: id.to_owned(),
            field: format!("{field}.vectors"),
        });
    }
    if emb.dim() != dim {
        return Err(ValidationError::DimensionMismatch {
            id: id.to_owned(),
            field: format!("{field}.vectors"),
            expected: dim,
            found: emb.dim(),
        });
    }
    if emb.layer != layer {
        return Err(ValidationError::LayerMismatch {
            id: id.to_owned(),
            field: format!("{field}.layer"),
            expected: layer,
            found: emb.layer,
        });
    }
    if emb.token_count() != gen.sequence.len() {
        return Err(ValidationError::RowCountMismatch {
            id: id.to_owned(),
            field: format!("{field}.vectors"),
            tokens: gen.sequence.len(),
            rows: emb.token_count(),
        });
    }
    if emb.vectors.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(ValidationError::NonFiniteValue {
            id: id.to_owned(),
            field: format!("{field}.vectors"),
        });
    }
    Ok(())
}

/// Checks every structural invariant of a bundle and hands it back unchanged.
///
/// Dataset-level uniqueness of ids is checked by the reader, not here.
pub fn validate_bundle(bundle: ExampleBundle) -> Result<ExampleBundle, ValidationError> {
    let id = bundle.id.as_str();
    if id.is_empty() {
        return Err(ValidationError::EmptyId);
    }
    let dim = bundle.beam.embedding.dim();
    let layer = bundle.beam.embedding.layer;
    check_generation(id, "beam", &bundle.beam, dim, layer)?;

    if bundle.blocks.is_empty() {
        return Err(ValidationError::NoBlocks { id: id.to_owned() });
    }
    let mut previous: Option<f64> = None;
    for (b, block) in bundle.blocks.iter().enumerate() {
        let field = format!("blocks[{b}]");
        let t = block.temperature;
        if !(t > 0.0 && t.is_finite()) {
            return Err(ValidationError::InvalidTemperature {
                id: id.to_owned(),
                field: format!("{field}.temperature"),
                value: t,
            });
        }
        if let Some(prev) = previous {
            if t == prev {
                return Err(ValidationError::DuplicateTemperature {
                    id: id.to_owned(),
                    field: format!("{field}.temperature"),
                    temperature: t,
                });
            }
            if t < prev {
                return Err(ValidationError::NonMonotoneTemperatures {
                    id: id.to_owned(),
                    field: format!("{field}.temperature"),
                    previous: prev,
                    found: t,
                });
            }
        }
        previous = Some(t);
        if block.generations.is_empty() {
            return Err(ValidationError::EmptyGenerationSet {
                id: id.to_owned(),
                field: format!("{field}.generations"),
            });
        }
        for (g, gen) in block.generations.iter().enumerate() {
            check_generation(id, &format!("{field}.generations[{g}]"), gen, dim, layer)?;
        }
    }
    if let Some(mc) = &bundle.mc_dropout {
        for (i, seq) in mc.iter().enumerate() {
            check_sequence(id, &format!("mc_dropout[{i}]"), seq)?;
        }
    }
    Ok(bundle)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("labels {0:?} are listed as both hallucination and mt-error")]
pub struct OverlappingLabels(pub Vec<String>);

/// Maps raw dataset labels onto the binary hallucination ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelPolicy {
    hallucination: BTreeSet<String>,
    mt_error: BTreeSet<String>,
}

impl LabelPolicy {
    pub fn new<I, J, S, T>(hallucination: I, mt_error: J) -> Result<Self, OverlappingLabels>
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = T>,
        S: Into<String>,
        T: Into<String>,
    {
        let hallucination: BTreeSet<String> = hallucination.into_iter().map(Into::into).collect();
        let mt_error: BTreeSet<String> = mt_error.into_iter().map(Into::into).collect();
        let overlap: Vec<String> = hallucination.intersection(&mt_error).cloned().collect();
        if !overlap.is_empty() {
            return Err(OverlappingLabels(overlap));
        }
        Ok(Self {
            hallucination,
            mt_error,
        })
    }

    /// LFAN-HALL label names.
    pub fn lfan() -> Self {
        Self::new(
            ["error-repetitions", "error-strong", "error-full"],
            ["error-named-entities", "error-omission"],
        )
        .expect("disjoint")
    }

    /// Halomi severity labels.
    pub fn halomi() -> Self {
        Self::new(
            [
                "2 Small hallucination",
                "3 Partial hallucination",
                "4 Full hallucination",
            ],
            Vec::<String>::new(),
        )
        .expect("disjoint")
    }

    pub fn hallucination_labels(&self) -> &BTreeSet<String> {
        &self.hallucination
    }

    pub fn mt_error_labels(&self) -> &BTreeSet<String> {
        &self.mt_error
    }

    pub fn is_hallucination_label(&self, label: &str) -> bool {
        self.hallucination.contains(label)
    }

    pub fn is_known(&self, label: &str) -> bool {
        self.hallucination.contains(label) || self.mt_error.contains(label)
    }
}

impl Default for LabelPolicy {
    fn default() -> Self {
        Self::lfan()
    }
}

pub fn is_hallucination<S: AsRef<str>>(labels: &[S], policy: &LabelPolicy) -> bool {
    labels
        .iter()
        .any(|l| policy.is_hallucination_label(l.as_ref()))
}

/// Running tally of label oddities seen while unifying labels.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize)]
pub struct LabelDiagnostics {
    /// Labels outside both policy sets, with occurrence counts.
    pub unknown_labels: BTreeMap<String, usize>,
    /// Examples carrying both a hallucination and an mt-error label.
    pub mixed_examples: usize,
    pub examples: usize,
    pub positives: usize,
}

impl LabelDiagnostics {
    /// Classifies one example and records what was seen.
    pub fn classify<S: AsRef<str>>(&mut self, labels: &[S], policy: &LabelPolicy) -> bool {
        let mut hall = false;
        let mut mt = false;
        for label in labels {
            let label = label.as_ref();
            if policy.hallucination.contains(label) {
                hall = true;
            } else if policy.mt_error.contains(label) {
                mt = true;
            } else {
                *self.unknown_labels.entry(label.to_owned()).or_default() += 1;
            }
        }
        self.examples += 1;
        if hall {
            self.positives += 1;
        }
        if hall && mt {
            self.mixed_examples += 1;
        }
        hall
    }
}

impl fmt::Display for LabelDiagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} examples, {} positive, {} with both hallucination and mt-error labels",
            self.examples, self.positives, self.mixed_examples
        )?;
        if !self.unknown_labels.is_empty() {
            write!(f, ", unknown labels: {:?}", self.unknown_labels)?;
        }
        Ok(())
    }
}
