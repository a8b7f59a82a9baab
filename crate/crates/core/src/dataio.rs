//! Wire formats: bundle JSONL, calibration documents, and the CSV / JSONL
//! result exports.
//!
//! Floats are written in Rust's shortest round-trip form, so every value read
//! back is bitwise identical to the one written.

use std::collections::HashSet;
use std::io::{self, BufRead, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{AggregationMode, AggregationSpec};
use crate::baselines::ThresholdScope;
use crate::flagger::FlagDecision;
use crate::kernels::{Calibration, CalibrationGroup, CalibrationInfo, CalibrationScope, KernelFamily, KernelSpec};
use crate::mmd::EstimatorMode;
use crate::model::{
    validate_bundle, EmbeddingMatrix, ExampleBundle, Generation, Matrix, ShapeError, TemperatureBlock, TokenSequence,
    ValidationError,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: read failed: {source}")]
    Io {
        line: u64,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: malformed JSON: {message}")]
    MalformedJson { line: u64, message: String },
    #[error("line {line}: {field}: {source}")]
    Shape {
        line: u64,
        field: String,
        #[source]
        source: ShapeError,
    },
    #[error("line {line}: invariant violation: {source}")]
    Invalid {
        line: u64,
        #[source]
        source: ValidationError,
    },
    #[error("line {line}: duplicate id {id}")]
    DuplicateId { line: u64, id: String },
    #[error("malformed document: {0}")]
    MalformedDoc(String),
    #[error("calibration scope mismatch: {0}")]
    ScopeMismatch(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Write(#[from] io::Error),
}

impl DataError {
    pub fn line(&self) -> Option<u64> {
        match self {
            DataError::Io { line, .. }
            | DataError::MalformedJson { line, .. }
            | DataError::Shape { line, .. }
            | DataError::Invalid { line, .. }
            | DataError::DuplicateId { line, .. } => Some(*line),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// bundle records

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamRecord {
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
    #[serde(default)]
    pub layer: u32,
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
    /// Defaults to the beam's layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<u32>,
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub temperature: f64,
    pub generations: Vec<GenerationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokensRecord {
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lang_pair: Option<String>,
    #[serde(default)]
    pub labels: Vec<String>,
    pub source_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_text: Option<String>,
    pub beam: BeamRecord,
    pub blocks: Vec<BlockRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_dropout: Option<Vec<TokensRecord>>,
}

fn to_matrix(rows: &[Vec<f64>], line: u64, field: String) -> Result<Matrix, DataError> {
    Matrix::from_rows(rows).map_err(|source| DataError::Shape { line, field, source })
}

impl BundleRecord {
    /// Converts and validates; `line` is attached to every error.
    pub fn into_bundle(self, line: u64) -> Result<ExampleBundle, DataError> {
        let layer = self.beam.layer;
        let beam = Generation {
            sequence: TokenSequence {
                tokens: self.beam.tokens,
                token_logprobs: self.beam.token_logprobs,
            },
            embedding: EmbeddingMatrix::new(to_matrix(&self.beam.vectors, line, "beam.vectors".into())?, layer),
        };
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (b, block) in self.blocks.into_iter().enumerate() {
            let mut generations = Vec::with_capacity(block.generations.len());
            for (g, gen) in block.generations.into_iter().enumerate() {
                let field = format!("blocks[{b}].generations[{g}].vectors");
                generations.push(Generation {
                    sequence: TokenSequence {
                        tokens: gen.tokens,
                        token_logprobs: gen.token_logprobs,
                    },
                    embedding: EmbeddingMatrix::new(to_matrix(&gen.vectors, line, field)?, gen.layer.unwrap_or(layer)),
                });
            }
            blocks.push(TemperatureBlock {
                temperature: block.temperature,
                generations,
            });
        }
        let bundle = ExampleBundle {
            id: self.id,
            lang_pair: self.lang_pair,
            labels: self.labels,
            source_text: self.source_text,
            reference_text: self.reference_text,
            beam,
            blocks,
            mc_dropout: self.mc_dropout.map(|mc| {
                mc.into_iter()
                    .map(|t| TokenSequence {
                        tokens: t.tokens,
                        token_logprobs: t.token_logprobs,
                    })
                    .collect()
            }),
        };
        validate_bundle(bundle).map_err(|source| DataError::Invalid { line, source })
    }

    pub fn from_bundle(b: &ExampleBundle) -> Self {
        Self {
            id: b.id.clone(),
            lang_pair: b.lang_pair.clone(),
            labels: b.labels.clone(),
            source_text: b.source_text.clone(),
            reference_text: b.reference_text.clone(),
            beam: BeamRecord {
                tokens: b.beam.sequence.tokens.clone(),
                token_logprobs: b.beam.sequence.token_logprobs.clone(),
                layer: b.beam.embedding.layer,
                vectors: b.beam.embedding.vectors.to_rows(),
            },
            blocks: b
                .blocks
                .iter()
                .map(|blk| BlockRecord {
                    temperature: blk.temperature,
                    generations: blk
                        .generations
                        .iter()
                        .map(|g| GenerationRecord {
                            tokens: g.sequence.tokens.clone(),
                            token_logprobs: g.sequence.token_logprobs.clone(),
                            layer: None,
                            vectors: g.embedding.vectors.to_rows(),
                        })
                        .collect(),
                })
                .collect(),
            mc_dropout: b.mc_dropout.as_ref().map(|mc| {
                mc.iter()
                    .map(|t| TokensRecord {
                        tokens: t.tokens.clone(),
                        token_logprobs: t.token_logprobs.clone(),
                    })
                    .collect()
            }),
        }
    }
}

/// Streaming reader over bundle JSONL. Holds one line in memory at a time
/// (plus the set of ids seen so far). Blank lines are skipped.
pub struct BundleReader<R> {
    input: R,
    line: u64,
    buf: String,
    seen: HashSet<String>,
}

impl<R: BufRead> BundleReader<R> {
    pub fn new(input: R) -> Self {
        Self {
            input,
            line: 0,
            buf: String::new(),
            seen: HashSet::new(),
        }
    }
}

impl<R: BufRead> Iterator for BundleReader<R> {
    type Item = Result<ExampleBundle, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            let read = self.input.read_line(&mut self.buf);
            self.line += 1;
            let line = self.line;
            match read {
                Err(source) => return Some(Err(DataError::Io { line, source })),
                Ok(0) => return None,
                Ok(_) => {}
            }
            let text = self.buf.trim();
            if text.is_empty() {
                continue;
            }
            let record: BundleRecord = match serde_json::from_str(text) {
                Ok(r) => r,
                Err(e) => {
                    return Some(Err(DataError::MalformedJson {
                        line,
                        message: e.to_string(),
                    }))
                }
            };
            if self.seen.contains(&record.id) {
                return Some(Err(DataError::DuplicateId { line, id: record.id }));
            }
            let result = record.into_bundle(line);
            if let Ok(b) = &result {
                self.seen.insert(b.id.clone());
            }
            return Some(result);
        }
    }
}

pub fn read_bundles<R: BufRead>(input: R) -> BundleReader<R> {
    BundleReader::new(input)
}

/// Reads every bundle, stopping at the first error.
pub fn read_all_bundles<R: BufRead>(input: R) -> Result<Vec<ExampleBundle>, DataError> {
    read_bundles(input).collect()
}

pub fn write_bundle<W: Write>(out: &mut W, bundle: &ExampleBundle) -> Result<(), DataError> {
    serde_json::to_writer(&mut *out, &BundleRecord::from_bundle(bundle)).map_err(io::Error::from)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn write_bundles<'a, W: Write>(out: &mut W, bundles: impl IntoIterator<Item = &'a ExampleBundle>) -> Result<(), DataError> {
    for b in bundles {
        write_bundle(out, b)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// trajectories

pub const TRAJECTORY_HEADER: [&str; 4] = ["id", "temperature", "mmd2", "smoothed"];

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Rows in decision order, then ascending temperature.
pub fn write_trajectories<W: Write>(out: W, decisions: &[FlagDecision]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRAJECTORY_HEADER)?;
    for d in decisions {
        for p in d.trajectory.points() {
            let smoothed = d
                .smoothed
                .as_ref()
                .and_then(|s| s.points().iter().find(|q| q.temperature == p.temperature))
                .map(|q| fmt_f64(q.mmd2))
                .unwrap_or_default();
            w.write_record([d.id.as_str(), &fmt_f64(p.temperature), &fmt_f64(p.mmd2), &smoothed])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub id: String,
    pub temperature: f64,
    pub mmd2: f64,
    pub smoothed: Option<f64>,
}

fn parse_f64(s: &str, what: &str) -> Result<f64, DataError> {
    s.trim()
        .parse()
        .map_err(|_| DataError::MalformedDoc(format!("{what}: cannot parse {s:?} as a number")))
}

pub fn read_trajectories<R: Read>(input: R) -> Result<Vec<TrajectoryRow>, DataError> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != TRAJECTORY_HEADER {
        return Err(DataError::MalformedDoc(format!("unexpected trajectory header {headers:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let smoothed = match rec.get(3).unwrap_or("") {
            "" => None,
            s => Some(parse_f64(s, "smoothed")?),
        };
        rows.push(TrajectoryRow {
            id: rec[0].to_owned(),
            temperature: parse_f64(&rec[1], "temperature")?,
            mmd2: parse_f64(&rec[2], "mmd2")?,
            smoothed,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// decisions

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub id: String,
    pub tau_min: f64,
    pub flagged: bool,
    pub tau0: f64,
    pub kernel: KernelFamily,
    #[serde(default)]
    pub gamma: Option<f64>,
    pub aggregation: AggregationMode,
    pub estimator_mode: EstimatorMode,
    #[serde(default)]
    pub smoothing_window: Option<usize>,
    #[serde(default)]
    pub truncated: usize,
}

impl DecisionRecord {
    pub fn new(d: &FlagDecision, kernel: &KernelSpec, agg: &AggregationSpec, mode: EstimatorMode, truncated: usize) -> Self {
        Self {
            id: d.id.clone(),
            tau_min: d.tau_min,
            flagged: d.flagged,
            tau0: d.rule.tau0,
            kernel: kernel.family,
            gamma: kernel.gamma,
            aggregation: agg.mode,
            estimator_mode: mode,
            smoothing_window: d.smoothed.as_ref().and_then(|s| s.smoothing()).map(|s| s.window),
            truncated,
        }
    }
}

pub fn write_jsonl<W: Write, T: Serialize>(mut out: W, items: &[T]) -> Result<(), DataError> {
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_decisions<R: BufRead>(input: R) -> Result<Vec<DecisionRecord>, DataError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i as u64 + 1;
        let line = line.map_err(|source| DataError::Io { line: line_no, source })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DataError::MalformedJson {
            line: line_no,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// baseline scores

pub const BASELINE_HEADER: [&str; 5] = ["id", "method", "score", "threshold", "flagged"];

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineRow {
    pub id: String,
    pub method: String,
    pub score: f64,
    pub threshold: f64,
    pub flagged: bool,
}

pub fn write_baseline_scores<W: Write>(out: W, rows: &[BaselineRow]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(BASELINE_HEADER)?;
    for r in rows {
        w.write_record([
            r.id.as_str(),
            r.method.as_str(),
            &fmt_f64(r.score),
            &fmt_f64(r.threshold),
            if r.flagged { "true" } else { "false" },
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_baseline_scores<R: Read>(input: R) -> Result<Vec<BaselineRow>, DataError> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != BASELINE_HEADER {
        return Err(DataError::MalformedDoc(format!("unexpected baseline header {headers:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let flagged = match &rec[4] {
            "true" => true,
            "false" => false,
            other => return Err(DataError::MalformedDoc(format!("flagged: {other:?} is not a boolean"))),
        };
        rows.push(BaselineRow {
            id: rec[0].to_owned(),
            method: rec[1].to_owned(),
            score: parse_f64(&rec[2], "score")?,
            threshold: parse_f64(&rec[3], "threshold")?,
            flagged,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// calibration documents

pub const CALIBRATION_VECTORS: &str = "beam and stochastic generations of every calibration bundle, all temperatures";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationGroupDoc {
    pub family: KernelFamily,
    pub gamma: Option<f64>,
    pub percentile: Option<f64>,
    pub t_max: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lang_pair: Option<String>,
    /// Vectors the pairwise distances were computed over.
    pub sample_count: usize,
    #[serde(default)]
    pub bundle_count: usize,
    #[serde(default = "euclidean")]
    pub distance_metric: String,
}

fn euclidean() -> String {
    "euclidean".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationDoc {
    pub scope: CalibrationScope,
    pub aggregation: AggregationMode,
    pub groups: Vec<CalibrationGroupDoc>,
    #[serde(default)]
    pub vectors: String,
    /// Effective configuration of the run that produced the document.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

impl CalibrationDoc {
    pub fn from_calibration(cal: &Calibration) -> Self {
        let aggregation = cal.groups.first().map_or(AggregationMode::Avg, |g| g.aggregation.mode);
        Self {
            scope: cal.scope,
            aggregation,
            groups: cal
                .groups
                .iter()
                .map(|g| CalibrationGroupDoc {
                    family: g.kernel.family,
                    gamma: g.kernel.gamma,
                    percentile: g.kernel.calibration.as_ref().map(|c| c.percentile),
                    t_max: g.aggregation.t_max.unwrap_or(0),
                    lang_pair: g.lang_pair.clone(),
                    sample_count: g.kernel.calibration.as_ref().map_or(0, |c| c.sample_count),
                    bundle_count: g.bundle_count,
                    distance_metric: euclidean(),
                })
                .collect(),
            vectors: CALIBRATION_VECTORS.into(),
            meta: None,
        }
    }

    pub fn to_calibration(&self) -> Result<Calibration, DataError> {
        let bad = |m: String| Err(DataError::MalformedDoc(m));
        if self.groups.is_empty() {
            return bad("calibration has no groups".into());
        }
        if self.scope == CalibrationScope::Global && self.groups.len() != 1 {
            return bad(format!("global calibration must have one group, found {}", self.groups.len()));
        }
        let mut groups = Vec::with_capacity(self.groups.len());
        let mut pairs = HashSet::new();
        for g in &self.groups {
            if self.scope == CalibrationScope::PerLangPair {
                match &g.lang_pair {
                    None => return bad("per_lang_pair group without lang_pair".into()),
                    Some(lp) if !pairs.insert(lp.clone()) => return bad(format!("duplicate group {lp}")),
                    _ => {}
                }
            }
            if g.t_max == 0 {
                return bad("t_max must be >= 1".into());
            }
            if let Some(p) = g.percentile {
                if !(p > 0.0 && p < 100.0) {
                    return bad(format!("percentile {p} outside (0, 100)"));
                }
            }
            let kernel = KernelSpec {
                family: g.family,
                gamma: g.gamma,
                calibration: g.percentile.map(|percentile| CalibrationInfo {
                    percentile,
                    sample_count: g.sample_count,
                    distance_metric: g.distance_metric.clone(),
                }),
            };
            if kernel.validate().is_err() {
                return bad(format!("gamma {:?} is not a positive bandwidth", g.gamma));
            }
            groups.push(CalibrationGroup {
                lang_pair: g.lang_pair.clone(),
                kernel,
                aggregation: AggregationSpec {
                    mode: self.aggregation,
                    t_max: Some(g.t_max),
                },
                bundle_count: g.bundle_count,
            });
        }
        Ok(Calibration {
            scope: self.scope,
            groups,
        })
    }
}

pub fn write_calibration<W: Write>(mut out: W, doc: &CalibrationDoc) -> Result<(), DataError> {
    serde_json::to_writer_pretty(&mut out, doc).map_err(io::Error::from)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn read_calibration<R: Read>(input: R) -> Result<(CalibrationDoc, Calibration), DataError> {
    let doc: CalibrationDoc = serde_json::from_reader(input).map_err(|e| DataError::MalformedDoc(e.to_string()))?;
    let cal = doc.to_calibration()?;
    Ok((doc, cal))
}

/// A per-language-pair calibration applies only when every bundle names a
/// calibrated pair.
pub fn check_scope(cal: &Calibration, bundles: &[ExampleBundle]) -> Result<(), DataError> {
    if cal.scope == CalibrationScope::Global {
        return Ok(());
    }
    for b in bundles {
        match b.lang_pair.as_deref() {
            None => {
                return Err(DataError::ScopeMismatch(format!(
                    "per_lang_pair calibration but bundle {} has no lang_pair",
                    b.id
                )))
            }
            Some(lp) if cal.group_for(Some(lp)).is_none() => {
                return Err(DataError::ScopeMismatch(format!("no calibration group for lang_pair {lp} (bundle {})", b.id)))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Maps a threshold scope to the matching calibration scope name.
pub fn scope_name(scope: ThresholdScope) -> &'static str {
    match scope {
        ThresholdScope::Global => "global",
        ThresholdScope::PerLangPair => "per_lang_pair",
    }
}
