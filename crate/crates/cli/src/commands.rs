use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use log::{info, warn};
use mmd_flagger::baselines::{
    apply_thresholds, default_similarity, mc_dsim, seq_logprob, threshold_from_scores, tng_delta, BaselineError,
    ScoreRecord, TngRule,
};
use mmd_flagger::dataio::{
    self, check_scope, read_baseline_scores, read_bundles, read_calibration, read_decisions, read_trajectories,
    write_baseline_scores, write_bundles, write_calibration, write_jsonl, write_trajectories, BaselineRow,
    CalibrationDoc, DecisionRecord,
};
use mmd_flagger::evaluation::{per_label_counts, roc_curve, score_detector, score_detector_grouped, EvalReport, ScoreDirection};
use mmd_flagger::flagger::{default_grid, FlaggerConfig};
use mmd_flagger::model::{is_hallucination, LabelDiagnostics, TokenSequence};
use mmd_flagger::synthetic::{generate, stability_study, ProfileKind, StabilityOptions, StabilityRow, SyntheticProfile, RNG_ALGORITHM};
use mmd_flagger::{calibrate, flag_all, AggregationMode, Calibration, CalibrationOptions, ExampleBundle, FlagRule, KernelFamily, LabelPolicy};
use serde::Serialize;

use crate::config::{Kernel, RunConfig};
use crate::output::{write_atomic, RecordError, RunMeta};
use crate::plot::render_svg;

/// Exit status reported when some records were rejected but outputs for the
/// rest were written.
pub const EXIT_RECORD_ERRORS: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Lfan,
    Halomi,
}

impl Policy {
    fn labels(self) -> LabelPolicy {
        match self {
            Policy::Lfan => LabelPolicy::lfan(),
            Policy::Halomi => LabelPolicy::halomi(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    SeqLogprob,
    McDsim,
    Tng,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::SeqLogprob => "seq-logprob",
            Method::McDsim => "mc-dsim",
            Method::Tng => "tng",
        }
    }

    fn direction(name: &str) -> Option<ScoreDirection> {
        match name {
            "seq-logprob" | "mc-dsim" => Some(ScoreDirection::LowFlags),
            "tng" => Some(ScoreDirection::HighFlags),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ProfileArgs {
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    /// Generations per temperature.
    #[arg(long, default_value_t = 25)]
    pub n_per_temp: usize,
    /// Comma-separated, strictly increasing.
    #[arg(long, value_delimiter = ',')]
    pub tau_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.05)]
    pub base_noise: f64,
    #[arg(long, default_value_t = 1.0)]
    pub offset_scale: f64,
    #[arg(long, default_value_t = 0.5)]
    pub offset_cutoff: f64,
    /// Random token counts in 1..=N per generation instead of one token.
    #[arg(long)]
    pub max_tokens: Option<usize>,
}

impl ProfileArgs {
    fn profile(&self, kind: ProfileKind, seed: u64) -> SyntheticProfile {
        SyntheticProfile {
            kind,
            dim: self.dim,
            n_per_temp: self.n_per_temp,
            tau_grid: self.tau_grid.clone().unwrap_or_else(default_grid),
            base_noise: self.base_noise,
            offset_scale: self.offset_scale,
            offset_cutoff: self.offset_cutoff,
            seed,
            max_tokens: self.max_tokens,
        }
    }
}

pub struct Ctx<'a> {
    pub out_dir: &'a Path,
    pub config: &'a RunConfig,
}

impl Ctx<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

/// Valid bundles plus one error entry per rejected line.
fn load_bundles(path: &Path) -> Result<(Vec<ExampleBundle>, Vec<RecordError>)> {
    let mut bundles = Vec::new();
    let mut errors = Vec::new();
    for item in read_bundles(open(path)?) {
        match item {
            Ok(b) => bundles.push(b),
            Err(e @ dataio::DataError::Io { .. }) => return Err(e).context(format!("reading {}", path.display())),
            Err(e) => {
                warn!("{}: {e}", path.display());
                errors.push(RecordError {
                    line: e.line(),
                    id: None,
                    message: e.to_string(),
                });
            }
        }
    }
    Ok((bundles, errors))
}

fn finish(meta: &RunMeta, out_dir: &Path) -> Result<u8> {
    meta.write(out_dir)?;
    Ok(if meta.record_errors.is_empty() { 0 } else { EXIT_RECORD_ERRORS })
}

fn json_value<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

pub fn calibrate_cmd(ctx: &Ctx, input: &Path, policy: Policy) -> Result<u8> {
    let cfg = ctx.config;
    let mut meta = RunMeta::new("calibrate", cfg);
    meta.input(input);
    let (bundles, errors) = load_bundles(input)?;
    meta.record_errors = errors;
    if bundles.len() < 2 {
        bail!("calibration needs at least 2 valid bundles, found {}", bundles.len());
    }
    let labels = policy.labels();
    let suspicious = bundles.iter().filter(|b| is_hallucination(&b.labels, &labels)).count();
    if suspicious > 0 {
        warn!("{suspicious} calibration bundles carry hallucination labels");
    }
    let opts = CalibrationOptions {
        family: cfg.kernel.into(),
        aggregation: cfg.aggregation.into(),
        percentile: cfg.percentile,
        scope: cfg.scope.into(),
        max_vectors: (cfg.max_vectors > 0).then_some(cfg.max_vectors),
    };
    let cal = calibrate(&bundles, &opts)?;
    let mut doc = CalibrationDoc::from_calibration(&cal);
    doc.meta = Some(json_value(cfg)?);
    let path = ctx.path("calibration.json");
    write_atomic(&path, |w| Ok(write_calibration(w, &doc)?))?;
    meta.outputs.push("calibration.json".into());
    meta.extra = Some(serde_json::json!({ "hallucination_labelled_bundles": suspicious, "label_policy": policy }));
    for g in &doc.groups {
        info!(
            "group {}: gamma {:?}, t_max {}, {} vectors",
            g.lang_pair.as_deref().unwrap_or("(global)"),
            g.gamma,
            g.t_max,
            g.sample_count
        );
    }
    finish(&meta, ctx.out_dir)
}

fn resolve_calibration(ctx: &Ctx, path: Option<&Path>) -> Result<Calibration> {
    let cfg = ctx.config;
    match path {
        Some(p) => {
            let (doc, cal) = read_calibration(open(p)?).with_context(|| format!("reading {}", p.display()))?;
            if let Some(k) = cfg.explicit.kernel {
                if KernelFamily::from(k) != doc.groups[0].family {
                    bail!("--kernel {k:?} conflicts with the {} calibration in {}", doc.groups[0].family.as_str(), p.display());
                }
            }
            if let Some(a) = cfg.explicit.aggregation {
                if AggregationMode::from(a) != doc.aggregation {
                    bail!("--aggregation {a:?} conflicts with the calibration in {}", p.display());
                }
            }
            Ok(cal)
        }
        None => {
            if cfg.kernel == Kernel::Gaussian || AggregationMode::from(cfg.aggregation) == AggregationMode::Concat {
                bail!("missing calibration: --calibration is required for the gaussian kernel or concat aggregation");
            }
            Ok(Calibration::uncalibrated_linear())
        }
    }
}

pub fn flag_cmd(ctx: &Ctx, input: &Path, calibration: Option<&Path>) -> Result<u8> {
    let cfg = ctx.config;
    let mut meta = RunMeta::new("flag", cfg);
    meta.input(input);
    if let Some(c) = calibration {
        meta.input(c);
    }
    let cal = resolve_calibration(ctx, calibration)?;
    let (bundles, errors) = load_bundles(input)?;
    meta.record_errors = errors;
    check_scope(&cal, &bundles)?;

    let rule = FlagRule::new(cfg.tau0).context("invalid --tau0")?;
    let flagger = FlaggerConfig {
        estimator: cfg.estimator.into(),
        rule,
        smoothing: cfg.smooth,
    };
    let mut decisions = Vec::with_capacity(bundles.len());
    let mut records = Vec::with_capacity(bundles.len());
    for (bundle, outcome) in bundles.iter().zip(flag_all(&bundles, &cal, &flagger)) {
        match outcome {
            Ok(o) => {
                let group = cal.group_for(bundle.lang_pair.as_deref()).expect("scope checked");
                meta.truncated_sequences += o.truncated;
                records.push(DecisionRecord::new(&o.decision, &group.kernel, &group.aggregation, flagger.estimator, o.truncated));
                decisions.push(o.decision);
            }
            Err(e) => {
                warn!("{e}");
                meta.record_errors.push(RecordError {
                    line: None,
                    id: Some(e.id.clone()),
                    message: e.to_string(),
                });
            }
        }
    }
    if meta.truncated_sequences > 0 {
        warn!("{} sequences longer than t_max were truncated", meta.truncated_sequences);
    }
    write_atomic(&ctx.path("decisions.jsonl"), |w| Ok(write_jsonl(w, &records)?))?;
    write_atomic(&ctx.path("trajectories.csv"), |w| Ok(write_trajectories(w, &decisions)?))?;
    meta.outputs = vec!["decisions.jsonl".into(), "trajectories.csv".into()];
    let flagged = records.iter().filter(|r| r.flagged).count();
    info!("flagged {flagged} of {}", records.len());
    meta.extra = Some(serde_json::json!({ "flagged": flagged, "decisions": records.len() }));
    finish(&meta, ctx.out_dir)
}

pub fn baseline_cmd(ctx: &Ctx, input: &Path, method: Method) -> Result<u8> {
    let cfg = ctx.config;
    let mut meta = RunMeta::new("baseline", cfg);
    meta.file_stem = format!("baseline-{}", method.name());
    meta.input(input);
    let (bundles, errors) = load_bundles(input)?;
    meta.record_errors = errors;

    let mut scores = Vec::with_capacity(bundles.len());
    for b in &bundles {
        let score: Result<f64, BaselineError> = match method {
            Method::SeqLogprob => seq_logprob(&b.beam.sequence),
            Method::McDsim => mc_dsim(&b.beam.sequence, b.mc_dropout.as_deref().unwrap_or(&[]), default_similarity),
            Method::Tng => Ok(tng_delta(&TokenSequence::from_whitespace(&b.source_text), &b.beam.sequence, TngRule::default().n) as f64),
        };
        match score {
            Ok(score) => scores.push(ScoreRecord {
                id: b.id.clone(),
                lang_pair: b.lang_pair.clone(),
                score,
            }),
            Err(e) => meta.record_errors.push(RecordError {
                line: None,
                id: Some(b.id.clone()),
                message: e.to_string(),
            }),
        }
    }

    let rows: Vec<BaselineRow> = match method {
        Method::Tng => {
            let rule = TngRule::default();
            scores
                .iter()
                .map(|s| BaselineRow {
                    id: s.id.clone(),
                    method: method.name().into(),
                    score: s.score,
                    threshold: rule.count_delta as f64,
                    flagged: s.score >= rule.count_delta as f64,
                })
                .collect()
        }
        _ if scores.is_empty() => Vec::new(),
        _ => {
            let thresholds = threshold_from_scores(&scores, cfg.threshold_percentile, cfg.scope.into())?;
            let applied = apply_thresholds(&scores, &thresholds)?;
            meta.extra = Some(serde_json::json!({ "thresholds": thresholds }));
            scores
                .iter()
                .zip(applied)
                .map(|(s, (threshold, flagged))| BaselineRow {
                    id: s.id.clone(),
                    method: method.name().into(),
                    score: s.score,
                    threshold,
                    flagged,
                })
                .collect()
        }
    };
    let name = format!("baseline-{}.csv", method.name());
    write_atomic(&ctx.path(&name), |w| Ok(write_baseline_scores(w, &rows)?))?;
    meta.outputs.push(name);
    finish(&meta, ctx.out_dir)
}

#[derive(Debug, Serialize)]
struct Report {
    detector: String,
    label_policy: Policy,
    overall: EvalReport,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    by_lang_pair: Vec<EvalReport>,
    labels: LabelDiagnostics,
    #[serde(skip_serializing_if = "Option::is_none")]
    roc_note: Option<String>,
}

pub fn evaluate_cmd(
    ctx: &Ctx,
    input: &Path,
    decisions: Option<&Path>,
    baseline: Option<&Path>,
    policy: Policy,
    by_lang_pair: bool,
) -> Result<u8> {
    let mut meta = RunMeta::new("evaluate", ctx.config);
    meta.input(input);
    let (bundles, errors) = load_bundles(input)?;
    meta.record_errors = errors;

    let (detector, flags, scores, direction) = match (decisions, baseline) {
        (Some(p), None) => {
            meta.input(p);
            let recs = read_decisions(open(p)?).with_context(|| format!("reading {}", p.display()))?;
            let flags: Vec<(String, bool)> = recs.iter().map(|r| (r.id.clone(), r.flagged)).collect();
            let scores: Vec<(String, f64)> = recs.iter().map(|r| (r.id.clone(), r.tau_min)).collect();
            ("mmd".to_string(), flags, scores, ScoreDirection::HighFlags)
        }
        (None, Some(p)) => {
            meta.input(p);
            let rows = read_baseline_scores(open(p)?).with_context(|| format!("reading {}", p.display()))?;
            let method = rows.first().map_or_else(|| "baseline".to_string(), |r| r.method.clone());
            let direction = Method::direction(&method).unwrap_or(ScoreDirection::LowFlags);
            let flags = rows.iter().map(|r| (r.id.clone(), r.flagged)).collect();
            let scores: Vec<(String, f64)> = rows.iter().map(|r| (r.id.clone(), r.score)).collect();
            (method, flags, scores, direction)
        }
        _ => bail!("pass exactly one of --decisions or --baseline"),
    };

    let labels = policy.labels();
    let mut diagnostics = LabelDiagnostics::default();
    let truth: Vec<(String, bool)> = bundles
        .iter()
        .map(|b| (b.id.clone(), diagnostics.classify(&b.labels, &labels)))
        .collect();
    for (label, n) in &diagnostics.unknown_labels {
        warn!("label {label:?} ({n} examples) is in neither label set and counts as negative");
    }
    let truth_labels: Vec<(String, Vec<String>)> = bundles.iter().map(|b| (b.id.clone(), b.labels.clone())).collect();

    let mut overall = score_detector(&flags, &truth)?;
    overall.per_label = per_label_counts(&flags, &truth_labels, &labels)?;
    let roc_note = match roc_curve(&scores, &truth, direction) {
        Ok((roc, auc)) => {
            overall.roc = Some(roc);
            overall.auc = Some(auc);
            None
        }
        Err(e) => Some(e.to_string()),
    };
    let by_lang_pair = if by_lang_pair {
        let groups: HashMap<String, String> = bundles
            .iter()
            .filter_map(|b| b.lang_pair.clone().map(|lp| (b.id.clone(), lp)))
            .collect();
        score_detector_grouped(&flags, &truth, &groups)?
    } else {
        Vec::new()
    };
    println!("{overall}");
    let report = Report {
        detector,
        label_policy: policy,
        overall,
        by_lang_pair,
        labels: diagnostics,
        roc_note,
    };
    write_atomic(&ctx.path("report.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &report)?;
        w.write_all(b"\n")?;
        Ok(())
    })?;
    meta.outputs.push("report.json".into());
    finish(&meta, ctx.out_dir)
}

pub fn synth_cmd(ctx: &Ctx, correct: usize, hallucination: usize, args: &ProfileArgs) -> Result<u8> {
    if correct + hallucination == 0 {
        bail!("nothing to generate: pass --correct and/or --hallucination");
    }
    let seed = ctx.config.seed;
    let mut meta = RunMeta::new("synth", ctx.config);
    meta.rng = Some(RNG_ALGORITHM);
    let mut bundles = Vec::with_capacity(correct + hallucination);
    for (kind, count) in [(ProfileKind::Correct, correct), (ProfileKind::Hallucination, hallucination)] {
        if count > 0 {
            bundles.extend(generate(&args.profile(kind, seed), count)?);
        }
    }
    write_atomic(&ctx.path("synthetic.jsonl"), |w| Ok(write_bundles(w, &bundles)?))?;
    meta.outputs.push("synthetic.jsonl".into());
    meta.extra = Some(serde_json::json!({
        "correct": correct,
        "hallucination": hallucination,
        "profile": args.profile(ProfileKind::Hallucination, seed),
    }));
    finish(&meta, ctx.out_dir)
}

#[derive(Debug, Clone, Args)]
pub struct StabilityArgs {
    #[arg(long, value_delimiter = ',', default_value = "10,25,50,100")]
    pub sample_sizes: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub repetitions: usize,
    /// Hallucination bundles per repetition.
    #[arg(long, default_value_t = 50)]
    pub bundles: usize,
    /// Correct bundles used to calibrate the bandwidth.
    #[arg(long, default_value_t = 10)]
    pub calibration_bundles: usize,
}

#[derive(Serialize)]
struct StabilityDoc<'a> {
    profile: SyntheticProfile,
    repetitions: usize,
    bundles: usize,
    rows: &'a [StabilityRow],
}

pub fn stability_cmd(ctx: &Ctx, study: &StabilityArgs, args: &ProfileArgs) -> Result<u8> {
    let cfg = ctx.config;
    let mut meta = RunMeta::new("stability", cfg);
    meta.rng = Some(RNG_ALGORITHM);
    let profile = args.profile(ProfileKind::Hallucination, cfg.seed);
    let opts = StabilityOptions {
        sample_sizes: study.sample_sizes.clone(),
        repetitions: study.repetitions,
        bundles: study.bundles,
        calibration_bundles: study.calibration_bundles,
        calibration: CalibrationOptions {
            family: cfg.kernel.into(),
            aggregation: cfg.aggregation.into(),
            percentile: cfg.percentile,
            max_vectors: (cfg.max_vectors > 0).then_some(cfg.max_vectors),
            ..CalibrationOptions::default()
        },
        flagger: FlaggerConfig {
            estimator: cfg.estimator.into(),
            rule: FlagRule::new(cfg.tau0).context("invalid --tau0")?,
            smoothing: cfg.smooth,
        },
    };
    let rows = stability_study(&profile, &opts)?;
    println!("{:>6} {:>12} {:>14} {:>16}", "N", "mean_recall", "recall_var", "trajectory_var");
    for r in &rows {
        let mark = if r.degenerate { "*" } else { "" };
        println!("{:>6} {:>12.4} {:>13.6e}{mark:1} {:>16.6e}", r.n, r.mean_recall, r.recall_variance, r.mean_trajectory_variance);
    }
    let doc = StabilityDoc {
        profile,
        repetitions: study.repetitions,
        bundles: study.bundles,
        rows: &rows,
    };
    write_atomic(&ctx.path("stability.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &doc)?;
        w.write_all(b"\n")?;
        Ok(())
    })?;
    meta.outputs.push("stability.json".into());
    finish(&meta, ctx.out_dir)
}

pub fn plot_cmd(ctx: &Ctx, input: &Path) -> Result<u8> {
    let mut meta = RunMeta::new("plot", ctx.config);
    meta.input(input);
    let rows = read_trajectories(open(input)?).with_context(|| format!("reading {}", input.display()))?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("trajectories");
    let name = format!("{stem}.svg");
    let svg = render_svg(&rows);
    write_atomic(&ctx.path(&name), |w| Ok(w.write_all(svg.as_bytes())?))?;
    meta.outputs.push(name);
    finish(&meta, ctx.out_dir)
}
