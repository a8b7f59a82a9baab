//! Detector scoring: confusion counts, recall and precision, per-label
//! tallies, and ROC curves with trapezoidal AUC.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::LabelPolicy;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("id {0} appears in the decisions but not in the ground truth")]
    UnknownId(String),
    #[error("id {0} has ground truth but no decision")]
    MissingDecision(String),
    #[error("id {0} appears more than once")]
    DuplicateId(String),
    #[error("ROC needs at least one positive and one negative example")]
    SingleClass,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    /// Flagged examples bearing the label.
    pub tp: usize,
    /// Flagged examples carrying no hallucination label at all.
    pub fp: usize,
    /// Flagged examples not bearing this label.
    pub flagged_without_label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    pub recall: f64,
    pub precision: f64,
    /// Recall had no positives to measure and is reported as 1.0.
    pub recall_degenerate: bool,
    /// Nothing was flagged; precision is reported as 1.0.
    pub precision_degenerate: bool,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub per_label: BTreeMap<String, LabelCounts>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub roc: Option<Vec<RocPoint>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
}

impl EvalReport {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let (recall, recall_degenerate) = ratio(tp, tp + fn_);
        let (precision, precision_degenerate) = ratio(tp, tp + fp);
        Self {
            group: None,
            recall,
            precision,
            recall_degenerate,
            precision_degenerate,
            tp,
            fp,
            fn_,
            tn,
            per_label: BTreeMap::new(),
            roc: None,
            auc: None,
        }
    }
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (1.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mark = |d: bool| if d { "*" } else { "" };
        write!(
            f,
            "{:<14} recall {:.3}{} precision {:.3}{}  tp {} fp {} fn {} tn {}",
            self.group.as_deref().unwrap_or("all"),
            self.recall,
            mark(self.recall_degenerate),
            self.precision,
            mark(self.precision_degenerate),
            self.tp,
            self.fp,
            self.fn_,
            self.tn
        )?;
        if let Some(auc) = self.auc {
            write!(f, " auc {auc:.3}")?;
        }
        Ok(())
    }
}

/// Pairs each decision with its ground truth, requiring identical id sets.
fn join<'a, A: Copy, B: Copy>(
    left: &'a [(String, A)],
    right: &'a [(String, B)],
) -> Result<Vec<(&'a str, A, B)>, EvalError> {
    let mut truth: HashMap<&str, B> = HashMap::with_capacity(right.len());
    for (id, v) in right {
        if truth.insert(id.as_str(), *v).is_some() {
            return Err(EvalError::DuplicateId(id.clone()));
        }
    }
    let mut seen: HashMap<&str, ()> = HashMap::with_capacity(left.len());
    let mut out = Vec::with_capacity(left.len());
    for (id, a) in left {
        if seen.insert(id.as_str(), ()).is_some() {
            return Err(EvalError::DuplicateId(id.clone()));
        }
        let b = truth.get(id.as_str()).ok_or_else(|| EvalError::UnknownId(id.clone()))?;
        out.push((id.as_str(), *a, *b));
    }
    if let Some((id, _)) = right.iter().find(|(id, _)| !seen.contains_key(id.as_str())) {
        return Err(EvalError::MissingDecision(id.clone()));
    }
    Ok(out)
}

fn confusion(rows: impl Iterator<Item = (bool, bool)>) -> EvalReport {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (flagged, positive) in rows {
        match (flagged, positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    EvalReport::from_counts(tp, fp, fn_, tn)
}

pub fn score_detector(decisions: &[(String, bool)], truth: &[(String, bool)]) -> Result<EvalReport, EvalError> {
    let joined = join(decisions, truth)?;
    Ok(confusion(joined.into_iter().map(|(_, f, t)| (f, t))))
}

/// One report per group (sorted by group name); ids without a group entry
/// fall into an unnamed group.
pub fn score_detector_grouped(
    decisions: &[(String, bool)],
    truth: &[(String, bool)],
    groups: &HashMap<String, String>,
) -> Result<Vec<EvalReport>, EvalError> {
    let joined = join(decisions, truth)?;
    let mut buckets: BTreeMap<Option<&str>, Vec<(bool, bool)>> = BTreeMap::new();
    for (id, f, t) in joined {
        buckets
            .entry(groups.get(id).map(String::as_str))
            .or_default()
            .push((f, t));
    }
    Ok(buckets
        .into_iter()
        .map(|(g, rows)| {
            let mut r = confusion(rows.into_iter());
            r.group = g.map(str::to_owned);
            r
        })
        .collect())
}

/// "true positive / false positive" tallies per raw label.
pub fn per_label_counts(
    decisions: &[(String, bool)],
    truth_labels: &[(String, Vec<String>)],
    policy: &LabelPolicy,
) -> Result<BTreeMap<String, LabelCounts>, EvalError> {
    let indexed: Vec<(String, usize)> = truth_labels
        .iter()
        .enumerate()
        .map(|(i, (id, _))| (id.clone(), i))
        .collect();
    let joined = join(decisions, &indexed)?;

    let mut out: BTreeMap<String, LabelCounts> = BTreeMap::new();
    for (_, labels) in truth_labels {
        for l in labels {
            out.entry(l.clone()).or_default();
        }
    }
    let mut flagged_total = 0;
    let mut flagged_clean = 0;
    for (_, flagged, idx) in joined {
        if !flagged {
            continue;
        }
        flagged_total += 1;
        let labels = &truth_labels[idx].1;
        if !crate::model::is_hallucination(labels, policy) {
            flagged_clean += 1;
        }
        let mut distinct: Vec<&String> = labels.iter().collect();
        distinct.sort();
        distinct.dedup();
        for l in distinct {
            out.get_mut(l).expect("seeded above").tp += 1;
        }
    }
    for c in out.values_mut() {
        c.fp = flagged_clean;
        c.flagged_without_label = flagged_total - c.tp;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreDirection {
    /// Lower scores are more suspicious (Seq-Logprob, MC-Dsim).
    LowFlags,
    /// Higher scores are more suspicious.
    HighFlags,
}

/// Threshold-sweep ROC from (0, 0) to (1, 1), with tied scores entering
/// together, and its trapezoidal AUC.
pub fn roc_curve(
    scores: &[(String, f64)],
    truth: &[(String, bool)],
    direction: ScoreDirection,
) -> Result<(Vec<RocPoint>, f64), EvalError> {
    let joined = join(scores, truth)?;
    let pos = joined.iter().filter(|(_, _, t)| *t).count();
    let neg = joined.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut ranked: Vec<(f64, bool)> = joined
        .into_iter()
        .map(|(_, s, t)| {
            let strength = match direction {
                ScoreDirection::LowFlags => -s,
                ScoreDirection::HighFlags => s,
            };
            (strength, t)
        })
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < ranked.len() {
        let s = ranked[i].0;
        while i < ranked.len() && ranked[i].0 == s {
            if ranked[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum();
    Ok((points, auc))
}
