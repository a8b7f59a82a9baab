//! Comparison detectors: mean token log-probability, Monte-Carlo dropout
//! similarity, top n-gram count, and percentile thresholding of scores.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::TokenSequence;
use crate::stats::percentile;

pub const DEFAULT_THRESHOLD_PERCENTILE: f64 = 40.0;
/// Recall weight of the unigram F-mean.
pub const METEOR_ALPHA: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BaselineError {
    #[error("beam output carries no token log-probabilities")]
    MissingLogprobs,
    #[error("empty Monte-Carlo dropout set")]
    EmptyMcSet,
    #[error("threshold percentile must lie in (0, 100), got {0}")]
    InvalidPercentile(f64),
    #[error("no scores to threshold in group {0:?}")]
    EmptyGroup(Option<String>),
    #[error("per-language-pair thresholds need a lang_pair on record {0}")]
    MissingLangPair(String),
}

pub fn seq_logprob(beam: &TokenSequence) -> Result<f64, BaselineError> {
    let lp = beam.token_logprobs.as_ref().ok_or(BaselineError::MissingLogprobs)?;
    if lp.is_empty() {
        return Err(BaselineError::MissingLogprobs);
    }
    Ok(lp.iter().sum::<f64>() / lp.len() as f64)
}

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut map = HashMap::new();
    for t in tokens {
        *map.entry(t.as_str()).or_insert(0) += 1;
    }
    map
}

/// Unigram F-mean with recall weight `alpha`, treating `reference` as the
/// reference and `hypothesis` as the candidate. Matches are clipped
/// multiset intersections; there is no stemming, synonymy or fragmentation
/// penalty.
pub fn unigram_f_mean(reference: &TokenSequence, hypothesis: &TokenSequence, alpha: f64) -> f64 {
    if reference.is_empty() || hypothesis.is_empty() {
        return 0.0;
    }
    let ref_counts = counts(&reference.tokens);
    let hyp_counts = counts(&hypothesis.tokens);
    let matches: usize = hyp_counts
        .iter()
        .map(|(tok, &c)| c.min(ref_counts.get(tok).copied().unwrap_or(0)))
        .sum();
    if matches == 0 {
        return 0.0;
    }
    let m = matches as f64;
    let precision = m / hypothesis.len() as f64;
    let recall = m / reference.len() as f64;
    precision * recall / (alpha * precision + (1.0 - alpha) * recall)
}

pub fn default_similarity(beam: &TokenSequence, sample: &TokenSequence) -> f64 {
    unigram_f_mean(beam, sample, METEOR_ALPHA)
}

/// Mean similarity between the beam output and each dropout generation.
pub fn mc_dsim<F>(beam: &TokenSequence, mc: &[TokenSequence], sim: F) -> Result<f64, BaselineError>
where
    F: Fn(&TokenSequence, &TokenSequence) -> f64,
{
    if mc.is_empty() {
        return Err(BaselineError::EmptyMcSet);
    }
    Ok(mc.iter().map(|s| sim(beam, s)).sum::<f64>() / mc.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TngRule {
    pub n: usize,
    pub count_delta: usize,
}

impl Default for TngRule {
    fn default() -> Self {
        Self { n: 4, count_delta: 2 }
    }
}

/// Count of the most frequent token n-gram; 0 when the sequence is shorter
/// than `n`.
pub fn top_ngram_count(tokens: &[String], n: usize) -> usize {
    if n == 0 || tokens.len() < n {
        return 0;
    }
    let mut map: HashMap<&[String], usize> = HashMap::new();
    for w in tokens.windows(n) {
        *map.entry(w).or_insert(0) += 1;
    }
    map.into_values().max().unwrap_or(0)
}

/// Difference between the translation's and the source's top n-gram counts.
pub fn tng_delta(source: &TokenSequence, translation: &TokenSequence, n: usize) -> i64 {
    top_ngram_count(&translation.tokens, n) as i64 - top_ngram_count(&source.tokens, n) as i64
}

pub fn tng_flag(source: &TokenSequence, translation: &TokenSequence, rule: &TngRule) -> bool {
    tng_delta(source, translation, rule.n) >= rule.count_delta as i64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdScope {
    Global,
    PerLangPair,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub id: String,
    pub lang_pair: Option<String>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreThreshold {
    pub percentile: f64,
    pub value: f64,
    pub scope: ThresholdScope,
    /// Language pair of the group; `None` for the global threshold.
    pub group: Option<String>,
}

impl ScoreThreshold {
    /// Low scores signal hallucination: flag strictly below the threshold.
    pub fn flags(&self, score: f64) -> bool {
        score < self.value
    }
}

/// One threshold per scope group at the given percentile of that group's
/// scores (linear interpolation), sorted by group.
pub fn threshold_from_scores(
    scores: &[ScoreRecord],
    pct: f64,
    scope: ThresholdScope,
) -> Result<Vec<ScoreThreshold>, BaselineError> {
    if !(pct > 0.0 && pct < 100.0) {
        return Err(BaselineError::InvalidPercentile(pct));
    }
    let mut groups: BTreeMap<Option<String>, Vec<f64>> = BTreeMap::new();
    for r in scores {
        let key = match scope {
            ThresholdScope::Global => None,
            ThresholdScope::PerLangPair => Some(
                r.lang_pair
                    .clone()
                    .ok_or_else(|| BaselineError::MissingLangPair(r.id.clone()))?,
            ),
        };
        groups.entry(key).or_default().push(r.score);
    }
    if groups.is_empty() {
        return Err(BaselineError::EmptyGroup(None));
    }
    Ok(groups
        .into_iter()
        .map(|(group, values)| ScoreThreshold {
            percentile: pct,
            value: percentile(&values, pct),
            scope,
            group,
        })
        .collect())
}

/// `(threshold, flagged)` for every record, in input order.
pub fn apply_thresholds(
    scores: &[ScoreRecord],
    thresholds: &[ScoreThreshold],
) -> Result<Vec<(f64, bool)>, BaselineError> {
    scores
        .iter()
        .map(|r| {
            let t = thresholds
                .iter()
                .find(|t| match t.scope {
                    ThresholdScope::Global => true,
                    ThresholdScope::PerLangPair => t.group == r.lang_pair,
                })
                .ok_or_else(|| BaselineError::EmptyGroup(r.lang_pair.clone()))?;
            Ok((t.value, t.flags(r.score)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(text: &str) -> TokenSequence {
        TokenSequence::from_whitespace(text)
    }

    fn records(values: &[f64]) -> Vec<ScoreRecord> {
        values
            .iter()
            .enumerate()
            .map(|(i, &score)| ScoreRecord {
                id: format!("r{i}"),
                lang_pair: None,
                score,
            })
            .collect()
    }

    #[test]
    fn seq_logprob_examples() {
        assert_eq!(seq_logprob(&seq("a b c").with_logprobs(vec![0.0, 0.0, 0.0])).unwrap(), 0.0);
        assert_eq!(seq_logprob(&seq("a b c").with_logprobs(vec![-1.0, -2.0, -3.0])).unwrap(), -2.0);
        assert_eq!(seq_logprob(&seq("a").with_logprobs(vec![-0.5])).unwrap(), -0.5);
        assert_eq!(seq_logprob(&seq("a")), Err(BaselineError::MissingLogprobs));
    }

    #[test]
    fn mc_dsim_examples() {
        let beam = seq("the cat sat");
        let same = vec![seq("the cat sat"); 3];
        assert_eq!(mc_dsim(&beam, &same, default_similarity).unwrap(), 1.0);
        let disjoint = vec![seq("dog ran far"), seq("x y")];
        assert_eq!(mc_dsim(&beam, &disjoint, default_similarity).unwrap(), 0.0);
        // P = R = 2/3 so the weighted harmonic mean is 2/3
        let v = mc_dsim(&beam, &[seq("the cat ran")], default_similarity).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(mc_dsim(&beam, &[], default_similarity), Err(BaselineError::EmptyMcSet));
    }

    #[test]
    fn f_mean_weights_recall() {
        // ref 4 tokens, hyp 2 tokens, 2 matches: P = 1, R = 0.5
        let v = unigram_f_mean(&seq("a b c d"), &seq("a b"), 0.9);
        assert!((v - 0.5 / (0.9 + 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn tng_examples() {
        let rule = TngRule::default();
        let osc = seq("x y x y x y x y x y");
        assert_eq!(top_ngram_count(&osc.tokens, 4), 4);
        let src = seq("a b c d e f g h");
        assert_eq!(top_ngram_count(&src.tokens, 4), 1);
        assert_eq!(tng_delta(&src, &osc, 4), 3);
        assert!(tng_flag(&src, &osc, &rule));
        assert!(!tng_flag(&src, &src, &rule));
        assert!(!tng_flag(&src, &seq("p q r"), &rule));
        assert_eq!(top_ngram_count(&seq("p q r").tokens, 4), 0);
    }

    #[test]
    fn forty_percent_threshold_on_one_to_ten() {
        let recs = records(&(1..=10).map(f64::from).collect::<Vec<_>>());
        let t = threshold_from_scores(&recs, 40.0, ThresholdScope::Global).unwrap();
        assert_eq!(t.len(), 1);
        assert!((t[0].value - 4.6).abs() < 1e-12);
        let flagged: Vec<f64> = apply_thresholds(&recs, &t)
            .unwrap()
            .iter()
            .zip(&recs)
            .filter(|((_, f), _)| *f)
            .map(|(_, r)| r.score)
            .collect();
        assert_eq!(flagged, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn single_score_group_flags_nothing() {
        let recs = records(&[0.3]);
        let t = threshold_from_scores(&recs, 40.0, ThresholdScope::Global).unwrap();
        assert_eq!(t[0].value, 0.3);
        assert!(!apply_thresholds(&recs, &t).unwrap()[0].1);
    }

    #[test]
    fn per_lang_pair_thresholds_are_independent() {
        let mut recs = Vec::new();
        for i in 1..=5 {
            recs.push(ScoreRecord {
                id: format!("a{i}"),
                lang_pair: Some("de-en".into()),
                score: f64::from(i),
            });
            recs.push(ScoreRecord {
                id: format!("b{i}"),
                lang_pair: Some("fr-en".into()),
                score: 100.0 + f64::from(i),
            });
        }
        let per = threshold_from_scores(&recs, 40.0, ThresholdScope::PerLangPair).unwrap();
        // group oracle: rank 0.4 * 4 = 1.6 -> 2.6 and 102.6
        assert_eq!(per.len(), 2);
        assert_eq!(per[0].group.as_deref(), Some("de-en"));
        assert!((per[0].value - 2.6).abs() < 1e-12);
        assert!((per[1].value - 102.6).abs() < 1e-12);
        let per_flags = apply_thresholds(&recs, &per).unwrap();
        assert_eq!(per_flags.iter().filter(|(_, f)| *f).count(), 4);

        // pooled: 10 values, rank 3.6 between 4 and 5 -> only de-en flagged
        let global = threshold_from_scores(&recs, 40.0, ThresholdScope::Global).unwrap();
        assert!((global[0].value - 4.6).abs() < 1e-12);
        let g_flags = apply_thresholds(&recs, &global).unwrap();
        let flagged_ids: Vec<&str> = recs
            .iter()
            .zip(&g_flags)
            .filter(|(_, (_, f))| *f)
            .map(|(r, _)| r.id.as_str())
            .collect();
        assert_eq!(flagged_ids, vec!["a1", "a2", "a3", "a4"]);

        let mut missing = recs.clone();
        missing[0].lang_pair = None;
        assert!(matches!(
            threshold_from_scores(&missing, 40.0, ThresholdScope::PerLangPair),
            Err(BaselineError::MissingLangPair(_))
        ));
        assert!(threshold_from_scores(&[], 40.0, ThresholdScope::Global).is_err());
    }

    fn token_seq() -> impl Strategy<Value = Vec<String>> {
        proptest::collection::vec(0u8..4, 1..14).prop_map(|v| v.into_iter().map(|t| format!("w{t}")).collect())
    }

    proptest! {
        #[test]
        fn seq_logprob_is_order_free_and_nonpositive(lp in proptest::collection::vec(-20.0..=0.0f64, 1..12)) {
            let s = TokenSequence::new((0..lp.len()).map(|i| format!("t{i}"))).with_logprobs(lp.clone());
            let mut rev = lp.clone();
            rev.reverse();
            let r = TokenSequence::new((0..lp.len()).map(|i| format!("t{i}"))).with_logprobs(rev);
            let (a, b) = (seq_logprob(&s).unwrap(), seq_logprob(&r).unwrap());
            prop_assert!(a <= 0.0);
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }

        #[test]
        fn mc_dsim_bounded(beam in token_seq(), samples in proptest::collection::vec(token_seq(), 1..5)) {
            let beam = TokenSequence::new(beam);
            let mc: Vec<TokenSequence> = samples.into_iter().map(TokenSequence::new).collect();
            let v = mc_dsim(&beam, &mc, default_similarity).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            // 1 exactly when every sample has the beam's token multiset
            let bag = |s: &TokenSequence| { let mut t = s.tokens.clone(); t.sort(); t };
            let all_same = mc.iter().all(|s| bag(s) == bag(&beam));
            prop_assert_eq!(v == 1.0 || (v - 1.0).abs() < 1e-12, all_same);
        }

        #[test]
        fn tng_invariant_under_token_relabeling(src in token_seq(), tr in token_seq(), shift in 1u8..4) {
            let relabel = |v: &[String]| -> Vec<String> {
                v.iter().map(|t| {
                    let k: u8 = t[1..].parse().unwrap();
                    format!("z{}", (k + shift) % 4)
                }).collect()
            };
            let rule = TngRule::default();
            let (s, t) = (TokenSequence::new(src.clone()), TokenSequence::new(tr.clone()));
            let (s2, t2) = (TokenSequence::new(relabel(&src)), TokenSequence::new(relabel(&tr)));
            prop_assert_eq!(tng_delta(&s, &t, 4), tng_delta(&s2, &t2, 4));
            prop_assert_eq!(tng_flag(&s, &t, &rule), tng_flag(&s2, &t2, &rule));
        }

        #[test]
        fn distinct_scores_flag_ceil_of_rank(n in 2usize..60, pct in 1.0..99.0f64) {
            let recs = records(&(0..n).map(|i| i as f64 * 1.5 - 7.0).collect::<Vec<_>>());
            let t = threshold_from_scores(&recs, pct, ThresholdScope::Global).unwrap();
            let flagged = apply_thresholds(&recs, &t).unwrap().iter().filter(|(_, f)| *f).count();
            let rank = pct / 100.0 * (n - 1) as f64;
            prop_assert_eq!(flagged, rank.ceil() as usize);
        }
    }
}
