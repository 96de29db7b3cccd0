//! Per-question consensus: metric-weighted mean plus the unweighted-mean,
//! majority, and prior-mean baselines, and recovery scoring against a known
//! ground truth.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::metrics::MetricsReport;
use crate::model::{Dataset, LabelScale, Mode, QuestionId, Score, WorkerId};

/// Fractional parts within this distance of one half count as exact ties.
pub const TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AggregationError {
    #[error("no opinions to aggregate")]
    EmptyInput,
    #[error("worker {0} has a score but no weight, or a weight but no score")]
    KeyMismatch(WorkerId),
    #[error("weight for worker {0} is negative or not finite")]
    InvalidWeight(WorkerId),
    #[error("no ground truth for question {0}")]
    MissingTruth(QuestionId),
    #[error("no metrics for worker {worker} on question {question}")]
    MissingMetrics {
        question: QuestionId,
        worker: WorkerId,
    },
    #[error("method {method} is not available for {mode} datasets")]
    UnsupportedMethod { method: Method, mode: Mode },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Weighted,
    UnweightedMean,
    Majority,
    PriorMean,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Weighted,
        Method::UnweightedMean,
        Method::Majority,
        Method::PriorMean,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Weighted => "weighted",
            Method::UnweightedMean => "unweighted-mean",
            Method::Majority => "majority",
            Method::PriorMean => "prior-mean",
        }
    }

    /// Methods that make sense for a dataset of the given mode.
    pub fn for_mode(mode: Mode) -> &'static [Method] {
        match mode {
            Mode::TwoPhase => &Self::ALL,
            Mode::Sequential => &[Method::UnweightedMean, Method::Majority],
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method {s:?}"))
    }
}

/// Which metric feeds the weighted consensus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightSource {
    /// The worker's weight on this very question.
    #[default]
    PerQuestion,
    /// The worker's mean weight across all questions they answered.
    WorkerSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusResult {
    pub question_id: QuestionId,
    pub method: Method,
    pub aggregate_score: f64,
    pub final_score: Score,
    pub final_label: String,
    pub support: BTreeMap<WorkerId, f64>,
    /// Set when every weight was zero and uniform weights were used instead.
    pub uniform_fallback: bool,
}

/// Rounds an aggregate to the nearest scale score. Exact halves round away
/// from the scale midpoint; a half that sits on the midpoint rounds down.
pub fn round_to_scale(aggregate: f64, k: Score) -> Score {
    let floor = aggregate.floor();
    let frac = aggregate - floor;
    let rounded = if (frac - 0.5).abs() <= TIE_TOLERANCE {
        let midpoint = (k as f64 + 1.0) / 2.0;
        if aggregate > midpoint + TIE_TOLERANCE {
            floor + 1.0
        } else {
            floor
        }
    } else if frac > 0.5 {
        floor + 1.0
    } else {
        floor
    };
    (rounded as i64).clamp(1, k as i64) as Score
}

fn result(
    question_id: &QuestionId,
    method: Method,
    aggregate_score: f64,
    final_score: Score,
    support: BTreeMap<WorkerId, f64>,
    uniform_fallback: bool,
    scale: &LabelScale,
) -> ConsensusResult {
    ConsensusResult {
        question_id: question_id.clone(),
        method,
        aggregate_score,
        final_score,
        final_label: scale
            .decode(final_score)
            .expect("aggregate within scale")
            .to_owned(),
        support,
        uniform_fallback,
    }
}

fn uniform_support(scores: &BTreeMap<WorkerId, Score>) -> BTreeMap<WorkerId, f64> {
    scores.keys().map(|w| (w.clone(), 1.0)).collect()
}

fn plain_mean(scores: &BTreeMap<WorkerId, Score>) -> f64 {
    scores.values().map(|&s| s as f64).sum::<f64>() / scores.len() as f64
}

fn consensus_from_mean(
    question_id: &QuestionId,
    method: Method,
    scores: &BTreeMap<WorkerId, Score>,
    scale: &LabelScale,
) -> Result<ConsensusResult, AggregationError> {
    if scores.is_empty() {
        return Err(AggregationError::EmptyInput);
    }
    let aggregate = plain_mean(scores);
    Ok(result(
        question_id,
        method,
        aggregate,
        round_to_scale(aggregate, scale.k()),
        uniform_support(scores),
        false,
        scale,
    ))
}

pub fn unweighted_consensus(
    question_id: &QuestionId,
    posteriors: &BTreeMap<WorkerId, Score>,
    scale: &LabelScale,
) -> Result<ConsensusResult, AggregationError> {
    consensus_from_mean(question_id, Method::UnweightedMean, posteriors, scale)
}

pub fn prior_mean_consensus(
    question_id: &QuestionId,
    priors: &BTreeMap<WorkerId, Score>,
    scale: &LabelScale,
) -> Result<ConsensusResult, AggregationError> {
    consensus_from_mean(question_id, Method::PriorMean, priors, scale)
}

/// `Σ w·s / Σ w`. Equal positive weights take the plain-mean path so the
/// result coincides with [`unweighted_consensus`] bit for bit.
pub fn weighted_consensus(
    question_id: &QuestionId,
    posteriors: &BTreeMap<WorkerId, Score>,
    weights: &BTreeMap<WorkerId, f64>,
    scale: &LabelScale,
) -> Result<ConsensusResult, AggregationError> {
    if posteriors.is_empty() {
        return Err(AggregationError::EmptyInput);
    }
    for w in posteriors.keys() {
        if !weights.contains_key(w) {
            return Err(AggregationError::KeyMismatch(w.clone()));
        }
    }
    for (w, &v) in weights {
        if !posteriors.contains_key(w) {
            return Err(AggregationError::KeyMismatch(w.clone()));
        }
        if !(v >= 0.0 && v.is_finite()) {
            return Err(AggregationError::InvalidWeight(w.clone()));
        }
    }
    let total: f64 = weights.values().sum();
    let first = *weights.values().next().expect("non-empty");
    let (aggregate, fallback) = if total == 0.0 {
        (plain_mean(posteriors), true)
    } else if weights.values().all(|&v| v == first) {
        (plain_mean(posteriors), false)
    } else {
        let num: f64 = posteriors.iter().map(|(w, &s)| weights[w] * s as f64).sum();
        let lo = *posteriors.values().min().expect("non-empty") as f64;
        let hi = *posteriors.values().max().expect("non-empty") as f64;
        // a convex combination; clamp away rounding drift past the extremes
        ((num / total).clamp(lo, hi), false)
    };
    let support = if fallback {
        uniform_support(posteriors)
    } else {
        weights.clone()
    };
    Ok(result(
        question_id,
        Method::Weighted,
        aggregate,
        round_to_scale(aggregate, scale.k()),
        support,
        fallback,
        scale,
    ))
}

/// Modal score; ties go to the score closest to the mean, then the lower score.
pub fn majority_consensus(
    question_id: &QuestionId,
    posteriors: &BTreeMap<WorkerId, Score>,
    scale: &LabelScale,
) -> Result<ConsensusResult, AggregationError> {
    if posteriors.is_empty() {
        return Err(AggregationError::EmptyInput);
    }
    let mode = modal_score(posteriors.values().copied()).expect("non-empty");
    Ok(result(
        question_id,
        Method::Majority,
        mode as f64,
        mode,
        uniform_support(posteriors),
        false,
        scale,
    ))
}

/// Most frequent score, ties broken toward the mean and then the lower score.
pub fn modal_score(scores: impl IntoIterator<Item = Score>) -> Option<Score> {
    let mut counts: BTreeMap<Score, usize> = BTreeMap::new();
    let (mut sum, mut n) = (0.0, 0usize);
    for s in scores {
        *counts.entry(s).or_default() += 1;
        sum += s as f64;
        n += 1;
    }
    let mean = sum / n.max(1) as f64;
    let top = *counts.values().max()?;
    // BTreeMap iterates ascending, and min_by keeps the first of equal keys.
    counts
        .into_iter()
        .filter(|&(_, c)| c == top)
        .map(|(s, _)| s)
        .min_by(|a, b| {
            let da = (*a as f64 - mean).abs();
            let db = (*b as f64 - mean).abs();
            da.total_cmp(&db)
        })
}

/// Runs the requested methods over every question of a dataset.
///
/// Two-phase datasets aggregate posterior scores (priors for `PriorMean`);
/// sequential datasets aggregate disclosed scores and support only the
/// unweighted and majority methods. `Weighted` requires `metrics`.
pub fn aggregate_dataset(
    dataset: &Dataset,
    methods: &[Method],
    metrics: Option<&MetricsReport>,
    source: WeightSource,
) -> Result<Vec<ConsensusResult>, AggregationError> {
    let scale = dataset.scale();
    let mode = dataset.mode();
    for &m in methods {
        if !Method::for_mode(mode).contains(&m) || (m == Method::Weighted && metrics.is_none()) {
            return Err(AggregationError::UnsupportedMethod { method: m, mode });
        }
    }
    let per_question_weights: BTreeMap<(&QuestionId, &WorkerId), f64> = metrics
        .map(|r| {
            r.per_question
                .iter()
                .map(|m| ((&m.question_id, &m.worker_id), m.weight))
                .collect()
        })
        .unwrap_or_default();

    let mut out = Vec::new();
    let mut push = |q: &QuestionId,
                    priors: Option<BTreeMap<WorkerId, Score>>,
                    posts: BTreeMap<WorkerId, Score>|
     -> Result<(), AggregationError> {
        for &method in methods {
            let r = match method {
                Method::UnweightedMean => unweighted_consensus(q, &posts, scale)?,
                Method::Majority => majority_consensus(q, &posts, scale)?,
                Method::PriorMean => {
                    prior_mean_consensus(q, priors.as_ref().expect("two-phase"), scale)?
                }
                Method::Weighted => {
                    let report = metrics.expect("checked above");
                    let weights = posts
                        .keys()
                        .map(|w| {
                            let missing = || AggregationError::MissingMetrics {
                                question: q.clone(),
                                worker: w.clone(),
                            };
                            let v = match source {
                                WeightSource::PerQuestion => per_question_weights
                                    .get(&(q, w))
                                    .copied()
                                    .ok_or_else(missing)?,
                                WeightSource::WorkerSummary => {
                                    report.summary(w).ok_or_else(missing)?.mean_weight
                                }
                            };
                            Ok((w.clone(), v))
                        })
                        .collect::<Result<BTreeMap<_, _>, AggregationError>>()?;
                    weighted_consensus(q, &posts, &weights, scale)?
                }
            };
            out.push(r);
        }
        Ok(())
    };

    match mode {
        Mode::TwoPhase => {
            for group in dataset.two_phase_groups() {
                let priors = group
                    .iter()
                    .map(|r| (r.worker_id.clone(), r.prior_score))
                    .collect();
                let posts = group
                    .iter()
                    .map(|r| (r.worker_id.clone(), r.posterior_score))
                    .collect();
                push(&group[0].question_id, Some(priors), posts)?;
            }
        }
        Mode::Sequential => {
            for seq in dataset.sequences() {
                let posts = seq.iter().map(|e| (e.worker_id.clone(), e.score)).collect();
                push(&seq[0].question_id, None, posts)?;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryRow {
    pub method: String,
    pub items: usize,
    pub exact_match_rate: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RecoveryReport {
    pub rows: Vec<RecoveryRow>,
}

impl RecoveryReport {
    pub fn row(&self, method: &str) -> Option<&RecoveryRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// Exact-match rate and mean absolute score error of each method's final
/// score against the ground truth.
pub fn evaluate_recovery(
    results: &[ConsensusResult],
    truth: &BTreeMap<QuestionId, Score>,
) -> Result<RecoveryReport, AggregationError> {
    let mut tallies: BTreeMap<Method, (usize, usize, f64)> = BTreeMap::new();
    for r in results {
        let t = *truth
            .get(&r.question_id)
            .ok_or_else(|| AggregationError::MissingTruth(r.question_id.clone()))?;
        let e = tallies.entry(r.method).or_default();
        e.0 += 1;
        e.1 += usize::from(r.final_score == t);
        e.2 += r.final_score.abs_diff(t) as f64;
    }
    Ok(RecoveryReport {
        rows: tallies
            .into_iter()
            .map(|(m, (n, hits, err))| RecoveryRow {
                method: m.as_str().to_owned(),
                items: n,
                exact_match_rate: hits as f64 / n as f64,
                mae: err / n as f64,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(pairs: &[(&str, Score)]) -> BTreeMap<WorkerId, Score> {
        pairs.iter().map(|&(w, s)| (w.into(), s)).collect()
    }

    fn weights(pairs: &[(&str, f64)]) -> BTreeMap<WorkerId, f64> {
        pairs.iter().map(|&(w, s)| (w.into(), s)).collect()
    }

    fn q() -> QuestionId {
        "q1".into()
    }

    #[test]
    fn weighted_examples() {
        let scale = LabelScale::numeric(7).unwrap();
        let p = scores(&[("w1", 4), ("w2", 6)]);
        let r =
            weighted_consensus(&q(), &p, &weights(&[("w1", 1.0), ("w2", 1.0)]), &scale).unwrap();
        assert_eq!((r.aggregate_score, r.final_score), (5.0, 5));
        let r =
            weighted_consensus(&q(), &p, &weights(&[("w1", 1.0), ("w2", 0.0)]), &scale).unwrap();
        assert_eq!((r.aggregate_score, r.final_score), (4.0, 4));

        let p = scores(&[("w1", 2), ("w2", 5), ("w3", 7)]);
        let w = weights(&[("w1", 0.1), ("w2", 0.5), ("w3", 0.4)]);
        let r = weighted_consensus(&q(), &p, &w, &scale).unwrap();
        assert!((r.aggregate_score - 5.5).abs() < 1e-12);
        assert_eq!(r.final_score, 6);
        assert_eq!(r.final_label, "6");
    }

    #[test]
    fn weighted_errors_and_fallback() {
        let scale = LabelScale::numeric(7).unwrap();
        let p = scores(&[("w1", 4), ("w2", 6)]);
        assert_eq!(
            weighted_consensus(&q(), &BTreeMap::new(), &BTreeMap::new(), &scale),
            Err(AggregationError::EmptyInput)
        );
        assert_eq!(
            weighted_consensus(&q(), &p, &weights(&[("w1", 1.0)]), &scale),
            Err(AggregationError::KeyMismatch("w2".into()))
        );
        assert_eq!(
            weighted_consensus(
                &q(),
                &p,
                &weights(&[("w1", 1.0), ("w2", 1.0), ("w3", 1.0)]),
                &scale
            ),
            Err(AggregationError::KeyMismatch("w3".into()))
        );
        assert_eq!(
            weighted_consensus(&q(), &p, &weights(&[("w1", -1.0), ("w2", 1.0)]), &scale),
            Err(AggregationError::InvalidWeight("w1".into()))
        );
        let r =
            weighted_consensus(&q(), &p, &weights(&[("w1", 0.0), ("w2", 0.0)]), &scale).unwrap();
        assert!(r.uniform_fallback);
        assert_eq!(r.aggregate_score, 5.0);
        assert_eq!(r.support[&WorkerId::from("w1")], 1.0);
    }

    #[test]
    fn tie_rule() {
        // k = 7, midpoint 4
        assert_eq!(round_to_scale(5.5, 7), 6);
        assert_eq!(round_to_scale(2.5, 7), 2);
        assert_eq!(round_to_scale(4.4, 7), 4);
        assert_eq!(round_to_scale(3.6, 7), 4);
        // k = 6, midpoint 3.5 is itself a half: rounds down
        assert_eq!(round_to_scale(3.5, 6), 3);
        assert_eq!(round_to_scale(4.5, 6), 5);
        assert_eq!(round_to_scale(1.5, 6), 1);
        assert_eq!(round_to_scale(5.5 - 1e-12, 7), 6);
    }

    #[test]
    fn majority_examples() {
        let scale = LabelScale::numeric(7).unwrap();
        let r =
            majority_consensus(&q(), &scores(&[("w1", 3), ("w2", 3), ("w3", 7)]), &scale).unwrap();
        assert_eq!(r.final_score, 3);
        let r = majority_consensus(&q(), &scores(&[("w1", 2), ("w2", 6)]), &scale).unwrap();
        assert_eq!(r.final_score, 2);
        let r = majority_consensus(&q(), &scores(&[("w1", 5)]), &scale).unwrap();
        assert_eq!(r.final_score, 5);
        // tie between 1 and 5; mean 3.67 is closer to 5
        let r = majority_consensus(
            &q(),
            &scores(&[("a", 1), ("b", 5), ("c", 5), ("d", 1), ("e", 6)]),
            &scale,
        )
        .unwrap();
        assert_eq!(r.final_score, 5);
        assert_eq!(
            majority_consensus(&q(), &BTreeMap::new(), &scale),
            Err(AggregationError::EmptyInput)
        );
    }

    fn result_for(question: &str, method: Method, score: Score) -> ConsensusResult {
        ConsensusResult {
            question_id: question.into(),
            method,
            aggregate_score: score as f64,
            final_score: score,
            final_label: score.to_string(),
            support: BTreeMap::new(),
            uniform_fallback: false,
        }
    }

    #[test]
    fn recovery_examples() {
        let truth: BTreeMap<QuestionId, Score> = [("q1".into(), 3), ("q2".into(), 5)].into();
        let all_right = [
            result_for("q1", Method::Majority, 3),
            result_for("q2", Method::Majority, 5),
        ];
        let r = evaluate_recovery(&all_right, &truth).unwrap();
        assert_eq!(r.rows[0].exact_match_rate, 1.0);
        assert_eq!(r.rows[0].mae, 0.0);
        let one_off = [
            result_for("q1", Method::Weighted, 3),
            result_for("q2", Method::Weighted, 4),
        ];
        let r = evaluate_recovery(&one_off, &truth).unwrap();
        assert_eq!(r.row("weighted").unwrap().exact_match_rate, 0.5);
        assert_eq!(r.row("weighted").unwrap().mae, 0.5);
        assert_eq!(
            evaluate_recovery(&[result_for("q9", Method::Weighted, 1)], &truth),
            Err(AggregationError::MissingTruth("q9".into()))
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn instance() -> impl Strategy<Value = (Vec<Score>, Vec<f64>)> {
            (1usize..8).prop_flat_map(|n| {
                (
                    prop::collection::vec(1u32..=7, n),
                    prop::collection::vec(0.0f64..10.0, n),
                )
            })
        }

        fn maps(s: &[Score], w: &[f64]) -> (BTreeMap<WorkerId, Score>, BTreeMap<WorkerId, f64>) {
            let ids: Vec<WorkerId> = (0..s.len()).map(|i| WorkerId(format!("w{i}"))).collect();
            (
                ids.iter().cloned().zip(s.iter().copied()).collect(),
                ids.into_iter().zip(w.iter().copied()).collect(),
            )
        }

        proptest! {
            #[test]
            fn uniform_weights_match_unweighted((s, _) in instance(), c in 0.01f64..100.0) {
                let scale = LabelScale::numeric(7).unwrap();
                let (p, _) = maps(&s, &[]);
                let w = p.keys().map(|k| (k.clone(), c)).collect();
                let a = weighted_consensus(&q(), &p, &w, &scale).unwrap();
                let b = unweighted_consensus(&q(), &p, &scale).unwrap();
                prop_assert_eq!(a.aggregate_score, b.aggregate_score);
                prop_assert_eq!(a.final_label, b.final_label);
            }

            #[test]
            fn scaling_and_bounds((s, w) in instance(), c in 0.001f64..1000.0) {
                let scale = LabelScale::numeric(7).unwrap();
                let (p, wm) = maps(&s, &w);
                let scaled = wm.iter().map(|(k, v)| (k.clone(), v * c)).collect();
                let a = weighted_consensus(&q(), &p, &wm, &scale).unwrap();
                let b = weighted_consensus(&q(), &p, &scaled, &scale).unwrap();
                prop_assert_eq!(a.final_score, b.final_score);
                prop_assert!((a.aggregate_score - b.aggregate_score).abs() < 1e-9);
                let lo = *s.iter().min().unwrap() as f64;
                let hi = *s.iter().max().unwrap() as f64;
                prop_assert!(a.aggregate_score >= lo && a.aggregate_score <= hi);
            }

            #[test]
            fn idempotent(v in 1u32..=7, n in 1usize..8, w in prop::collection::vec(0.0f64..5.0, 8)) {
                let scale = LabelScale::numeric(7).unwrap();
                let (p, wm) = maps(&vec![v; n], &w[..n]);
                prop_assert_eq!(weighted_consensus(&q(), &p, &wm, &scale).unwrap().final_score, v);
                prop_assert_eq!(unweighted_consensus(&q(), &p, &scale).unwrap().final_score, v);
                prop_assert_eq!(majority_consensus(&q(), &p, &scale).unwrap().final_score, v);
                prop_assert_eq!(prior_mean_consensus(&q(), &p, &scale).unwrap().final_score, v);
            }
        }
    }
}
