//! Worker-quality metrics from two-phase data: drop of confidence,
//! reliability, accuracy, and the derived aggregation weight.
//!
//! For one question with priors `p_j` and posteriors `s_j`:
//!
//! * drop of confidence `d_i = |p_i - s_i|`
//! * mean shift `Δ = |mean(p) - mean(s)|`
//! * deviation ratio `(d_i + ε) / (Δ + ε)` and reliability `min(1 / ratio, r_cap)`
//! * accuracy `1 - |s_i - mean(s)| / (k - 1)`
//! * weight `reliability / (1 + reliability) * accuracy`
//!
//! The smoothing `ε` makes the ratio total: a worker who does not move on a
//! question whose mean does not move gets the neutral ratio 1.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::{Dataset, Mode, QuestionId, Score, TwoPhaseRecord, WorkerId};
use crate::par::{self, Execution};

pub const DEFAULT_EPSILON: f64 = 1e-9;
pub const DEFAULT_R_CAP: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("score {score} outside scale 1..={k}")]
    ScoreOutOfRange { score: Score, k: Score },
    #[error("empty input")]
    EmptyInput,
    #[error("length mismatch: {0} priors vs {1} posteriors")]
    LengthMismatch(usize, usize),
    #[error("metrics need a two-phase dataset, got {0}")]
    WrongMode(Mode),
    #[error("invalid metric parameter: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricParams {
    pub epsilon: f64,
    pub r_cap: f64,
}

impl Default for MetricParams {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            r_cap: DEFAULT_R_CAP,
        }
    }
}

impl MetricParams {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(MetricsError::InvalidParams(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.r_cap > 0.0 && self.r_cap.is_finite()) {
            return Err(MetricsError::InvalidParams(format!(
                "r_cap must be positive, got {}",
                self.r_cap
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerQuestionMetrics {
    pub worker_id: WorkerId,
    pub question_id: QuestionId,
    pub drop: f64,
    pub deviation_ratio: f64,
    pub reliability: f64,
    pub accuracy: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerSummary {
    pub worker_id: WorkerId,
    pub questions: usize,
    pub mean_drop: f64,
    pub mean_reliability: f64,
    pub mean_accuracy: f64,
    pub mean_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Sorted by `(question_id, worker_id)`.
    pub per_question: Vec<WorkerQuestionMetrics>,
    /// Sorted by `worker_id`.
    pub summaries: Vec<WorkerSummary>,
}

impl MetricsReport {
    pub fn summary(&self, worker: &WorkerId) -> Option<&WorkerSummary> {
        self.summaries
            .binary_search_by(|s| s.worker_id.cmp(worker))
            .ok()
            .map(|i| &self.summaries[i])
    }
}

fn check_score(score: Score, k: Score) -> Result<(), MetricsError> {
    if (1..=k).contains(&score) {
        Ok(())
    } else {
        Err(MetricsError::ScoreOutOfRange { score, k })
    }
}

fn mean(scores: &[Score]) -> f64 {
    scores.iter().map(|&s| s as f64).sum::<f64>() / scores.len() as f64
}

pub fn drop_of_confidence(prior: Score, posterior: Score, k: Score) -> Result<f64, MetricsError> {
    check_score(prior, k)?;
    check_score(posterior, k)?;
    Ok(prior.abs_diff(posterior) as f64)
}

/// `|mean(priors) - mean(posteriors)|` over the workers of one question.
pub fn mean_shift(priors: &[Score], posteriors: &[Score]) -> Result<f64, MetricsError> {
    if priors.len() != posteriors.len() {
        return Err(MetricsError::LengthMismatch(priors.len(), posteriors.len()));
    }
    if priors.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok((mean(priors) - mean(posteriors)).abs())
}

pub fn deviation_ratio(drop: f64, shift: f64, epsilon: f64) -> f64 {
    (drop + epsilon) / (shift + epsilon)
}

pub fn reliability(deviation_ratio: f64, r_cap: f64) -> f64 {
    (1.0 / deviation_ratio).min(r_cap)
}

pub fn accuracy(posterior: Score, all_posteriors: &[Score], k: Score) -> Result<f64, MetricsError> {
    if all_posteriors.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    check_score(posterior, k)?;
    if k < 2 {
        return Err(MetricsError::ScoreOutOfRange { score: k, k: 2 });
    }
    let distance = (posterior as f64 - mean(all_posteriors)).abs();
    Ok((1.0 - distance / (k - 1) as f64).clamp(0.0, 1.0))
}

pub fn worker_weight(reliability: f64, accuracy: f64) -> f64 {
    reliability / (1.0 + reliability) * accuracy
}

/// Metrics for every worker of a single question.
pub fn question_metrics(
    records: &[TwoPhaseRecord],
    k: Score,
    params: &MetricParams,
) -> Result<Vec<WorkerQuestionMetrics>, MetricsError> {
    let priors: Vec<Score> = records.iter().map(|r| r.prior_score).collect();
    let posteriors: Vec<Score> = records.iter().map(|r| r.posterior_score).collect();
    let shift = mean_shift(&priors, &posteriors)?;
    records
        .iter()
        .map(|r| {
            let drop = drop_of_confidence(r.prior_score, r.posterior_score, k)?;
            let ratio = deviation_ratio(drop, shift, params.epsilon);
            let rel = reliability(ratio, params.r_cap);
            let acc = accuracy(r.posterior_score, &posteriors, k)?;
            Ok(WorkerQuestionMetrics {
                worker_id: r.worker_id.clone(),
                question_id: r.question_id.clone(),
                drop,
                deviation_ratio: ratio,
                reliability: rel,
                accuracy: acc,
                weight: worker_weight(rel, acc),
            })
        })
        .collect()
}

pub fn compute_metrics(
    dataset: &Dataset,
    params: &MetricParams,
    exec: Execution,
) -> Result<MetricsReport, MetricsError> {
    if dataset.mode() != Mode::TwoPhase {
        return Err(MetricsError::WrongMode(dataset.mode()));
    }
    params.validate()?;
    let k = dataset.scale().k();
    let groups = dataset.two_phase_groups();
    let per_question: Vec<WorkerQuestionMetrics> =
        par::try_map_slice(exec, &groups, |g| question_metrics(g, k, params))?
            .into_iter()
            .flatten()
            .collect();
    let summaries = summarize(&per_question);
    Ok(MetricsReport {
        per_question,
        summaries,
    })
}

/// Unweighted per-worker means over the questions each worker answered.
pub fn summarize(per_question: &[WorkerQuestionMetrics]) -> Vec<WorkerSummary> {
    // (count, drop, reliability, accuracy, weight)
    let mut acc: BTreeMap<&WorkerId, (usize, f64, f64, f64, f64)> = BTreeMap::new();
    for m in per_question {
        let e = acc.entry(&m.worker_id).or_default();
        e.0 += 1;
        e.1 += m.drop;
        e.2 += m.reliability;
        e.3 += m.accuracy;
        e.4 += m.weight;
    }
    acc.into_iter()
        .map(|(w, (c, d, r, a, wt))| {
            let c_f = c as f64;
            WorkerSummary {
                worker_id: w.clone(),
                questions: c,
                mean_drop: d / c_f,
                mean_reliability: r / c_f,
                mean_accuracy: a / c_f,
                mean_weight: wt / c_f,
            }
        })
        .collect()
}
