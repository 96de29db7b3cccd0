//! Annotation-process data model: label scales, disclosed opinions, two-phase
//! records, and validated datasets.
//!
//! A dataset is either *sequential* (each worker discloses one label after
//! seeing everyone who arrived before them) or *two-phase* (each worker gives
//! an independent prior score, then a posterior score after all priors are
//! revealed). Only arrival order matters for sequential data; timestamps are
//! carried for provenance and never read by downstream computation.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ordinal score of a label: position in the scale, 1-based.
pub type Score = u32;

/// The review scale used by the crowd-powered reviewing platform, worst-first.
pub const SEVEN_POINT_LABELS: [&str; 7] = [
    "strong reject",
    "reject",
    "weak reject",
    "borderline",
    "weak accept",
    "accept",
    "strong accept",
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("scale needs at least 2 labels, got {0}")]
    ScaleTooSmall(usize),
    #[error("duplicate label {0:?} in scale")]
    DuplicateLabel(String),
    #[error("unknown label {label:?}")]
    UnknownLabel {
        label: String,
        record: Option<usize>,
    },
    #[error("score {score} outside scale 1..={k}")]
    ScoreOutOfRange { score: Score, k: Score },
    #[error("worker {worker} has more than one opinion on question {question}")]
    DuplicateOpinion {
        question: QuestionId,
        worker: WorkerId,
        record: usize,
    },
    #[error("arrival order of question {question} is not a contiguous 0-based range")]
    GapInArrivalOrder { question: QuestionId },
    #[error("dataset has no records")]
    EmptyDataset,
}

impl ModelError {
    /// Index of the offending input record, when the error is tied to one.
    pub fn record(&self) -> Option<usize> {
        match self {
            ModelError::UnknownLabel { record, .. } => *record,
            ModelError::DuplicateOpinion { record, .. } => Some(*record),
            _ => None,
        }
    }
}

macro_rules! id_newtype {
    ($name:ident) => {
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }
    };
}

id_newtype!(QuestionId);
id_newtype!(WorkerId);

/// Ordered set of labels with the monotone encoding `label[j] -> j + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelScale {
    labels: Vec<String>,
}

impl LabelScale {
    pub fn new<I, S>(labels: I) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.len() < 2 {
            return Err(ModelError::ScaleTooSmall(labels.len()));
        }
        let mut seen = HashSet::with_capacity(labels.len());
        for label in &labels {
            if !seen.insert(label.as_str()) {
                return Err(ModelError::DuplicateLabel(label.clone()));
            }
        }
        Ok(Self { labels })
    }

    /// The seven-option review scale, `strong reject` = 1 through `strong accept` = 7.
    pub fn seven_point() -> Self {
        Self::new(SEVEN_POINT_LABELS).expect("static scale is valid")
    }

    /// Generic numeric scale whose labels are `"1"` through `"k"`.
    pub fn numeric(k: Score) -> Result<Self, ModelError> {
        Self::new((1..=k).map(|s| s.to_string()))
    }

    pub fn k(&self) -> Score {
        self.labels.len() as Score
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn encode(&self, label: &str) -> Result<Score, ModelError> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|p| p as Score + 1)
            .ok_or_else(|| ModelError::UnknownLabel {
                label: label.to_owned(),
                record: None,
            })
    }

    pub fn decode(&self, score: Score) -> Result<&str, ModelError> {
        self.check(score)?;
        Ok(&self.labels[score as usize - 1])
    }

    pub fn check(&self, score: Score) -> Result<Score, ModelError> {
        if (1..=self.k()).contains(&score) {
            Ok(score)
        } else {
            Err(ModelError::ScoreOutOfRange { score, k: self.k() })
        }
    }

    /// Score midpoint `(k + 1) / 2`.
    pub fn midpoint(&self) -> f64 {
        (self.k() as f64 + 1.0) / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Sequential,
    TwoPhase,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Sequential => "sequential",
            Mode::TwoPhase => "two-phase",
        })
    }
}

/// One disclosed opinion, as read from a sequential dataset file.
///
/// `order_index` may be omitted, in which case it is assigned in input order
/// per question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawOpinion {
    pub question_id: QuestionId,
    pub worker_id: WorkerId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order_index: Option<usize>,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTwoPhase {
    pub question_id: QuestionId,
    pub worker_id: WorkerId,
    pub prior_label: String,
    pub posterior_label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RawRecords {
    Sequential(Vec<RawOpinion>),
    TwoPhase(Vec<RawTwoPhase>),
}

impl RawRecords {
    pub fn mode(&self) -> Mode {
        match self {
            RawRecords::Sequential(_) => Mode::Sequential,
            RawRecords::TwoPhase(_) => Mode::TwoPhase,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpinionEvent {
    pub question_id: QuestionId,
    pub worker_id: WorkerId,
    pub order_index: usize,
    pub score: Score,
    pub timestamp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TwoPhaseRecord {
    pub question_id: QuestionId,
    pub worker_id: WorkerId,
    pub prior_score: Score,
    pub posterior_score: Score,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Observations {
    /// Sorted by `(question_id, order_index)`.
    Sequential(Vec<OpinionEvent>),
    /// Sorted by `(question_id, worker_id)`.
    TwoPhase(Vec<TwoPhaseRecord>),
}

/// A validated dataset. Construct through [`Dataset::validate`] or the
/// mode-specific shortcuts; all invariants hold afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    scale: LabelScale,
    questions: Vec<QuestionId>,
    workers: Vec<WorkerId>,
    observations: Observations,
}

impl Dataset {
    pub fn validate(raw: RawRecords, scale: LabelScale) -> Result<Self, ModelError> {
        match raw {
            RawRecords::Sequential(r) => Self::sequential(r, scale),
            RawRecords::TwoPhase(r) => Self::two_phase(r, scale),
        }
    }

    pub fn sequential(raw: Vec<RawOpinion>, scale: LabelScale) -> Result<Self, ModelError> {
        if raw.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let mut pairs = HashSet::with_capacity(raw.len());
        let mut next_index: BTreeMap<QuestionId, usize> = BTreeMap::new();
        let mut events = Vec::with_capacity(raw.len());
        for (record, r) in raw.into_iter().enumerate() {
            let score = scale
                .encode(&r.label)
                .map_err(|_| ModelError::UnknownLabel {
                    label: r.label.clone(),
                    record: Some(record),
                })?;
            if !pairs.insert((r.question_id.clone(), r.worker_id.clone())) {
                return Err(ModelError::DuplicateOpinion {
                    question: r.question_id,
                    worker: r.worker_id,
                    record,
                });
            }
            let counter = next_index.entry(r.question_id.clone()).or_insert(0);
            let order_index = r.order_index.unwrap_or(*counter);
            *counter += 1;
            events.push(OpinionEvent {
                question_id: r.question_id,
                worker_id: r.worker_id,
                order_index,
                score,
                timestamp: r.timestamp,
            });
        }
        events
            .sort_by(|a, b| (&a.question_id, a.order_index).cmp(&(&b.question_id, b.order_index)));
        for group in events.chunk_by(|a, b| a.question_id == b.question_id) {
            let contiguous = group.iter().enumerate().all(|(i, e)| e.order_index == i);
            if !contiguous {
                return Err(ModelError::GapInArrivalOrder {
                    question: group[0].question_id.clone(),
                });
            }
        }
        let questions = collect_sorted(events.iter().map(|e| &e.question_id));
        let workers = collect_sorted(events.iter().map(|e| &e.worker_id));
        Ok(Self {
            scale,
            questions,
            workers,
            observations: Observations::Sequential(events),
        })
    }

    pub fn two_phase(raw: Vec<RawTwoPhase>, scale: LabelScale) -> Result<Self, ModelError> {
        if raw.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let mut pairs = HashSet::with_capacity(raw.len());
        let mut records = Vec::with_capacity(raw.len());
        for (record, r) in raw.into_iter().enumerate() {
            let encode = |label: &str| {
                scale.encode(label).map_err(|_| ModelError::UnknownLabel {
                    label: label.to_owned(),
                    record: Some(record),
                })
            };
            let prior_score = encode(&r.prior_label)?;
            let posterior_score = encode(&r.posterior_label)?;
            if !pairs.insert((r.question_id.clone(), r.worker_id.clone())) {
                return Err(ModelError::DuplicateOpinion {
                    question: r.question_id,
                    worker: r.worker_id,
                    record,
                });
            }
            records.push(TwoPhaseRecord {
                question_id: r.question_id,
                worker_id: r.worker_id,
                prior_score,
                posterior_score,
            });
        }
        records.sort_by(|a, b| (&a.question_id, &a.worker_id).cmp(&(&b.question_id, &b.worker_id)));
        let questions = collect_sorted(records.iter().map(|r| &r.question_id));
        let workers = collect_sorted(records.iter().map(|r| &r.worker_id));
        Ok(Self {
            scale,
            questions,
            workers,
            observations: Observations::TwoPhase(records),
        })
    }

    pub fn scale(&self) -> &LabelScale {
        &self.scale
    }

    pub fn mode(&self) -> Mode {
        match self.observations {
            Observations::Sequential(_) => Mode::Sequential,
            Observations::TwoPhase(_) => Mode::TwoPhase,
        }
    }

    pub fn observations(&self) -> &Observations {
        &self.observations
    }

    /// The question set `Q`, sorted.
    pub fn questions(&self) -> &[QuestionId] {
        &self.questions
    }

    /// The worker set `W`, sorted.
    pub fn workers(&self) -> &[WorkerId] {
        &self.workers
    }

    pub fn m(&self) -> usize {
        self.questions.len()
    }

    pub fn n(&self) -> usize {
        self.workers.len()
    }

    /// Sequential events grouped per question, each group in arrival order.
    /// Empty for two-phase datasets.
    pub fn sequences(&self) -> Vec<&[OpinionEvent]> {
        match &self.observations {
            Observations::Sequential(ev) => {
                ev.chunk_by(|a, b| a.question_id == b.question_id).collect()
            }
            Observations::TwoPhase(_) => Vec::new(),
        }
    }

    /// Two-phase records grouped per question. Empty for sequential datasets.
    pub fn two_phase_groups(&self) -> Vec<&[TwoPhaseRecord]> {
        match &self.observations {
            Observations::TwoPhase(r) => {
                r.chunk_by(|a, b| a.question_id == b.question_id).collect()
            }
            Observations::Sequential(_) => Vec::new(),
        }
    }

    /// Re-expands the dataset into raw records with explicit arrival indices.
    pub fn to_raw(&self) -> RawRecords {
        let label = |s: Score| self.scale.decode(s).expect("validated score").to_owned();
        match &self.observations {
            Observations::Sequential(ev) => RawRecords::Sequential(
                ev.iter()
                    .map(|e| RawOpinion {
                        question_id: e.question_id.clone(),
                        worker_id: e.worker_id.clone(),
                        order_index: Some(e.order_index),
                        label: label(e.score),
                        timestamp: e.timestamp,
                    })
                    .collect(),
            ),
            Observations::TwoPhase(rs) => RawRecords::TwoPhase(
                rs.iter()
                    .map(|r| RawTwoPhase {
                        question_id: r.question_id.clone(),
                        worker_id: r.worker_id.clone(),
                        prior_label: label(r.prior_score),
                        posterior_label: label(r.posterior_score),
                    })
                    .collect(),
            ),
        }
    }
}

fn collect_sorted<'a, T: Ord + Clone + 'a>(items: impl Iterator<Item = &'a T>) -> Vec<T> {
    items
        .collect::<BTreeSet<_>>()
        .into_iter()
        .cloned()
        .collect()
}
