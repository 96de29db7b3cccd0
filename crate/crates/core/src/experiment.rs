//! End-to-end experiments: simulate, score workers, aggregate, invert, and
//! compare every method against the simulator's ground truth.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::aggregation::{
    self, AggregationError, ConsensusResult, Method, RecoveryReport, RecoveryRow, WeightSource,
};
use crate::inference::{
    self, EnumerationLimit, InferenceError, InferenceSettings, PriorSpec, QuestionPosterior,
};
use crate::metrics::{self, MetricParams, MetricsError, MetricsReport};
use crate::model::{Mode, QuestionId, Score, WorkerId};
use crate::par::{self, Execution};
use crate::sim::{self, SimConfig, SimError, SimOutput};

pub const MAP_METHOD: &str = "map-inverter";
pub const FACE_VALUE_METHOD: &str = "face-value";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

/// Prior the inverter uses on simulated data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InversionPrior {
    Uniform,
    /// Uniform latent truth with each worker's simulated noise level, i.e. the
    /// simulator's own generative prior.
    #[default]
    ModelMatched,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOptions {
    pub metrics: MetricParams,
    pub weight_source: WeightSource,
    /// Run the inverter on sequential data when the question size allows it.
    pub infer: bool,
    pub prior: InversionPrior,
    pub limit: EnumerationLimit,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self {
            metrics: MetricParams::default(),
            weight_source: WeightSource::default(),
            infer: true,
            prior: InversionPrior::default(),
            limit: EnumerationLimit::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOutcome {
    pub posteriors: Vec<QuestionPosterior>,
    /// Opinion-level comparison of MAP and face-value readouts against the
    /// hidden true opinions.
    pub recovery: RecoveryReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationReport {
    pub sim: SimOutput,
    pub metrics: Option<MetricsReport>,
    pub consensus: Vec<ConsensusResult>,
    pub recovery: RecoveryReport,
    pub inference: Option<InferenceOutcome>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub replications: Vec<ReplicationReport>,
    /// Question-level recovery pooled over replications.
    pub recovery: RecoveryReport,
    /// Opinion-level MAP vs face-value recovery, when the inverter ran.
    pub opinion_recovery: Option<RecoveryReport>,
}

/// Pools rows with the same method, weighting each report by its item count.
pub fn pool_recovery<'a>(reports: impl IntoIterator<Item = &'a RecoveryReport>) -> RecoveryReport {
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<String, (usize, f64, f64)> = BTreeMap::new();
    for report in reports {
        for row in &report.rows {
            if !acc.contains_key(&row.method) {
                order.push(row.method.clone());
            }
            let e = acc.entry(row.method.clone()).or_default();
            e.0 += row.items;
            e.1 += row.exact_match_rate * row.items as f64;
            e.2 += row.mae * row.items as f64;
        }
    }
    RecoveryReport {
        rows: order
            .into_iter()
            .map(|m| {
                let (n, hits, err) = acc[&m];
                RecoveryRow {
                    method: m,
                    items: n,
                    exact_match_rate: hits / n as f64,
                    mae: err / n as f64,
                }
            })
            .collect(),
    }
}

/// Compares MAP and face-value readouts with the hidden true opinions.
pub fn opinion_recovery(
    posteriors: &[QuestionPosterior],
    true_opinions: &BTreeMap<(QuestionId, WorkerId), Score>,
) -> RecoveryReport {
    let mut rows = Vec::new();
    for (name, pick) in [(MAP_METHOD, true), (FACE_VALUE_METHOD, false)] {
        let (mut n, mut hits, mut err) = (0usize, 0usize, 0.0);
        for qp in posteriors {
            for (i, w) in qp.workers.iter().enumerate() {
                let Some(&truth) = true_opinions.get(&(qp.question_id.clone(), w.clone())) else {
                    continue;
                };
                let guess = if pick {
                    qp.map[i]
                } else {
                    qp.table.disclosed[i]
                };
                n += 1;
                hits += usize::from(guess == truth);
                err += guess.abs_diff(truth) as f64;
            }
        }
        let denom = n.max(1) as f64;
        rows.push(RecoveryRow {
            method: name.to_owned(),
            items: n,
            exact_match_rate: hits as f64 / denom,
            mae: err / denom,
        });
    }
    RecoveryReport { rows }
}

/// Metrics, consensus, recovery, and (optionally) inversion for one simulated
/// replication.
pub fn evaluate_replication(
    config: &SimConfig,
    sim: SimOutput,
    options: &ExperimentOptions,
    exec: Execution,
) -> Result<ReplicationReport, ExperimentError> {
    let dataset = &sim.dataset;
    let metrics = match dataset.mode() {
        Mode::TwoPhase => Some(metrics::compute_metrics(dataset, &options.metrics, exec)?),
        Mode::Sequential => None,
    };
    let consensus = aggregation::aggregate_dataset(
        dataset,
        Method::for_mode(dataset.mode()),
        metrics.as_ref(),
        options.weight_source,
    )?;
    let recovery = aggregation::evaluate_recovery(&consensus, &sim.ground_truth)?;

    let inference = if options.infer
        && dataset.mode() == Mode::Sequential
        && options.limit.allows(config.n_workers, config.scale.k())
    {
        let settings = InferenceSettings {
            gammas: sim
                .profiles
                .iter()
                .map(|p| (p.worker_id.clone(), p.conformity_gamma))
                .collect(),
            default_gamma: None,
            rule: config.rule,
            target: config.target,
            prior: match options.prior {
                InversionPrior::Uniform => PriorSpec::Uniform,
                InversionPrior::ModelMatched => PriorSpec::SharedTruth {
                    sigmas: sim
                        .profiles
                        .iter()
                        .map(|p| (p.worker_id.clone(), p.competence_sigma))
                        .collect(),
                },
            },
            limit: options.limit,
        };
        let posteriors = inference::infer_dataset(dataset, &settings, exec)?;
        let recovery = opinion_recovery(&posteriors, &sim.true_opinions);
        Some(InferenceOutcome {
            posteriors,
            recovery,
        })
    } else {
        None
    };

    Ok(ReplicationReport {
        sim,
        metrics,
        consensus,
        recovery,
        inference,
    })
}

/// Runs every replication and pools the recovery tables. Output is identical
/// for any [`Execution`].
pub fn run_experiment(
    config: &SimConfig,
    options: &ExperimentOptions,
    exec: Execution,
) -> Result<ExperimentOutput, ExperimentError> {
    options.metrics.validate()?;
    config.validate()?;
    let replications = par::map_range(exec, config.replications, |r| {
        let sim = sim::simulate_replication(config, r, exec)?;
        evaluate_replication(config, sim, options, exec)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let recovery = pool_recovery(replications.iter().map(|r| &r.recovery));
    let opinion = replications
        .iter()
        .filter_map(|r| r.inference.as_ref().map(|i| &i.recovery))
        .collect::<Vec<_>>();
    let opinion_recovery = (!opinion.is_empty()).then(|| pool_recovery(opinion));
    Ok(ExperimentOutput {
        replications,
        recovery,
        opinion_recovery,
    })
}
