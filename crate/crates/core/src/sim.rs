//! Generative simulator of dependent opinion formation with known ground
//! truth.
//!
//! Each question has a truth score. Every worker forms a true opinion by
//! adding rounded Gaussian noise to it, then discloses it either
//! sequentially (seeing everyone who arrived earlier) or in two phases (an
//! independent prior, then a posterior after all priors are revealed).
//!
//! Randomness is keyed by `(seed, replication, question)` so any question of
//! any replication can be regenerated on its own, in any order, on any thread.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::disclosure::{self, clamp_round, ConformityTarget, DisclosureRule};
use crate::model::{
    Dataset, LabelScale, Mode, ModelError, QuestionId, RawOpinion, RawRecords, RawTwoPhase, Score,
    WorkerId,
};
use crate::par::{self, Execution};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerProfile {
    pub worker_id: WorkerId,
    pub competence_sigma: f64,
    pub conformity_gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Profiles {
    Explicit(Vec<WorkerProfile>),
    /// Each replication draws sigma and gamma uniformly from these closed ranges.
    Ranges {
        sigma: (f64, f64),
        gamma: (f64, f64),
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Arrival {
    /// Uniform random permutation per question.
    #[default]
    Random,
    /// Workers arrive in profile order.
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub scale: LabelScale,
    pub n_workers: usize,
    pub m_questions: usize,
    pub profiles: Profiles,
    pub mode: Mode,
    pub seed: u64,
    pub replications: usize,
    pub rule: DisclosureRule,
    pub target: ConformityTarget,
    pub arrival: Arrival,
    /// Per-question truth; drawn uniformly from `1..=k` when `None`.
    pub ground_truth: Option<Vec<Score>>,
}

impl SimConfig {
    pub fn new(scale: LabelScale, n_workers: usize, m_questions: usize, seed: u64) -> Self {
        Self {
            scale,
            n_workers,
            m_questions,
            profiles: Profiles::Ranges {
                sigma: (1.0, 1.0),
                gamma: (0.0, 0.9),
            },
            mode: Mode::TwoPhase,
            seed,
            replications: 1,
            rule: DisclosureRule::Blend,
            target: ConformityTarget::Mean,
            arrival: Arrival::Random,
            ground_truth: None,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::ConfigInvalid(msg));
        if self.n_workers == 0 {
            return bad("n_workers must be at least 1".into());
        }
        if self.m_questions == 0 {
            return bad("m_questions must be at least 1".into());
        }
        if self.replications == 0 {
            return bad("replications must be at least 1".into());
        }
        let check = |sigma: f64, gamma: f64| -> Result<(), SimError> {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(SimError::ConfigInvalid(format!(
                    "sigma {sigma} must be >= 0"
                )));
            }
            if !(0.0..=1.0).contains(&gamma) {
                return Err(SimError::ConfigInvalid(format!(
                    "gamma {gamma} outside [0, 1]"
                )));
            }
            Ok(())
        };
        match &self.profiles {
            Profiles::Explicit(p) => {
                if p.len() != self.n_workers {
                    return bad(format!(
                        "{} profiles given for {} workers",
                        p.len(),
                        self.n_workers
                    ));
                }
                let mut ids: Vec<&WorkerId> = p.iter().map(|w| &w.worker_id).collect();
                ids.sort();
                ids.dedup();
                if ids.len() != p.len() {
                    return bad("worker ids in profiles are not unique".into());
                }
                for w in p {
                    check(w.competence_sigma, w.conformity_gamma)?;
                }
            }
            Profiles::Ranges { sigma, gamma } => {
                if sigma.0 > sigma.1 || gamma.0 > gamma.1 {
                    return bad("profile range has min > max".into());
                }
                check(sigma.0, gamma.0)?;
                check(sigma.1, gamma.1)?;
            }
        }
        if let Some(t) = &self.ground_truth {
            if t.len() != self.m_questions {
                return bad(format!(
                    "{} ground-truth scores for {} questions",
                    t.len(),
                    self.m_questions
                ));
            }
            for &s in t {
                self.scale.check(s)?;
            }
        }
        Ok(())
    }

    pub fn question_id(&self, q: usize) -> QuestionId {
        QuestionId(format!("q{:0w$}", q, w = digits(self.m_questions)))
    }

    pub fn worker_id(&self, w: usize) -> WorkerId {
        WorkerId(format!("w{:0w$}", w, w = digits(self.n_workers)))
    }

    /// Profiles used in replication `r`.
    pub fn profiles_for(&self, replication: usize) -> Vec<WorkerProfile> {
        match &self.profiles {
            Profiles::Explicit(p) => p.clone(),
            Profiles::Ranges { sigma, gamma } => {
                let mut rng = rng_for(self.seed, replication as u64, PROFILE_STREAM);
                (0..self.n_workers)
                    .map(|w| WorkerProfile {
                        worker_id: self.worker_id(w),
                        competence_sigma: uniform_in(&mut rng, *sigma),
                        conformity_gamma: uniform_in(&mut rng, *gamma),
                    })
                    .collect()
            }
        }
    }
}

fn digits(count: usize) -> usize {
    count.saturating_sub(1).max(1).to_string().len()
}

fn uniform_in<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

const PROFILE_STREAM: u64 = u64::MAX;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable child seed for `(master, replication, stream)`.
pub fn derive_seed(master: u64, replication: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ replication) ^ stream)
}

fn rng_for(master: u64, replication: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, replication, stream))
}

/// `clamp(round(truth + N(0, sigma)), 1, k)`; `sigma = 0` returns `truth`
/// without drawing.
pub fn sample_true_opinion<R: Rng + ?Sized>(
    truth: Score,
    sigma: f64,
    k: Score,
    rng: &mut R,
) -> Score {
    if sigma == 0.0 {
        return truth;
    }
    let noise = Normal::new(0.0, sigma)
        .expect("sigma validated")
        .sample(rng);
    clamp_round(truth as f64 + noise, k)
}

/// Deterministic blended disclosure toward the mean of earlier disclosures.
/// The first discloser reveals their true opinion.
pub fn disclose_sequential(
    true_opinion: Score,
    previously_disclosed: &[Score],
    gamma: f64,
    k: Score,
) -> Score {
    disclosure::blend(
        true_opinion,
        previously_disclosed,
        gamma,
        k,
        ConformityTarget::Mean,
    )
}

/// One simulated question: truth plus hidden and disclosed opinions.
#[derive(Debug, Clone, PartialEq)]
pub struct QuestionSim {
    pub question_id: QuestionId,
    pub truth: Score,
    /// Indices into the profile list, in arrival order (sequential) or
    /// profile order (two-phase).
    pub order: Vec<usize>,
    /// True opinions, aligned with `order`.
    pub true_opinions: Vec<Score>,
    /// Disclosed scores (sequential) or posteriors (two-phase), aligned with `order`.
    pub disclosed: Vec<Score>,
}

fn question_truth<R: Rng>(config: &SimConfig, q: usize, rng: &mut R) -> Score {
    match &config.ground_truth {
        Some(t) => t[q],
        None => rng.random_range(1..=config.scale.k()),
    }
}

pub fn run_sequential(
    config: &SimConfig,
    profiles: &[WorkerProfile],
    question: usize,
    rng: &mut ChaCha8Rng,
) -> QuestionSim {
    let k = config.scale.k();
    let truth = question_truth(config, question, rng);
    let mut order: Vec<usize> = (0..profiles.len()).collect();
    if config.arrival == Arrival::Random {
        order.shuffle(rng);
    }
    let mut true_opinions = Vec::with_capacity(order.len());
    let mut disclosed: Vec<Score> = Vec::with_capacity(order.len());
    for &w in &order {
        let p = &profiles[w];
        let o = sample_true_opinion(truth, p.competence_sigma, k, rng);
        let d = disclosure::sample_disclosure(
            config.rule,
            o,
            &disclosed,
            p.conformity_gamma,
            k,
            config.target,
            rng,
        );
        true_opinions.push(o);
        disclosed.push(d);
    }
    QuestionSim {
        question_id: config.question_id(question),
        truth,
        order,
        true_opinions,
        disclosed,
    }
}

pub fn run_two_phase(
    config: &SimConfig,
    profiles: &[WorkerProfile],
    question: usize,
    rng: &mut ChaCha8Rng,
) -> QuestionSim {
    let k = config.scale.k();
    let truth = question_truth(config, question, rng);
    let priors: Vec<Score> = profiles
        .iter()
        .map(|p| sample_true_opinion(truth, p.competence_sigma, k, rng))
        .collect();
    let posteriors = profiles
        .iter()
        .zip(&priors)
        .map(|(p, &o)| {
            disclosure::sample_disclosure(
                config.rule,
                o,
                &priors,
                p.conformity_gamma,
                k,
                config.target,
                rng,
            )
        })
        .collect();
    QuestionSim {
        question_id: config.question_id(question),
        truth,
        order: (0..profiles.len()).collect(),
        true_opinions: priors,
        disclosed: posteriors,
    }
}

/// Simulates question `q` of replication `r` from its own derived stream.
pub fn simulate_question(
    config: &SimConfig,
    profiles: &[WorkerProfile],
    replication: usize,
    q: usize,
) -> QuestionSim {
    let mut rng = rng_for(config.seed, replication as u64, q as u64);
    match config.mode {
        Mode::Sequential => run_sequential(config, profiles, q, &mut rng),
        Mode::TwoPhase => run_two_phase(config, profiles, q, &mut rng),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub replication: usize,
    /// Disclosed opinions (sequential) or prior/posterior pairs (two-phase).
    pub dataset: Dataset,
    pub profiles: Vec<WorkerProfile>,
    pub true_opinions: BTreeMap<(QuestionId, WorkerId), Score>,
    pub ground_truth: BTreeMap<QuestionId, Score>,
    /// Raw per-question simulation, sorted by question.
    pub questions: Vec<QuestionSim>,
}

impl SimOutput {
    pub fn profile(&self, worker: &WorkerId) -> Option<&WorkerProfile> {
        self.profiles.iter().find(|p| &p.worker_id == worker)
    }
}

pub fn simulate_replication(
    config: &SimConfig,
    replication: usize,
    exec: Execution,
) -> Result<SimOutput, SimError> {
    config.validate()?;
    let profiles = config.profiles_for(replication);
    let questions = par::map_range(exec, config.m_questions, |q| {
        simulate_question(config, &profiles, replication, q)
    });
    let label = |s: Score| config.scale.decode(s).map(str::to_owned);
    let raw = match config.mode {
        Mode::Sequential => RawRecords::Sequential(
            questions
                .iter()
                .flat_map(|qs| {
                    qs.order
                        .iter()
                        .zip(&qs.disclosed)
                        .enumerate()
                        .map(|(i, (&w, &d))| {
                            Ok(RawOpinion {
                                question_id: qs.question_id.clone(),
                                worker_id: profiles[w].worker_id.clone(),
                                order_index: Some(i),
                                label: label(d)?,
                                timestamp: None,
                            })
                        })
                })
                .collect::<Result<_, ModelError>>()?,
        ),
        Mode::TwoPhase => RawRecords::TwoPhase(
            questions
                .iter()
                .flat_map(|qs| {
                    qs.order
                        .iter()
                        .zip(qs.true_opinions.iter().zip(&qs.disclosed))
                        .map(|(&w, (&p, &s))| {
                            Ok(RawTwoPhase {
                                question_id: qs.question_id.clone(),
                                worker_id: profiles[w].worker_id.clone(),
                                prior_label: label(p)?,
                                posterior_label: label(s)?,
                            })
                        })
                })
                .collect::<Result<_, ModelError>>()?,
        ),
    };
    let dataset = Dataset::validate(raw, config.scale.clone())?;
    let mut true_opinions = BTreeMap::new();
    let mut ground_truth = BTreeMap::new();
    for qs in &questions {
        ground_truth.insert(qs.question_id.clone(), qs.truth);
        for (&w, &o) in qs.order.iter().zip(&qs.true_opinions) {
            true_opinions.insert((qs.question_id.clone(), profiles[w].worker_id.clone()), o);
        }
    }
    Ok(SimOutput {
        replication,
        dataset,
        profiles,
        true_opinions,
        ground_truth,
        questions,
    })
}

/// All replications, sorted by replication index.
pub fn simulate(config: &SimConfig, exec: Execution) -> Result<Vec<SimOutput>, SimError> {
    config.validate()?;
    par::map_range(exec, config.replications, |r| {
        simulate_replication(config, r, exec)
    })
    .into_iter()
    .collect()
}
