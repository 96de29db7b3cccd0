//! Exact Bayesian recovery of true opinions from a disclosed sequence.
//!
//! For disclosed scores `ô_1..ô_n` in arrival order and a disclosure model
//! `D_i(ô | o, history)`, the likelihood of a true vector factorizes as
//! `Π_i D_i(ô_i | o_i, ô_1..ô_{i-1})`. The posterior over true vectors is that
//! likelihood times the prior, normalized over all `k^n` vectors, and each
//! worker's marginal is read off the joint.
//!
//! Enumeration is split into fixed-size chunks whose partial sums are combined
//! in chunk order, so the table is bitwise identical for serial and parallel
//! execution.

use std::collections::BTreeMap;

use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::disclosure::{kernel_probability, ConformityTarget, DisclosureRule};
use crate::model::{Dataset, Mode, QuestionId, Score, WorkerId};
use crate::par::{self, Execution};

pub const DEFAULT_MAX_WORKERS: usize = 8;
pub const DEFAULT_MAX_STATES: u64 = 10_000_000;

/// Vectors per enumeration chunk.
const CHUNK: u64 = 1 << 12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InferenceError {
    #[error("expected {expected} scores, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("score {score} outside scale 1..={k}")]
    ScoreOutOfRange { score: Score, k: Score },
    #[error("enumerating {n} workers over {k} labels exceeds the limit ({states} states)")]
    EnumerationTooLarge { n: usize, k: Score, states: u128 },
    #[error("disclosed sequence has zero probability under the bias model")]
    ZeroEvidence,
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("conformity {0} outside [0, 1]")]
    InvalidGamma(f64),
    #[error("inference needs a sequential dataset, got {0}")]
    WrongMode(Mode),
    #[error("no conformity given for worker {0}")]
    MissingGamma(WorkerId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnumerationLimit {
    pub max_workers: usize,
    pub max_states: u64,
}

impl Default for EnumerationLimit {
    fn default() -> Self {
        Self {
            max_workers: DEFAULT_MAX_WORKERS,
            max_states: DEFAULT_MAX_STATES,
        }
    }
}

impl EnumerationLimit {
    pub fn check(&self, n: usize, k: Score) -> Result<u64, InferenceError> {
        let states = (k as u128).checked_pow(n as u32).unwrap_or(u128::MAX);
        if n > self.max_workers || states > self.max_states as u128 {
            return Err(InferenceError::EnumerationTooLarge { n, k, states });
        }
        Ok(states as u64)
    }

    pub fn allows(&self, n: usize, k: Score) -> bool {
        self.check(n, k).is_ok()
    }
}

/// Disclosure model for one question; `gammas` are in arrival order.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasModel {
    k: Score,
    gammas: Vec<f64>,
    rule: DisclosureRule,
    target: ConformityTarget,
}

impl BiasModel {
    pub fn new(
        k: Score,
        gammas: Vec<f64>,
        rule: DisclosureRule,
        target: ConformityTarget,
    ) -> Result<Self, InferenceError> {
        if let Some(&g) = gammas.iter().find(|g| !(0.0..=1.0).contains(*g)) {
            return Err(InferenceError::InvalidGamma(g));
        }
        Ok(Self {
            k,
            gammas,
            rule,
            target,
        })
    }

    /// The default kernel: copy the rounded history mean with probability gamma.
    pub fn switching(k: Score, gammas: Vec<f64>) -> Result<Self, InferenceError> {
        Self::new(k, gammas, DisclosureRule::Switch, ConformityTarget::Mean)
    }

    pub fn k(&self) -> Score {
        self.k
    }

    pub fn n(&self) -> usize {
        self.gammas.len()
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    pub fn rule(&self) -> DisclosureRule {
        self.rule
    }

    pub fn target(&self) -> ConformityTarget {
        self.target
    }

    /// `D_i(disclosed | true_opinion, history)`.
    pub fn kernel(
        &self,
        worker: usize,
        disclosed: Score,
        true_opinion: Score,
        history: &[Score],
    ) -> f64 {
        kernel_probability(
            self.rule,
            disclosed,
            true_opinion,
            history,
            self.gammas[worker],
            self.k,
            self.target,
        )
    }

    fn check_vector(&self, v: &[Score]) -> Result<(), InferenceError> {
        if v.len() != self.n() {
            return Err(InferenceError::LengthMismatch {
                expected: self.n(),
                got: v.len(),
            });
        }
        if let Some(&score) = v.iter().find(|s| !(1..=self.k).contains(*s)) {
            return Err(InferenceError::ScoreOutOfRange { score, k: self.k });
        }
        Ok(())
    }

    /// `L[i][o - 1] = D_i(ô_i | o, ô_1..ô_{i-1})` for every worker and true score.
    fn likelihood_table(&self, disclosed: &[Score]) -> Vec<Vec<f64>> {
        (0..self.n())
            .map(|i| {
                (1..=self.k)
                    .map(|o| self.kernel(i, disclosed[i], o, &disclosed[..i]))
                    .collect()
            })
            .collect()
    }
}

pub fn sequence_likelihood(
    bias: &BiasModel,
    true_vector: &[Score],
    disclosed: &[Score],
) -> Result<f64, InferenceError> {
    bias.check_vector(true_vector)?;
    bias.check_vector(disclosed)?;
    Ok((0..bias.n())
        .map(|i| bias.kernel(i, disclosed[i], true_vector[i], &disclosed[..i]))
        .product())
}

/// Prior over true-opinion vectors.
#[derive(Debug, Clone, PartialEq)]
pub enum Prior {
    /// Independent per-worker distributions over `1..=k`.
    Independent(Vec<Vec<f64>>),
    /// Workers share a latent truth `t ~ truth`, and `noise[i][t][o]` is
    /// `P(O_i = o + 1 | t + 1)`.
    SharedTruth {
        truth: Vec<f64>,
        noise: Vec<Vec<Vec<f64>>>,
    },
}

impl Prior {
    pub fn uniform(n: usize, k: Score) -> Self {
        Prior::Independent(vec![vec![1.0 / k as f64; k as usize]; n])
    }

    /// Latent truth with prior `truth`; each worker reports
    /// `clamp(round(t + N(0, sigma_i)), 1, k)`.
    pub fn shared_truth_gaussian(truth: Vec<f64>, sigmas: &[f64]) -> Result<Self, InferenceError> {
        let k = truth.len() as Score;
        let noise = sigmas
            .iter()
            .map(|&sigma| {
                (1..=k)
                    .map(|t| rounded_gaussian_pmf(t, sigma, k))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Prior::SharedTruth { truth, noise })
    }

    fn validate(&self, n: usize, k: Score) -> Result<(), InferenceError> {
        let k = k as usize;
        let check_dist = |v: &[f64], what: &str| -> Result<(), InferenceError> {
            if v.len() != k {
                return Err(InferenceError::InvalidPrior(format!(
                    "{what} has {} entries, expected {k}",
                    v.len()
                )));
            }
            if v.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(InferenceError::InvalidPrior(format!(
                    "{what} has a negative entry"
                )));
            }
            let total: f64 = v.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(InferenceError::InvalidPrior(format!(
                    "{what} sums to {total}"
                )));
            }
            Ok(())
        };
        match self {
            Prior::Independent(rows) => {
                if rows.len() != n {
                    return Err(InferenceError::InvalidPrior(format!(
                        "{} worker priors for {n} workers",
                        rows.len()
                    )));
                }
                for (i, r) in rows.iter().enumerate() {
                    check_dist(r, &format!("prior of worker {i}"))?;
                }
            }
            Prior::SharedTruth { truth, noise } => {
                check_dist(truth, "truth prior")?;
                if noise.len() != n {
                    return Err(InferenceError::InvalidPrior(format!(
                        "{} noise models for {n} workers",
                        noise.len()
                    )));
                }
                for (i, rows) in noise.iter().enumerate() {
                    if rows.len() != k {
                        return Err(InferenceError::InvalidPrior(format!(
                            "noise model of worker {i} has {} rows",
                            rows.len()
                        )));
                    }
                    for (t, r) in rows.iter().enumerate() {
                        check_dist(r, &format!("noise of worker {i} at truth {}", t + 1))?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// `P(clamp(round(truth + N(0, sigma)), 1, k) = o)` for `o` in `1..=k`.
pub fn rounded_gaussian_pmf(
    truth: Score,
    sigma: f64,
    k: Score,
) -> Result<Vec<f64>, InferenceError> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(InferenceError::InvalidPrior(format!(
            "sigma {sigma} is not a valid std-dev"
        )));
    }
    if sigma == 0.0 {
        return Ok((1..=k)
            .map(|o| if o == truth { 1.0 } else { 0.0 })
            .collect());
    }
    let normal = Normal::new(truth as f64, sigma)
        .map_err(|e| InferenceError::InvalidPrior(e.to_string()))?;
    let cdf = |x: f64| normal.cdf(x);
    Ok((1..=k)
        .map(|o| {
            let lo = if o == 1 { 0.0 } else { cdf(o as f64 - 0.5) };
            let hi = if o == k { 1.0 } else { cdf(o as f64 + 0.5) };
            hi - lo
        })
        .collect())
}

/// Per-worker posterior marginals over true opinions.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorTable {
    pub k: Score,
    pub disclosed: Vec<Score>,
    /// `marginals[i][o - 1] = P(O_i = o | disclosed)`.
    pub marginals: Vec<Vec<f64>>,
    /// Prior probability of the disclosed sequence.
    pub evidence: f64,
    /// Number of true vectors enumerated, `k^n`.
    pub support_size: u64,
}

impl PosteriorTable {
    pub fn n(&self) -> usize {
        self.marginals.len()
    }
}

pub fn posterior_true(
    bias: &BiasModel,
    prior: &Prior,
    disclosed: &[Score],
    limit: &EnumerationLimit,
    exec: Execution,
) -> Result<PosteriorTable, InferenceError> {
    bias.check_vector(disclosed)?;
    let n = bias.n();
    let k = bias.k();
    let states = limit.check(n, k)?;
    prior.validate(n, k)?;
    let likelihood = bias.likelihood_table(disclosed);

    let n_chunks = states.div_ceil(CHUNK) as usize;
    let partials = par::map_range(exec, n_chunks, |c| {
        enumerate_chunk(
            c as u64 * CHUNK,
            (c as u64 + 1) * CHUNK,
            states,
            n,
            k,
            &likelihood,
            prior,
        )
    });

    let mut marginals = vec![vec![0.0; k as usize]; n];
    let mut evidence = 0.0;
    for (m, total) in partials {
        evidence += total;
        for (row, part) in marginals.iter_mut().zip(m.chunks(k as usize)) {
            for (a, b) in row.iter_mut().zip(part) {
                *a += b;
            }
        }
    }
    if evidence <= 0.0 {
        return Err(InferenceError::ZeroEvidence);
    }
    for row in &mut marginals {
        for p in row.iter_mut() {
            *p /= evidence;
        }
    }
    Ok(PosteriorTable {
        k,
        disclosed: disclosed.to_vec(),
        marginals,
        evidence,
        support_size: states,
    })
}

/// Sums unnormalized posterior mass over vector indices `[start, end)`.
/// Returns flattened `n × k` marginals and the chunk's total mass.
fn enumerate_chunk(
    start: u64,
    end: u64,
    states: u64,
    n: usize,
    k: Score,
    likelihood: &[Vec<f64>],
    prior: &Prior,
) -> (Vec<f64>, f64) {
    let ku = k as usize;
    let end = end.min(states);
    let mut marg = vec![0.0; n * ku];
    let mut total = 0.0;
    // digits[i] = o_i - 1; worker 0 is the most significant digit
    let mut digits = vec![0usize; n];
    let mut rem = start;
    for d in digits.iter_mut().rev() {
        *d = (rem % k as u64) as usize;
        rem /= k as u64;
    }
    for _ in start..end {
        let lik: f64 = digits
            .iter()
            .enumerate()
            .map(|(i, &d)| likelihood[i][d])
            .product();
        if lik > 0.0 {
            let p = match prior {
                Prior::Independent(rows) => digits
                    .iter()
                    .enumerate()
                    .map(|(i, &d)| rows[i][d])
                    .product::<f64>(),
                Prior::SharedTruth { truth, noise } => truth
                    .iter()
                    .enumerate()
                    .map(|(t, pt)| {
                        pt * digits
                            .iter()
                            .enumerate()
                            .map(|(i, &d)| noise[i][t][d])
                            .product::<f64>()
                    })
                    .sum(),
            };
            let w = lik * p;
            if w > 0.0 {
                total += w;
                for (i, &d) in digits.iter().enumerate() {
                    marg[i * ku + d] += w;
                }
            }
        }
        for d in digits.iter_mut().rev() {
            *d += 1;
            if *d < ku {
                break;
            }
            *d = 0;
        }
    }
    (marg, total)
}

/// Per-worker argmax; ties go to the disclosed score, then the lower score.
pub fn map_true_opinions(table: &PosteriorTable) -> Vec<Score> {
    table
        .marginals
        .iter()
        .zip(&table.disclosed)
        .map(|(row, &disclosed)| {
            let best = row.iter().copied().fold(0.0f64, f64::max);
            let tol = best * 1e-12;
            let tied = |o: Score| (row[o as usize - 1] - best).abs() <= tol;
            if tied(disclosed) {
                disclosed
            } else {
                (1..=table.k).find(|&o| tied(o)).expect("max is attained")
            }
        })
        .collect()
}

/// How per-question priors are built when inverting a whole dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum PriorSpec {
    Uniform,
    /// Uniform latent truth with per-worker rounded Gaussian noise.
    SharedTruth {
        sigmas: BTreeMap<WorkerId, f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuestionPosterior {
    pub question_id: QuestionId,
    /// Workers in arrival order.
    pub workers: Vec<WorkerId>,
    pub table: PosteriorTable,
    pub map: Vec<Score>,
}

#[derive(Debug, Clone)]
pub struct InferenceSettings {
    pub gammas: BTreeMap<WorkerId, f64>,
    /// Used for workers missing from `gammas`; `None` makes that an error.
    pub default_gamma: Option<f64>,
    pub rule: DisclosureRule,
    pub target: ConformityTarget,
    pub prior: PriorSpec,
    pub limit: EnumerationLimit,
}

impl InferenceSettings {
    pub fn uniform_gamma(gamma: f64) -> Self {
        Self {
            gammas: BTreeMap::new(),
            default_gamma: Some(gamma),
            rule: DisclosureRule::Switch,
            target: ConformityTarget::Mean,
            prior: PriorSpec::Uniform,
            limit: EnumerationLimit::default(),
        }
    }

    fn gamma(&self, w: &WorkerId) -> Result<f64, InferenceError> {
        self.gammas
            .get(w)
            .copied()
            .or(self.default_gamma)
            .ok_or_else(|| InferenceError::MissingGamma(w.clone()))
    }
}

/// Inverts every question of a sequential dataset. Questions are independent
/// and processed through [`par::try_map_slice`]; each question's enumeration
/// runs serially inside it.
pub fn infer_dataset(
    dataset: &Dataset,
    settings: &InferenceSettings,
    exec: Execution,
) -> Result<Vec<QuestionPosterior>, InferenceError> {
    if dataset.mode() != Mode::Sequential {
        return Err(InferenceError::WrongMode(dataset.mode()));
    }
    let k = dataset.scale().k();
    let sequences = dataset.sequences();
    par::try_map_slice(exec, &sequences, |seq| {
        let workers: Vec<WorkerId> = seq.iter().map(|e| e.worker_id.clone()).collect();
        let disclosed: Vec<Score> = seq.iter().map(|e| e.score).collect();
        let gammas = workers
            .iter()
            .map(|w| settings.gamma(w))
            .collect::<Result<Vec<_>, _>>()?;
        let bias = BiasModel::new(k, gammas, settings.rule, settings.target)?;
        let prior = match &settings.prior {
            PriorSpec::Uniform => Prior::uniform(workers.len(), k),
            PriorSpec::SharedTruth { sigmas } => {
                let s = workers
                    .iter()
                    .map(|w| {
                        sigmas.get(w).copied().ok_or_else(|| {
                            InferenceError::InvalidPrior(format!("no noise level for worker {w}"))
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Prior::shared_truth_gaussian(vec![1.0 / k as f64; k as usize], &s)?
            }
        };
        let table = posterior_true(
            &bias,
            &prior,
            &disclosed,
            &settings.limit,
            Execution::Serial,
        )?;
        let map = map_true_opinions(&table);
        Ok(QuestionPosterior {
            question_id: seq[0].question_id.clone(),
            workers,
            table,
            map,
        })
    })
}
