//! How a worker's true opinion turns into the disclosed one after seeing
//! earlier disclosures. Shared by the simulator (sampling) and the inverter
//! (probability evaluation) so both sides use one kernel family.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::modal_score;
use crate::model::Score;

/// What a conforming worker is pulled toward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConformityTarget {
    #[default]
    Mean,
    /// Modal score, ties toward the mean then the lower score.
    Mode,
}

/// Disclosure rule for a worker with conformity `gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisclosureRule {
    /// Deterministic: `round((1 - gamma) * o + gamma * target)`.
    #[default]
    Blend,
    /// Stochastic: with probability `gamma` disclose `round(target)`, otherwise `o`.
    Switch,
}

impl fmt::Display for DisclosureRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DisclosureRule::Blend => "blend",
            DisclosureRule::Switch => "switch",
        })
    }
}

impl FromStr for DisclosureRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "blend" => Ok(Self::Blend),
            "switch" => Ok(Self::Switch),
            _ => Err(format!(
                "unknown disclosure rule {s:?} (expected blend or switch)"
            )),
        }
    }
}

impl FromStr for ConformityTarget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Self::Mean),
            "mode" => Ok(Self::Mode),
            _ => Err(format!(
                "unknown conformity target {s:?} (expected mean or mode)"
            )),
        }
    }
}

pub fn clamp_round(x: f64, k: Score) -> Score {
    (x.round() as i64).clamp(1, k as i64) as Score
}

/// Target value of the observed scores; `None` for an empty history.
pub fn target_value(history: &[Score], target: ConformityTarget) -> Option<f64> {
    if history.is_empty() {
        return None;
    }
    Some(match target {
        ConformityTarget::Mean => {
            history.iter().map(|&s| s as f64).sum::<f64>() / history.len() as f64
        }
        ConformityTarget::Mode => modal_score(history.iter().copied())? as f64,
    })
}

/// Deterministic blended disclosure. An empty history discloses the true
/// opinion unchanged.
pub fn blend(
    true_opinion: Score,
    history: &[Score],
    gamma: f64,
    k: Score,
    target: ConformityTarget,
) -> Score {
    match target_value(history, target) {
        None => true_opinion,
        Some(t) => clamp_round((1.0 - gamma) * true_opinion as f64 + gamma * t, k),
    }
}

/// Probability that a worker discloses `disclosed` given their true opinion
/// and the previously disclosed scores.
pub fn kernel_probability(
    rule: DisclosureRule,
    disclosed: Score,
    true_opinion: Score,
    history: &[Score],
    gamma: f64,
    k: Score,
    target: ConformityTarget,
) -> f64 {
    let Some(t) = target_value(history, target) else {
        return if disclosed == true_opinion { 1.0 } else { 0.0 };
    };
    match rule {
        DisclosureRule::Blend => {
            if blend(true_opinion, history, gamma, k, target) == disclosed {
                1.0
            } else {
                0.0
            }
        }
        DisclosureRule::Switch => {
            let copied = clamp_round(t, k);
            let mut p = 0.0;
            if disclosed == true_opinion {
                p += 1.0 - gamma;
            }
            if disclosed == copied {
                p += gamma;
            }
            p
        }
    }
}

/// Draws a disclosure under `rule`. `Blend` consumes no randomness.
pub fn sample_disclosure<R: Rng + ?Sized>(
    rule: DisclosureRule,
    true_opinion: Score,
    history: &[Score],
    gamma: f64,
    k: Score,
    target: ConformityTarget,
    rng: &mut R,
) -> Score {
    match rule {
        DisclosureRule::Blend => blend(true_opinion, history, gamma, k, target),
        DisclosureRule::Switch => match target_value(history, target) {
            None => true_opinion,
            Some(t) => {
                if rng.random::<f64>() < gamma {
                    clamp_round(t, k)
                } else {
                    true_opinion
                }
            }
        },
    }
}
