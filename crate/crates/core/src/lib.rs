//! Consensus engine and simulation harness for dependent crowd opinions.
//!
//! Workers who can see earlier opinions tend to drift toward them. This crate
//! models sequential and two-phase elicitation, scores workers by how far they
//! move relative to the crowd, aggregates with those scores as weights, and
//! inverts a known disclosure model to recover true opinions. A seeded
//! simulator with hidden ground truth ties it all together.
//!
//! Modules:
//! * [`model`]: label scales, opinions, validated datasets
//! * [`metrics`]: drop of confidence, reliability, accuracy, weights
//! * [`aggregation`]: weighted and baseline consensus, recovery scoring
//! * [`disclosure`] and [`sim`]: the generative bias model
//! * [`inference`]: exact posterior over true opinions by enumeration
//! * [`experiment`]: simulate, evaluate, and compare methods
//! * [`io`] and [`cli`]: file formats and the command-line front end

pub mod aggregation;
pub mod cli;
pub mod disclosure;
pub mod experiment;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod model;
pub mod par;
pub mod sim;

pub use model::{Dataset, LabelScale, Mode, QuestionId, Score, WorkerId};
pub use par::Execution;
