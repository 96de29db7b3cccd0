//! Command-line front end: `simulate`, `metrics`, `aggregate`, `infer`, and
//! `evaluate`. Every command's output is a pure function of its arguments and
//! input files.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::aggregation::{self, AggregationError, Method, WeightSource};
use crate::disclosure::{ConformityTarget, DisclosureRule};
use crate::experiment::{self, ExperimentError, ExperimentOptions, InversionPrior};
use crate::inference::{self, EnumerationLimit, InferenceError, InferenceSettings, PriorSpec};
use crate::io::{self, IoError};
use crate::metrics::{self, MetricParams, MetricsError, DEFAULT_EPSILON, DEFAULT_R_CAP};
use crate::model::{LabelScale, Mode, ModelError, Score, WorkerId};
use crate::par::Execution;
use crate::sim::{Arrival, Profiles, SimConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "depjudge",
    version,
    about = "Consensus of dependent crowd opinions"
)]
struct Cli {
    /// Disable parallel execution.
    #[arg(long, global = true)]
    serial: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate biased opinion elicitation and write datasets, truth, and reports.
    Simulate(SimulateArgs),
    /// Compute per-worker metrics from a two-phase dataset.
    Metrics(MetricsArgs),
    /// Aggregate opinions per question, optionally scoring against a truth file.
    Aggregate(AggregateArgs),
    /// Posterior over true opinions for a sequential dataset.
    Infer(InferArgs),
    /// Compare methods against ground truth, from files or a simulation config.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
struct ScaleArgs {
    /// Generic numeric scale with labels "1".."k" (default: 7-point review scale).
    #[arg(long, value_name = "K", conflicts_with = "scale_file")]
    scale: Option<Score>,
    /// One label per line, worst first.
    #[arg(long, value_name = "PATH")]
    scale_file: Option<PathBuf>,
}

impl ScaleArgs {
    fn resolve(&self) -> Result<LabelScale, CliError> {
        Ok(match (&self.scale, &self.scale_file) {
            (Some(k), _) => LabelScale::numeric(*k)?,
            (None, Some(p)) => io::read_scale_file(p)?,
            (None, None) => LabelScale::seven_point(),
        })
    }
}

#[derive(Debug, Args)]
struct MetricArgs {
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    #[arg(long, default_value_t = DEFAULT_R_CAP)]
    r_cap: f64,
}

impl MetricArgs {
    fn params(&self) -> MetricParams {
        MetricParams {
            epsilon: self.epsilon,
            r_cap: self.r_cap,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum WeightSourceArg {
    PerQuestion,
    WorkerSummary,
}

impl From<WeightSourceArg> for WeightSource {
    fn from(w: WeightSourceArg) -> Self {
        match w {
            WeightSourceArg::PerQuestion => WeightSource::PerQuestion,
            WeightSourceArg::WorkerSummary => WeightSource::WorkerSummary,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Sequential,
    TwoPhase,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RuleArg {
    Blend,
    Switch,
}

impl From<RuleArg> for DisclosureRule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::Blend => DisclosureRule::Blend,
            RuleArg::Switch => DisclosureRule::Switch,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TargetArg {
    Mean,
    Mode,
}

impl From<TargetArg> for ConformityTarget {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::Mean => ConformityTarget::Mean,
            TargetArg::Mode => ConformityTarget::Mode,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ArrivalArg {
    Random,
    Fixed,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PriorArg {
    Uniform,
    SharedTruth,
}

#[derive(Debug, Args)]
struct SimArgs {
    /// TOML simulation config; replaces the other simulation flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    workers: usize,
    #[arg(long, default_value_t = 20)]
    questions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    replications: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::TwoPhase)]
    mode: ModeArg,
    #[command(flatten)]
    scale: ScaleArgs,
    /// Noise std-dev for every worker (shorthand for equal --sigma-min/--sigma-max).
    #[arg(long, conflicts_with_all = ["sigma_min", "sigma_max"])]
    sigma: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    sigma_min: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_max: f64,
    /// Conformity for every worker (shorthand for equal --gamma-min/--gamma-max).
    #[arg(long, conflicts_with_all = ["gamma_min", "gamma_max"])]
    gamma: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    gamma_min: f64,
    #[arg(long, default_value_t = 0.9)]
    gamma_max: f64,
    #[arg(long, value_enum, default_value_t = RuleArg::Blend)]
    rule: RuleArg,
    #[arg(long, value_enum, default_value_t = TargetArg::Mean)]
    target: TargetArg,
    #[arg(long, value_enum, default_value_t = ArrivalArg::Random)]
    arrival: ArrivalArg,
}

impl SimArgs {
    fn config(&self) -> Result<SimConfig, CliError> {
        if let Some(path) = &self.config {
            return Ok(io::read_sim_config(path)?);
        }
        let scale = self.scale.resolve()?;
        let mut c = SimConfig::new(scale, self.workers, self.questions, self.seed);
        c.replications = self.replications;
        c.mode = match self.mode {
            ModeArg::Sequential => Mode::Sequential,
            ModeArg::TwoPhase => Mode::TwoPhase,
        };
        let sigma = self
            .sigma
            .map_or((self.sigma_min, self.sigma_max), |s| (s, s));
        let gamma = self
            .gamma
            .map_or((self.gamma_min, self.gamma_max), |g| (g, g));
        c.profiles = Profiles::Ranges { sigma, gamma };
        c.rule = self.rule.into();
        c.target = self.target.into();
        c.arrival = match self.arrival {
            ArrivalArg::Random => Arrival::Random,
            ArrivalArg::Fixed => Arrival::Fixed,
        };
        c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    #[command(flatten)]
    metric: MetricArgs,
    #[arg(long, value_enum, default_value_t = WeightSourceArg::PerQuestion)]
    weight_source: WeightSourceArg,
    /// Prior for inverting sequential data.
    #[arg(long, value_enum, default_value_t = PriorArg::SharedTruth)]
    prior: PriorArg,
    /// Skip the true-opinion inverter.
    #[arg(long)]
    no_infer: bool,
    #[arg(long, default_value_t = inference::DEFAULT_MAX_WORKERS)]
    max_workers: usize,
}

impl ExperimentArgs {
    fn options(&self) -> ExperimentOptions {
        ExperimentOptions {
            metrics: self.metric.params(),
            weight_source: self.weight_source.into(),
            infer: !self.no_infer,
            prior: match self.prior {
                PriorArg::Uniform => InversionPrior::Uniform,
                PriorArg::SharedTruth => InversionPrior::ModelMatched,
            },
            limit: EnumerationLimit {
                max_workers: self.max_workers,
                ..EnumerationLimit::default()
            },
        }
    }
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    sim: SimArgs,
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    /// Two-phase dataset (JSON Lines).
    #[arg(long = "in")]
    input: PathBuf,
    #[command(flatten)]
    scale: ScaleArgs,
    #[command(flatten)]
    metric: MetricArgs,
    /// Per-(worker, question) metric table.
    #[arg(long)]
    out: PathBuf,
    /// Per-worker summary table (default: <out stem>_summary.csv).
    #[arg(long)]
    summary_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AggregateArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[command(flatten)]
    scale: ScaleArgs,
    #[command(flatten)]
    metric: MetricArgs,
    #[arg(long, value_enum, default_value_t = WeightSourceArg::PerQuestion)]
    weight_source: WeightSourceArg,
    /// Ground-truth file; enables the recovery report.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Consensus table.
    #[arg(long)]
    out: PathBuf,
    /// Recovery table (default: <out stem>_recovery.csv).
    #[arg(long)]
    recovery_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InferSettingsArgs {
    /// Conformity applied to every worker.
    #[arg(long)]
    gamma: Option<f64>,
    /// Per-worker profiles CSV with worker_id and conformity_gamma (and
    /// competence_sigma for the shared-truth prior).
    #[arg(long)]
    gammas: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = RuleArg::Switch)]
    rule: RuleArg,
    #[arg(long, value_enum, default_value_t = TargetArg::Mean)]
    target: TargetArg,
    #[arg(long, value_enum, default_value_t = PriorArg::Uniform)]
    prior: PriorArg,
    /// Noise std-dev for the shared-truth prior when no profile sigma is given.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, default_value_t = inference::DEFAULT_MAX_WORKERS)]
    max_workers: usize,
}

impl InferSettingsArgs {
    fn settings(&self) -> Result<InferenceSettings, CliError> {
        if self.gamma.is_none() && self.gammas.is_none() {
            return Err(CliError::Usage("infer needs --gamma or --gammas".into()));
        }
        let profiles = match &self.gammas {
            Some(p) => io::read_profiles(p)?,
            None => Vec::new(),
        };
        let gammas: BTreeMap<WorkerId, f64> = profiles
            .iter()
            .filter_map(|(w, _, g)| g.map(|g| (w.clone(), g)))
            .collect();
        let prior = match self.prior {
            PriorArg::Uniform => PriorSpec::Uniform,
            PriorArg::SharedTruth => {
                let mut sigmas: BTreeMap<WorkerId, f64> = profiles
                    .iter()
                    .filter_map(|(w, s, _)| s.map(|s| (w.clone(), s)))
                    .collect();
                if let Some(s) = self.sigma {
                    for (w, _, _) in &profiles {
                        sigmas.entry(w.clone()).or_insert(s);
                    }
                }
                PriorSpec::SharedTruth { sigmas }
            }
        };
        Ok(InferenceSettings {
            gammas,
            default_gamma: self.gamma,
            rule: self.rule.into(),
            target: self.target.into(),
            prior,
            limit: EnumerationLimit {
                max_workers: self.max_workers,
                ..EnumerationLimit::default()
            },
        })
    }
}

#[derive(Debug, Args)]
struct InferArgs {
    /// Sequential dataset (JSON Lines).
    #[arg(long = "in")]
    input: PathBuf,
    #[command(flatten)]
    scale: ScaleArgs,
    #[command(flatten)]
    settings: InferSettingsArgs,
    /// Posterior table.
    #[arg(long)]
    out: PathBuf,
    /// MAP readout table (default: <out stem>_map.csv).
    #[arg(long)]
    map_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Run a full experiment from a simulation config instead of reading files.
    #[arg(long, conflicts_with_all = ["input", "truth"])]
    config: Option<PathBuf>,
    #[arg(long = "in", requires = "truth")]
    input: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Hidden true opinions (CSV) for scoring the inverter on sequential data.
    #[arg(long, requires = "gammas")]
    true_opinions: Option<PathBuf>,
    #[command(flatten)]
    scale: ScaleArgs,
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Per-worker profiles CSV (conformity and noise) for the inverter.
    #[arg(long)]
    gammas: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = RuleArg::Blend)]
    rule: RuleArg,
    #[arg(long, value_enum, default_value_t = TargetArg::Mean)]
    target: TargetArg,
    /// Recovery table (file mode) or output directory (config mode).
    #[arg(long)]
    out: PathBuf,
}

/// `dir/stem.csv` -> `dir/stem_suffix.csv`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}_{suffix}.csv"))
}

pub fn run_cli<I, T>(argv: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            return Err(CliError::Usage(
                first.trim_start_matches("error: ").to_owned(),
            ));
        }
    };
    let exec = if cli.serial {
        Execution::Serial
    } else {
        Execution::Parallel
    };
    match cli.command {
        Command::Simulate(a) => simulate(a, exec),
        Command::Metrics(a) => metrics_cmd(a, exec),
        Command::Aggregate(a) => aggregate(a, exec),
        Command::Infer(a) => infer(a, exec),
        Command::Evaluate(a) => evaluate(a, exec),
    }
}

fn simulate(a: SimulateArgs, exec: Execution) -> Result<(), CliError> {
    let config = a.sim.config()?;
    let out = experiment::run_experiment(&config, &a.experiment.options(), exec)?;
    let scale = &config.scale;
    for rep in &out.replications {
        let dir = if config.replications == 1 {
            a.out.clone()
        } else {
            a.out.join(format!("rep{:03}", rep.sim.replication))
        };
        io::write_dataset_file(&rep.sim.dataset, &dir.join("dataset.jsonl"))?;
        io::write_truth_file(&rep.sim.ground_truth, scale, &dir.join("truth.jsonl"))?;
        io::write_true_opinions(
            &rep.sim.true_opinions,
            scale,
            &dir.join("true_opinions.csv"),
        )?;
        io::write_profiles(&rep.sim.profiles, &dir.join("profiles.csv"))?;
        if let Some(m) = &rep.metrics {
            io::write_metrics_table(m, &dir.join("metrics.csv"))?;
            io::write_summary_table(m, &dir.join("metrics_summary.csv"))?;
        }
        io::write_consensus_table(&rep.consensus, &dir.join("consensus.csv"))?;
        if config.replications > 1 {
            io::write_recovery_table(&rep.recovery, &dir.join("recovery.csv"))?;
        }
        if let Some(inf) = &rep.inference {
            io::write_map_table(&inf.posteriors, scale, &dir.join("map.csv"))?;
        }
    }
    io::write_recovery_table(&out.recovery, &a.out.join("recovery.csv"))?;
    if let Some(o) = &out.opinion_recovery {
        io::write_recovery_table(o, &a.out.join("opinion_recovery.csv"))?;
    }
    Ok(())
}

fn metrics_cmd(a: MetricsArgs, exec: Execution) -> Result<(), CliError> {
    let scale = a.scale.resolve()?;
    let dataset = io::parse_two_phase_file(&a.input, &scale)?;
    let report = metrics::compute_metrics(&dataset, &a.metric.params(), exec)?;
    io::write_metrics_table(&report, &a.out)?;
    let summary = a.summary_out.unwrap_or_else(|| sibling(&a.out, "summary"));
    io::write_summary_table(&report, &summary)?;
    Ok(())
}

fn aggregate(a: AggregateArgs, exec: Execution) -> Result<(), CliError> {
    let scale = a.scale.resolve()?;
    let dataset = io::parse_dataset_file(&a.input, &scale)?;
    let report = match dataset.mode() {
        Mode::TwoPhase => Some(metrics::compute_metrics(
            &dataset,
            &a.metric.params(),
            exec,
        )?),
        Mode::Sequential => None,
    };
    let results = aggregation::aggregate_dataset(
        &dataset,
        Method::for_mode(dataset.mode()),
        report.as_ref(),
        a.weight_source.into(),
    )?;
    io::write_consensus_table(&results, &a.out)?;
    if let Some(truth_path) = &a.truth {
        let truth = io::read_truth_file(truth_path, &scale)?;
        let recovery = aggregation::evaluate_recovery(&results, &truth)?;
        let path = a
            .recovery_out
            .unwrap_or_else(|| sibling(&a.out, "recovery"));
        io::write_recovery_table(&recovery, &path)?;
    }
    Ok(())
}

fn infer(a: InferArgs, exec: Execution) -> Result<(), CliError> {
    let scale = a.scale.resolve()?;
    let dataset = io::parse_sequential_file(&a.input, &scale)?;
    let settings = a.settings.settings()?;
    let posteriors = inference::infer_dataset(&dataset, &settings, exec)?;
    io::write_posterior_table(&posteriors, &a.out)?;
    let map_path = a.map_out.unwrap_or_else(|| sibling(&a.out, "map"));
    io::write_map_table(&posteriors, &scale, &map_path)?;
    Ok(())
}

fn evaluate(a: EvaluateArgs, exec: Execution) -> Result<(), CliError> {
    let options = a.experiment.options();
    if let Some(cfg) = &a.config {
        let config = io::read_sim_config(cfg)?;
        let out = experiment::run_experiment(&config, &options, exec)?;
        io::write_recovery_table(&out.recovery, &a.out.join("recovery.csv"))?;
        if let Some(o) = &out.opinion_recovery {
            io::write_recovery_table(o, &a.out.join("opinion_recovery.csv"))?;
        }
        return Ok(());
    }
    let (Some(input), Some(truth_path)) = (&a.input, &a.truth) else {
        return Err(CliError::Usage(
            "evaluate needs --config or --in with --truth".into(),
        ));
    };
    let scale = a.scale.resolve()?;
    let dataset = io::parse_dataset_file(input, &scale)?;
    let truth = io::read_truth_file(truth_path, &scale)?;
    let report = match dataset.mode() {
        Mode::TwoPhase => Some(metrics::compute_metrics(&dataset, &options.metrics, exec)?),
        Mode::Sequential => None,
    };
    let results = aggregation::aggregate_dataset(
        &dataset,
        Method::for_mode(dataset.mode()),
        report.as_ref(),
        options.weight_source,
    )?;
    let recovery = aggregation::evaluate_recovery(&results, &truth)?;
    io::write_recovery_table(&recovery, &a.out)?;

    if let (Mode::Sequential, Some(true_path), Some(profiles_path), true) =
        (dataset.mode(), &a.true_opinions, &a.gammas, options.infer)
    {
        let true_opinions = io::read_true_opinions(true_path, &scale)?;
        let profiles = io::read_profiles(profiles_path)?;
        let pick = |f: fn(&(WorkerId, Option<f64>, Option<f64>)) -> Option<f64>| {
            profiles
                .iter()
                .filter_map(|p| f(p).map(|v| (p.0.clone(), v)))
                .collect::<BTreeMap<_, _>>()
        };
        let settings = InferenceSettings {
            gammas: pick(|p| p.2),
            default_gamma: None,
            rule: a.rule.into(),
            target: a.target.into(),
            prior: match options.prior {
                InversionPrior::Uniform => PriorSpec::Uniform,
                InversionPrior::ModelMatched => PriorSpec::SharedTruth {
                    sigmas: pick(|p| p.1),
                },
            },
            limit: options.limit,
        };
        let posteriors = inference::infer_dataset(&dataset, &settings, exec)?;
        let opinion = experiment::opinion_recovery(&posteriors, &true_opinions);
        io::write_recovery_table(&opinion, &sibling(&a.out, "opinions"))?;
    }
    Ok(())
}
