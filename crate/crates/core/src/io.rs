//! Dataset files, truth files, configuration, and report tables.
//!
//! Datasets and truth files are JSON Lines, one record per line:
//!
//! ```text
//! {"question_id":"q1","worker_id":"w1","order_index":0,"label":"accept","timestamp":12.5}
//! {"question_id":"q1","worker_id":"w1","prior_label":"accept","posterior_label":"weak accept"}
//! {"question_id":"q1","truth_label":"accept"}
//! ```
//!
//! Reports are comma-separated with a header row. Floats are written in
//! shortest round-trip form, so identical inputs give byte-identical files.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{ConsensusResult, RecoveryReport};
use crate::disclosure::{ConformityTarget, DisclosureRule};
use crate::inference::QuestionPosterior;
use crate::metrics::MetricsReport;
use crate::model::{
    Dataset, LabelScale, Mode, ModelError, QuestionId, RawOpinion, RawRecords, RawTwoPhase, Score,
    WorkerId,
};
use crate::sim::{Arrival, Profiles, SimConfig, WorkerProfile};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: file not found", .0.display())]
    FileNotFound(PathBuf),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}:{line}: parse error: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{}:{line}: {source}", path.display())]
    InvalidRecord {
        path: PathBuf,
        line: usize,
        source: ModelError,
    },
    #[error("{}: {source}", path.display())]
    InvalidDataset { path: PathBuf, source: ModelError },
    #[error("{}: {source}", path.display())]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{}: {message}", path.display())]
    Config { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            IoError::FileNotFound(path.to_owned())
        } else {
            IoError::Io {
                path: path.to_owned(),
                source,
            }
        }
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> IoError + '_ {
    move |source| IoError::Csv {
        path: path.to_owned(),
        source,
    }
}

/// Non-blank lines of a file with their 1-based line numbers.
fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, IoError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(Vec<usize>, Vec<T>), IoError> {
    let mut lines = Vec::new();
    let mut records = Vec::new();
    for (line, text) in read_lines(path)? {
        let rec = serde_json::from_str(&text).map_err(|e| IoError::Parse {
            path: path.to_owned(),
            line,
            message: e.to_string(),
        })?;
        lines.push(line);
        records.push(rec);
    }
    Ok((lines, records))
}

fn validated(
    path: &Path,
    lines: &[usize],
    raw: RawRecords,
    scale: &LabelScale,
) -> Result<Dataset, IoError> {
    Dataset::validate(raw, scale.clone()).map_err(|source| match source.record() {
        Some(r) => IoError::InvalidRecord {
            path: path.to_owned(),
            line: lines[r],
            source,
        },
        None => IoError::InvalidDataset {
            path: path.to_owned(),
            source,
        },
    })
}

pub fn parse_sequential_file(path: &Path, scale: &LabelScale) -> Result<Dataset, IoError> {
    let (lines, raw) = read_jsonl::<RawOpinion>(path)?;
    validated(path, &lines, RawRecords::Sequential(raw), scale)
}

pub fn parse_two_phase_file(path: &Path, scale: &LabelScale) -> Result<Dataset, IoError> {
    let (lines, raw) = read_jsonl::<RawTwoPhase>(path)?;
    validated(path, &lines, RawRecords::TwoPhase(raw), scale)
}

/// Detects the mode from the first record (`prior_label` marks two-phase).
pub fn detect_mode(path: &Path) -> Result<Mode, IoError> {
    let lines = read_lines(path)?;
    let Some((line, first)) = lines.first() else {
        return Err(IoError::InvalidDataset {
            path: path.to_owned(),
            source: ModelError::EmptyDataset,
        });
    };
    let value: serde_json::Value = serde_json::from_str(first).map_err(|e| IoError::Parse {
        path: path.to_owned(),
        line: *line,
        message: e.to_string(),
    })?;
    Ok(if value.get("prior_label").is_some() {
        Mode::TwoPhase
    } else {
        Mode::Sequential
    })
}

pub fn parse_dataset_file(path: &Path, scale: &LabelScale) -> Result<Dataset, IoError> {
    match detect_mode(path)? {
        Mode::Sequential => parse_sequential_file(path, scale),
        Mode::TwoPhase => parse_two_phase_file(path, scale),
    }
}

pub fn write_dataset<W: Write>(dataset: &Dataset, mut out: W) -> std::io::Result<()> {
    match dataset.to_raw() {
        RawRecords::Sequential(rs) => {
            for r in rs {
                serde_json::to_writer(&mut out, &r)?;
                out.write_all(b"\n")?;
            }
        }
        RawRecords::TwoPhase(rs) => {
            for r in rs {
                serde_json::to_writer(&mut out, &r)?;
                out.write_all(b"\n")?;
            }
        }
    }
    out.flush()
}

fn create(path: &Path) -> Result<BufWriter<File>, IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

pub fn write_dataset_file(dataset: &Dataset, path: &Path) -> Result<(), IoError> {
    write_dataset(dataset, create(path)?).map_err(io_err(path))
}

#[derive(Debug, Serialize, Deserialize)]
struct TruthRecord {
    question_id: QuestionId,
    truth_label: String,
}

pub fn write_truth_file(
    truth: &BTreeMap<QuestionId, Score>,
    scale: &LabelScale,
    path: &Path,
) -> Result<(), IoError> {
    let mut out = create(path)?;
    for (q, &s) in truth {
        let rec = TruthRecord {
            question_id: q.clone(),
            truth_label: scale
                .decode(s)
                .map_err(|source| IoError::InvalidDataset {
                    path: path.to_owned(),
                    source,
                })?
                .to_owned(),
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| io_err(path)(e.into()))?;
        out.write_all(b"\n").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

pub fn read_truth_file(
    path: &Path,
    scale: &LabelScale,
) -> Result<BTreeMap<QuestionId, Score>, IoError> {
    let (lines, recs) = read_jsonl::<TruthRecord>(path)?;
    let mut out = BTreeMap::new();
    for (line, rec) in lines.into_iter().zip(recs) {
        let score = scale
            .encode(&rec.truth_label)
            .map_err(|source| IoError::InvalidRecord {
                path: path.to_owned(),
                line,
                source,
            })?;
        if out.insert(rec.question_id.clone(), score).is_some() {
            return Err(IoError::Parse {
                path: path.to_owned(),
                line,
                message: format!("duplicate truth for question {}", rec.question_id),
            });
        }
    }
    Ok(out)
}

/// Scale file: one label per line, worst first.
pub fn read_scale_file(path: &Path) -> Result<LabelScale, IoError> {
    let labels = read_lines(path)?
        .into_iter()
        .map(|(_, l)| l.trim().to_owned());
    LabelScale::new(labels).map_err(|source| IoError::InvalidDataset {
        path: path.to_owned(),
        source,
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, IoError> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn finish(mut w: csv::Writer<BufWriter<File>>, path: &Path) -> Result<(), IoError> {
    w.flush().map_err(io_err(path))
}

fn num(x: f64) -> String {
    x.to_string()
}

pub fn write_metrics_table(report: &MetricsReport, path: &Path) -> Result<(), IoError> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "worker_id",
        "question_id",
        "drop",
        "deviation_ratio",
        "reliability",
        "accuracy",
        "weight",
    ])
    .map_err(csv_err(path))?;
    for m in &report.per_question {
        w.write_record([
            m.worker_id.as_str(),
            m.question_id.as_str(),
            &num(m.drop),
            &num(m.deviation_ratio),
            &num(m.reliability),
            &num(m.accuracy),
            &num(m.weight),
        ])
        .map_err(csv_err(path))?;
    }
    finish(w, path)
}

pub fn write_summary_table(report: &MetricsReport, path: &Path) -> Result<(), IoError> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "worker_id",
        "questions",
        "mean_drop",
        "mean_reliability",
        "mean_accuracy",
        "mean_weight",
    ])
    .map_err(csv_err(path))?;
    for s in &report.summaries {
        w.write_record([
            s.worker_id.as_str(),
            &s.questions.to_string(),
            &num(s.mean_drop),
            &num(s.mean_reliability),
            &num(s.mean_accuracy),
            &num(s.mean_weight),
        ])
        .map_err(csv_err(path))?;
    }
    finish(w, path)
}

pub fn write_consensus_table(results: &[ConsensusResult], path: &Path) -> Result<(), IoError> {
    let mut w = csv_writer(path)?;
    w.write_record(["question_id", "method", "aggregate_score", "final_label"])
        .map_err(csv_err(path))?;
    for r in results {
        w.write_record([
            r.question_id.as_str(),
            r.method.as_str(),
            &num(r.aggregate_score),
            &r.final_label,
        ])
        .map_err(csv_err(path))?;
    }
    finish(w, path)
}

pub fn write_recovery_table(report: &RecoveryReport, path: &Path) -> Result<(), IoError> {
    let mut w = csv_writer(path)?;
    w.write_record(["method", "exact_match_rate", "mae"])
        .map_err(csv_err(path))?;
    for r in &report.rows {
        w.write_record([r.method.as_str(), &num(r.exact_match_rate), &num(r.mae)])
            .map_err(csv_err(path))?;
    }
    finish(w, path)
}

pub fn write_posterior_table(posteriors: &[QuestionPosterior], path: &Path) -> Result<(), IoError> {
    let mut w = csv_writer(path)?;
    w.write_record(["question_id", "worker_id", "score", "probability"])
        .map_err(csv_err(path))?;
    for qp in posteriors {
        for (worker, row) in qp.workers.iter().zip(&qp.table.marginals) {
            for (o, p) in row.iter().enumerate() {
                w.write_record([
                    qp.question_id.as_str(),
                    worker.as_str(),
                    &(o + 1).to_string(),
                    &num(*p),
                ])
                .map_err(csv_err(path))?;
            }
        }
    }
    finish(w, path)
}

pub fn write_map_table(
    posteriors: &[QuestionPosterior],
    scale: &LabelScale,
    path: &Path,
) -> Result<(), IoError> {
    let mut w = csv_writer(path)?;
    w.write_record(["question_id", "worker_id", "disclosed_label", "map_label"])
        .map_err(csv_err(path))?;
    let label = |s: Score| scale.decode(s).expect("validated score");
    for qp in posteriors {
        for (i, worker) in qp.workers.iter().enumerate() {
            w.write_record([
                qp.question_id.as_str(),
                worker.as_str(),
                label(qp.table.disclosed[i]),
                label(qp.map[i]),
            ])
            .map_err(csv_err(path))?;
        }
    }
    finish(w, path)
}

pub fn write_true_opinions(
    true_opinions: &BTreeMap<(QuestionId, WorkerId), Score>,
    scale: &LabelScale,
    path: &Path,
) -> Result<(), IoError> {
    let mut w = csv_writer(path)?;
    w.write_record(["question_id", "worker_id", "true_label"])
        .map_err(csv_err(path))?;
    for ((q, wk), &s) in true_opinions {
        w.write_record([
            q.as_str(),
            wk.as_str(),
            scale.decode(s).expect("validated score"),
        ])
        .map_err(csv_err(path))?;
    }
    finish(w, path)
}

pub fn read_true_opinions(
    path: &Path,
    scale: &LabelScale,
) -> Result<BTreeMap<(QuestionId, WorkerId), Score>, IoError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
            IoError::FileNotFound(path.to_owned())
        }
        _ => csv_err(path)(e),
    })?;
    let mut out = BTreeMap::new();
    for (i, rec) in rdr
        .deserialize::<(QuestionId, WorkerId, String)>()
        .enumerate()
    {
        let (q, w, label) = rec.map_err(csv_err(path))?;
        let s = scale
            .encode(&label)
            .map_err(|source| IoError::InvalidRecord {
                path: path.to_owned(),
                line: i + 2,
                source,
            })?;
        out.insert((q, w), s);
    }
    Ok(out)
}

pub fn write_profiles(profiles: &[WorkerProfile], path: &Path) -> Result<(), IoError> {
    let mut w = csv_writer(path)?;
    w.write_record(["worker_id", "competence_sigma", "conformity_gamma"])
        .map_err(csv_err(path))?;
    for p in profiles {
        w.write_record([
            p.worker_id.as_str(),
            &num(p.competence_sigma),
            &num(p.conformity_gamma),
        ])
        .map_err(csv_err(path))?;
    }
    finish(w, path)
}

/// Reads worker profiles written by [`write_profiles`]. Only `worker_id` is
/// required; missing sigma or gamma columns read as `None`.
pub fn read_profiles(path: &Path) -> Result<Vec<(WorkerId, Option<f64>, Option<f64>)>, IoError> {
    #[derive(Deserialize)]
    struct Row {
        worker_id: WorkerId,
        #[serde(default, alias = "sigma")]
        competence_sigma: Option<f64>,
        #[serde(default, alias = "gamma")]
        conformity_gamma: Option<f64>,
    }
    if !path.exists() {
        return Err(IoError::FileNotFound(path.to_owned()));
    }
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err(path))?;
    rdr.deserialize::<Row>()
        .map(|r| {
            let r = r.map_err(csv_err(path))?;
            Ok((r.worker_id, r.competence_sigma, r.conformity_gamma))
        })
        .collect()
}

/// Simulation config file (TOML).
///
/// ```toml
/// workers = 20
/// questions = 50
/// seed = 42
/// replications = 100
/// mode = "sequential"          # or "two-phase"
/// scale = 7                     # numeric labels "1".."7"; omit for the review scale
/// rule = "blend"                # or "switch"
/// target = "mean"               # or "mode"
/// arrival = "random"            # or "fixed"
/// [profile_ranges]
/// sigma = [1.0, 1.0]
/// gamma = [0.0, 0.9]
/// ```
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfigFile {
    pub workers: Option<usize>,
    pub questions: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub replications: usize,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    pub scale: Option<Score>,
    pub labels: Option<Vec<String>>,
    #[serde(default)]
    pub rule: DisclosureRule,
    #[serde(default)]
    pub target: ConformityTarget,
    #[serde(default)]
    pub arrival: ArrivalName,
    pub ground_truth: Option<Vec<String>>,
    pub profile_ranges: Option<ProfileRanges>,
    #[serde(default)]
    pub profiles: Vec<ProfileEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArrivalName {
    #[default]
    Random,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileRanges {
    pub sigma: (f64, f64),
    pub gamma: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileEntry {
    pub worker_id: String,
    pub sigma: f64,
    pub gamma: f64,
}

fn one() -> usize {
    1
}

fn default_mode() -> Mode {
    Mode::TwoPhase
}

impl SimConfigFile {
    pub fn into_config(self) -> Result<SimConfig, String> {
        let scale = match (self.scale, self.labels) {
            (Some(_), Some(_)) => return Err("give either `scale` or `labels`, not both".into()),
            (Some(k), None) => LabelScale::numeric(k).map_err(|e| e.to_string())?,
            (None, Some(l)) => LabelScale::new(l).map_err(|e| e.to_string())?,
            (None, None) => LabelScale::seven_point(),
        };
        let n = match (self.workers, self.profiles.len()) {
            (Some(n), _) => n,
            (None, 0) => return Err("`workers` is required without explicit profiles".into()),
            (None, p) => p,
        };
        let profiles = if !self.profiles.is_empty() {
            if self.profile_ranges.is_some() {
                return Err("give either `profiles` or `profile_ranges`, not both".into());
            }
            Profiles::Explicit(
                self.profiles
                    .into_iter()
                    .map(|p| WorkerProfile {
                        worker_id: WorkerId(p.worker_id),
                        competence_sigma: p.sigma,
                        conformity_gamma: p.gamma,
                    })
                    .collect(),
            )
        } else {
            let r = self.profile_ranges.unwrap_or(ProfileRanges {
                sigma: (1.0, 1.0),
                gamma: (0.0, 0.9),
            });
            Profiles::Ranges {
                sigma: r.sigma,
                gamma: r.gamma,
            }
        };
        let ground_truth = self
            .ground_truth
            .map(|labels| {
                labels
                    .iter()
                    .map(|l| scale.encode(l))
                    .collect::<Result<Vec<_>, _>>()
            })
            .transpose()
            .map_err(|e| e.to_string())?;
        let mut config = SimConfig::new(scale, n, self.questions, self.seed);
        config.replications = self.replications;
        config.mode = self.mode;
        config.profiles = profiles;
        config.rule = self.rule;
        config.target = self.target;
        config.arrival = match self.arrival {
            ArrivalName::Random => Arrival::Random,
            ArrivalName::Fixed => Arrival::Fixed,
        };
        config.ground_truth = ground_truth;
        config.validate().map_err(|e| e.to_string())?;
        Ok(config)
    }
}

pub fn read_sim_config(path: &Path) -> Result<SimConfig, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let file: SimConfigFile = toml::from_str(&text).map_err(|e| IoError::Config {
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    file.into_config().map_err(|message| IoError::Config {
        path: path.to_owned(),
        message,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn parses_sequential() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "s.jsonl",
            "{\"question_id\":\"q1\",\"worker_id\":\"w1\",\"order_index\":0,\"label\":\"accept\",\"timestamp\":1.5}\n\
             \n\
             {\"question_id\":\"q1\",\"worker_id\":\"w2\",\"order_index\":1,\"label\":\"reject\"}\n",
        );
        let d = parse_sequential_file(&p, &LabelScale::seven_point()).unwrap();
        assert_eq!((d.m(), d.n()), (1, 2));
        assert_eq!(detect_mode(&p).unwrap(), Mode::Sequential);
    }

    #[test]
    fn missing_label_is_parse_error_on_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "s.jsonl",
            "{\"question_id\":\"q1\",\"worker_id\":\"w1\",\"order_index\":0}\n",
        );
        match parse_sequential_file(&p, &LabelScale::seven_point()) {
            Err(IoError::Parse { line: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_posterior_label_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "t.jsonl",
            "{\"question_id\":\"q1\",\"worker_id\":\"w1\",\"prior_label\":\"accept\",\"posterior_label\":\"accept\"}\n\
             {\"question_id\":\"q1\",\"worker_id\":\"w2\",\"prior_label\":\"accept\",\"posterior_label\":\"accept\"}\n\
             {\"question_id\":\"q2\",\"worker_id\":\"w1\",\"prior_label\":\"accept\",\"posterior_label\":\"nope\"}\n",
        );
        let err = parse_two_phase_file(&p, &LabelScale::seven_point()).unwrap_err();
        assert!(matches!(
            err,
            IoError::InvalidRecord {
                line: 3,
                source: ModelError::UnknownLabel { .. },
                ..
            }
        ));
        assert!(err.to_string().contains("t.jsonl:3"));
    }

    #[test]
    fn missing_file() {
        let err = parse_two_phase_file(
            Path::new("/nonexistent/x.jsonl"),
            &LabelScale::seven_point(),
        )
        .unwrap_err();
        assert!(matches!(err, IoError::FileNotFound(_)));
    }

    #[test]
    fn truth_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scale = LabelScale::seven_point();
        let truth: BTreeMap<QuestionId, Score> = [("q1".into(), 3), ("q2".into(), 7)].into();
        let p = dir.path().join("truth.jsonl");
        write_truth_file(&truth, &scale, &p).unwrap();
        assert_eq!(read_truth_file(&p, &scale).unwrap(), truth);
    }

    #[test]
    fn config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "c.toml",
            "workers = 4\nquestions = 6\nseed = 9\nmode = \"sequential\"\nrule = \"switch\"\n\
             [profile_ranges]\nsigma = [0.5, 1.0]\ngamma = [0.1, 0.2]\n",
        );
        let c = read_sim_config(&p).unwrap();
        assert_eq!(c.n_workers, 4);
        assert_eq!(c.mode, Mode::Sequential);
        assert_eq!(c.rule, DisclosureRule::Switch);
        assert_eq!(c.scale, LabelScale::seven_point());

        let bad = write(
            dir.path(),
            "b.toml",
            "workers = 4\nquestions = 6\ncolour = 1\n",
        );
        assert!(matches!(read_sim_config(&bad), Err(IoError::Config { .. })));
        let bad = write(
            dir.path(),
            "b2.toml",
            "workers = 4\nquestions = 6\nreplications = 0\n",
        );
        assert!(matches!(read_sim_config(&bad), Err(IoError::Config { .. })));
    }

    #[test]
    fn explicit_profiles_in_config() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "c.toml",
            "questions = 2\nscale = 5\nground_truth = [\"2\", \"5\"]\n\
             [[profiles]]\nworker_id = \"ann\"\nsigma = 0.0\ngamma = 0.0\n\
             [[profiles]]\nworker_id = \"bob\"\nsigma = 1.0\ngamma = 0.5\n",
        );
        let c = read_sim_config(&p).unwrap();
        assert_eq!(c.n_workers, 2);
        assert_eq!(c.scale.k(), 5);
        assert_eq!(c.ground_truth, Some(vec![2, 5]));
    }
}
