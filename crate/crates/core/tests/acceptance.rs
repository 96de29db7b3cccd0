//! Acceptance suite. Each check prints one `[PASS]`/`[FAIL]` line; the
//! process exits nonzero if any check fails.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use depjudge::aggregation::{unweighted_consensus, weighted_consensus};
use depjudge::disclosure::DisclosureRule;
use depjudge::experiment::{run_experiment, ExperimentOptions, FACE_VALUE_METHOD, MAP_METHOD};
use depjudge::inference::{posterior_true, BiasModel, EnumerationLimit, Prior};
use depjudge::metrics::{compute_metrics, MetricParams};
use depjudge::metrics::{deviation_ratio, reliability};
use depjudge::model::{Observations, RawTwoPhase};
use depjudge::sim::{simulate_replication, Profiles, SimConfig};
use depjudge::{Dataset, Execution, LabelScale, Mode, QuestionId, WorkerId};

use common::*;

type Outcome = Result<String, String>;

fn timed(limit: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let out = f()?;
    let took = start.elapsed();
    if took > limit {
        return Err(format!("{out}; took {took:.2?}, limit {limit:?}"));
    }
    Ok(format!("{out}; {took:.2?}"))
}

fn first_discloser_truthful() -> Outcome {
    timed(Duration::from_secs(5), || {
        let mut violations = 0;
        let mut checked = 0;
        for seed in 0..100 {
            let mut c = SimConfig::new(LabelScale::seven_point(), 10, 20, seed);
            c.mode = Mode::Sequential;
            c.rule = if seed % 2 == 0 {
                DisclosureRule::Blend
            } else {
                DisclosureRule::Switch
            };
            c.profiles = Profiles::Ranges {
                sigma: (0.5, 2.0),
                gamma: (0.0, 1.0),
            };
            let out =
                simulate_replication(&c, 0, Execution::Parallel).map_err(|e| e.to_string())?;
            let Observations::Sequential(events) = out.dataset.observations() else {
                return Err("simulator produced a two-phase dataset".into());
            };
            for e in events.iter().filter(|e| e.order_index == 0) {
                checked += 1;
                if e.score != out.true_opinions[&(e.question_id.clone(), e.worker_id.clone())] {
                    violations += 1;
                }
            }
        }
        if checked != 2000 || violations > 0 {
            return Err(format!(
                "{violations} violations in {checked} first disclosures"
            ));
        }
        Ok(format!("{checked} first disclosures, 0 violations"))
    })
}

fn random_two_phase<R: Rng>(rng: &mut R, k: u32) -> (Dataset, Vec<Vec<(u32, u32)>>) {
    let m = rng.random_range(1..=3);
    let mut raw = Vec::new();
    let mut groups = Vec::new();
    let scale = LabelScale::numeric(k).unwrap();
    for q in 0..m {
        let n = rng.random_range(1..=5);
        let mut g = Vec::new();
        for w in 0..n {
            let (p, s) = (rng.random_range(1..=k), rng.random_range(1..=k));
            g.push((p, s));
            raw.push(RawTwoPhase {
                question_id: format!("q{q}").as_str().into(),
                worker_id: format!("w{w}").as_str().into(),
                prior_label: p.to_string(),
                posterior_label: s.to_string(),
            });
        }
        groups.push(g);
    }
    (Dataset::two_phase(raw, scale).unwrap(), groups)
}

fn metrics_match_oracle() -> Outcome {
    timed(Duration::from_secs(10), || {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = MetricParams::default();
        let mut worst: f64 = 0.0;
        let mut compared = 0;
        for _ in 0..1000 {
            let (d, groups) = random_two_phase(&mut rng, 7);
            let report =
                compute_metrics(&d, &params, Execution::Parallel).map_err(|e| e.to_string())?;
            let mut rows = report.per_question.iter();
            for g in &groups {
                let (pr, po): (Vec<u32>, Vec<u32>) = g.iter().copied().unzip();
                for o in metrics_oracle(&pr, &po, 7, params.epsilon, params.r_cap) {
                    let m = rows.next().ok_or("missing metrics row")?;
                    for (a, b) in [m.drop, m.deviation_ratio, m.reliability, m.accuracy]
                        .iter()
                        .zip(o)
                    {
                        worst = worst.max((a - b).abs());
                    }
                    compared += 1;
                }
            }
        }
        if worst > 1e-9 {
            return Err(format!("max deviation {worst:e} over {compared} rows"));
        }
        Ok(format!("{compared} rows, max deviation {worst:e}"))
    })
}

fn reliability_inverts_ratio() -> Outcome {
    let mut worst: f64 = 0.0;
    for drop in 1..=6 {
        for shift in 1..=6 {
            let r = deviation_ratio(drop as f64, shift as f64, 1e-9);
            worst = worst.max((reliability(r, 100.0) * r - 1.0).abs());
        }
    }
    if worst > 1e-6 {
        return Err(format!("max |rel*ratio - 1| = {worst:e}"));
    }
    Ok(format!("36 pairs, max |rel*ratio - 1| = {worst:e}"))
}

fn aggregation_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = Vec::new();
    for case in 0..10_000 {
        let k = rng.random_range(2..=10);
        let scale = LabelScale::numeric(k).unwrap();
        let n = rng.random_range(1..=12);
        let q = QuestionId::from("q");
        let posts: BTreeMap<WorkerId, u32> = (0..n)
            .map(|w| (WorkerId::new(format!("w{w}")), rng.random_range(1..=k)))
            .collect();
        let weights: BTreeMap<WorkerId, f64> = posts
            .keys()
            .map(|w| (w.clone(), rng.random_range(0.0..2.0)))
            .collect();
        let c = rng.random_range(0.01..10.0);
        let uniform: BTreeMap<WorkerId, f64> = posts.keys().map(|w| (w.clone(), c)).collect();
        let scaled: BTreeMap<WorkerId, f64> =
            weights.iter().map(|(w, &v)| (w.clone(), v * c)).collect();

        let plain = unweighted_consensus(&q, &posts, &scale).unwrap();
        let even = weighted_consensus(&q, &posts, &uniform, &scale).unwrap();
        let base = weighted_consensus(&q, &posts, &weights, &scale).unwrap();
        let big = weighted_consensus(&q, &posts, &scaled, &scale).unwrap();
        let lo = *posts.values().min().unwrap() as f64;
        let hi = *posts.values().max().unwrap() as f64;

        if even.final_label != plain.final_label || even.aggregate_score != plain.aggregate_score {
            violations.push(format!(
                "case {case}: uniform weights differ from plain mean"
            ));
        }
        if base.final_label != big.final_label {
            violations.push(format!(
                "case {case}: scaling weights by {c} changed the label"
            ));
        }
        if !(lo <= base.aggregate_score && base.aggregate_score <= hi) {
            violations.push(format!(
                "case {case}: aggregate {} outside [{lo}, {hi}]",
                base.aggregate_score
            ));
        }
    }
    if !violations.is_empty() {
        return Err(format!(
            "{} violations, first: {}",
            violations.len(),
            violations[0]
        ));
    }
    Ok("10000 instances, 0 violations".into())
}

fn posterior_matches_sampling() -> Outcome {
    timed(Duration::from_secs(60), || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let gammas: Vec<f64> = (0..3)
                .map(|_| [0.0, 0.5, 0.7][rng.random_range(0..3)])
                .collect();
            let truth: Vec<u32> = (0..3).map(|_| rng.random_range(1..=3)).collect();
            let disclosed = sample_switch_disclosures(&truth, &gammas, 3, &mut rng);
            let bias = BiasModel::switching(3, gammas.clone()).map_err(|e| e.to_string())?;
            let table = posterior_true(
                &bias,
                &Prior::uniform(3, 3),
                &disclosed,
                &EnumerationLimit::default(),
                Execution::Parallel,
            )
            .map_err(|e| e.to_string())?;
            let (mc, accepted) = rejection_posterior(&disclosed, &gammas, 3, 1_000_000, &mut rng);
            if accepted == 0 {
                return Err(format!("no accepted samples for {disclosed:?}"));
            }
            for (exact, est) in table.marginals.iter().zip(&mc) {
                worst = worst.max(total_variation(exact, est));
            }
        }
        if worst > 0.02 {
            return Err(format!("max TV {worst:.4}"));
        }
        Ok(format!("20 instances, max TV {worst:.4}"))
    })
}

fn noiseless_recovery() -> Outcome {
    let mut lines = Vec::new();
    for mode in [Mode::TwoPhase, Mode::Sequential] {
        let mut c = SimConfig::new(LabelScale::seven_point(), 6, 40, 6);
        c.mode = mode;
        c.replications = 2;
        c.profiles = Profiles::Ranges {
            sigma: (0.0, 0.0),
            gamma: (0.0, 0.0),
        };
        let out = run_experiment(&c, &ExperimentOptions::default(), Execution::Parallel)
            .map_err(|e| e.to_string())?;
        let mut rows: Vec<_> = out.recovery.rows.iter().collect();
        if mode == Mode::Sequential {
            let opinion = out
                .opinion_recovery
                .as_ref()
                .ok_or("inverter did not run")?;
            rows.extend(opinion.rows.iter().filter(|r| r.method == MAP_METHOD));
            if !rows.iter().any(|r| r.method == MAP_METHOD) {
                return Err("no MAP row".into());
            }
        }
        for r in rows {
            if r.exact_match_rate != 1.0 {
                return Err(format!("{mode:?} {} rate {}", r.method, r.exact_match_rate));
            }
            lines.push(format!("{}={}", r.method, r.exact_match_rate));
        }
    }
    Ok(lines.join(", "))
}

fn map_beats_face_value() -> Outcome {
    timed(Duration::from_secs(120), || {
        let mut c = SimConfig::new(LabelScale::seven_point(), 5, 50, 7);
        c.mode = Mode::Sequential;
        c.rule = DisclosureRule::Switch;
        c.replications = 4;
        c.profiles = Profiles::Ranges {
            sigma: (1.0, 1.0),
            gamma: (0.5, 0.9),
        };
        let out = run_experiment(&c, &ExperimentOptions::default(), Execution::Parallel)
            .map_err(|e| e.to_string())?;
        let rec = out.opinion_recovery.ok_or("inverter did not run")?;
        let map = rec.row(MAP_METHOD).ok_or("no MAP row")?;
        let face = rec.row(FACE_VALUE_METHOD).ok_or("no face-value row")?;
        let questions = c.m_questions * c.replications;
        let msg = format!(
            "{questions} questions, {} opinions: MAP {:.4} vs face value {:.4}",
            map.items, map.exact_match_rate, face.exact_match_rate
        );
        if map.exact_match_rate >= face.exact_match_rate {
            Ok(msg)
        } else {
            Err(msg)
        }
    })
}

fn run_pipeline(dir: &Path) -> Result<(), String> {
    let bin = env!("CARGO_BIN_EXE_depjudge");
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let steps: Vec<Vec<String>> = vec![
        vec![
            "simulate",
            "--workers",
            "6",
            "--questions",
            "15",
            "--seed",
            "99",
            "--out",
            &p("sim"),
        ]
        .into_iter()
        .map(String::from)
        .collect(),
        vec![
            "metrics".into(),
            "--in".into(),
            p("sim/dataset.jsonl"),
            "--out".into(),
            p("metrics.csv"),
        ],
        vec![
            "aggregate".into(),
            "--in".into(),
            p("sim/dataset.jsonl"),
            "--truth".into(),
            p("sim/truth.jsonl"),
            "--out".into(),
            p("consensus.csv"),
        ],
        vec![
            "evaluate".into(),
            "--in".into(),
            p("sim/dataset.jsonl"),
            "--truth".into(),
            p("sim/truth.jsonl"),
            "--out".into(),
            p("recovery.csv"),
        ],
    ];
    for args in steps {
        let out = Command::new(bin)
            .args(&args)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!(
                "{} failed: {}",
                args[0],
                String::from_utf8_lossy(&out.stderr)
            ));
        }
    }
    Ok(())
}

fn files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn cli_pipeline_deterministic() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_pipeline(a.path())?;
    run_pipeline(b.path())?;
    let (fa, fb) = (files(a.path()), files(b.path()));
    if fa.keys().ne(fb.keys()) {
        return Err(format!(
            "file sets differ: {:?} vs {:?}",
            fa.keys(),
            fb.keys()
        ));
    }
    let differing: Vec<_> = fa
        .iter()
        .filter(|(k, v)| fb[*k] != **v)
        .map(|(k, _)| k.clone())
        .collect();
    if !differing.is_empty() {
        return Err(format!("differing files: {differing:?}"));
    }
    Ok(format!("{} files byte-identical", fa.len()))
}

fn main() {
    let checks: [(&str, fn() -> Outcome); 8] = [
        (
            "first discloser reports the true opinion",
            first_discloser_truthful,
        ),
        (
            "metrics agree with direct computation",
            metrics_match_oracle,
        ),
        (
            "reliability is the inverse deviation ratio",
            reliability_inverts_ratio,
        ),
        ("weighted consensus properties", aggregation_properties),
        (
            "exact posterior matches rejection sampling",
            posterior_matches_sampling,
        ),
        (
            "noiseless, conformity-free data is recovered exactly",
            noiseless_recovery,
        ),
        (
            "MAP inversion recovers at least as well as face value",
            map_beats_face_value,
        ),
        ("CLI pipeline is deterministic", cli_pipeline_deterministic),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        match check() {
            Ok(detail) => println!("[PASS] {}. {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {}. {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "{} of {} acceptance checks passed",
        checks.len() - failed,
        checks.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
