//! Independent oracles shared by the integration suites. Nothing here calls
//! into the code paths it checks.

#![allow(dead_code)]

use rand::Rng;

/// Straight-from-definition metrics for one question:
/// `(drop, ratio, reliability, accuracy)` per worker.
pub fn metrics_oracle(priors: &[u32], posts: &[u32], k: u32, eps: f64, cap: f64) -> Vec<[f64; 4]> {
    let n = priors.len() as f64;
    let mp: f64 = priors.iter().map(|&x| x as f64).sum::<f64>() / n;
    let ms: f64 = posts.iter().map(|&x| x as f64).sum::<f64>() / n;
    let shift = (mp - ms).abs();
    priors
        .iter()
        .zip(posts)
        .map(|(&p, &s)| {
            let drop = (p as f64 - s as f64).abs();
            let ratio = (drop + eps) / (shift + eps);
            let rel = if 1.0 / ratio > cap { cap } else { 1.0 / ratio };
            let acc = 1.0 - (s as f64 - ms).abs() / (k as f64 - 1.0);
            [drop, ratio, rel, acc]
        })
        .collect()
}

/// Switching disclosure sampled from its definition: the first worker is
/// truthful; later workers copy the rounded mean of earlier disclosures with
/// probability gamma.
pub fn sample_switch_disclosures<R: Rng>(
    truth: &[u32],
    gammas: &[f64],
    k: u32,
    rng: &mut R,
) -> Vec<u32> {
    let mut out: Vec<u32> = Vec::with_capacity(truth.len());
    for (i, &o) in truth.iter().enumerate() {
        let d = if i == 0 {
            o
        } else {
            let mean = out.iter().map(|&x| x as f64).sum::<f64>() / out.len() as f64;
            let copied = (mean.round() as i64).clamp(1, k as i64) as u32;
            if rng.random::<f64>() < gammas[i] {
                copied
            } else {
                o
            }
        };
        out.push(d);
    }
    out
}

/// Rejection-sampling estimate of per-worker posterior marginals under
/// uniform independent priors. Returns `(marginals, accepted)`.
pub fn rejection_posterior<R: Rng>(
    disclosed: &[u32],
    gammas: &[f64],
    k: u32,
    samples: usize,
    rng: &mut R,
) -> (Vec<Vec<f64>>, usize) {
    let n = disclosed.len();
    let mut counts = vec![vec![0usize; k as usize]; n];
    let mut accepted = 0;
    let mut truth = vec![0u32; n];
    for _ in 0..samples {
        for t in truth.iter_mut() {
            *t = rng.random_range(1..=k);
        }
        if sample_switch_disclosures(&truth, gammas, k, rng) == disclosed {
            accepted += 1;
            for (i, &t) in truth.iter().enumerate() {
                counts[i][t as usize - 1] += 1;
            }
        }
    }
    let marg = counts
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|c| c as f64 / accepted.max(1) as f64)
                .collect()
        })
        .collect();
    (marg, accepted)
}

pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Argmax with ties to `preferred`, then the lowest index (1-based scores).
pub fn argmax_score(row: &[f64], preferred: u32) -> u32 {
    let best = row.iter().cloned().fold(f64::MIN, f64::max);
    if row[preferred as usize - 1] == best {
        return preferred;
    }
    row.iter().position(|&p| p == best).unwrap() as u32 + 1
}
