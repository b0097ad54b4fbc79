//! Markov state estimation from jointly distributed scenario data.
//!
//! Each stage gets an independent spherical Gaussian-mixture fit over
//! standardized features (expectation-maximization, farthest-point
//! seeding), the maximum-responsibility labels classify every sample into
//! a state, and transition matrices follow from label counts between
//! consecutive stages. Everything is deterministic for a fixed seed.

use crate::sddp::MarkovLattice;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

const VARIANCE_FLOOR: f64 = 1e-6;
const EM_MAX_ITERATIONS: usize = 100;
const EM_LOGLIK_TOL: f64 = 1e-8;

/// Standardized per-stage feature rows: `rows[stage][sample][feature]`.
#[derive(Clone, Debug)]
pub struct FeatureMatrix {
    pub rows: Vec<Vec<Vec<f64>>>,
}

#[derive(Error, Debug)]
pub enum MarkovError {
    #[error("state count {k} must lie in [1, {samples}]")]
    BadStateCount { k: usize, samples: usize },
    #[error("feature matrix is ragged or empty")]
    BadFeatures,
}

impl FeatureMatrix {
    /// Builds and standardizes features per stage and column; constant
    /// columns map to zero.
    pub fn standardized(raw: Vec<Vec<Vec<f64>>>) -> Result<Self, MarkovError> {
        if raw.is_empty() || raw[0].is_empty() || raw[0][0].is_empty() {
            return Err(MarkovError::BadFeatures);
        }
        let samples = raw[0].len();
        let features = raw[0][0].len();
        let mut rows = raw;
        for stage_rows in rows.iter_mut() {
            if stage_rows.len() != samples || stage_rows.iter().any(|r| r.len() != features) {
                return Err(MarkovError::BadFeatures);
            }
            for f in 0..features {
                let mean: f64 = stage_rows.iter().map(|r| r[f]).sum::<f64>() / samples as f64;
                let var: f64 = stage_rows
                    .iter()
                    .map(|r| (r[f] - mean) * (r[f] - mean))
                    .sum::<f64>()
                    / samples as f64;
                let std = var.sqrt();
                for r in stage_rows.iter_mut() {
                    r[f] = if std > 1e-12 { (r[f] - mean) / std } else { 0.0 };
                }
            }
        }
        Ok(Self { rows })
    }

    pub fn stages(&self) -> usize {
        self.rows.len()
    }

    pub fn samples(&self) -> usize {
        self.rows[0].len()
    }
}

/// Per-stage state assignment plus the fitted component means.
#[derive(Clone, Debug)]
pub struct StateFit {
    /// `labels[stage][sample]`, values in `0..states_per_stage[stage]`.
    pub labels: Vec<Vec<usize>>,
    /// `means[stage][state][feature]` in standardized space.
    pub means: Vec<Vec<Vec<f64>>>,
}

/// Fits up to `k` states per stage. Stages with fewer distinct rows than
/// `k` collapse to the distinct count; empty states are dropped and labels
/// reindexed compactly, so every surviving state has members.
pub fn fit_states(
    features: &FeatureMatrix,
    k: usize,
    seed: u64,
) -> Result<StateFit, MarkovError> {
    let samples = features.samples();
    if k == 0 || k > samples {
        return Err(MarkovError::BadStateCount { k, samples });
    }
    let mut labels = Vec::with_capacity(features.stages());
    let mut means = Vec::with_capacity(features.stages());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for stage_rows in &features.rows {
        let (l, m) = fit_stage(stage_rows, k, &mut rng);
        labels.push(l);
        means.push(m);
    }
    Ok(StateFit { labels, means })
}

fn distance2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn fit_stage(rows: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<Vec<f64>>) {
    let n = rows.len();
    let dim = rows[0].len();

    // Duplicate rows cannot support separate states.
    let mut distinct: Vec<&Vec<f64>> = Vec::new();
    for r in rows {
        if !distinct.iter().any(|d| d.as_slice() == r.as_slice()) {
            distinct.push(r);
        }
    }
    let k_eff = k.min(distinct.len());
    if k_eff == 1 {
        // Keep the RNG stream aligned across stages regardless of collapse.
        let _ = rng.random_range(0..n);
        let mean: Vec<f64> = (0..dim)
            .map(|f| rows.iter().map(|r| r[f]).sum::<f64>() / n as f64)
            .collect();
        return (vec![0; n], vec![mean]);
    }

    // Farthest-point seeding: random first center, then repeatedly the
    // row farthest from its nearest chosen center (ties: lowest index).
    let mut centers: Vec<Vec<f64>> = vec![rows[rng.random_range(0..n)].clone()];
    while centers.len() < k_eff {
        let mut best = (0usize, -1.0f64);
        for (i, r) in rows.iter().enumerate() {
            let d = centers
                .iter()
                .map(|c| distance2(r, c))
                .fold(f64::INFINITY, f64::min);
            if d > best.1 {
                best = (i, d);
            }
        }
        centers.push(rows[best.0].clone());
    }

    // Spherical-covariance EM in log space.
    let mut weights = vec![1.0 / k_eff as f64; k_eff];
    let mut variances = vec![1.0f64.max(VARIANCE_FLOOR); k_eff];
    let mut responsibilities = vec![vec![0.0; k_eff]; n];
    let mut last_loglik = f64::NEG_INFINITY;
    for _ in 0..EM_MAX_ITERATIONS {
        // E step.
        let mut loglik = 0.0;
        for (i, r) in rows.iter().enumerate() {
            let logp: Vec<f64> = (0..k_eff)
                .map(|c| {
                    weights[c].max(1e-300).ln()
                        - 0.5 * dim as f64 * (2.0 * std::f64::consts::PI * variances[c]).ln()
                        - 0.5 * distance2(r, &centers[c]) / variances[c]
                })
                .collect();
            let max = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = logp.iter().map(|lp| (lp - max).exp()).sum();
            loglik += max + denom.ln();
            for c in 0..k_eff {
                responsibilities[i][c] = (logp[c] - max).exp() / denom;
            }
        }
        // M step.
        for c in 0..k_eff {
            let mass: f64 = responsibilities.iter().map(|r| r[c]).sum();
            if mass < 1e-12 {
                continue;
            }
            weights[c] = mass / n as f64;
            for f in 0..dim {
                centers[c][f] = rows
                    .iter()
                    .zip(&responsibilities)
                    .map(|(r, resp)| resp[c] * r[f])
                    .sum::<f64>()
                    / mass;
            }
            variances[c] = (rows
                .iter()
                .zip(&responsibilities)
                .map(|(r, resp)| resp[c] * distance2(r, &centers[c]))
                .sum::<f64>()
                / (mass * dim as f64))
                .max(VARIANCE_FLOOR);
        }
        if (loglik - last_loglik).abs() < EM_LOGLIK_TOL * (1.0 + loglik.abs()) {
            break;
        }
        last_loglik = loglik;
    }

    // Maximum-responsibility labels, ties to the lowest state.
    let mut labels: Vec<usize> = responsibilities
        .iter()
        .map(|resp| {
            let mut best = 0;
            for c in 1..k_eff {
                if resp[c] > resp[best] {
                    best = c;
                }
            }
            best
        })
        .collect();

    // Drop empty states, reindex compactly.
    let mut remap = vec![usize::MAX; k_eff];
    let mut kept_means: Vec<Vec<f64>> = Vec::new();
    for &l in &labels {
        if remap[l] == usize::MAX {
            remap[l] = kept_means.len();
            kept_means.push(centers[l].clone());
        }
    }
    for l in labels.iter_mut() {
        *l = remap[*l];
    }
    (labels, kept_means)
}

/// Transition matrices from label counts: `M[t][m][u]` is the share of
/// stage-`t` members of `m` that land in `u` at `t+1`. Rows with no
/// source samples fall back to the next stage's marginal distribution.
pub fn estimate_transitions(labels: &[Vec<usize>]) -> Vec<Vec<Vec<f64>>> {
    let stages = labels.len();
    let samples = labels.first().map_or(0, |l| l.len());
    let counts_per_stage: Vec<usize> = labels
        .iter()
        .map(|l| l.iter().copied().max().unwrap_or(0) + 1)
        .collect();
    let mut out = Vec::with_capacity(stages.saturating_sub(1));
    for t in 0..stages.saturating_sub(1) {
        let (k_from, k_to) = (counts_per_stage[t], counts_per_stage[t + 1]);
        let mut counts = vec![vec![0usize; k_to]; k_from];
        let mut marginal = vec![0usize; k_to];
        for s in 0..samples {
            counts[labels[t][s]][labels[t + 1][s]] += 1;
            marginal[labels[t + 1][s]] += 1;
        }
        let matrix: Vec<Vec<f64>> = counts
            .iter()
            .map(|row| {
                let total: usize = row.iter().sum();
                if total == 0 {
                    marginal
                        .iter()
                        .map(|&m| m as f64 / samples as f64)
                        .collect()
                } else {
                    row.iter().map(|&c| c as f64 / total as f64).collect()
                }
            })
            .collect();
        out.push(matrix);
    }
    out
}

/// Full pipeline: fit states, count transitions, package the lattice with
/// sample membership and the stage-0 marginal as initial distribution.
pub fn estimate_chain(
    features: &FeatureMatrix,
    k: usize,
    seed: u64,
) -> Result<(MarkovLattice, StateFit), MarkovError> {
    let fit = fit_states(features, k, seed)?;
    let transitions = estimate_transitions(&fit.labels);
    let samples = features.samples();
    let state_counts: Vec<usize> = fit
        .labels
        .iter()
        .map(|l| l.iter().copied().max().unwrap_or(0) + 1)
        .collect();
    let members: Vec<Vec<Vec<usize>>> = fit
        .labels
        .iter()
        .zip(&state_counts)
        .map(|(stage_labels, &k_t)| {
            let mut m = vec![Vec::new(); k_t];
            for (s, &l) in stage_labels.iter().enumerate() {
                m[l].push(s);
            }
            m
        })
        .collect();
    let initial_distribution: Vec<f64> = members[0]
        .iter()
        .map(|m| m.len() as f64 / samples as f64)
        .collect();
    let lattice = MarkovLattice {
        state_counts,
        initial_distribution,
        transitions,
        members,
        labels: fit.labels.clone(),
    };
    Ok((lattice, fit))
}

/// Labels as CSV rows `stage,sample,state`, all 1-based.
pub fn labels_to_csv(labels: &[Vec<usize>]) -> String {
    let mut out = String::from("stage,sample,state\n");
    for (t, stage_labels) in labels.iter().enumerate() {
        for (s, &state) in stage_labels.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", t + 1, s + 1, state + 1));
        }
    }
    out
}

/// Transition matrices as CSV rows `stage,from,to,prob`; `stage` is the
/// source stage, 1-based.
pub fn transitions_to_csv(transitions: &[Vec<Vec<f64>>]) -> String {
    let mut out = String::from("stage,from,to,prob\n");
    for (t, matrix) in transitions.iter().enumerate() {
        for (from, row) in matrix.iter().enumerate() {
            for (to, &p) in row.iter().enumerate() {
                out.push_str(&format!("{},{},{},{}\n", t + 1, from + 1, to + 1, p));
            }
        }
    }
    out
}
