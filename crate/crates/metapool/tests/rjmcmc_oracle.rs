//! Chain-versus-quadrature validation of the reversible-jump sampler.
//!
//! The binomial-beta model is cheap to integrate numerically for small L:
//! for each partition the marginal likelihood factorizes over blocks into
//! one-dimensional integrals over the block mean, and the q prior adds one
//! log-spaced average. Matching the chain's partition frequencies against
//! that oracle exercises every move in the sampler, including the
//! reversible-jump acceptance ratio — a mismatch here blocks release.

use std::collections::HashMap;

use metapool::partitions::{enumerate_partitions, prior_log_mass, Partition, PartitionPrior};
use metapool::rjmcmc::{mh_alpha, run_rj_chain, RjConfig, RjState};
use metapool::study_data::{ContinuityPolicy, EffectScale, Study, StudySet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::function::beta::ln_beta;

fn toy_set(counts: &[(u64, u64)]) -> StudySet {
    let studies = counts
        .iter()
        .enumerate()
        .map(|(i, &(events, trials))| {
            Study::new(i as u32 + 1, format!("study {}", i + 1), events, trials).unwrap()
        })
        .collect();
    StudySet::new(studies, EffectScale::LogOdds, ContinuityPolicy::Reject).unwrap()
}

fn log_mean_exp(values: &[f64]) -> f64 {
    let max = values.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    max + (values.iter().map(|&v| (v - max).exp()).sum::<f64>() / values.len() as f64).ln()
}

/// Partition posterior by tensor quadrature: a midpoint rule over each block
/// mean in (0,1) and an even grid in log q for the log-uniform prior.
fn quadrature_partition_posterior(
    counts: &[(u64, u64)],
    n_alpha: usize,
    n_q: usize,
) -> HashMap<Partition, f64> {
    let l = counts.len();
    let (q_lo, q_hi) = (100.0f64.ln(), 1000.0f64.ln());
    let q_nodes: Vec<f64> = (0..n_q)
        .map(|j| (q_lo + (q_hi - q_lo) * j as f64 / (n_q - 1) as f64).exp())
        .collect();
    let alpha_nodes: Vec<f64> = (0..n_alpha)
        .map(|t| (t as f64 + 0.5) / n_alpha as f64)
        .collect();
    // Per-study log evidence ln ∫ Bin(y; n, θ) Beta(θ; qα, q(1−α)) dθ up to
    // the binomial coefficient, which cancels across partitions.
    let mut evidence = vec![vec![vec![0.0f64; n_alpha]; n_q]; l];
    for (i, &(y, n)) in counts.iter().enumerate() {
        let (y, n) = (y as f64, n as f64);
        for (j, &q) in q_nodes.iter().enumerate() {
            for (t, &a) in alpha_nodes.iter().enumerate() {
                evidence[i][j][t] =
                    ln_beta(q * a + y, q * (1.0 - a) + n - y) - ln_beta(q * a, q * (1.0 - a));
            }
        }
    }
    let mut entries: Vec<(Partition, f64)> = Vec::new();
    for g in enumerate_partitions(l).unwrap() {
        let blocks = g.blocks();
        let mut log_by_q = Vec::with_capacity(n_q);
        for j in 0..n_q {
            let mut total = 0.0;
            for members in &blocks {
                let joint: Vec<f64> = (0..n_alpha)
                    .map(|t| members.iter().map(|&i| evidence[i][j][t]).sum())
                    .collect();
                total += log_mean_exp(&joint);
            }
            log_by_q.push(total);
        }
        let log_marginal = log_mean_exp(&log_by_q);
        let log_prior = prior_log_mass(PartitionPrior::SizeBiased, &g).unwrap();
        entries.push((g, log_marginal + log_prior));
    }
    let norm = log_mean_exp(&entries.iter().map(|&(_, v)| v).collect::<Vec<f64>>())
        + (entries.len() as f64).ln();
    entries
        .into_iter()
        .map(|(g, v)| (g, (v - norm).exp()))
        .collect()
}

#[test]
fn chain_partition_frequencies_match_quadrature() {
    let counts = [(1u64, 10u64), (2, 10), (9, 10)];
    let set = toy_set(&counts);
    let config = RjConfig {
        seed: 11,
        ..RjConfig::default()
    };
    let summary = run_rj_chain(&set, &config).unwrap();
    let chain: HashMap<Partition, f64> = summary.partition_frequencies.iter().cloned().collect();
    let oracle = quadrature_partition_posterior(&counts, 4096, 64);
    assert_eq!(oracle.len(), 5);
    assert_eq!(chain.len(), 5, "the chain must visit all five partitions");
    let mut worst = 0.0f64;
    for (g, &exact) in &oracle {
        let observed = chain.get(g).copied().unwrap_or(0.0);
        let err = (observed - exact).abs();
        worst = worst.max(err);
        assert!(
            err <= 0.02,
            "partition {:?}: chain {observed:.4} vs quadrature {exact:.4}",
            g.assignment()
        );
    }
    println!("worst partition-frequency error: {worst:.4}");
}

#[test]
fn mh_alpha_long_run_matches_conditional_quadrature() {
    // Freeze (g, θ, q) and let only α move; its stationary law is
    // ∝ Π_i Beta(θ_i; qα, q(1−α)) on (0,1).
    let theta = [0.23, 0.31, 0.38];
    let q = 300.0;
    let mut state = RjState {
        g: Partition::pool_all(3),
        alpha: vec![0.3],
        q,
        theta: theta.to_vec(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let steps = 400_000;
    let burn = 10_000;
    let mut sum = 0.0;
    for step in 0..steps + burn {
        mh_alpha(&mut state, 0, 0.5, &mut rng).unwrap();
        if step >= burn {
            sum += state.alpha[0];
        }
    }
    let chain_mean = sum / steps as f64;

    let n_nodes = 200_000;
    let mut weights = Vec::with_capacity(n_nodes);
    let nodes: Vec<f64> = (0..n_nodes)
        .map(|t| 0.001 + (0.999 - 0.001) * (t as f64 + 0.5) / n_nodes as f64)
        .collect();
    for &a in &nodes {
        let norm = ln_beta(q * a, q * (1.0 - a));
        let logw: f64 = theta
            .iter()
            .map(|&t| (q * a - 1.0) * t.ln() + (q * (1.0 - a) - 1.0) * (1.0 - t).ln() - norm)
            .sum();
        weights.push(logw);
    }
    let max = weights.iter().fold(f64::NEG_INFINITY, |m, &w| m.max(w));
    let mut total = 0.0;
    let mut mean = 0.0;
    for (&a, &w) in nodes.iter().zip(&weights) {
        let p = (w - max).exp();
        total += p;
        mean += p * a;
    }
    let exact_mean = mean / total;
    assert!(
        (chain_mean - exact_mean).abs() <= 0.01,
        "chain {chain_mean:.5} vs quadrature {exact_mean:.5}"
    );
}

#[test]
fn independent_seeds_agree_within_monte_carlo_error() {
    let set = toy_set(&[(4, 13), (13, 23), (18, 83), (40, 60), (130, 166)]);
    let config_a = RjConfig {
        iterations: 80_000,
        burn_in: 20_000,
        seed: 1,
        ..RjConfig::default()
    };
    let config_b = RjConfig {
        seed: 2,
        ..config_a.clone()
    };
    let a = run_rj_chain(&set, &config_a).unwrap();
    let b = run_rj_chain(&set, &config_b).unwrap();
    for i in 0..set.len() {
        let (mean_a, se_a) = batch_mean_and_se(&a.theta_draws[i], 40);
        let (mean_b, se_b) = batch_mean_and_se(&b.theta_draws[i], 40);
        let combined = (se_a * se_a + se_b * se_b).sqrt();
        assert!(
            (mean_a - mean_b).abs() <= 3.0 * combined,
            "study {i}: {mean_a:.4} vs {mean_b:.4} with combined SE {combined:.5}"
        );
    }
}

/// Batch-means standard error, robust to the chain's autocorrelation.
fn batch_mean_and_se(draws: &[f64], num_batches: usize) -> (f64, f64) {
    let batch_size = draws.len() / num_batches;
    let used = batch_size * num_batches;
    let mean = draws[..used].iter().sum::<f64>() / used as f64;
    let mut variance = 0.0;
    for batch in 0..num_batches {
        let slice = &draws[batch * batch_size..(batch + 1) * batch_size];
        let batch_mean = slice.iter().sum::<f64>() / batch_size as f64;
        variance += (batch_mean - mean) * (batch_mean - mean);
    }
    variance /= (num_batches - 1) as f64;
    (mean, (variance / num_batches as f64).sqrt())
}
