//! Dirichlet process mixture meta-analysis.
//!
//! Study effects are modeled as `e_i ~ N(mu_i, v_i)` with the `mu_i` drawn
//! from a random distribution `H ~ DP(M, N(eta, tau^2))`. The base-measure
//! parameters are fitted by maximum likelihood under the one-component
//! random-effects model, and the mixture is sampled by a collapsed
//! Chinese-restaurant Gibbs sweep: cluster means are integrated out while
//! studies are reseated, then redrawn from their conjugate posteriors to
//! record per-study effect draws and co-clustering frequencies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::diagnostics::{SimilarityMatrix, SimilaritySource};
use crate::error::{Error, Result};
use crate::pooling::EffectInterval;
use crate::stats::mean_and_interval;
use crate::study_data::StudySet;

/// Concentration grid and chain-length settings for the mixture sampler.
#[derive(Debug, Clone, Serialize)]
pub struct DpmConfig {
    /// Concentration values `M`; one chain runs per value.
    pub m_values: Vec<f64>,
    pub iterations: usize,
    pub burn_in: usize,
    pub seed: u64,
}

impl DpmConfig {
    /// Defaults for a set of `num_studies` studies: concentration grid
    /// `{0.01, 1/L, 1, L, L², 10L²}` and a 20,000-iteration chain discarding
    /// the first 5,000.
    pub fn default_for(num_studies: usize) -> Self {
        let l = num_studies as f64;
        DpmConfig {
            m_values: vec![0.01, 1.0 / l, 1.0, l, l * l, 10.0 * l * l],
            iterations: 20_000,
            burn_in: 5_000,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_values.is_empty() {
            return Err(Error::Validation(
                "need at least one concentration value".into(),
            ));
        }
        for &m in &self.m_values {
            if !m.is_finite() || m <= 0.0 {
                return Err(Error::Validation(format!(
                    "concentration values must be positive and finite, got {m}"
                )));
            }
        }
        if self.iterations <= self.burn_in {
            return Err(Error::Validation(format!(
                "iterations ({}) must exceed burn-in ({})",
                self.iterations, self.burn_in
            )));
        }
        Ok(())
    }
}

/// Normal base measure `N(eta, tau2)` on the effect scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BaseMeasure {
    pub eta: f64,
    pub tau2: f64,
}

/// Log-likelihood of the one-component random-effects model
/// `e_i ~ N(eta, tau2 + v_i)` with the intercept profiled out in closed form.
fn profile_loglik(tau2: f64, effects: &[f64], variances: &[f64]) -> f64 {
    let mut sum_w = 0.0;
    let mut sum_we = 0.0;
    for (&e, &v) in effects.iter().zip(variances) {
        let w = 1.0 / (tau2 + v);
        sum_w += w;
        sum_we += w * e;
    }
    let eta = sum_we / sum_w;
    effects
        .iter()
        .zip(variances)
        .map(|(&e, &v)| {
            let w = 1.0 / (tau2 + v);
            0.5 * w.ln() - 0.5 * w * (e - eta) * (e - eta)
        })
        .sum()
}

fn eta_given_tau2(tau2: f64, effects: &[f64], variances: &[f64]) -> f64 {
    let mut sum_w = 0.0;
    let mut sum_we = 0.0;
    for (&e, &v) in effects.iter().zip(variances) {
        let w = 1.0 / (tau2 + v);
        sum_w += w;
        sum_we += w * e;
    }
    sum_we / sum_w
}

fn fit_base_measure(effects: &[f64], variances: &[f64]) -> BaseMeasure {
    // Scan zero plus 200 log-spaced candidates, then refine the bracket
    // around the best one by golden section; the boundary keeps priority on
    // ties so flat likelihoods collapse to tau2 = 0.
    let mut candidates = vec![0.0];
    let points = 200;
    for j in 0..points {
        let t = -6.0 + 8.0 * j as f64 / (points - 1) as f64;
        candidates.push(10f64.powf(t));
    }
    let score = |t: f64| profile_loglik(t, effects, variances);
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (j, &t) in candidates.iter().enumerate() {
        let val = score(t);
        if val > best_val {
            best_val = val;
            best = j;
        }
    }
    let mut lo = candidates[best.saturating_sub(1)];
    let mut hi = candidates[(best + 1).min(candidates.len() - 1)];
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = score(x1);
    let mut f2 = score(x2);
    while hi - lo > 1e-12 * hi.max(1e-12) {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = score(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = score(x1);
        }
    }
    let mut tau2 = 0.5 * (lo + hi);
    if score(0.0) >= score(tau2) {
        tau2 = 0.0;
    }
    BaseMeasure {
        eta: eta_given_tau2(tau2, effects, variances),
        tau2,
    }
}

/// Maximum-likelihood base measure for the one-component random-effects
/// model. The between-study variance may sit at the zero boundary, in which
/// case the mixture degenerates to a point mass at the intercept.
pub fn mle_base_measure(studies: &StudySet) -> Result<BaseMeasure> {
    if studies.len() < 2 {
        return Err(Error::Domain(format!(
            "base-measure fitting needs at least two studies, got {}",
            studies.len()
        )));
    }
    Ok(fit_base_measure(&studies.effects(), &studies.variances()))
}

/// One sweep's sampler state: cluster labels in first-appearance order, the
/// redrawn per-cluster means, and the induced per-study effect draws.
#[derive(Debug, Clone)]
pub struct DpmState {
    /// Cluster label per study; labels are contiguous from 0 and every
    /// cluster is nonempty.
    pub labels: Vec<usize>,
    /// Posterior draw of each cluster's mean, on the effect scale.
    pub cluster_means: Vec<f64>,
    /// Per-study effect draw: the study's cluster mean.
    pub mu: Vec<f64>,
}

impl DpmState {
    fn invariants_hold(&self) -> bool {
        let k = self.cluster_means.len();
        k > 0
            && self.mu.len() == self.labels.len()
            && self.labels.iter().all(|&c| c < k)
            && (0..k).all(|c| self.labels.contains(&c))
    }
}

/// Post-burn-in states of one chain at a fixed concentration.
#[derive(Debug, Clone)]
pub struct DpmChain {
    pub m: f64,
    pub states: Vec<DpmState>,
}

fn normal_logpdf(x: f64, mean: f64, variance: f64) -> f64 {
    let z = x - mean;
    -0.5 * ((2.0 * std::f64::consts::PI * variance).ln() + z * z / variance)
}

/// Collapsed Chinese-restaurant Gibbs sampler at one concentration value.
///
/// Each iteration reseats every study in turn — an occupied cluster weighs
/// `n_c · N(e_i; m_c, v_i + 1/rho_c)` with `(m_c, 1/rho_c)` the conjugate
/// posterior of that cluster's mean given its other members, a new cluster
/// weighs `M · N(e_i; eta, v_i + tau2)` — then redraws every cluster mean.
/// A zero-variance base measure short-circuits: all studies share one
/// cluster pinned at the intercept.
pub fn dpm_gibbs(
    studies: &StudySet,
    m: f64,
    base: &BaseMeasure,
    config: &DpmConfig,
) -> Result<DpmChain> {
    config.validate()?;
    if !m.is_finite() || m <= 0.0 {
        return Err(Error::Validation(format!(
            "concentration must be positive and finite, got {m}"
        )));
    }
    if !base.eta.is_finite() || !base.tau2.is_finite() || base.tau2 < 0.0 {
        return Err(Error::Validation(format!(
            "base measure must be finite with tau2 >= 0, got eta {} tau2 {}",
            base.eta, base.tau2
        )));
    }
    let l = studies.len();
    let kept_len = config.iterations - config.burn_in;

    if base.tau2 == 0.0 {
        let state = DpmState {
            labels: vec![0; l],
            cluster_means: vec![base.eta],
            mu: vec![base.eta; l],
        };
        return Ok(DpmChain {
            m,
            states: vec![state; kept_len],
        });
    }

    let effects = studies.effects();
    let variances = studies.variances();
    let inv_tau2 = 1.0 / base.tau2;
    let log_m = m.ln();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // Start from all singletons.
    let mut labels: Vec<usize> = (0..l).collect();
    let mut states = Vec::with_capacity(kept_len);
    let mut count = vec![0usize; l];
    let mut sum_inv_v = vec![0.0f64; l];
    let mut sum_e_inv_v = vec![0.0f64; l];
    let mut logp = Vec::with_capacity(l + 1);
    let mut probs = Vec::with_capacity(l + 1);

    const DETACHED: usize = usize::MAX;
    for iteration in 0..config.iterations {
        for i in 0..l {
            // Detach study i, keeping the remaining labels contiguous.
            let old = labels[i];
            labels[i] = DETACHED;
            if !labels.contains(&old) {
                for label in labels.iter_mut() {
                    if *label != DETACHED && *label > old {
                        *label -= 1;
                    }
                }
            }
            let k = labels
                .iter()
                .filter(|&&label| label != DETACHED)
                .map(|&label| label + 1)
                .max()
                .unwrap_or(0);
            for c in 0..k {
                count[c] = 0;
                sum_inv_v[c] = 0.0;
                sum_e_inv_v[c] = 0.0;
            }
            for j in 0..l {
                let label = labels[j];
                if label != DETACHED {
                    count[label] += 1;
                    sum_inv_v[label] += 1.0 / variances[j];
                    sum_e_inv_v[label] += effects[j] / variances[j];
                }
            }
            logp.clear();
            for c in 0..k {
                let rho = inv_tau2 + sum_inv_v[c];
                let m_c = (base.eta * inv_tau2 + sum_e_inv_v[c]) / rho;
                logp.push(
                    (count[c] as f64).ln()
                        + normal_logpdf(effects[i], m_c, variances[i] + 1.0 / rho),
                );
            }
            logp.push(log_m + normal_logpdf(effects[i], base.eta, variances[i] + base.tau2));

            let max = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            probs.clear();
            let mut total = 0.0;
            for &lp in &logp {
                let p = (lp - max).exp();
                total += p;
                probs.push(p);
            }
            for p in probs.iter_mut() {
                *p /= total;
            }
            debug_assert!(
                (probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12,
                "reseating probabilities must form a proper distribution"
            );
            let u: f64 = rng.gen();
            let mut cumulative = 0.0;
            let mut choice = probs.len() - 1;
            for (c, &p) in probs.iter().enumerate() {
                cumulative += p;
                if u < cumulative {
                    choice = c;
                    break;
                }
            }
            labels[i] = choice;
        }

        // Redraw every cluster mean from its conjugate posterior.
        let k = labels.iter().max().copied().unwrap_or(0) + 1;
        for c in 0..k {
            count[c] = 0;
            sum_inv_v[c] = 0.0;
            sum_e_inv_v[c] = 0.0;
        }
        for j in 0..l {
            count[labels[j]] += 1;
            sum_inv_v[labels[j]] += 1.0 / variances[j];
            sum_e_inv_v[labels[j]] += effects[j] / variances[j];
        }
        let mut cluster_means = Vec::with_capacity(k);
        for c in 0..k {
            let rho = inv_tau2 + sum_inv_v[c];
            let m_c = (base.eta * inv_tau2 + sum_e_inv_v[c]) / rho;
            let z: f64 = rng.sample(StandardNormal);
            cluster_means.push(m_c + z / rho.sqrt());
        }

        if iteration >= config.burn_in {
            let state = DpmState {
                mu: labels.iter().map(|&c| cluster_means[c]).collect(),
                labels: labels.clone(),
                cluster_means,
            };
            debug_assert!(state.invariants_hold());
            states.push(state);
        }
    }
    Ok(DpmChain { m, states })
}

/// Posterior summaries of one chain: probability-scale means and equal-tail
/// 95% intervals per study, co-clustering similarity, and the average number
/// of occupied clusters.
#[derive(Debug, Clone, Serialize)]
pub struct DpmSummary {
    pub m: f64,
    pub studies: Vec<EffectInterval>,
    pub similarity: SimilarityMatrix,
    pub mean_clusters: f64,
}

pub fn dpm_summaries(chain: &DpmChain, studies: &StudySet) -> Result<DpmSummary> {
    if chain.states.is_empty() {
        return Err(Error::Domain("cannot summarize an empty chain".into()));
    }
    let l = studies.len();
    if chain.states.iter().any(|s| s.mu.len() != l) {
        return Err(Error::Validation(format!(
            "chain states carry {} studies, expected {l}",
            chain.states[0].mu.len()
        )));
    }
    let scale = studies.scale();
    let kept = chain.states.len();
    let mut intervals = Vec::with_capacity(l);
    let mut column = Vec::with_capacity(kept);
    for i in 0..l {
        column.clear();
        column.extend(
            chain
                .states
                .iter()
                .map(|s| scale.to_probability(s.mu[i])),
        );
        let (mean, lower, upper) = mean_and_interval(&column, 0.95);
        intervals.push(EffectInterval { mean, lower, upper });
    }
    let mut matrix = vec![0.0f64; l * l];
    for state in &chain.states {
        for i in 0..l {
            for t in i..l {
                if state.labels[i] == state.labels[t] {
                    matrix[i * l + t] += 1.0;
                }
            }
        }
    }
    for i in 0..l {
        for t in 0..i {
            matrix[i * l + t] = matrix[t * l + i];
        }
    }
    for entry in matrix.iter_mut() {
        *entry /= kept as f64;
    }
    let similarity =
        SimilarityMatrix::from_entries(studies.ids(), matrix, SimilaritySource::DpmChain)?;
    let mean_clusters = chain
        .states
        .iter()
        .map(|s| s.cluster_means.len() as f64)
        .sum::<f64>()
        / kept as f64;
    Ok(DpmSummary {
        m: chain.m,
        studies: intervals,
        similarity,
        mean_clusters,
    })
}

/// Run one chain per concentration value in `config.m_values`, in parallel,
/// each on its own seed stream (`seed + index`), and summarize them in grid
/// order.
pub fn run_dpm(studies: &StudySet, base: &BaseMeasure, config: &DpmConfig) -> Result<Vec<DpmSummary>> {
    config.validate()?;
    let chains: Vec<Result<DpmChain>> = std::thread::scope(|scope| {
        let handles: Vec<_> = config
            .m_values
            .iter()
            .enumerate()
            .map(|(index, &m)| {
                let chain_config = DpmConfig {
                    seed: config.seed.wrapping_add(index as u64),
                    ..config.clone()
                };
                scope.spawn(move || dpm_gibbs(studies, m, base, &chain_config))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("chain thread panicked"))
            .collect()
    });
    chains
        .into_iter()
        .map(|chain| dpm_summaries(&chain?, studies))
        .collect()
}
