//! Binomial-beta partition model sampled by reversible-jump MCMC.
//!
//! Raw counts keep their exact likelihood here: `y_i ~ Binomial(n_i, θ_i)`
//! with `θ_i ~ Beta(q·α_k, q·(1−α_k))` shared within block `k` of a partition
//! `g`, a size-biased prior on `g`, uniform block means `α_k`, and `log q`
//! uniform on a configured range. Within-model updates are conjugate for θ
//! and random-walk Metropolis for α and q; a split/merge pair of
//! reversible-jump moves crosses partition dimensions, validated against a
//! quadrature oracle in the test suite.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta as BetaProposal, StandardNormal};
use statrs::function::beta::ln_beta;
use statrs::function::gamma::ln_gamma;

use crate::diagnostics::{SimilarityMatrix, SimilaritySource};
use crate::error::{Error, Result};
use crate::partitions::{
    prior_log_mass_for_block_count, Partition, PartitionPrior, MAX_STUDIES,
};
use crate::pooling::EffectInterval;
use crate::stats::mean_and_interval;
use crate::study_data::StudySet;

/// Chain-length, prior-support, and proposal-scale settings.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RjConfig {
    pub iterations: usize,
    pub burn_in: usize,
    /// Support `[a, b]` of the log-uniform prior on q.
    pub q_range: (f64, f64),
    /// Probability of attempting a split away from the block-count
    /// boundaries; splits are forced at one block and forbidden at L blocks.
    pub birth_prob: f64,
    /// Starting random-walk scale on logit(α), adapted during burn-in toward
    /// a 25–45% acceptance rate and frozen afterwards.
    pub alpha_step: f64,
    /// Random-walk scale on log q.
    pub q_step: f64,
    pub seed: u64,
}

impl Default for RjConfig {
    fn default() -> Self {
        RjConfig {
            iterations: 200_000,
            burn_in: 50_000,
            q_range: (100.0, 1000.0),
            birth_prob: 0.5,
            alpha_step: 0.5,
            q_step: 0.5,
            seed: 0,
        }
    }
}

impl RjConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations <= self.burn_in {
            return Err(Error::Validation(format!(
                "iterations ({}) must exceed burn-in ({})",
                self.iterations, self.burn_in
            )));
        }
        let (lo, hi) = self.q_range;
        if !(lo > 0.0 && hi > lo) || !hi.is_finite() {
            return Err(Error::Validation(format!(
                "q range must satisfy 0 < lo < hi, got ({lo}, {hi})"
            )));
        }
        if !(0.0..=1.0).contains(&self.birth_prob) {
            return Err(Error::Validation(format!(
                "birth probability must lie in [0,1], got {}",
                self.birth_prob
            )));
        }
        if !(self.alpha_step > 0.0) || !(self.q_step > 0.0) {
            return Err(Error::Validation(
                "proposal step sizes must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Current chain state; `alpha` is indexed by the partition's block labels.
#[derive(Debug, Clone)]
pub struct RjState {
    pub g: Partition,
    pub alpha: Vec<f64>,
    pub q: f64,
    pub theta: Vec<f64>,
}

impl RjState {
    /// Pool-all starting point: one block at the average observed rate, q at
    /// the geometric center of its prior range, θ at smoothed frequencies.
    pub fn initial(studies: &StudySet, config: &RjConfig) -> RjState {
        let l = studies.len();
        let mean_rate = studies
            .studies()
            .iter()
            .map(|s| s.events as f64 / s.trials as f64)
            .sum::<f64>()
            / l as f64;
        RjState {
            g: Partition::pool_all(l),
            alpha: vec![mean_rate.clamp(1e-3, 1.0 - 1e-3)],
            q: (config.q_range.0 * config.q_range.1).sqrt(),
            theta: studies
                .studies()
                .iter()
                .map(|s| (s.events as f64 + 0.5) / (s.trials as f64 + 1.0))
                .collect(),
        }
    }

    pub fn invariants_hold(&self, config: &RjConfig) -> bool {
        self.alpha.len() == self.g.num_blocks()
            && self.theta.len() == self.g.len()
            && self.alpha.iter().all(|&a| a > 0.0 && a < 1.0)
            && self.theta.iter().all(|&t| t > 0.0 && t < 1.0)
            && self.q >= config.q_range.0
            && self.q <= config.q_range.1
    }
}

/// Σ over `members` of log Beta(θ_i; q·a, q·(1−a)).
fn block_loglik(theta: &[f64], members: &[usize], a: f64, q: f64) -> f64 {
    let norm = ln_beta(q * a, q * (1.0 - a));
    members
        .iter()
        .map(|&i| {
            (q * a - 1.0) * theta[i].ln() + (q * (1.0 - a) - 1.0) * (-theta[i]).ln_1p() - norm
        })
        .sum()
}

/// Log of the joint density at `state`: size-biased partition prior,
/// log-uniform q, the per-block beta densities of θ, and the binomial
/// likelihood. Boundary values of α or θ, or q outside its support, give
/// −∞ so proposals there reject.
pub fn log_joint(state: &RjState, studies: &StudySet, config: &RjConfig) -> Result<f64> {
    if state.theta.len() != studies.len() || state.g.len() != studies.len() {
        return Err(Error::Validation(format!(
            "state is sized for {} studies but the set has {}",
            state.theta.len(),
            studies.len()
        )));
    }
    if state.alpha.len() != state.g.num_blocks() {
        return Err(Error::Validation(format!(
            "{} block means for {} blocks",
            state.alpha.len(),
            state.g.num_blocks()
        )));
    }
    let (q_lo, q_hi) = config.q_range;
    if state.q < q_lo || state.q > q_hi {
        return Ok(f64::NEG_INFINITY);
    }
    if state.alpha.iter().any(|&a| a <= 0.0 || a >= 1.0)
        || state.theta.iter().any(|&t| t <= 0.0 || t >= 1.0)
    {
        return Ok(f64::NEG_INFINITY);
    }
    let mut total =
        prior_log_mass_for_block_count(PartitionPrior::SizeBiased, state.g.len(), state.g.num_blocks())?;
    total += -state.q.ln() - (q_hi.ln() - q_lo.ln()).ln();
    for (k, members) in state.g.blocks().iter().enumerate() {
        total += block_loglik(&state.theta, members, state.alpha[k], state.q);
    }
    for (i, s) in studies.studies().iter().enumerate() {
        let y = s.events as f64;
        let n = s.trials as f64;
        total += ln_gamma(n + 1.0) - ln_gamma(y + 1.0) - ln_gamma(n - y + 1.0)
            + y * state.theta[i].ln()
            + (n - y) * (-state.theta[i]).ln_1p();
    }
    Ok(total)
}

/// Conjugate refresh of every θ_i: Beta(q·α_k + y_i, q·(1−α_k) + n_i − y_i)
/// for i in block k. Draws are floored away from the unit-interval endpoints
/// so later log-density evaluations stay finite.
pub fn gibbs_theta(state: &mut RjState, studies: &StudySet, rng: &mut ChaCha8Rng) {
    for (i, s) in studies.studies().iter().enumerate() {
        let a = state.alpha[state.g.block_of(i)];
        let shape_a = state.q * a + s.events as f64;
        let shape_b = state.q * (1.0 - a) + (s.trials - s.events) as f64;
        let draw: f64 = rng.sample(
            BetaProposal::new(shape_a, shape_b).expect("beta shape parameters are positive"),
        );
        state.theta[i] = draw.clamp(1e-15, 1.0 - 1e-15);
    }
}

/// One random-walk Metropolis update of α_k on the logit scale (the change of
/// variables puts the α(1−α) Jacobian into the acceptance ratio). Returns
/// whether the proposal was accepted.
pub fn mh_alpha(state: &mut RjState, k: usize, step: f64, rng: &mut ChaCha8Rng) -> Result<bool> {
    if k >= state.alpha.len() {
        return Err(Error::Domain(format!(
            "block index {k} out of range for {} blocks",
            state.alpha.len()
        )));
    }
    let blocks = state.g.blocks();
    let members = &blocks[k];
    let a = state.alpha[k];
    let z = (a / (1.0 - a)).ln() + step * rng.sample::<f64, _>(StandardNormal);
    let proposal = 1.0 / (1.0 + (-z).exp());
    if proposal <= 0.0 || proposal >= 1.0 {
        return Ok(false);
    }
    let log_ratio = block_loglik(&state.theta, members, proposal, state.q)
        - block_loglik(&state.theta, members, a, state.q)
        + (proposal * (1.0 - proposal)).ln()
        - (a * (1.0 - a)).ln();
    if rng.gen::<f64>().ln() < log_ratio {
        state.alpha[k] = proposal;
        Ok(true)
    } else {
        Ok(false)
    }
}

/// One random-walk update of q on the log scale; proposals outside the prior
/// support reject outright. The log-uniform prior cancels against the
/// log-scale proposal asymmetry, leaving the θ-density ratio.
pub fn mh_q(state: &mut RjState, config: &RjConfig, rng: &mut ChaCha8Rng) -> bool {
    let proposal = state.q * (config.q_step * rng.sample::<f64, _>(StandardNormal)).exp();
    if proposal < config.q_range.0 || proposal > config.q_range.1 {
        return false;
    }
    let blocks = state.g.blocks();
    let mut log_ratio = 0.0;
    for (k, members) in blocks.iter().enumerate() {
        log_ratio += block_loglik(&state.theta, members, state.alpha[k], proposal)
            - block_loglik(&state.theta, members, state.alpha[k], state.q);
    }
    if rng.gen::<f64>().ln() < log_ratio {
        state.q = proposal;
        true
    } else {
        false
    }
}

/// Probability of attempting a split at `d` blocks out of `l` studies.
fn birth_probability(d: usize, l: usize, birth_prob: f64) -> f64 {
    if d == 1 {
        1.0
    } else if d == l {
        0.0
    } else {
        birth_prob
    }
}

/// Interval of first-side means `a1` compatible with `0 < a2 < 1` when a
/// block with size-weighted mean `abar` splits into sides of n1 and n2.
fn split_fiber(abar: f64, n1: usize, n2: usize) -> (f64, f64) {
    let nk = (n1 + n2) as f64;
    let lo = ((nk * abar - n2 as f64) / n1 as f64).max(0.0);
    let hi = (nk * abar / n1 as f64).min(1.0);
    (lo, hi)
}

fn ln_beta22_pdf(u: f64) -> f64 {
    (6.0 * u * (1.0 - u)).ln()
}

/// Relabel an arbitrary block assignment into first-appearance order,
/// carrying the block means along, and install it in the state.
fn apply_canonical(state: &mut RjState, assignment: &[usize], alpha: &[f64]) {
    let mut map = vec![usize::MAX; alpha.len()];
    let mut new_alpha = Vec::with_capacity(alpha.len());
    let mut relabeled = vec![0usize; assignment.len()];
    for (i, &label) in assignment.iter().enumerate() {
        if map[label] == usize::MAX {
            map[label] = new_alpha.len();
            new_alpha.push(alpha[label]);
        }
        relabeled[i] = map[label];
    }
    state.g = Partition::from_assignment(&relabeled).expect("relabeled assignment is canonical");
    state.alpha = new_alpha;
}

/// One reversible-jump attempt: a split with probability `birth_probability`,
/// otherwise a merge of two uniformly chosen blocks. Returns whether the
/// chain moved.
///
/// A split picks a block of two or more members uniformly, assigns each
/// member to a side by a fair coin (rejecting one-sided outcomes, so each
/// unordered bipartition arrives with probability (1/2)^(size−1)), and draws
/// the first side's mean from a Beta(2,2)-rescaled point on the interval that
/// keeps the size-weighted average fixed — the merge direction reverses this
/// deterministically, and the (size/n2)·(hi−lo) Jacobian of the
/// dimension-matching map enters the acceptance ratio.
pub fn split_merge_move(
    state: &mut RjState,
    studies: &StudySet,
    config: &RjConfig,
    rng: &mut ChaCha8Rng,
) -> bool {
    let l = studies.len();
    let d = state.g.num_blocks();
    let b_split = birth_probability(d, l, config.birth_prob);
    if rng.gen::<f64>() < b_split {
        attempt_split(state, config, b_split, l, rng)
    } else {
        attempt_merge(state, config, 1.0 - b_split, l, rng)
    }
}

fn attempt_split(
    state: &mut RjState,
    config: &RjConfig,
    b_split: f64,
    l: usize,
    rng: &mut ChaCha8Rng,
) -> bool {
    let d = state.g.num_blocks();
    let blocks = state.g.blocks();
    let splittable: Vec<usize> = (0..d).filter(|&k| blocks[k].len() >= 2).collect();
    if splittable.is_empty() {
        return false;
    }
    let k = splittable[rng.gen_range(0..splittable.len())];
    let members = &blocks[k];
    let nk = members.len();
    let flips: Vec<bool> = (0..nk).map(|_| rng.gen()).collect();
    if flips.iter().all(|&f| f == flips[0]) {
        return false;
    }
    // Side 1 keeps the block's smallest study index, fixing the orientation
    // that the merge direction reconstructs.
    let side1: Vec<usize> = members
        .iter()
        .zip(&flips)
        .filter(|&(_, &f)| f == flips[0])
        .map(|(&m, _)| m)
        .collect();
    let side2: Vec<usize> = members
        .iter()
        .zip(&flips)
        .filter(|&(_, &f)| f != flips[0])
        .map(|(&m, _)| m)
        .collect();
    let (n1, n2) = (side1.len(), side2.len());
    let abar = state.alpha[k];
    let (lo, hi) = split_fiber(abar, n1, n2);
    let u: f64 = rng.sample(BetaProposal::new(2.0, 2.0).expect("fixed valid shapes"));
    if u <= 0.0 || u >= 1.0 {
        return false;
    }
    let a1 = lo + u * (hi - lo);
    let a2 = (nk as f64 * abar - n1 as f64 * a1) / n2 as f64;
    if !(a1 > 0.0 && a1 < 1.0 && a2 > 0.0 && a2 < 1.0) {
        return false;
    }

    let ll_new = block_loglik(&state.theta, &side1, a1, state.q)
        + block_loglik(&state.theta, &side2, a2, state.q);
    let ll_old = block_loglik(&state.theta, members, abar, state.q);
    let prior_diff = prior_log_mass_for_block_count(PartitionPrior::SizeBiased, l, d + 1)
        .expect("block count in range")
        - prior_log_mass_for_block_count(PartitionPrior::SizeBiased, l, d)
            .expect("block count in range");
    let b_merge_new = 1.0 - birth_probability(d + 1, l, config.birth_prob);
    let n_pairs_new = (d + 1) * d / 2;
    let log_p_split = b_split.ln() - (splittable.len() as f64).ln()
        - (nk as f64 - 1.0) * std::f64::consts::LN_2
        + ln_beta22_pdf(u);
    let log_p_merge = b_merge_new.ln() - (n_pairs_new as f64).ln();
    let log_jacobian = ((nk as f64 / n2 as f64) * (hi - lo)).ln();
    let log_acceptance = (ll_new - ll_old) + prior_diff + log_p_merge - log_p_split + log_jacobian;

    if rng.gen::<f64>().ln() < log_acceptance {
        let mut assignment: Vec<usize> =
            state.g.assignment().iter().map(|&a| a as usize).collect();
        for &m in &side2 {
            assignment[m] = d;
        }
        let mut alpha = state.alpha.clone();
        alpha[k] = a1;
        alpha.push(a2);
        apply_canonical(state, &assignment, &alpha);
        true
    } else {
        false
    }
}

fn attempt_merge(
    state: &mut RjState,
    config: &RjConfig,
    b_merge: f64,
    l: usize,
    rng: &mut ChaCha8Rng,
) -> bool {
    let d = state.g.num_blocks();
    if d < 2 {
        return false;
    }
    let n_pairs = d * (d - 1) / 2;
    let mut index = rng.gen_range(0..n_pairs);
    let mut k1 = 0;
    while index >= d - 1 - k1 {
        index -= d - 1 - k1;
        k1 += 1;
    }
    let mut k2 = k1 + 1 + index;
    let blocks = state.g.blocks();
    let (mut m1, mut m2) = (blocks[k1].clone(), blocks[k2].clone());
    // Match the split orientation: side 1 holds the smallest combined index.
    if m2[0] < m1[0] {
        std::mem::swap(&mut k1, &mut k2);
        std::mem::swap(&mut m1, &mut m2);
    }
    let (n1, n2) = (m1.len(), m2.len());
    let nk = n1 + n2;
    let (a1, a2) = (state.alpha[k1], state.alpha[k2]);
    let abar = (n1 as f64 * a1 + n2 as f64 * a2) / nk as f64;
    let (lo, hi) = split_fiber(abar, n1, n2);
    let u = (a1 - lo) / (hi - lo);
    if !(u > 0.0 && u < 1.0) {
        return false;
    }
    let members: Vec<usize> = m1.iter().chain(&m2).copied().collect();
    let ll_new = block_loglik(&state.theta, &members, abar, state.q);
    let ll_old = block_loglik(&state.theta, &m1, a1, state.q)
        + block_loglik(&state.theta, &m2, a2, state.q);
    let prior_diff = prior_log_mass_for_block_count(PartitionPrior::SizeBiased, l, d - 1)
        .expect("block count in range")
        - prior_log_mass_for_block_count(PartitionPrior::SizeBiased, l, d)
            .expect("block count in range");
    let b_split_new = birth_probability(d - 1, l, config.birth_prob);
    let n_splittable_new = 1 + (0..d)
        .filter(|&k| k != k1 && k != k2 && blocks[k].len() >= 2)
        .count();
    let log_p_split = b_split_new.ln() - (n_splittable_new as f64).ln()
        - (nk as f64 - 1.0) * std::f64::consts::LN_2
        + ln_beta22_pdf(u);
    let log_p_merge = b_merge.ln() - (n_pairs as f64).ln();
    let log_jacobian = ((nk as f64 / n2 as f64) * (hi - lo)).ln();
    let log_acceptance = (ll_new - ll_old) + prior_diff + log_p_split - log_p_merge - log_jacobian;

    if rng.gen::<f64>().ln() < log_acceptance {
        let keep = k1.min(k2);
        let drop = k1.max(k2);
        let mut assignment: Vec<usize> =
            state.g.assignment().iter().map(|&a| a as usize).collect();
        for &m in &members {
            assignment[m] = keep;
        }
        for label in assignment.iter_mut() {
            if *label > drop {
                *label -= 1;
            }
        }
        let mut alpha = state.alpha.clone();
        alpha[keep] = abar;
        alpha.remove(drop);
        apply_canonical(state, &assignment, &alpha);
        true
    } else {
        false
    }
}

/// Posterior summaries of one chain.
#[derive(Debug, Clone)]
pub struct RjSummary {
    /// Probability-scale mean and equal-tail 95% interval of each θ_i.
    pub studies: Vec<EffectInterval>,
    pub similarity: SimilarityMatrix,
    /// Visited partitions with their post-burn-in frequencies, most frequent
    /// first.
    pub partition_frequencies: Vec<(Partition, f64)>,
    /// Kept θ draws, one vector per study, for traces and replication checks.
    pub theta_draws: Vec<Vec<f64>>,
    pub q_draws: Vec<f64>,
    pub mean_block_count: f64,
    pub mean_q: f64,
    /// α acceptance rate over the kept phase.
    pub alpha_acceptance: f64,
    /// Adapted logit-α step frozen at the end of burn-in.
    pub final_alpha_step: f64,
}

/// Run one reversible-jump chain. Each iteration refreshes every θ by its
/// conjugate draw, updates each block mean and q by random walks, and makes
/// one split/merge attempt; the logit-α step adapts every 500 burn-in
/// iterations toward a 25–45% acceptance rate and is frozen for the kept
/// phase.
pub fn run_rj_chain(studies: &StudySet, config: &RjConfig) -> Result<RjSummary> {
    config.validate()?;
    let l = studies.len();
    if l > MAX_STUDIES {
        return Err(Error::ResourceLimit(format!(
            "partition moves support at most {MAX_STUDIES} studies, got {l}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = RjState::initial(studies, config);
    let mut alpha_step = config.alpha_step;
    let kept_len = config.iterations - config.burn_in;

    let mut theta_draws: Vec<Vec<f64>> = vec![Vec::with_capacity(kept_len); l];
    let mut q_draws: Vec<f64> = Vec::with_capacity(kept_len);
    let mut co_counts = vec![0.0f64; l * l];
    let mut frequencies: HashMap<Partition, u64> = HashMap::new();
    let mut block_count_sum = 0u64;
    let (mut accepted_burn, mut attempted_burn) = (0u64, 0u64);
    let (mut accepted_kept, mut attempted_kept) = (0u64, 0u64);

    for iteration in 0..config.iterations {
        gibbs_theta(&mut state, studies, &mut rng);
        let d = state.g.num_blocks();
        let mut accepted_here = 0u64;
        for k in 0..d {
            if mh_alpha(&mut state, k, alpha_step, &mut rng)? {
                accepted_here += 1;
            }
        }
        mh_q(&mut state, config, &mut rng);
        split_merge_move(&mut state, studies, config, &mut rng);
        debug_assert!(state.invariants_hold(config));

        if iteration < config.burn_in {
            accepted_burn += accepted_here;
            attempted_burn += d as u64;
            if (iteration + 1) % 500 == 0 {
                let rate = accepted_burn as f64 / attempted_burn.max(1) as f64;
                if rate < 0.25 {
                    alpha_step *= 0.8;
                } else if rate > 0.45 {
                    alpha_step *= 1.25;
                }
                accepted_burn = 0;
                attempted_burn = 0;
            }
        } else {
            accepted_kept += accepted_here;
            attempted_kept += d as u64;
            *frequencies.entry(state.g.clone()).or_insert(0) += 1;
            for i in 0..l {
                theta_draws[i].push(state.theta[i]);
                for t in i..l {
                    if state.g.block_of(i) == state.g.block_of(t) {
                        co_counts[i * l + t] += 1.0;
                    }
                }
            }
            q_draws.push(state.q);
            block_count_sum += state.g.num_blocks() as u64;
        }
    }

    let intervals = theta_draws
        .iter()
        .map(|draws| {
            let (mean, lower, upper) = mean_and_interval(draws, 0.95);
            EffectInterval { mean, lower, upper }
        })
        .collect();
    for i in 0..l {
        for t in 0..i {
            co_counts[i * l + t] = co_counts[t * l + i];
        }
    }
    for entry in co_counts.iter_mut() {
        *entry /= kept_len as f64;
    }
    let similarity =
        SimilarityMatrix::from_entries(studies.ids(), co_counts, SimilaritySource::RjChain)?;
    let mut partition_frequencies: Vec<(Partition, f64)> = frequencies
        .into_iter()
        .map(|(g, count)| (g, count as f64 / kept_len as f64))
        .collect();
    partition_frequencies.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("frequencies are finite")
            .then_with(|| a.0.assignment().cmp(b.0.assignment()))
    });

    Ok(RjSummary {
        studies: intervals,
        similarity,
        partition_frequencies,
        mean_q: q_draws.iter().sum::<f64>() / kept_len as f64,
        theta_draws,
        q_draws,
        mean_block_count: block_count_sum as f64 / kept_len as f64,
        alpha_acceptance: accepted_kept as f64 / attempted_kept.max(1) as f64,
        final_alpha_step: alpha_step,
    })
}
