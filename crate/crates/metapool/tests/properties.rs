//! Randomized invariants of the posterior sweep. Every assertion here is
//! deterministic given the generated inputs; the brute-force oracle
//! recomputes each quantity with naive loops that share no code with the
//! library.

use std::collections::HashMap;

use metapool::diagnostics::posterior_predictive_pvalue;
use metapool::partitions::{Partition, PartitionPrior};
use metapool::pooling::{
    compute_joint_posterior_with_measure, conditional_moments, lambda_weights, q_statistic,
    subset_mean, GridMeasure, GridSpec, VariancePrior,
};
use metapool::study_data::{ContinuityPolicy, EffectScale, Study, StudySet};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

fn test_measure() -> GridMeasure {
    let nodes: Vec<f64> = (0..7)
        .map(|j| 10f64.powf(-3.0 + 4.0 * j as f64 / 6.0))
        .collect();
    GridMeasure::from_parts(nodes, vec![0.0; 7]).unwrap()
}

// ---------------------------------------------------------------------------
// Naive reimplementation used as the oracle.

fn naive_assignments(l: usize) -> Vec<Vec<usize>> {
    fn rec(current: &mut Vec<usize>, pos: usize, max_used: usize, out: &mut Vec<Vec<usize>>) {
        if pos == current.len() {
            out.push(current.clone());
            return;
        }
        for label in 0..=max_used + 1 {
            current[pos] = label;
            rec(current, pos + 1, max_used.max(label), out);
        }
    }
    let mut out = Vec::new();
    let mut current = vec![0usize; l];
    rec(&mut current, 1, 0, &mut out);
    out
}

fn naive_stirling_table(l: usize) -> Vec<Vec<f64>> {
    let mut s = vec![vec![0.0f64; l + 1]; l + 1];
    s[0][0] = 1.0;
    for n in 1..=l {
        for k in 1..=n {
            s[n][k] = s[n - 1][k - 1] + k as f64 * s[n - 1][k];
        }
    }
    s
}

fn naive_prior_log_mass(pprior: PartitionPrior, assignment: &[usize]) -> f64 {
    let l = assignment.len();
    let d = assignment.iter().copied().max().unwrap() + 1;
    let table = naive_stirling_table(l);
    match pprior {
        PartitionPrior::Uniform => -table[l].iter().sum::<f64>().ln(),
        PartitionPrior::SizeBiased => {
            let harmonic: f64 = (1..=l).map(|k| 1.0 / k as f64).sum();
            -(d as f64).ln() - table[l][d].ln() - harmonic.ln()
        }
    }
}

fn naive_log_weight(
    assignment: &[usize],
    delta2: f64,
    log_mass: f64,
    effects: &[f64],
    variances: &[f64],
    pprior: PartitionPrior,
) -> f64 {
    let l = assignment.len();
    let d = assignment.iter().copied().max().unwrap() + 1;
    let lambda: Vec<f64> = variances.iter().map(|&v| delta2 / (delta2 + v)).collect();
    let mut q = 0.0;
    for k in 0..d {
        let members: Vec<usize> = (0..l).filter(|&i| assignment[i] == k).collect();
        let weight_sum: f64 = members.iter().map(|&i| lambda[i]).sum();
        let mean: f64 = members
            .iter()
            .map(|&i| lambda[i] * effects[i])
            .sum::<f64>()
            / weight_sum;
        for &i in &members {
            q += lambda[i] / delta2 * (effects[i] - mean) * (effects[i] - mean);
        }
    }
    let shrinkage: f64 = lambda.iter().map(|&lam| (1.0 - lam).ln()).sum();
    naive_prior_log_mass(pprior, assignment) + log_mass - 0.5 * d as f64 + 0.5 * shrinkage
        - 0.5 * q
}

fn canonical_labels(raw: &[usize]) -> Vec<usize> {
    let mut map: Vec<Option<usize>> = vec![None; raw.len() + 1];
    let mut next = 0usize;
    raw.iter()
        .map(|&r| {
            if map[r].is_none() {
                map[r] = Some(next);
                next += 1;
            }
            map[r].unwrap()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Strategies.

fn effects_and_variances(max_l: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2..=max_l).prop_flat_map(|l| {
        (
            prop::collection::vec(-3.0..3.0f64, l),
            prop::collection::vec(0.05..2.0f64, l),
        )
    })
}

fn labelled_inputs(max_l: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<usize>, f64)> {
    (2..=max_l)
        .prop_flat_map(|l| {
            (
                prop::collection::vec(-3.0..3.0f64, l),
                prop::collection::vec(0.05..2.0f64, l),
                prop::collection::vec(0..l, l),
                0.001..10.0f64,
            )
        })
        .prop_map(|(e, v, raw, d2)| (e, v, canonical_labels(&raw), d2))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The full sweep at keep_mass = 1 matches a brute-force recomputation:
    /// normalization, per-cell weights, the δ² marginal, pool-all and
    /// dominant-cluster masses, co-clustering probabilities, and the top
    /// partition.
    #[test]
    fn sweep_matches_brute_force_oracle(
        (effects, variances) in effects_and_variances(4),
        size_biased in any::<bool>(),
    ) {
        let l = effects.len();
        let pprior = if size_biased { PartitionPrior::SizeBiased } else { PartitionPrior::Uniform };
        let measure = test_measure();
        let jp = compute_joint_posterior_with_measure(
            &effects, &variances, EffectScale::LogOdds, &measure, 1.0, pprior, 1,
        ).unwrap();

        // Brute force over every (assignment, node) cell.
        let assignments = naive_assignments(l);
        let mut raw: HashMap<Vec<u8>, Vec<f64>> = HashMap::new();
        let mut all = Vec::new();
        for assignment in &assignments {
            let per_node: Vec<f64> = measure
                .nodes()
                .iter()
                .zip(measure.log_masses())
                .map(|(&d2, &lm)| naive_log_weight(assignment, d2, lm, &effects, &variances, pprior))
                .collect();
            all.extend_from_slice(&per_node);
            let key: Vec<u8> = assignment.iter().map(|&a| a as u8).collect();
            raw.insert(key, per_node);
        }
        let max = all.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let norm = max + all.iter().map(|&w| (w - max).exp()).sum::<f64>().ln();

        // Normalization of the retained cells.
        let total: f64 = jp.cells().iter().map(|c| c.weight()).sum();
        prop_assert!((total - 1.0).abs() <= 1e-10, "total retained mass {total}");

        // Per-cell weights.
        for cell in jp.cells() {
            let g = jp.partition_of(cell).unwrap();
            let expected = raw[g.assignment()][cell.grid as usize] - norm;
            prop_assert!(
                (cell.log_weight - expected).abs() <= 1e-10,
                "cell {:?} node {}: {} vs {}",
                g.assignment(), cell.grid, cell.log_weight, expected
            );
        }

        // δ² marginal.
        for (j, &p) in jp.delta2_marginal().iter().enumerate() {
            let mut acc = 0.0;
            for per_node in raw.values() {
                acc += (per_node[j] - norm).exp();
            }
            prop_assert!((p - acc).abs() <= 1e-10, "node {j}: {p} vs {acc}");
        }

        // Pool-all and dominant-cluster masses.
        let mass_of = |pred: &dyn Fn(&[usize]) -> bool| -> f64 {
            assignments
                .iter()
                .filter(|a| pred(a))
                .map(|a| {
                    let key: Vec<u8> = a.iter().map(|&x| x as u8).collect();
                    raw[&key].iter().map(|&w| (w - norm).exp()).sum::<f64>()
                })
                .sum()
        };
        let pool_all = mass_of(&|a: &[usize]| a.iter().all(|&x| x == 0));
        prop_assert!((jp.pool_all_prob() - pool_all).abs() <= 1e-10);
        let min_block = 4usize.max(l.saturating_sub(5));
        let dominant = mass_of(&|a: &[usize]| {
            let d = a.iter().copied().max().unwrap() + 1;
            let mut sizes = vec![0usize; d];
            for &x in a {
                sizes[x] += 1;
            }
            let large = sizes.iter().filter(|&&s| s >= min_block).count();
            let non_singleton = sizes.iter().filter(|&&s| s > 1).count();
            large == 1 && non_singleton <= 1
        });
        prop_assert!((jp.dominant_prob() - dominant).abs() <= 1e-10);

        // Top partition.
        let mut best = (f64::NEG_INFINITY, Vec::new());
        for assignment in &assignments {
            let key: Vec<u8> = assignment.iter().map(|&x| x as u8).collect();
            let mass: f64 = raw[&key].iter().map(|&w| (w - norm).exp()).sum();
            if mass > best.0 {
                best = (mass, key);
            }
        }
        let top = &jp.top_partitions()[0];
        prop_assert_eq!(top.partition.assignment(), best.1.as_slice());
        prop_assert!((top.probability - best.0).abs() <= 1e-10);
    }

    /// Conditional on (g, δ²) the covariance of the study means is positive
    /// semidefinite and exactly zero across blocks.
    #[test]
    fn conditional_covariance_is_psd_with_cross_block_zeros(
        (effects, variances, labels, delta2) in labelled_inputs(6),
    ) {
        let g = Partition::from_assignment(&labels).unwrap();
        let moments = conditional_moments(&g, delta2, &effects, &variances).unwrap();
        let l = effects.len();
        for i in 0..l {
            for t in 0..l {
                if labels[i] != labels[t] {
                    prop_assert_eq!(moments.covariance[(i, t)], 0.0);
                }
            }
        }
        let mut jittered = moments.covariance.clone();
        for i in 0..l {
            jittered[(i, i)] += 1e-12;
        }
        prop_assert!(jittered.cholesky().is_some(), "covariance is not PSD");

        // Shrinkage: each conditional mean lies between the study effect and
        // its block mean.
        let lambda = lambda_weights(delta2, &variances).unwrap();
        for block in g.blocks() {
            let block_mean = subset_mean(&block, &lambda, &effects);
            for &i in &block {
                let lo = effects[i].min(block_mean) - 1e-12;
                let hi = effects[i].max(block_mean) + 1e-12;
                prop_assert!(moments.mean[i] >= lo && moments.mean[i] <= hi);
            }
        }
    }

    /// Q never increases when a block is split: each fragment's weighted sum
    /// of squares about its own mean is at most the parent's.
    #[test]
    fn q_statistic_decreases_under_refinement(
        (effects, variances, labels, delta2) in labelled_inputs(6),
        split_choice in any::<u64>(),
    ) {
        let g = Partition::from_assignment(&labels).unwrap();
        let q_orig = q_statistic(&g, delta2, &effects, &variances).unwrap();

        let splittable: Vec<Vec<usize>> =
            g.blocks().into_iter().filter(|b| b.len() >= 2).collect();
        if let Some(block) = splittable.get(split_choice as usize % splittable.len().max(1)) {
            let mut refined = labels.clone();
            let fresh = labels.iter().copied().max().unwrap() + 1;
            let moved = block[split_choice as usize % block.len()];
            refined[moved] = fresh;
            let refined = Partition::from_assignment(&canonical_labels(&refined)).unwrap();
            let q_ref = q_statistic(&refined, delta2, &effects, &variances).unwrap();
            prop_assert!(
                q_ref <= q_orig + 1e-9 * q_orig.max(1.0),
                "refinement raised Q: {q_ref} > {q_orig}"
            );
        }

        let singletons = Partition::singletons(effects.len());
        let q_single = q_statistic(&singletons, delta2, &effects, &variances).unwrap();
        prop_assert!(q_single.abs() <= 1e-12);
    }

    /// An affine change of the effect scale y → a·y + b (variances a²v,
    /// grid nodes a²δ², same masses) leaves every posterior probability
    /// unchanged.
    #[test]
    fn posterior_is_invariant_under_affine_rescaling(
        (effects, variances) in effects_and_variances(4),
        scale_mag in 0.25..4.0f64,
        flip in any::<bool>(),
        shift in -3.0..3.0f64,
    ) {
        let a = if flip { -scale_mag } else { scale_mag };
        let measure = test_measure();
        let jp = compute_joint_posterior_with_measure(
            &effects, &variances, EffectScale::LogOdds, &measure, 1.0,
            PartitionPrior::SizeBiased, 1,
        ).unwrap();

        let moved_effects: Vec<f64> = effects.iter().map(|&e| a * e + shift).collect();
        let moved_variances: Vec<f64> = variances.iter().map(|&v| a * a * v).collect();
        let moved_nodes: Vec<f64> = measure.nodes().iter().map(|&d2| a * a * d2).collect();
        let moved_measure =
            GridMeasure::from_parts(moved_nodes, measure.log_masses().to_vec()).unwrap();
        let moved = compute_joint_posterior_with_measure(
            &moved_effects, &moved_variances, EffectScale::LogOdds, &moved_measure, 1.0,
            PartitionPrior::SizeBiased, 1,
        ).unwrap();

        prop_assert!((jp.pool_all_prob() - moved.pool_all_prob()).abs() <= 1e-10);
        prop_assert!((jp.dominant_prob() - moved.dominant_prob()).abs() <= 1e-10);
        for (p, q) in jp.delta2_marginal().iter().zip(moved.delta2_marginal()) {
            prop_assert!((p - q).abs() <= 1e-10);
        }
        for (x, y) in jp.top_partitions().iter().zip(moved.top_partitions()) {
            prop_assert_eq!(x.partition.assignment(), y.partition.assignment());
            prop_assert!((x.probability - y.probability).abs() <= 1e-10);
        }
        let sim = metapool::diagnostics::similarity_from_grid(&jp).unwrap();
        let moved_sim = metapool::diagnostics::similarity_from_grid(&moved).unwrap();
        let l = effects.len();
        for i in 0..l {
            for t in 0..l {
                let diff = (sim.entry(i, t) - moved_sim.entry(i, t)).abs();
                prop_assert!(diff <= 1e-10);
            }
        }
    }

    /// λ weights live in (0, 1), increase with δ², and decrease with the
    /// sampling variance.
    #[test]
    fn lambda_weights_are_monotone(
        variances in prop::collection::vec(0.05..2.0f64, 1..6),
        delta2 in 0.001..10.0f64,
        factor in 1.1..10.0f64,
    ) {
        let lambda = lambda_weights(delta2, &variances).unwrap();
        let wider = lambda_weights(delta2 * factor, &variances).unwrap();
        for (i, (&lam, &wide)) in lambda.iter().zip(&wider).enumerate() {
            prop_assert!(lam > 0.0 && lam < 1.0);
            prop_assert!(wide > lam, "λ must increase with δ²");
            let noisier = lambda_weights(delta2, &[variances[i] * factor]).unwrap()[0];
            prop_assert!(noisier < lam, "λ must decrease with v");
        }
    }
}

/// Similarity matrices from the sweep are symmetric with unit diagonal and
/// probabilities in [0, 1].
#[test]
fn similarity_matrix_is_symmetric_with_unit_diagonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..20 {
        let l = rng.gen_range(2..=5);
        let studies: Vec<Study> = (0..l)
            .map(|i| {
                let trials = rng.gen_range(20..200u64);
                let events = rng.gen_range(1..trials);
                Study::new(i as u32 + 1, format!("s{i}"), events, trials).unwrap()
            })
            .collect();
        let set = StudySet::new(studies, EffectScale::LogOdds, ContinuityPolicy::Reject).unwrap();
        let jp = metapool::pooling::compute_joint_posterior(
            &set,
            &GridSpec::default(),
            &VariancePrior::InvBeta,
            PartitionPrior::SizeBiased,
            1,
        )
        .unwrap();
        let sim = metapool::diagnostics::similarity_from_grid(&jp).unwrap();
        for i in 0..l {
            assert_eq!(sim.entry(i, i), 1.0);
            for t in 0..l {
                let p = sim.entry(i, t);
                assert!((0.0..=1.0).contains(&p));
                assert_eq!(p, sim.entry(t, i));
            }
        }
    }
}

/// Conjugate Beta updates reproduce their analytic moments.
#[test]
fn beta_draws_match_analytic_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..25 {
        let a = 0.5 + 40.0 * (case as f64 / 25.0) + rng.gen_range(0.0..1.0);
        let b = 0.5 + rng.gen_range(0.0..30.0);
        let dist = rand_distr::Beta::new(a, b).unwrap();
        let n = 40_000;
        let draws: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let expected = a / (a + b);
        let sd = (expected * (1.0 - expected) / (a + b + 1.0)).sqrt();
        let se = sd / (n as f64).sqrt();
        assert!(
            (mean - expected).abs() <= 4.0 * se,
            "Beta({a:.2}, {b:.2}): mean {mean:.5} vs {expected:.5} (4se = {:.5})",
            4.0 * se
        );
    }
}

/// On data that really are one pooled binomial sample, the predictive check
/// should not sound the alarm: across simulated datasets the p-values
/// average near one half.
#[test]
fn predictive_pvalues_are_calibrated_on_pooled_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let grid = GridSpec::default();
    let vprior = VariancePrior::default_inv_gamma();
    let mut total = 0.0;
    let runs = 40;
    for run in 0..runs {
        let rate = rng.gen_range(0.15..0.5);
        let studies: Vec<Study> = (0..5)
            .map(|i| {
                let trials = rng.gen_range(60..200u64);
                let events = rand_distr::Binomial::new(trials, rate)
                    .unwrap()
                    .sample(&mut rng)
                    .clamp(1, trials - 1);
                Study::new(i + 1, format!("sim {i}"), events, trials).unwrap()
            })
            .collect();
        let set = StudySet::new(studies, EffectScale::LogOdds, ContinuityPolicy::Reject).unwrap();
        let ppc = posterior_predictive_pvalue(&set, &grid, &vprior, 2_000, run as u64).unwrap();
        total += ppc.p_value;
    }
    let mean = total / runs as f64;
    assert!(
        (0.3..=0.7).contains(&mean),
        "mean p-value {mean:.3} is far from 1/2"
    );
}
