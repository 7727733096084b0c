//! Uncertain pooling: an exhaustive posterior over (partition, between-study
//! variance δ²) on a log-spaced grid, and composite Monte Carlo sampling of
//! the per-study true effects from it.
//!
//! For a partition `g` with blocks S₁,…,S_d and studies with observed effects
//! yᵢ and plug-in variances vᵢ, the shrinkage weights are λᵢ = δ²/(δ²+vᵢ) and
//! the joint weight of a grid cell is
//!
//! ```text
//! w(g, δ²) ∝ p(g) · m(δ²) · exp(−d(g)/2) · Π(1−λᵢ)^½ · exp(−Q(g,δ²)/2)
//! ```
//!
//! where `Q = Σₖ Σ_{i∈Sₖ} (λᵢ/δ²)(yᵢ − μ̂ₖ)²` is the λ-weighted within-block
//! sum of squares around the block means μ̂ₖ = Σλy/Σλ, and `m` is the prior
//! mass placed on the grid node. Everything downstream — per-study effect
//! draws, partition probabilities, similarity matrices — is a function of
//! these normalized cell weights.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::partitions::{
    default_min_block, enumerate_range, prior_log_mass, prior_log_mass_for_block_count, Partition,
    PartitionPrior, RgsCounts,
};
use crate::runner::run_chunked;
use crate::stats::{mean_and_interval, LogAccum};
use crate::study_data::{EffectScale, StudySet};

/// Exhaustive sweeps above this many studies are unreasonably large
/// (Bell(12) ≈ 4.2 million partitions is the practical ceiling).
pub const MAX_SWEEP_STUDIES: usize = 12;

/// Hard cap on retained cells, to keep degenerate near-uniform posteriors
/// from exhausting memory. Sized for the eleven-study sweep under the uniform
/// partition prior, where the 99.2%-mass set runs to several million cells
/// (~24 bytes each).
const MAX_RETAINED_CELLS: u64 = 16_000_000;

/// Draws are generated in fixed-size blocks, each from its own RNG stream, so
/// a draw matrix is reproducible from (seed, B) alone.
const DRAW_BLOCK: usize = 4096;

/// Prior for the between-study variance δ².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VariancePrior {
    /// Density ∝ 1/((1+δ²)·√δ²) — heavy-tailed, scale-free.
    InvBeta,
    /// Inverse gamma with the given shape and rate.
    InvGamma { shape: f64, rate: f64 },
}

impl VariancePrior {
    /// The inverse-gamma default used alongside InvBeta in the bundled
    /// analyses: shape 11.01, rate 0.001.
    pub fn default_inv_gamma() -> Self {
        VariancePrior::InvGamma {
            shape: 11.01,
            rate: 0.001,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let VariancePrior::InvGamma { shape, rate } = self {
            if !(shape.is_finite() && rate.is_finite() && *shape > 0.0 && *rate > 0.0) {
                return Err(Error::Domain(format!(
                    "inverse-gamma prior requires positive shape and rate, got ({shape}, {rate})"
                )));
            }
        }
        Ok(())
    }

    /// Unnormalized log density at δ² > 0 (grid normalization absorbs the
    /// constant).
    pub fn log_density(&self, delta2: f64) -> f64 {
        match self {
            VariancePrior::InvBeta => -delta2.ln_1p() - 0.5 * delta2.ln(),
            VariancePrior::InvGamma { shape, rate } => {
                -(shape + 1.0) * delta2.ln() - rate / delta2
            }
        }
    }
}

impl Default for VariancePrior {
    fn default() -> Self {
        VariancePrior::InvBeta
    }
}

/// Log-spaced grid for δ² plus the posterior mass fraction to retain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub delta2_min: f64,
    pub delta2_max: f64,
    pub points: usize,
    pub keep_mass: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            // 10^(-3.5): small enough that λ ≈ 0 for count-scale variances,
            // without wasting grid resolution on indistinguishable cells
            delta2_min: 10f64.powf(-3.5),
            delta2_max: 1e2,
            points: 101,
            // Small enough that retention bias in the composite draws stays
            // well under their Monte Carlo error, while the eleven-study
            // sweep still fits the retained-cell cap.
            keep_mass: 0.9995,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta2_min.is_finite() && self.delta2_max.is_finite())
            || self.delta2_min <= 0.0
            || self.delta2_min >= self.delta2_max
        {
            return Err(Error::Domain(format!(
                "grid needs 0 < delta2_min < delta2_max, got [{}, {}]",
                self.delta2_min, self.delta2_max
            )));
        }
        if self.points < 2 {
            return Err(Error::Domain(format!(
                "grid needs at least 2 points, got {}",
                self.points
            )));
        }
        if !(self.keep_mass > 0.0 && self.keep_mass <= 1.0) {
            return Err(Error::Domain(format!(
                "keep_mass must be in (0, 1], got {}",
                self.keep_mass
            )));
        }
        Ok(())
    }

    /// Log-spaced nodes with normalized prior mass from `vprior`'s density.
    pub fn measure(&self, vprior: &VariancePrior) -> Result<GridMeasure> {
        self.validate()?;
        vprior.validate()?;
        let (lo, hi) = (self.delta2_min.ln(), self.delta2_max.ln());
        let step = (hi - lo) / (self.points - 1) as f64;
        let nodes: Vec<f64> = (0..self.points)
            .map(|i| (lo + i as f64 * step).exp())
            .collect();
        let log_masses: Vec<f64> = nodes.iter().map(|&d2| vprior.log_density(d2)).collect();
        GridMeasure::from_parts(nodes, log_masses)
    }
}

/// A discrete prior over δ² values: grid nodes with normalized log masses.
/// Usually built by [`GridSpec::measure`], but custom measures are accepted —
/// e.g. to transport a grid under a change of effect scale.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMeasure {
    nodes: Vec<f64>,
    log_masses: Vec<f64>,
}

impl GridMeasure {
    /// Normalizes the supplied masses; nodes must be positive and finite.
    pub fn from_parts(nodes: Vec<f64>, log_masses: Vec<f64>) -> Result<Self> {
        if nodes.is_empty() || nodes.len() != log_masses.len() {
            return Err(Error::Domain(
                "grid measure needs matching nonempty nodes and masses".into(),
            ));
        }
        if nodes.iter().any(|&d2| !(d2.is_finite() && d2 > 0.0)) {
            return Err(Error::Domain("grid nodes must be positive".into()));
        }
        if log_masses.iter().any(|m| m.is_nan() || *m == f64::INFINITY) {
            return Err(Error::Domain("grid masses must be finite".into()));
        }
        let mut acc = LogAccum::new();
        for &m in &log_masses {
            acc.add(m);
        }
        let norm = acc.value();
        if norm == f64::NEG_INFINITY {
            return Err(Error::Domain("grid measure has zero total mass".into()));
        }
        Ok(GridMeasure {
            nodes,
            log_masses: log_masses.iter().map(|m| m - norm).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn log_masses(&self) -> &[f64] {
        &self.log_masses
    }
}

/// λᵢ = δ²/(δ² + vᵢ): the weight the data of study i get against its block
/// mean. Independent of the partition since all blocks share the common δ².
pub fn lambda_weights(delta2: f64, variances: &[f64]) -> Result<Vec<f64>> {
    if !(delta2.is_finite() && delta2 > 0.0) {
        return Err(Error::Domain(format!(
            "delta2 must be positive, got {delta2}"
        )));
    }
    variances
        .iter()
        .map(|&v| {
            if v.is_finite() && v > 0.0 {
                Ok(delta2 / (delta2 + v))
            } else {
                Err(Error::Domain(format!("nonpositive variance {v}")))
            }
        })
        .collect()
}

/// λ-weighted mean of the effects in one block: μ̂ₖ = Σλy / Σλ.
pub fn subset_mean(block: &[usize], lambda: &[f64], effects: &[f64]) -> f64 {
    let (mut sl, mut sle) = (0.0, 0.0);
    for &i in block {
        sl += lambda[i];
        sle += lambda[i] * effects[i];
    }
    sle / sl
}

/// Posterior mean and covariance of the true effects given (g, δ²).
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalMoments {
    pub mean: Vec<f64>,
    pub covariance: DMatrix<f64>,
}

/// Conditional on (g, δ²), each study mean shrinks toward its block mean:
/// E(μᵢ) = λᵢyᵢ + (1−λᵢ)μ̂ₖ, with variance δ²(1−λᵢ) + (1−λᵢ)²δ²/Σ_{Sₖ}λ and
/// within-block covariance (1−λᵢ)(1−λₜ)δ²/Σ_{Sₖ}λ; studies in different
/// blocks are conditionally uncorrelated.
pub fn conditional_moments(
    g: &Partition,
    delta2: f64,
    effects: &[f64],
    variances: &[f64],
) -> Result<ConditionalMoments> {
    check_dimensions(g, effects, variances)?;
    let l = effects.len();
    let lambda = lambda_weights(delta2, variances)?;
    let mut mean = vec![0.0; l];
    let mut covariance = DMatrix::zeros(l, l);
    for block in g.blocks() {
        let mu_k = subset_mean(&block, &lambda, effects);
        let sum_lambda: f64 = block.iter().map(|&i| lambda[i]).sum();
        for &i in &block {
            mean[i] = lambda[i] * effects[i] + (1.0 - lambda[i]) * mu_k;
            for &t in &block {
                let shared = (1.0 - lambda[i]) * (1.0 - lambda[t]) * delta2 / sum_lambda;
                covariance[(i, t)] = if i == t {
                    delta2 * (1.0 - lambda[i]) + shared
                } else {
                    shared
                };
            }
        }
    }
    Ok(ConditionalMoments { mean, covariance })
}

/// Q(g, δ²) = Σₖ Σ_{i∈Sₖ} (λᵢ/δ²)(yᵢ − μ̂ₖ)²: the λ-weighted within-block sum
/// of squares. Zero when every block is a singleton.
pub fn q_statistic(g: &Partition, delta2: f64, effects: &[f64], variances: &[f64]) -> Result<f64> {
    check_dimensions(g, effects, variances)?;
    let lambda = lambda_weights(delta2, variances)?;
    let mut scratch = RowScratch::new(g.num_blocks());
    Ok(q_with_scratch(
        g.assignment(),
        g.num_blocks(),
        &lambda,
        effects,
        delta2,
        &mut scratch,
    ))
}

/// Log of the unnormalized joint weight of one (g, δ²) cell.
/// `log_delta2_mass` is the log prior mass of the grid node (see
/// [`GridMeasure`]); the remaining factors are the block-count penalty
/// exp(−d/2), the shrinkage product Π(1−λᵢ)^½, and exp(−Q/2).
pub fn log_joint_weight(
    g: &Partition,
    delta2: f64,
    effects: &[f64],
    variances: &[f64],
    pprior: PartitionPrior,
    log_delta2_mass: f64,
) -> Result<f64> {
    check_dimensions(g, effects, variances)?;
    let lambda = lambda_weights(delta2, variances)?;
    let d = g.num_blocks();
    let mut scratch = RowScratch::new(d);
    let q = q_with_scratch(g.assignment(), d, &lambda, effects, delta2, &mut scratch);
    let log_one_minus: f64 = variances
        .iter()
        .map(|&v| v.ln() - (delta2 + v).ln())
        .sum();
    Ok(prior_log_mass(pprior, g)? + log_delta2_mass - 0.5 * d as f64 + 0.5 * log_one_minus
        - 0.5 * q)
}

fn check_dimensions(g: &Partition, effects: &[f64], variances: &[f64]) -> Result<()> {
    if g.len() != effects.len() || effects.len() != variances.len() {
        return Err(Error::Validation(format!(
            "dimension mismatch: partition {}, effects {}, variances {}",
            g.len(),
            effects.len(),
            variances.len()
        )));
    }
    if effects.iter().any(|e| !e.is_finite()) {
        return Err(Error::Domain("effects must be finite".into()));
    }
    Ok(())
}

pub(crate) struct RowScratch {
    sum_lambda: Vec<f64>,
    block_mean: Vec<f64>,
}

impl RowScratch {
    fn new(capacity: usize) -> Self {
        RowScratch {
            sum_lambda: vec![0.0; capacity],
            block_mean: vec![0.0; capacity],
        }
    }

    fn reset(&mut self, d: usize) {
        if self.sum_lambda.len() < d {
            self.sum_lambda.resize(d, 0.0);
            self.block_mean.resize(d, 0.0);
        }
        self.sum_lambda[..d].fill(0.0);
        self.block_mean[..d].fill(0.0);
    }
}

fn q_with_scratch(
    assignment: &[u8],
    d: usize,
    lambda: &[f64],
    effects: &[f64],
    delta2: f64,
    scratch: &mut RowScratch,
) -> f64 {
    scratch.reset(d);
    for (i, &k) in assignment.iter().enumerate() {
        scratch.sum_lambda[k as usize] += lambda[i];
        scratch.block_mean[k as usize] += lambda[i] * effects[i];
    }
    for k in 0..d {
        scratch.block_mean[k] /= scratch.sum_lambda[k];
    }
    let mut q = 0.0;
    for (i, &k) in assignment.iter().enumerate() {
        let dev = effects[i] - scratch.block_mean[k as usize];
        q += lambda[i] * dev * dev;
    }
    q / delta2
}

/// Per-grid-node quantities shared by every partition row, precomputed once.
pub(crate) struct SweepContext {
    pub effects: Vec<f64>,
    pub nodes: Vec<f64>,
    /// λ[j][i] for grid node j.
    pub lambda: Vec<Vec<f64>>,
    /// log mass(δ²ⱼ) + ½ Σᵢ log(1−λᵢ(δ²ⱼ)) — identical for every partition.
    pub shared: Vec<f64>,
    /// Log prior mass by block count (index d−1).
    pub prior_by_d: Vec<f64>,
}

impl SweepContext {
    pub fn new(
        effects: &[f64],
        variances: &[f64],
        measure: &GridMeasure,
        pprior: PartitionPrior,
    ) -> Result<Self> {
        let l = effects.len();
        let mut lambda = Vec::with_capacity(measure.len());
        let mut shared = Vec::with_capacity(measure.len());
        for (j, &d2) in measure.nodes().iter().enumerate() {
            let lam = lambda_weights(d2, variances)?;
            let log_one_minus: f64 = variances.iter().map(|&v| v.ln() - (d2 + v).ln()).sum();
            shared.push(measure.log_masses()[j] + 0.5 * log_one_minus);
            lambda.push(lam);
        }
        let prior_by_d = (1..=l)
            .map(|d| prior_log_mass_for_block_count(pprior, l, d))
            .collect::<Result<Vec<f64>>>()?;
        Ok(SweepContext {
            effects: effects.to_vec(),
            nodes: measure.nodes().to_vec(),
            lambda,
            shared,
            prior_by_d,
        })
    }

    pub fn grid_len(&self) -> usize {
        self.nodes.len()
    }

    /// Fills `out[j]` with the log joint weight of (g, δ²ⱼ) for every node.
    pub fn fill_row(&self, assignment: &[u8], d: usize, scratch: &mut RowScratch, out: &mut [f64]) {
        let base = self.prior_by_d[d - 1] - 0.5 * d as f64;
        for j in 0..self.nodes.len() {
            let q = q_with_scratch(
                assignment,
                d,
                &self.lambda[j],
                &self.effects,
                self.nodes[j],
                scratch,
            );
            out[j] = base + self.shared[j] - 0.5 * q;
        }
    }

    pub fn row_log_marginal(&self, g: &Partition) -> f64 {
        let mut scratch = RowScratch::new(g.num_blocks());
        let mut row = vec![0.0; self.grid_len()];
        self.fill_row(g.assignment(), g.num_blocks(), &mut scratch, &mut row);
        let mut acc = LogAccum::new();
        for &lw in &row {
            acc.add(lw);
        }
        acc.value()
    }
}

/// One retained grid cell: a partition (by its enumeration rank), a δ² node
/// index, and the normalized log weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RetainedCell {
    pub rank: u64,
    pub grid: u16,
    pub log_weight: f64,
}

impl RetainedCell {
    pub fn weight(&self) -> f64 {
        self.log_weight.exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopPartition {
    pub partition: Partition,
    pub rendered: String,
    pub probability: f64,
}

/// The normalized joint posterior over (partition, δ²) cells.
#[derive(Debug, Clone)]
pub struct JointPosterior {
    effects: Vec<f64>,
    variances: Vec<f64>,
    scale: EffectScale,
    ids: Vec<u32>,
    measure: GridMeasure,
    pprior: PartitionPrior,
    keep_mass: f64,
    log_normalizer: f64,
    cells: Vec<RetainedCell>,
    dropped_mass: f64,
    delta2_marginal: Vec<f64>,
    top_partitions: Vec<TopPartition>,
    pool_all_prob: f64,
    dominant_prob: f64,
    dominant_min_block: usize,
    similarity: Vec<f64>,
    total_cells: u64,
}

impl JointPosterior {
    pub fn num_studies(&self) -> usize {
        self.effects.len()
    }

    pub fn scale(&self) -> EffectScale {
        self.scale
    }

    pub fn effects(&self) -> &[f64] {
        &self.effects
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn study_ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn measure(&self) -> &GridMeasure {
        &self.measure
    }

    pub fn partition_prior(&self) -> PartitionPrior {
        self.pprior
    }

    pub fn keep_mass(&self) -> f64 {
        self.keep_mass
    }

    /// Retained cells, sorted by decreasing weight.
    pub fn cells(&self) -> &[RetainedCell] {
        &self.cells
    }

    pub fn dropped_mass(&self) -> f64 {
        self.dropped_mass
    }

    /// log Σ over all B_L × D cells of the unnormalized weights.
    pub fn log_normalizer(&self) -> f64 {
        self.log_normalizer
    }

    /// Posterior f(δ²ⱼ | y) over grid nodes (all partitions, not just
    /// retained cells); sums to 1.
    pub fn delta2_marginal(&self) -> &[f64] {
        &self.delta2_marginal
    }

    /// Most probable partitions by their marginal f(g | y), descending.
    pub fn top_partitions(&self) -> &[TopPartition] {
        &self.top_partitions
    }

    /// Marginal probability of the single-block partition.
    pub fn pool_all_prob(&self) -> f64 {
        self.pool_all_prob
    }

    /// Total probability of partitions with exactly one block of at least
    /// `dominant_min_block` studies and all other studies single.
    pub fn dominant_prob(&self) -> f64 {
        self.dominant_prob
    }

    pub fn dominant_min_block(&self) -> usize {
        self.dominant_min_block
    }

    pub fn total_cells(&self) -> u64 {
        self.total_cells
    }

    /// Row-major L×L co-clustering probabilities over the full posterior.
    pub(crate) fn similarity_entries(&self) -> &[f64] {
        &self.similarity
    }

    pub fn partition_of(&self, cell: &RetainedCell) -> Result<Partition> {
        RgsCounts::new(self.num_studies())?.unrank(cell.rank)
    }

    pub(crate) fn sweep_context(&self) -> Result<SweepContext> {
        SweepContext::new(&self.effects, &self.variances, &self.measure, self.pprior)
    }
}

/// Sweeps every (partition, δ²) cell for the study set and returns the
/// normalized joint posterior. `threads = 0` uses all available cores; the
/// result is identical for every thread count.
pub fn compute_joint_posterior(
    studies: &StudySet,
    grid: &GridSpec,
    vprior: &VariancePrior,
    pprior: PartitionPrior,
    threads: usize,
) -> Result<JointPosterior> {
    let measure = grid.measure(vprior)?;
    let mut jp = compute_joint_posterior_with_measure(
        &studies.effects(),
        &studies.variances(),
        studies.scale(),
        &measure,
        grid.keep_mass,
        pprior,
        threads,
    )?;
    jp.ids = studies.ids();
    jp.top_partitions = jp
        .top_partitions
        .iter()
        .map(|tp| TopPartition {
            partition: tp.partition.clone(),
            rendered: tp.partition.render(&jp.ids),
            probability: tp.probability,
        })
        .collect();
    Ok(jp)
}

/// As [`compute_joint_posterior`], but over raw effects/variances and an
/// explicit δ² measure. This is the entry point for transported grids (e.g.
/// affine changes of the effect scale) and custom node sets.
pub fn compute_joint_posterior_with_measure(
    effects: &[f64],
    variances: &[f64],
    scale: EffectScale,
    measure: &GridMeasure,
    keep_mass: f64,
    pprior: PartitionPrior,
    threads: usize,
) -> Result<JointPosterior> {
    let l = effects.len();
    if l == 0 || l != variances.len() {
        return Err(Error::Validation(format!(
            "need matching nonempty effects ({l}) and variances ({})",
            variances.len()
        )));
    }
    if l > MAX_SWEEP_STUDIES {
        return Err(Error::ResourceLimit(format!(
            "exhaustive sweep supports at most {MAX_SWEEP_STUDIES} studies, got {l}"
        )));
    }
    if !(keep_mass > 0.0 && keep_mass <= 1.0) {
        return Err(Error::Domain(format!(
            "keep_mass must be in (0, 1], got {keep_mass}"
        )));
    }
    if effects.iter().any(|e| !e.is_finite()) {
        return Err(Error::Domain("effects must be finite".into()));
    }
    let ctx = SweepContext::new(effects, variances, measure, pprior)?;
    let counts = RgsCounts::new(l)?;
    let bell = counts.bell();
    let d_grid = ctx.grid_len();
    let total_cells = bell * d_grid as u64;
    let threads = resolve_threads(threads);
    let min_block = default_min_block(l);

    // Pass 1: accumulate the normalizer, the δ² marginal, co-clustering
    // probabilities, the dominant-class mass, and the top partitions.
    struct ChunkStats {
        total: LogAccum,
        marginal: Vec<LogAccum>,
        pairs: Vec<LogAccum>,
        dominant: LogAccum,
        pool_all: Option<f64>,
        top: Vec<(f64, u64)>,
    }

    let chunk_stats: Vec<ChunkStats> = run_chunked(bell, threads, |_, start, end| {
        let mut stats = ChunkStats {
            total: LogAccum::new(),
            marginal: vec![LogAccum::new(); d_grid],
            pairs: vec![LogAccum::new(); l * l],
            dominant: LogAccum::new(),
            pool_all: None,
            top: Vec::with_capacity(64),
        };
        let mut scratch = RowScratch::new(l);
        let mut row = vec![0.0; d_grid];
        let mut sizes = vec![0usize; l];
        let iter = enumerate_range(&counts, start, end).expect("valid range");
        for (offset, g) in iter.enumerate() {
            let rank = start + offset as u64;
            let d = g.num_blocks();
            ctx.fill_row(g.assignment(), d, &mut scratch, &mut row);
            let mut row_acc = LogAccum::new();
            for (j, &lw) in row.iter().enumerate() {
                stats.marginal[j].add(lw);
                row_acc.add(lw);
            }
            let row_lse = row_acc.value();
            stats.total.add(row_lse);
            if rank == 0 {
                stats.pool_all = Some(row_lse);
            }
            sizes[..d].fill(0);
            for &k in g.assignment() {
                sizes[k as usize] += 1;
            }
            let large = sizes[..d].iter().filter(|&&s| s >= min_block).count();
            let non_singleton = sizes[..d].iter().filter(|&&s| s > 1).count();
            if large == 1 && non_singleton <= 1 {
                stats.dominant.add(row_lse);
            }
            let assignment = g.assignment();
            for i in 0..l {
                for t in (i + 1)..l {
                    if assignment[i] == assignment[t] {
                        stats.pairs[i * l + t].add(row_lse);
                    }
                }
            }
            stats.top.push((row_lse, rank));
            if stats.top.len() >= 64 {
                stats.top.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                stats.top.truncate(TOP_PARTITIONS);
            }
        }
        stats.top.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        stats.top.truncate(TOP_PARTITIONS);
        stats
    });

    let mut total = LogAccum::new();
    let mut marginal = vec![LogAccum::new(); d_grid];
    let mut pairs = vec![LogAccum::new(); l * l];
    let mut dominant = LogAccum::new();
    let mut pool_all_lse = f64::NEG_INFINITY;
    let mut top: Vec<(f64, u64)> = Vec::new();
    for stats in &chunk_stats {
        total.merge(&stats.total);
        for (acc, part) in marginal.iter_mut().zip(&stats.marginal) {
            acc.merge(part);
        }
        for (acc, part) in pairs.iter_mut().zip(&stats.pairs) {
            acc.merge(part);
        }
        dominant.merge(&stats.dominant);
        if let Some(p) = stats.pool_all {
            pool_all_lse = p;
        }
        top.extend_from_slice(&stats.top);
    }
    top.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    top.truncate(TOP_PARTITIONS);
    let log_normalizer = total.value();
    if !log_normalizer.is_finite() {
        return Err(Error::Numeric(
            "joint posterior normalizer is not finite".into(),
        ));
    }

    // A cell can belong to the minimal keep_mass set only if its normalized
    // weight is at least (1 − keep_mass)/total_cells — everything below that
    // floor summed over all cells is still < 1 − keep_mass. The floor alone
    // can admit far more cells than the minimal set actually needs, so for
    // keep_mass < 1 a histogram pass tightens it to (almost exactly) the
    // smallest cutoff whose tail mass still reaches keep_mass.
    let threshold = if keep_mass >= 1.0 {
        f64::NEG_INFINITY
    } else {
        let floor = ((1.0 - keep_mass) / total_cells as f64).ln();
        const HIST_BINS: usize = 4096;
        let bin_width = -floor / HIST_BINS as f64;
        struct HistChunk {
            mass: Vec<f64>,
            count: Vec<u64>,
        }
        let chunk_hists: Vec<HistChunk> = run_chunked(bell, threads, |_, start, end| {
            let mut hist = HistChunk {
                mass: vec![0.0; HIST_BINS],
                count: vec![0; HIST_BINS],
            };
            let mut scratch = RowScratch::new(l);
            let mut row = vec![0.0; d_grid];
            let iter = enumerate_range(&counts, start, end).expect("valid range");
            for g in iter {
                ctx.fill_row(g.assignment(), g.num_blocks(), &mut scratch, &mut row);
                for &lw in row.iter() {
                    let lwn = lw - log_normalizer;
                    if lwn >= floor {
                        let bin = (((lwn - floor) / bin_width) as usize).min(HIST_BINS - 1);
                        hist.mass[bin] += lwn.exp();
                        hist.count[bin] += 1;
                    }
                }
            }
            hist
        });
        // Merge in chunk order so the cutoff is identical for every thread
        // count.
        let mut mass = vec![0.0f64; HIST_BINS];
        let mut count = vec![0u64; HIST_BINS];
        for hist in &chunk_hists {
            for b in 0..HIST_BINS {
                mass[b] += hist.mass[b];
                count[b] += hist.count[b];
            }
        }
        let mut cutoff_bin = 0usize;
        let mut tail_mass = 0.0;
        for b in (0..HIST_BINS).rev() {
            tail_mass += mass[b];
            if tail_mass >= keep_mass {
                cutoff_bin = b;
                break;
            }
        }
        if count[cutoff_bin..].iter().sum::<u64>() > MAX_RETAINED_CELLS {
            return Err(Error::ResourceLimit(format!(
                "more than {MAX_RETAINED_CELLS} grid cells would be retained; lower keep_mass \
                 or the study count"
            )));
        }
        log_normalizer + floor + cutoff_bin as f64 * bin_width
    };

    // Pass 2: re-emit every cell at or above the cutoff.
    let candidate_count = AtomicU64::new(0);
    let over_cap = AtomicBool::new(false);
    let chunk_cells: Vec<Vec<(u64, u16, f64)>> = run_chunked(bell, threads, |_, start, end| {
        if over_cap.load(Ordering::Relaxed) {
            return Vec::new();
        }
        let mut cells = Vec::new();
        let mut scratch = RowScratch::new(l);
        let mut row = vec![0.0; d_grid];
        let iter = enumerate_range(&counts, start, end).expect("valid range");
        for (offset, g) in iter.enumerate() {
            let rank = start + offset as u64;
            ctx.fill_row(g.assignment(), g.num_blocks(), &mut scratch, &mut row);
            for (j, &lw) in row.iter().enumerate() {
                if lw >= threshold {
                    cells.push((rank, j as u16, lw));
                }
            }
        }
        let before = candidate_count.fetch_add(cells.len() as u64, Ordering::Relaxed);
        if before + cells.len() as u64 > MAX_RETAINED_CELLS {
            over_cap.store(true, Ordering::Relaxed);
        }
        cells
    });
    if over_cap.load(Ordering::Relaxed) {
        return Err(Error::ResourceLimit(format!(
            "more than {MAX_RETAINED_CELLS} grid cells would be retained; lower keep_mass or \
             the study count"
        )));
    }
    let mut candidates: Vec<(u64, u16, f64)> = chunk_cells.into_iter().flatten().collect();
    candidates.sort_unstable_by(|a, b| {
        b.2.total_cmp(&a.2)
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    let mut cells = Vec::new();
    let mut cumulative = 0.0;
    for (rank, grid_idx, lw) in candidates {
        let log_weight = lw - log_normalizer;
        cells.push(RetainedCell {
            rank,
            grid: grid_idx,
            log_weight,
        });
        cumulative += log_weight.exp();
        if cumulative >= keep_mass {
            break;
        }
    }
    let dropped_mass = (1.0 - cumulative).clamp(0.0, 1.0);

    let delta2_marginal: Vec<f64> = marginal
        .iter()
        .map(|acc| (acc.value() - log_normalizer).exp())
        .collect();
    let mut similarity = vec![0.0; l * l];
    for i in 0..l {
        similarity[i * l + i] = 1.0;
        for t in (i + 1)..l {
            let p = (pairs[i * l + t].value() - log_normalizer).exp().min(1.0);
            similarity[i * l + t] = p;
            similarity[t * l + i] = p;
        }
    }
    let ids: Vec<u32> = (1..=l as u32).collect();
    let top_partitions = top
        .into_iter()
        .map(|(lse, rank)| {
            let partition = counts.unrank(rank)?;
            let rendered = partition.render(&ids);
            Ok(TopPartition {
                partition,
                rendered,
                probability: (lse - log_normalizer).exp(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(JointPosterior {
        effects: effects.to_vec(),
        variances: variances.to_vec(),
        scale,
        ids,
        measure: measure.clone(),
        pprior,
        keep_mass,
        log_normalizer,
        cells,
        dropped_mass,
        delta2_marginal,
        top_partitions,
        pool_all_prob: (pool_all_lse - log_normalizer).exp(),
        dominant_prob: (dominant.value() - log_normalizer).exp(),
        dominant_min_block: min_block,
        similarity,
        total_cells,
    })
}

/// How many partitions to keep in the marginal top list.
pub const TOP_PARTITIONS: usize = 20;

fn resolve_threads(threads: usize) -> usize {
    if threads > 0 {
        threads
    } else {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    }
}

/// Composite Monte Carlo draws of the true effects μ (and their probability-
/// scale transforms when the analysis runs on log odds).
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    b: usize,
    l: usize,
    seed: u64,
    scale: EffectScale,
    analysis: Vec<f64>,
    probability: Option<Vec<f64>>,
}

impl PosteriorDraws {
    pub fn num_draws(&self) -> usize {
        self.b
    }

    pub fn num_studies(&self) -> usize {
        self.l
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn scale(&self) -> EffectScale {
        self.scale
    }

    /// Row-major B×L draws on the analysis scale.
    pub fn analysis(&self) -> &[f64] {
        &self.analysis
    }

    /// Row-major B×L draws on the probability scale (present when the
    /// analysis scale is log odds).
    pub fn probability(&self) -> Option<&[f64]> {
        self.probability.as_deref()
    }

    /// The draws summaries should be reported on: probability scale when
    /// available, otherwise the analysis scale.
    pub fn summary_draws(&self) -> &[f64] {
        self.probability.as_deref().unwrap_or(&self.analysis)
    }

    pub fn column(&self, study: usize) -> Vec<f64> {
        self.summary_draws()
            .iter()
            .skip(study)
            .step_by(self.l)
            .copied()
            .collect()
    }
}

/// Draws (g, δ²) from the retained cells and then μ from its conditional
/// given that cell, via the block decomposition of the conditional
/// covariance: νₖ ~ N(μ̂ₖ, δ²/Σ_{Sₖ}λ), μᵢ = λᵢyᵢ + (1−λᵢ)νₖ + √(δ²(1−λᵢ))·zᵢ,
/// which has exactly the moments of [`conditional_moments`].
pub fn sample_mu(
    jp: &JointPosterior,
    studies: &StudySet,
    b: usize,
    seed: u64,
) -> Result<PosteriorDraws> {
    if b == 0 {
        return Err(Error::Domain("draw count must be positive".into()));
    }
    if studies.len() != jp.num_studies() || studies.scale() != jp.scale() {
        return Err(Error::Validation(
            "study set does not match the posterior it is sampled from".into(),
        ));
    }
    let l = jp.num_studies();
    if jp.cells.is_empty() {
        return Err(Error::Numeric("posterior retained no cells".into()));
    }
    let mut cumulative = Vec::with_capacity(jp.cells.len());
    let mut running = 0.0;
    for cell in &jp.cells {
        running += cell.weight();
        cumulative.push(running);
    }
    let retained = running;

    let counts = RgsCounts::new(l)?;
    let mut partition_cache: HashMap<u64, Partition> = HashMap::new();
    let lambda_by_node: Vec<Vec<f64>> = jp
        .measure
        .nodes()
        .iter()
        .map(|&d2| lambda_weights(d2, &jp.variances))
        .collect::<Result<_>>()?;

    let mut analysis = Vec::with_capacity(b * l);
    let mut block_mean = vec![0.0; l];
    let mut block_lambda = vec![0.0; l];
    let mut nu = vec![0.0; l];
    let num_blocks = b.div_ceil(DRAW_BLOCK);
    for block_index in 0..num_blocks {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(block_index as u64);
        let in_block = DRAW_BLOCK.min(b - block_index * DRAW_BLOCK);
        for _ in 0..in_block {
            let u: f64 = rng.gen::<f64>() * retained;
            let idx = cumulative
                .partition_point(|&c| c <= u)
                .min(jp.cells.len() - 1);
            let cell = &jp.cells[idx];
            let g = partition_cache
                .entry(cell.rank)
                .or_insert_with(|| counts.unrank(cell.rank).expect("retained rank valid"));
            let d = g.num_blocks();
            let d2 = jp.measure.nodes()[cell.grid as usize];
            let lambda = &lambda_by_node[cell.grid as usize];

            block_lambda[..d].fill(0.0);
            block_mean[..d].fill(0.0);
            for (i, &k) in g.assignment().iter().enumerate() {
                block_lambda[k as usize] += lambda[i];
                block_mean[k as usize] += lambda[i] * jp.effects[i];
            }
            for k in 0..d {
                let mean = block_mean[k] / block_lambda[k];
                let z: f64 = rng.sample(StandardNormal);
                nu[k] = mean + z * (d2 / block_lambda[k]).sqrt();
            }
            for (i, &k) in g.assignment().iter().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                let mu = lambda[i] * jp.effects[i]
                    + (1.0 - lambda[i]) * nu[k as usize]
                    + (d2 * (1.0 - lambda[i])).sqrt() * z;
                analysis.push(mu);
            }
        }
    }

    let probability = match jp.scale {
        EffectScale::LogOdds => Some(
            analysis
                .iter()
                .map(|&mu| EffectScale::LogOdds.to_probability(mu))
                .collect(),
        ),
        EffectScale::Proportion => None,
    };
    Ok(PosteriorDraws {
        b,
        l,
        seed,
        scale: jp.scale,
        analysis,
        probability,
    })
}

/// Posterior mean with an equal-tail credible interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectInterval {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Per-study mean and equal-tail interval at the given level, on the
/// probability scale when the draws carry one.
pub fn summarize(draws: &PosteriorDraws, level: f64) -> Result<Vec<EffectInterval>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!(
            "credible level must be in (0,1), got {level}"
        )));
    }
    Ok((0..draws.num_studies())
        .map(|i| {
            let column = draws.column(i);
            let (mean, lower, upper) = mean_and_interval(&column, level);
            EffectInterval { mean, lower, upper }
        })
        .collect())
}

/// Posterior summary for a single study by id, from the same composite draws
/// that [`summarize`] reports — the marginal "gold standard" estimate.
pub fn gold_standard_posterior(
    jp: &JointPosterior,
    studies: &StudySet,
    study_id: u32,
    b: usize,
    seed: u64,
) -> Result<EffectInterval> {
    let position = studies.position_of(study_id).ok_or_else(|| Error::NotFound {
        name: format!("study id {study_id}"),
        valid: studies.ids().iter().map(|id| id.to_string()).collect(),
    })?;
    let draws = sample_mu(jp, studies, b, seed)?;
    let summaries = summarize(&draws, 0.95)?;
    Ok(summaries[position])
}

/// Posterior for the overall effect ν under the single-block partition, with
/// a flat prior on δ² over the grid range. For each node, ν | y, g₀, δ² is
/// normal with mean μ̂₁(g₀) and variance δ²/Σλ; the node weights combine the
/// flat prior (node spacing ∝ δ²), the shrinkage product, and exp(−Q/2).
/// Deterministic: quantiles come from bisecting the mixture CDF and the
/// probability-scale mean from per-component quadrature.
pub fn overall_effect_interval(
    studies: &StudySet,
    grid: &GridSpec,
    level: f64,
) -> Result<EffectInterval> {
    grid.validate()?;
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!(
            "credible level must be in (0,1), got {level}"
        )));
    }
    let effects = studies.effects();
    let variances = studies.variances();
    let l = studies.len();
    let g0 = Partition::pool_all(l);

    let (lo, hi) = (grid.delta2_min.ln(), grid.delta2_max.ln());
    let step = (hi - lo) / (grid.points - 1) as f64;
    let mut log_weights = Vec::with_capacity(grid.points);
    let mut means = Vec::with_capacity(grid.points);
    let mut sds = Vec::with_capacity(grid.points);
    for i in 0..grid.points {
        let d2 = (lo + i as f64 * step).exp();
        let lambda = lambda_weights(d2, &variances)?;
        let sum_lambda: f64 = lambda.iter().sum();
        let mean = subset_mean(&(0..l).collect::<Vec<_>>(), &lambda, &effects);
        let var_nu = d2 / sum_lambda;
        let q = q_statistic(&g0, d2, &effects, &variances)?;
        let log_one_minus: f64 = variances.iter().map(|&v| v.ln() - (d2 + v).ln()).sum();
        // flat prior over δ² on log-spaced nodes contributes mass ∝ δ²;
        // integrating the block mean out of the likelihood leaves √(δ²/Σλ)
        log_weights.push(d2.ln() + 0.5 * log_one_minus - 0.5 * q + 0.5 * var_nu.ln());
        means.push(mean);
        sds.push(var_nu.sqrt());
    }
    let max_lw = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = log_weights.iter().map(|lw| (lw - max_lw).exp()).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }

    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mixture_cdf = |t: f64| -> f64 {
        weights
            .iter()
            .zip(&means)
            .zip(&sds)
            .map(|((&w, &m), &s)| w * std_normal.cdf((t - m) / s))
            .sum()
    };
    let quantile = |p: f64| -> f64 {
        let mut lo_t = f64::INFINITY;
        let mut hi_t = f64::NEG_INFINITY;
        for (&m, &s) in means.iter().zip(&sds) {
            lo_t = lo_t.min(m - 12.0 * s);
            hi_t = hi_t.max(m + 12.0 * s);
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo_t + hi_t);
            if mixture_cdf(mid) < p {
                lo_t = mid;
            } else {
                hi_t = mid;
            }
        }
        0.5 * (lo_t + hi_t)
    };
    let alpha = (1.0 - level) / 2.0;
    let scale = studies.scale();
    let lower = scale.to_probability(quantile(alpha));
    let upper = scale.to_probability(quantile(1.0 - alpha));
    let mean = match scale {
        EffectScale::Proportion => weights
            .iter()
            .zip(&means)
            .map(|(&w, &m)| w * m)
            .sum(),
        EffectScale::LogOdds => {
            // E[invlogit(ν)] by Simpson's rule on each mixture component
            let mut total_mean = 0.0;
            for ((&w, &m), &s) in weights.iter().zip(&means).zip(&sds) {
                let (a, b) = (m - 8.0 * s, m + 8.0 * s);
                let n = 200usize;
                let h = (b - a) / n as f64;
                let mut integral = 0.0;
                for k in 0..=n {
                    let t = a + k as f64 * h;
                    let f = EffectScale::LogOdds.to_probability(t)
                        * std_normal.pdf((t - m) / s)
                        / s;
                    let coeff = if k == 0 || k == n {
                        1.0
                    } else if k % 2 == 1 {
                        4.0
                    } else {
                        2.0
                    };
                    integral += coeff * f;
                }
                total_mean += w * integral * h / 3.0;
            }
            total_mean
        }
    };
    Ok(EffectInterval { mean, lower, upper })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partitions::enumerate_partitions;
    use crate::study_data::Study;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn study_set(counts: &[(u64, u64)], scale: EffectScale) -> StudySet {
        let studies: Vec<Study> = counts
            .iter()
            .enumerate()
            .map(|(i, &(events, trials))| {
                Study::new(i as u32 + 1, format!("s{}", i + 1), events, trials).unwrap()
            })
            .collect();
        StudySet::new(studies, scale, Default::default()).unwrap()
    }

    #[test]
    fn lambda_examples() {
        let lam = lambda_weights(1.0, &[1.0, 1.0]).unwrap();
        assert_eq!(lam, vec![0.5, 0.5]);
        let lam = lambda_weights(2.5, &[2.5]).unwrap();
        assert_abs_diff_eq!(lam[0], 0.5);
        let lam = lambda_weights(1e9 * 3.0, &[3.0, 0.5]).unwrap();
        assert!(lam.iter().all(|&x| x > 0.999));
        assert!(lambda_weights(1.0, &[0.0]).is_err());
        assert!(lambda_weights(-1.0, &[1.0]).is_err());
    }

    #[test]
    fn subset_mean_examples() {
        assert_abs_diff_eq!(subset_mean(&[1], &[0.3, 0.7], &[5.0, 2.0]), 2.0);
        assert_abs_diff_eq!(subset_mean(&[0, 1], &[0.4, 0.4], &[0.0, 2.0]), 1.0);
        assert_abs_diff_eq!(subset_mean(&[0, 1], &[0.8, 0.2], &[0.0, 2.0]), 0.4);
    }

    #[test]
    fn moments_of_pooled_pair() {
        let g = Partition::pool_all(2);
        let m = conditional_moments(&g, 1.0, &[0.0, 2.0], &[1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(m.mean[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(m.mean[1], 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(m.covariance[(0, 0)], 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(m.covariance[(1, 1)], 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(m.covariance[(0, 1)], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn moments_of_singletons_recover_effects() {
        let g = Partition::singletons(3);
        let effects = [0.3, -1.0, 2.0];
        let variances = [0.5, 1.0, 2.0];
        let delta2 = 0.7;
        let m = conditional_moments(&g, delta2, &effects, &variances).unwrap();
        let lambda = lambda_weights(delta2, &variances).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(m.mean[i], effects[i], epsilon = 1e-12);
            let expected =
                delta2 * (1.0 - lambda[i]) + (1.0 - lambda[i]).powi(2) * delta2 / lambda[i];
            assert_abs_diff_eq!(m.covariance[(i, i)], expected, epsilon = 1e-12);
            for t in 0..3 {
                if t != i {
                    assert_eq!(m.covariance[(i, t)], 0.0);
                }
            }
        }
    }

    #[test]
    fn cross_block_covariance_is_zero() {
        let g = Partition::from_assignment(&[0, 0, 1, 1]).unwrap();
        let m =
            conditional_moments(&g, 0.9, &[0.1, 0.2, 1.4, 1.6], &[0.3, 0.4, 0.5, 0.6]).unwrap();
        for i in 0..2 {
            for t in 2..4 {
                assert_eq!(m.covariance[(i, t)], 0.0);
                assert_eq!(m.covariance[(t, i)], 0.0);
            }
        }
    }

    #[test]
    fn q_statistic_examples() {
        let singles = Partition::singletons(4);
        let q = q_statistic(&singles, 0.5, &[1.0, 2.0, 3.0, 4.0], &[1.0; 4]).unwrap();
        assert_abs_diff_eq!(q, 0.0, epsilon = 1e-14);

        let pooled = Partition::pool_all(2);
        let q = q_statistic(&pooled, 1.0, &[0.0, 2.0], &[1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(q, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn joint_weight_balances_penalty_against_fit() {
        // with Q(pool-all) = 1 the fit deficit exactly offsets the one-block
        // penalty advantage, so both partitions weigh the same
        let effects = [0.0, 2.0];
        let variances = [1.0, 1.0];
        let pooled = log_joint_weight(
            &Partition::pool_all(2),
            1.0,
            &effects,
            &variances,
            PartitionPrior::Uniform,
            0.0,
        )
        .unwrap();
        let split = log_joint_weight(
            &Partition::singletons(2),
            1.0,
            &effects,
            &variances,
            PartitionPrior::Uniform,
            0.0,
        )
        .unwrap();
        assert_abs_diff_eq!(pooled, split, epsilon = 1e-12);
    }

    #[test]
    fn identical_effects_favor_pooling_by_penalty_factor() {
        let effects = [1.3; 4];
        let variances = [0.8, 0.5, 0.9, 0.7];
        let pooled = log_joint_weight(
            &Partition::pool_all(4),
            0.6,
            &effects,
            &variances,
            PartitionPrior::Uniform,
            0.0,
        )
        .unwrap();
        let split = log_joint_weight(
            &Partition::singletons(4),
            0.6,
            &effects,
            &variances,
            PartitionPrior::Uniform,
            0.0,
        )
        .unwrap();
        assert_abs_diff_eq!(pooled - split, 3.0 / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn grid_measure_normalizes() {
        let grid = GridSpec::default();
        assert_eq!(grid.points, 101);
        assert_abs_diff_eq!(grid.keep_mass, 0.9995);
        for vprior in [VariancePrior::InvBeta, VariancePrior::default_inv_gamma()] {
            let measure = grid.measure(&vprior).unwrap();
            let total: f64 = measure.log_masses().iter().map(|m| m.exp()).sum();
            assert_relative_eq!(total, 1.0, max_relative = 1e-12);
            assert_eq!(measure.len(), 101);
            assert_relative_eq!(measure.nodes()[0], grid.delta2_min, max_relative = 1e-12);
            assert_relative_eq!(
                measure.nodes()[100],
                grid.delta2_max,
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn invalid_grids_rejected() {
        let mut grid = GridSpec::default();
        grid.points = 1;
        assert!(grid.validate().is_err());
        let mut grid = GridSpec::default();
        grid.delta2_min = grid.delta2_max;
        assert!(grid.validate().is_err());
        let mut grid = GridSpec::default();
        grid.keep_mass = 0.0;
        assert!(grid.validate().is_err());
        assert!(VariancePrior::InvGamma {
            shape: -1.0,
            rate: 1.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn prior_densities_have_expected_shape() {
        let b = VariancePrior::InvBeta;
        // density ratio between δ²=1 and δ²=4: ((1+4)·2) / ((1+1)·1) = 5
        let ratio = (b.log_density(1.0) - b.log_density(4.0)).exp();
        assert_relative_eq!(ratio, 5.0, max_relative = 1e-12);
        let g = VariancePrior::InvGamma {
            shape: 2.0,
            rate: 3.0,
        };
        let expected = -3.0 * 2.0f64.ln() - 1.5 + 3.0;
        assert_relative_eq!(
            g.log_density(2.0) - g.log_density(1.0),
            expected,
            max_relative = 1e-12
        );
    }

    #[test]
    fn single_study_posterior_is_trivial() {
        let set = study_set(&[(30, 100)], EffectScale::LogOdds);
        let jp = compute_joint_posterior(
            &set,
            &GridSpec::default(),
            &VariancePrior::InvBeta,
            PartitionPrior::Uniform,
            1,
        )
        .unwrap();
        assert_abs_diff_eq!(jp.pool_all_prob(), 1.0, epsilon = 1e-12);
        assert_eq!(jp.top_partitions().len(), 1);
        let marg_total: f64 = jp.delta2_marginal().iter().sum();
        assert_relative_eq!(marg_total, 1.0, max_relative = 1e-10);
    }

    #[test]
    fn retained_mass_accounts_for_everything() {
        let set = study_set(&[(4, 13), (13, 23), (18, 83), (40, 60)], EffectScale::LogOdds);
        let jp = compute_joint_posterior(
            &set,
            &GridSpec::default(),
            &VariancePrior::InvBeta,
            PartitionPrior::Uniform,
            2,
        )
        .unwrap();
        let retained: f64 = jp.cells().iter().map(|c| c.weight()).sum();
        assert_abs_diff_eq!(retained + jp.dropped_mass(), 1.0, epsilon = 1e-10);
        assert!(retained >= jp.keep_mass() - 1e-10);
        assert!(jp.dropped_mass() <= 1.0 - jp.keep_mass() + 1e-10);
        // weights are sorted descending
        for pair in jp.cells().windows(2) {
            assert!(pair[0].log_weight >= pair[1].log_weight);
        }
    }

    #[test]
    fn sweep_matches_direct_evaluation() {
        let effects = [-0.5, 0.1, 0.9];
        let variances = [0.4, 0.2, 0.6];
        let grid = GridSpec {
            delta2_min: 1e-2,
            delta2_max: 10.0,
            points: 5,
            keep_mass: 1.0,
        };
        let measure = grid.measure(&VariancePrior::InvBeta).unwrap();
        let jp = compute_joint_posterior_with_measure(
            &effects,
            &variances,
            EffectScale::LogOdds,
            &measure,
            1.0,
            PartitionPrior::SizeBiased,
            3,
        )
        .unwrap();

        // direct: evaluate every cell through the public single-cell op
        let parts: Vec<Partition> = enumerate_partitions(3).unwrap().collect();
        let mut lws = Vec::new();
        for g in &parts {
            for j in 0..measure.len() {
                lws.push(
                    log_joint_weight(
                        g,
                        measure.nodes()[j],
                        &effects,
                        &variances,
                        PartitionPrior::SizeBiased,
                        measure.log_masses()[j],
                    )
                    .unwrap(),
                );
            }
        }
        let mut acc = crate::stats::LogAccum::new();
        for &lw in &lws {
            acc.add(lw);
        }
        let norm = acc.value();

        assert_abs_diff_eq!(jp.dropped_mass(), 0.0, epsilon = 1e-10);
        assert_eq!(jp.cells().len(), lws.len());
        assert_abs_diff_eq!(
            jp.pool_all_prob(),
            (0..measure.len())
                .map(|j| (lws[j] - norm).exp())
                .sum::<f64>(),
            epsilon = 1e-12
        );
        for j in 0..measure.len() {
            let direct: f64 = (0..parts.len())
                .map(|r| (lws[r * measure.len() + j] - norm).exp())
                .sum();
            assert_abs_diff_eq!(jp.delta2_marginal()[j], direct, epsilon = 1e-12);
        }
        // per-cell weights agree
        for cell in jp.cells() {
            let direct = lws[cell.rank as usize * measure.len() + cell.grid as usize] - norm;
            assert_abs_diff_eq!(cell.log_weight, direct, epsilon = 1e-12);
        }
    }

    #[test]
    fn thread_counts_do_not_change_results() {
        let set = study_set(
            &[(4, 13), (13, 23), (18, 83), (40, 60), (130, 166)],
            EffectScale::LogOdds,
        );
        let run = |threads| {
            compute_joint_posterior(
                &set,
                &GridSpec::default(),
                &VariancePrior::InvBeta,
                PartitionPrior::Uniform,
                threads,
            )
            .unwrap()
        };
        let one = run(1);
        for threads in [2, 8] {
            let other = run(threads);
            assert_eq!(one.log_normalizer(), other.log_normalizer());
            assert_eq!(one.cells(), other.cells());
            assert_eq!(one.delta2_marginal(), other.delta2_marginal());
            assert_eq!(one.similarity_entries(), other.similarity_entries());
            assert_eq!(one.pool_all_prob(), other.pool_all_prob());
            assert_eq!(one.dominant_prob(), other.dominant_prob());
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let set = study_set(&[(4, 13), (13, 23), (18, 83)], EffectScale::LogOdds);
        let jp = compute_joint_posterior(
            &set,
            &GridSpec::default(),
            &VariancePrior::InvBeta,
            PartitionPrior::Uniform,
            0,
        )
        .unwrap();
        let a = sample_mu(&jp, &set, 5000, 7).unwrap();
        let b = sample_mu(&jp, &set, 5000, 7).unwrap();
        assert_eq!(a.analysis(), b.analysis());
        let c = sample_mu(&jp, &set, 5000, 8).unwrap();
        assert_ne!(a.analysis(), c.analysis());
        assert!(sample_mu(&jp, &set, 0, 7).is_err());
        let probs = a.probability().unwrap();
        assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn degenerate_singleton_grid_reproduces_sample_effects() {
        // one tiny δ² node: the all-singleton partition dominates and the
        // posterior for each effect is centered at the observed effect
        let set = study_set(&[(30, 100), (50, 100), (70, 100)], EffectScale::Proportion);
        let measure = GridMeasure::from_parts(vec![1e-9], vec![0.0]).unwrap();
        let jp = compute_joint_posterior_with_measure(
            &set.effects(),
            &set.variances(),
            EffectScale::Proportion,
            &measure,
            1.0,
            PartitionPrior::Uniform,
            1,
        )
        .unwrap();
        let draws = sample_mu(&jp, &set, 20_000, 99).unwrap();
        let summaries = summarize(&draws, 0.95).unwrap();
        for (summary, effect) in summaries.iter().zip(set.effects()) {
            assert_abs_diff_eq!(summary.mean, effect, epsilon = 0.005);
        }
    }

    #[test]
    fn summarize_validates_level() {
        let set = study_set(&[(4, 13), (13, 23)], EffectScale::LogOdds);
        let jp = compute_joint_posterior(
            &set,
            &GridSpec::default(),
            &VariancePrior::InvBeta,
            PartitionPrior::Uniform,
            1,
        )
        .unwrap();
        let draws = sample_mu(&jp, &set, 100, 1).unwrap();
        assert!(summarize(&draws, 0.0).is_err());
        assert!(summarize(&draws, 1.0).is_err());
        assert!(summarize(&draws, 0.95).is_ok());
    }

    #[test]
    fn gold_standard_matches_summarize_column() {
        let set = study_set(&[(4, 13), (13, 23), (18, 83)], EffectScale::LogOdds);
        let jp = compute_joint_posterior(
            &set,
            &GridSpec::default(),
            &VariancePrior::InvBeta,
            PartitionPrior::Uniform,
            0,
        )
        .unwrap();
        let single = gold_standard_posterior(&jp, &set, 2, 4000, 11).unwrap();
        let all = summarize(&sample_mu(&jp, &set, 4000, 11).unwrap(), 0.95).unwrap();
        assert_eq!(single, all[1]);
        assert!(matches!(
            gold_standard_posterior(&jp, &set, 9, 100, 1),
            Err(Error::NotFound { .. })
        ));
    }

    #[test]
    fn overall_interval_brackets_common_effect() {
        let set = study_set(&[(40, 100), (41, 100), (39, 100)], EffectScale::LogOdds);
        let overall = overall_effect_interval(&set, &GridSpec::default(), 0.95).unwrap();
        assert!(overall.lower < overall.mean && overall.mean < overall.upper);
        assert!(overall.lower > 0.0 && overall.upper < 1.0);
        assert_abs_diff_eq!(overall.mean, 0.4, epsilon = 0.05);
    }
}
