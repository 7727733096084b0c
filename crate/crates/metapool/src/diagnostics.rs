//! Posterior diagnostics: study-similarity matrices, probabilities of
//! partition classes, and a posterior predictive check of the single-block
//! (pool-all) model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::partitions::{enumerate_partitions, Partition};
use crate::pooling::{lambda_weights, GridSpec, JointPosterior, VariancePrior};
use crate::stats::LogAccum;
use crate::study_data::StudySet;

/// Recomputing a partition-class probability enumerates every partition per
/// grid node, so it is limited to small study counts.
pub const MAX_CLASS_PROBABILITY_STUDIES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilaritySource {
    GridPosterior,
    RjChain,
    DpmChain,
}

/// Pairwise co-clustering probabilities between studies.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityMatrix {
    ids: Vec<u32>,
    /// Row-major L×L.
    matrix: Vec<f64>,
    source: SimilaritySource,
}

impl SimilarityMatrix {
    pub(crate) fn from_entries(
        ids: Vec<u32>,
        matrix: Vec<f64>,
        source: SimilaritySource,
    ) -> Result<Self> {
        let l = ids.len();
        if matrix.len() != l * l {
            return Err(Error::Validation(format!(
                "similarity matrix needs {l}×{l} entries, got {}",
                matrix.len()
            )));
        }
        for i in 0..l {
            if (matrix[i * l + i] - 1.0).abs() > 1e-12 {
                return Err(Error::Numeric("similarity diagonal must be 1".into()));
            }
            for t in 0..l {
                let p = matrix[i * l + t];
                if !(0.0..=1.0).contains(&p) || p != matrix[t * l + i] {
                    return Err(Error::Numeric(
                        "similarity entries must be symmetric probabilities".into(),
                    ));
                }
            }
        }
        Ok(SimilarityMatrix {
            ids,
            matrix,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn source(&self) -> SimilaritySource {
        self.source
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.len() + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.matrix
    }
}

/// Co-clustering probabilities under the full grid posterior (every cell, not
/// just the retained set).
pub fn similarity_from_grid(jp: &JointPosterior) -> Result<SimilarityMatrix> {
    SimilarityMatrix::from_entries(
        jp.study_ids().to_vec(),
        jp.similarity_entries().to_vec(),
        SimilaritySource::GridPosterior,
    )
}

/// Posterior probability that the partition falls in the class selected by
/// `predicate`, recomputed by a fresh exhaustive enumeration.
pub fn partition_class_probability<F>(jp: &JointPosterior, predicate: F) -> Result<f64>
where
    F: Fn(&Partition) -> bool,
{
    let l = jp.num_studies();
    if l > MAX_CLASS_PROBABILITY_STUDIES {
        return Err(Error::ResourceLimit(format!(
            "partition-class probabilities are recomputable up to \
             {MAX_CLASS_PROBABILITY_STUDIES} studies, got {l}"
        )));
    }
    let ctx = jp.sweep_context()?;
    let mut acc = LogAccum::new();
    for g in enumerate_partitions(l)? {
        if predicate(&g) {
            acc.add(ctx.row_log_marginal(&g));
        }
    }
    Ok((acc.value() - jp.log_normalizer()).exp().min(1.0))
}

/// Result of the posterior predictive check against the pool-all model, using
/// the discrepancy T(y, ν, δ²) = Σᵢ (yᵢ − ν)²/(vᵢ + δ²).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PpcResult {
    /// Proportion of replicates with T(y_rep) ≥ T(y_obs).
    pub p_value: f64,
    pub num_replicates: usize,
    pub exceedances: usize,
    /// Mean of the observed-data discrepancy across the sampled (ν, δ²).
    pub t_observed_mean: f64,
    /// Mean of the replicated-data discrepancy.
    pub t_replicated_mean: f64,
}

impl PpcResult {
    /// Monte Carlo can only bound a p-value away from zero: with no
    /// exceedances the honest report is "< 1/replicates".
    pub fn band(&self) -> String {
        if self.exceedances == 0 {
            format!("< {:.1e}", 1.0 / self.num_replicates as f64)
        } else {
            format!("{:.4}", self.p_value)
        }
    }
}

/// Posterior predictive p-value for the pool-all model. For each replicate a
/// (δ², ν) pair is drawn from its posterior under the single-block partition
/// (grid posterior for δ², conjugate normal for ν given δ²), a replicate data
/// set y_rep is drawn with the observed plug-in variances held fixed, and the
/// discrepancy is compared at the same (ν, δ²) on both data sets.
pub fn posterior_predictive_pvalue(
    studies: &StudySet,
    grid: &GridSpec,
    vprior: &VariancePrior,
    replicates: usize,
    seed: u64,
) -> Result<PpcResult> {
    if replicates < 1000 {
        return Err(Error::Domain(format!(
            "need at least 1000 replicates for a stable p-value, got {replicates}"
        )));
    }
    let measure = grid.measure(vprior)?;
    let effects = studies.effects();
    let variances = studies.variances();
    let l = studies.len();

    // node-wise posterior of δ² given the pool-all partition
    let mut log_weights = Vec::with_capacity(measure.len());
    let mut block_means = Vec::with_capacity(measure.len());
    let mut nu_sds = Vec::with_capacity(measure.len());
    for (j, &d2) in measure.nodes().iter().enumerate() {
        let lambda = lambda_weights(d2, &variances)?;
        let sum_lambda: f64 = lambda.iter().sum();
        let mean = lambda
            .iter()
            .zip(&effects)
            .map(|(&lam, &y)| lam * y)
            .sum::<f64>()
            / sum_lambda;
        let q: f64 = lambda
            .iter()
            .zip(&effects)
            .map(|(&lam, &y)| lam * (y - mean) * (y - mean))
            .sum::<f64>()
            / d2;
        let log_one_minus: f64 = variances.iter().map(|&v| v.ln() - (d2 + v).ln()).sum();
        log_weights.push(measure.log_masses()[j] + 0.5 * log_one_minus - 0.5 * q);
        block_means.push(mean);
        nu_sds.push((d2 / sum_lambda).sqrt());
    }
    let max_lw = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut cumulative = Vec::with_capacity(log_weights.len());
    let mut running = 0.0;
    for lw in &log_weights {
        running += (lw - max_lw).exp();
        cumulative.push(running);
    }
    let total = running;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exceedances = 0usize;
    let mut t_obs_sum = 0.0;
    let mut t_rep_sum = 0.0;
    for _ in 0..replicates {
        let u: f64 = rng.gen::<f64>() * total;
        let j = cumulative
            .partition_point(|&c| c <= u)
            .min(cumulative.len() - 1);
        let d2 = measure.nodes()[j];
        let z: f64 = rng.sample(StandardNormal);
        let nu = block_means[j] + nu_sds[j] * z;
        let mut t_obs = 0.0;
        let mut t_rep = 0.0;
        for i in 0..l {
            let total_var = variances[i] + d2;
            let dev = effects[i] - nu;
            t_obs += dev * dev / total_var;
            let z_rep: f64 = rng.sample(StandardNormal);
            // y_rep,i = ν + √(vᵢ+δ²)·z, so its discrepancy term is just z²
            t_rep += z_rep * z_rep;
        }
        if t_rep >= t_obs {
            exceedances += 1;
        }
        t_obs_sum += t_obs;
        t_rep_sum += t_rep;
    }
    Ok(PpcResult {
        p_value: exceedances as f64 / replicates as f64,
        num_replicates: replicates,
        exceedances,
        t_observed_mean: t_obs_sum / replicates as f64,
        t_replicated_mean: t_rep_sum / replicates as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderFormat {
    Csv,
    Svg,
}

/// Heatmap bins for the SVG rendering: [0,0.2), …, [0.8,1.0].
const BIN_COLORS: [&str; 5] = ["#f7fbff", "#c6dbef", "#6baed6", "#2171b5", "#08306b"];
const BIN_LABELS: [&str; 5] = [
    "0.0 – 0.2",
    "0.2 – 0.4",
    "0.4 – 0.6",
    "0.6 – 0.8",
    "0.8 – 1.0",
];

fn bin_index(p: f64) -> usize {
    ((p * 5.0).floor() as usize).min(4)
}

/// Renders the matrix as CSV (full-precision probabilities) or as a binned
/// SVG heatmap with study ids on both axes and a legend.
pub fn render_similarity(sm: &SimilarityMatrix, format: RenderFormat) -> Vec<u8> {
    match format {
        RenderFormat::Csv => render_csv(sm).into_bytes(),
        RenderFormat::Svg => render_svg(sm).into_bytes(),
    }
}

fn render_csv(sm: &SimilarityMatrix) -> String {
    let mut out = String::from("study_id");
    for id in sm.ids() {
        out.push_str(&format!(",{id}"));
    }
    out.push('\n');
    for (i, id) in sm.ids().iter().enumerate() {
        out.push_str(&id.to_string());
        for j in 0..sm.len() {
            out.push_str(&format!(",{}", sm.entry(i, j)));
        }
        out.push('\n');
    }
    out
}

fn render_svg(sm: &SimilarityMatrix) -> String {
    let l = sm.len();
    let cell = 28usize;
    let margin = 42usize;
    let legend_height = 30usize;
    let width = margin + l * cell + 10;
    let height = margin + l * cell + legend_height + 26;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for (i, id) in sm.ids().iter().enumerate() {
        let x = margin + i * cell + cell / 2;
        let y = margin + i * cell + cell / 2;
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">{id}</text>\n",
            margin - 8
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" dominant-baseline=\"middle\">{id}</text>\n",
            margin - 8,
            y + 4
        ));
    }
    for i in 0..l {
        for j in 0..l {
            let color = BIN_COLORS[bin_index(sm.entry(i, j))];
            let x = margin + j * cell;
            let y = margin + i * cell;
            svg.push_str(&format!(
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"{color}\" \
                 stroke=\"#999\" stroke-width=\"0.5\"/>\n"
            ));
        }
    }
    let legend_y = margin + l * cell + 14;
    for (k, (color, label)) in BIN_COLORS.iter().zip(BIN_LABELS).enumerate() {
        let x = margin + k * 86;
        svg.push_str(&format!(
            "<rect x=\"{x}\" y=\"{legend_y}\" width=\"14\" height=\"14\" fill=\"{color}\" \
             stroke=\"#999\" stroke-width=\"0.5\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\">{label}</text>\n",
            x + 18,
            legend_y + 11
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
