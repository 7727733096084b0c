//! Serializable run reports and the summary CSV.
//!
//! Reports embed the schema version, tool version, seed, and the full
//! resolved configuration so a run can be reproduced from its own output.
//! Worker counts are deliberately left out: identical (config, seed) must
//! serialize to byte-identical JSON regardless of how many threads computed
//! it, and nothing time- or host-dependent is recorded.

use serde::Serialize;

use crate::diagnostics::{PpcResult, SimilarityMatrix};
use crate::dpm::{BaseMeasure, DpmConfig, DpmSummary};
use crate::error::{Error, Result};
use crate::partitions::PartitionPrior;
use crate::pooling::{
    EffectInterval, GridSpec, JointPosterior, TopPartition, VariancePrior,
};
use crate::rjmcmc::{RjConfig, RjSummary};
use crate::study_data::{EffectScale, StudySet};

pub const SCHEMA_VERSION: u32 = 1;

/// Identification block shared by every report.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub schema_version: u32,
    pub tool_version: String,
    /// Bundled dataset name or the CSV path as given.
    pub dataset: String,
    pub scale: EffectScale,
    pub num_studies: usize,
    pub seed: u64,
}

impl Provenance {
    pub fn new(dataset: impl Into<String>, studies: &StudySet, seed: u64) -> Self {
        Provenance {
            schema_version: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            dataset: dataset.into(),
            scale: studies.scale(),
            num_studies: studies.len(),
            seed,
        }
    }
}

/// One study's data and posterior summary.
#[derive(Debug, Clone, Serialize)]
pub struct StudyRow {
    pub study_id: u32,
    pub label: String,
    pub events: u64,
    pub trials: u64,
    /// Observed effect on the analysis scale.
    pub effect: f64,
    pub variance: f64,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

fn study_rows(studies: &StudySet, intervals: &[EffectInterval]) -> Vec<StudyRow> {
    let effects = studies.effects();
    let variances = studies.variances();
    studies
        .studies()
        .iter()
        .enumerate()
        .map(|(i, study)| StudyRow {
            study_id: study.id,
            label: study.label.clone(),
            events: study.events,
            trials: study.trials,
            effect: effects[i],
            variance: variances[i],
            mean: intervals[i].mean,
            lower: intervals[i].lower,
            upper: intervals[i].upper,
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct PoolConfigEcho {
    pub grid: GridSpec,
    pub variance_prior: VariancePrior,
    pub partition_prior: PartitionPrior,
    pub draws: usize,
    pub level: f64,
}

/// One δ² grid node with its posterior mass.
#[derive(Debug, Clone, Serialize)]
pub struct Delta2Node {
    pub delta2: f64,
    pub mass: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PoolReport {
    pub provenance: Provenance,
    pub config: PoolConfigEcho,
    pub studies: Vec<StudyRow>,
    /// Mean and equal-tail interval of the overall effect ν given one block.
    pub overall: EffectInterval,
    pub pool_all_probability: f64,
    pub dominant_cluster_probability: f64,
    pub dominant_min_block: usize,
    pub top_partitions: Vec<TopPartition>,
    pub delta2_marginal: Vec<Delta2Node>,
    pub total_cells: u64,
    pub retained_cells: usize,
    pub dropped_mass: f64,
    pub similarity: SimilarityMatrix,
}

#[allow(clippy::too_many_arguments)]
pub fn pool_report(
    dataset: impl Into<String>,
    studies: &StudySet,
    jp: &JointPosterior,
    intervals: &[EffectInterval],
    overall: EffectInterval,
    similarity: SimilarityMatrix,
    config: PoolConfigEcho,
    seed: u64,
) -> PoolReport {
    let delta2_marginal = jp
        .measure()
        .nodes()
        .iter()
        .zip(jp.delta2_marginal())
        .map(|(&delta2, &mass)| Delta2Node { delta2, mass })
        .collect();
    PoolReport {
        provenance: Provenance::new(dataset, studies, seed),
        config,
        studies: study_rows(studies, intervals),
        overall,
        pool_all_probability: jp.pool_all_prob(),
        dominant_cluster_probability: jp.dominant_prob(),
        dominant_min_block: jp.dominant_min_block(),
        top_partitions: jp.top_partitions().to_vec(),
        delta2_marginal,
        total_cells: jp.total_cells(),
        retained_cells: jp.cells().len(),
        dropped_mass: jp.dropped_mass(),
        similarity,
    }
}

/// One mixture chain's summary block, keyed by its concentration.
#[derive(Debug, Clone, Serialize)]
pub struct DpmBlock {
    pub m: f64,
    pub studies: Vec<StudyRow>,
    pub mean_clusters: f64,
    pub similarity: SimilarityMatrix,
}

#[derive(Debug, Clone, Serialize)]
pub struct DpmReport {
    pub provenance: Provenance,
    pub config: DpmConfig,
    pub base_measure: BaseMeasure,
    pub chains: Vec<DpmBlock>,
}

pub fn dpm_report(
    dataset: impl Into<String>,
    studies: &StudySet,
    base: BaseMeasure,
    summaries: &[DpmSummary],
    config: &DpmConfig,
) -> DpmReport {
    DpmReport {
        provenance: Provenance::new(dataset, studies, config.seed),
        config: config.clone(),
        base_measure: base,
        chains: summaries
            .iter()
            .map(|summary| DpmBlock {
                m: summary.m,
                studies: study_rows(studies, &summary.studies),
                mean_clusters: summary.mean_clusters,
                similarity: summary.similarity.clone(),
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PartitionFrequency {
    pub partition: String,
    pub frequency: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RjReport {
    pub provenance: Provenance,
    pub config: RjConfig,
    pub studies: Vec<StudyRow>,
    /// Most frequent visited partitions (at most 20), rendered with study ids.
    pub partition_frequencies: Vec<PartitionFrequency>,
    pub mean_block_count: f64,
    pub mean_q: f64,
    pub alpha_acceptance: f64,
    pub final_alpha_step: f64,
    pub similarity: SimilarityMatrix,
}

pub fn rj_report(
    dataset: impl Into<String>,
    studies: &StudySet,
    summary: &RjSummary,
    config: &RjConfig,
) -> RjReport {
    let ids = studies.ids();
    RjReport {
        provenance: Provenance::new(dataset, studies, config.seed),
        config: config.clone(),
        studies: study_rows(studies, &summary.studies),
        partition_frequencies: summary
            .partition_frequencies
            .iter()
            .take(20)
            .map(|(partition, frequency)| PartitionFrequency {
                partition: partition.render(&ids),
                frequency: *frequency,
            })
            .collect(),
        mean_block_count: summary.mean_block_count,
        mean_q: summary.mean_q,
        alpha_acceptance: summary.alpha_acceptance,
        final_alpha_step: summary.final_alpha_step,
        similarity: summary.similarity.clone(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PpcConfigEcho {
    pub grid: GridSpec,
    pub variance_prior: VariancePrior,
    pub replicates: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct PpcReport {
    pub provenance: Provenance,
    pub config: PpcConfigEcho,
    pub p_value: f64,
    /// `p_value` printed as a bound when no replicate exceeded the observed
    /// discrepancy.
    pub band: String,
    pub exceedances: usize,
    pub t_observed_mean: f64,
    pub t_replicated_mean: f64,
}

pub fn ppc_report(
    dataset: impl Into<String>,
    studies: &StudySet,
    result: &PpcResult,
    config: PpcConfigEcho,
    seed: u64,
) -> PpcReport {
    PpcReport {
        provenance: Provenance::new(dataset, studies, seed),
        config,
        p_value: result.p_value,
        band: result.band(),
        exceedances: result.exceedances,
        t_observed_mean: result.t_observed_mean,
        t_replicated_mean: result.t_replicated_mean,
    }
}

/// Pretty JSON with a trailing newline; field order follows the struct
/// declarations, so identical inputs give identical bytes.
pub fn render_json<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Numeric(format!("report serialization failed: {e}")))?;
    text.push('\n');
    Ok(text)
}

/// One method's per-study intervals for the summary CSV; mixture sections
/// carry their concentration value.
#[derive(Debug, Clone)]
pub struct SummarySection {
    pub method: String,
    pub key: Option<f64>,
    pub intervals: Vec<EffectInterval>,
}

/// Flat per-study CSV across all computed sections. Full `{}` precision so
/// values round-trip.
pub fn summary_csv(studies: &StudySet, sections: &[SummarySection]) -> String {
    let mut out = String::from("method,key,study_id,label,events,trials,mean,lower,upper\n");
    for section in sections {
        let key = section.key.map(|k| k.to_string()).unwrap_or_default();
        for (study, interval) in studies.studies().iter().zip(&section.intervals) {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                section.method,
                key,
                study.id,
                csv_escape(&study.label),
                study.events,
                study.trials,
                interval.mean,
                interval.lower,
                interval.upper
            ));
        }
    }
    out
}

fn csv_escape(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::study_data::{bundled_dataset, EffectScale};

    #[test]
    fn json_rendering_is_stable() {
        let set = bundled_dataset("he2020_five", EffectScale::LogOdds).unwrap();
        let provenance = Provenance::new("he2020_five", &set, 42);
        let a = render_json(&provenance).unwrap();
        let b = render_json(&provenance).unwrap();
        assert_eq!(a, b);
        assert!(a.starts_with("{\n"));
        assert!(a.ends_with("}\n"));
        assert!(a.contains("\"schema_version\": 1"));
        assert!(a.contains("\"seed\": 42"));
    }

    #[test]
    fn summary_csv_lists_each_section() {
        let set = bundled_dataset("he2020_five", EffectScale::LogOdds).unwrap();
        let interval = EffectInterval {
            mean: 0.3,
            lower: 0.1,
            upper: 0.5,
        };
        let sections = vec![
            SummarySection {
                method: "pool".into(),
                key: None,
                intervals: vec![interval.clone(); 5],
            },
            SummarySection {
                method: "dpm".into(),
                key: Some(0.2),
                intervals: vec![interval; 5],
            },
        ];
        let csv = summary_csv(&set, &sections);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 10);
        assert_eq!(
            lines[0],
            "method,key,study_id,label,events,trials,mean,lower,upper"
        );
        assert!(lines[1].starts_with("pool,,1,"));
        assert!(lines[6].starts_with("dpm,0.2,1,"));
    }

    #[test]
    fn labels_with_commas_are_quoted() {
        assert_eq!(csv_escape("plain"), "plain");
        assert_eq!(csv_escape("a,b"), "\"a,b\"");
        assert_eq!(csv_escape("say \"hi\""), "\"say \"\"hi\"\"\"");
    }
}
