//! Command-line surface: one subcommand per method plus dataset management.
//!
//! Every analysis flag is optional at the clap level so that a `--config`
//! file can fill it in; [`crate::exec`] resolves flag → config file → default
//! and rejects runs that end up without a seed.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use metapool::partitions::PartitionPrior;
use metapool::pooling::VariancePrior;
use metapool::study_data::{ContinuityPolicy, EffectScale};

#[derive(Debug, Parser)]
#[command(
    name = "metapool",
    version,
    about = "Bayesian meta-analysis of event rates under clustering uncertainty",
    propagate_version = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Exhaustive partition sweep: effect summaries averaged over every way
    /// of pooling the studies, with partition probabilities and similarity.
    Pool(PoolArgs),
    /// Dirichlet process mixture fits, one collapsed Gibbs chain per
    /// concentration value.
    Dpm(DpmArgs),
    /// Reversible-jump chain over partitions with exact binomial likelihoods.
    Rjmcmc(RjArgs),
    /// Posterior predictive check of the single-cluster (pool-all) model.
    Ppc(PpcArgs),
    /// List the bundled datasets, or export one as CSV.
    Datasets(DatasetsArgs),
}

/// Where the studies come from and how raw counts become effects.
#[derive(Debug, Args)]
pub struct InputArgs {
    /// Bundled dataset name; run `metapool datasets` for the list.
    #[arg(long, value_name = "NAME", conflicts_with = "input")]
    pub dataset: Option<String>,

    /// CSV file with header `study_id,label,events,trials`.
    #[arg(long, value_name = "PATH")]
    pub input: Option<PathBuf>,

    /// Scale the analysis runs on.
    #[arg(long, value_enum)]
    pub scale: Option<ScaleArg>,

    /// What to do with 0 or n event counts on the logit scale.
    #[arg(long, value_enum)]
    pub continuity: Option<ContinuityArg>,
}

/// Output destination shared by the analysis subcommands.
#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Directory the artifacts are written into (created if needed).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Comma-separated artifact formats; not every subcommand produces every
    /// format.
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    pub formats: Option<Vec<FormatArg>>,

    /// Flat `key=value` defaults file; explicit flags always win.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PoolArgs {
    #[command(flatten)]
    pub input: InputArgs,

    /// Prior on the between-study variance δ².
    #[arg(long, value_enum)]
    pub prior: Option<PriorArg>,

    /// Prior over study partitions.
    #[arg(long, value_enum)]
    pub partition_prior: Option<PartitionPriorArg>,

    /// Monte Carlo draws B behind the per-study summaries.
    #[arg(long, value_name = "B")]
    pub draws: Option<usize>,

    /// RNG seed; required here or in the config file.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Smallest δ² grid node.
    #[arg(long, value_name = "D2")]
    pub grid_min: Option<f64>,

    /// Largest δ² grid node.
    #[arg(long, value_name = "D2")]
    pub grid_max: Option<f64>,

    /// Number of log-spaced δ² grid nodes.
    #[arg(long, value_name = "N")]
    pub grid_points: Option<usize>,

    /// Posterior mass the retained sweep cells must cover, in (0, 1].
    #[arg(long, value_name = "MASS")]
    pub keep_mass: Option<f64>,

    /// Credible level for all intervals.
    #[arg(long)]
    pub level: Option<f64>,

    /// Sweep worker threads; 0 means all available cores.
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,

    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct DpmArgs {
    #[command(flatten)]
    pub input: InputArgs,

    /// Concentration values M, one chain per value (e.g. `--m 0.2,5`).
    /// Defaults to a spread around the study count.
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    pub m: Option<Vec<f64>>,

    /// Gibbs iterations per chain.
    #[arg(long, value_name = "N")]
    pub iterations: Option<usize>,

    /// Iterations discarded from the front of each chain.
    #[arg(long, value_name = "N")]
    pub burn_in: Option<usize>,

    /// RNG seed; required here or in the config file.
    #[arg(long)]
    pub seed: Option<u64>,

    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct RjArgs {
    #[command(flatten)]
    pub input: InputArgs,

    /// Reversible-jump iterations.
    #[arg(long, value_name = "N")]
    pub iterations: Option<usize>,

    /// Iterations discarded from the front of the chain.
    #[arg(long, value_name = "N")]
    pub burn_in: Option<usize>,

    /// RNG seed; required here or in the config file.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Also write `chain.csv` with thinned (q, θ) draws.
    #[arg(long)]
    pub chain: bool,

    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct PpcArgs {
    #[command(flatten)]
    pub input: InputArgs,

    /// Prior on the between-study variance δ².
    #[arg(long, value_enum)]
    pub prior: Option<PriorArg>,

    /// Predictive replicates behind the p-value (at least 1000).
    #[arg(long, value_name = "N")]
    pub replicates: Option<usize>,

    /// RNG seed; required here or in the config file.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Smallest δ² grid node.
    #[arg(long, value_name = "D2")]
    pub grid_min: Option<f64>,

    /// Largest δ² grid node.
    #[arg(long, value_name = "D2")]
    pub grid_max: Option<f64>,

    /// Number of log-spaced δ² grid nodes.
    #[arg(long, value_name = "N")]
    pub grid_points: Option<usize>,

    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct DatasetsArgs {
    /// Write the named dataset as `<NAME>.csv` instead of listing.
    #[arg(long, value_name = "NAME")]
    pub export: Option<String>,

    /// Directory the exported CSV is written into.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScaleArg {
    /// Log odds of the event rate.
    Logit,
    /// Raw event proportion.
    Proportion,
}

impl From<ScaleArg> for EffectScale {
    fn from(arg: ScaleArg) -> Self {
        match arg {
            ScaleArg::Logit => EffectScale::LogOdds,
            ScaleArg::Proportion => EffectScale::Proportion,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ContinuityArg {
    /// Fail on boundary counts rather than adjust them.
    Reject,
    /// Add 0.5 events and 1 trial to boundary counts.
    Haldane,
}

impl From<ContinuityArg> for ContinuityPolicy {
    fn from(arg: ContinuityArg) -> Self {
        match arg {
            ContinuityArg::Reject => ContinuityPolicy::Reject,
            ContinuityArg::Haldane => ContinuityPolicy::Haldane,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PriorArg {
    /// Heavy-tailed scale-free prior ∝ 1/((1+δ²)√δ²).
    Invbeta,
    /// Inverse gamma with shape 11.01 and rate 0.001.
    Invgamma,
}

impl From<PriorArg> for VariancePrior {
    fn from(arg: PriorArg) -> Self {
        match arg {
            PriorArg::Invbeta => VariancePrior::InvBeta,
            PriorArg::Invgamma => VariancePrior::default_inv_gamma(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PartitionPriorArg {
    /// Every partition equally likely a priori.
    Uniform,
    /// Uniform over block counts, then uniform over partitions of that size.
    SizeBiased,
}

impl From<PartitionPriorArg> for PartitionPrior {
    fn from(arg: PartitionPriorArg) -> Self {
        match arg {
            PartitionPriorArg::Uniform => PartitionPrior::Uniform,
            PartitionPriorArg::SizeBiased => PartitionPrior::SizeBiased,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Json,
    Csv,
    Svg,
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    #[test]
    fn parses_the_documented_pool_invocation() {
        let cli = Cli::parse_from([
            "metapool", "pool", "--dataset", "he2020_five", "--scale", "logit",
            "--prior", "invbeta", "--draws", "10000", "--seed", "42",
        ]);
        let Command::Pool(args) = cli.command else {
            panic!("expected the pool subcommand");
        };
        assert_eq!(args.input.dataset.as_deref(), Some("he2020_five"));
        assert_eq!(args.input.scale, Some(ScaleArg::Logit));
        assert_eq!(args.prior, Some(PriorArg::Invbeta));
        assert_eq!(args.draws, Some(10_000));
        assert_eq!(args.seed, Some(42));
    }

    #[test]
    fn dataset_and_input_conflict() {
        let err = Cli::try_parse_from([
            "metapool", "pool", "--dataset", "he2020_five", "--input", "x.csv",
        ])
        .unwrap_err();
        assert_eq!(err.kind(), clap::error::ErrorKind::ArgumentConflict);
    }

    #[test]
    fn formats_split_on_commas() {
        let cli = Cli::parse_from([
            "metapool", "ppc", "--dataset", "screening_seven", "--seed", "7",
            "--formats", "json,csv",
        ]);
        let Command::Ppc(args) = cli.command else {
            panic!("expected the ppc subcommand");
        };
        assert_eq!(
            args.common.formats,
            Some(vec![FormatArg::Json, FormatArg::Csv])
        );
    }
}
