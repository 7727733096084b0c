//! Subcommand execution: resolve flag → config file → default, compute, then
//! write every artifact in one pass at the end so a failed run leaves nothing
//! behind.

use std::fs::File;
use std::path::{Path, PathBuf};

use metapool::diagnostics::{render_similarity, similarity_from_grid, RenderFormat};
use metapool::dpm::{mle_base_measure, run_dpm, DpmConfig};
use metapool::partitions::PartitionPrior;
use metapool::pooling::{
    compute_joint_posterior, overall_effect_interval, sample_mu, summarize, GridSpec,
    VariancePrior,
};
use metapool::report::{
    dpm_report, pool_report, ppc_report, render_json, rj_report, summary_csv, PoolConfigEcho,
    PpcConfigEcho, SummarySection,
};
use metapool::rjmcmc::{run_rj_chain, RjConfig, RjSummary};
use metapool::study_data::{
    bundled_dataset, bundled_provenance, load_studies, to_csv, ContinuityPolicy, EffectScale,
    StudySet, BUNDLED_NAMES,
};
use metapool::{diagnostics::posterior_predictive_pvalue, Error, Result};

use crate::args::{
    Cli, Command, CommonArgs, DatasetsArgs, DpmArgs, FormatArg, InputArgs, PoolArgs, PpcArgs,
    RjArgs,
};
use crate::config::FileConfig;

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pool(args) => pool(args),
        Command::Dpm(args) => dpm(args),
        Command::Rjmcmc(args) => rjmcmc(args),
        Command::Ppc(args) => ppc(args),
        Command::Datasets(args) => datasets(args),
    }
}

fn pool(args: PoolArgs) -> Result<()> {
    let cfg = FileConfig::load(args.common.config.as_deref())?;
    let (label, set) = resolve_studies(&args.input, &cfg)?;
    let seed = require_seed(args.seed, &cfg)?;
    let defaults = GridSpec::default();
    let grid = GridSpec {
        delta2_min: args.grid_min.or(cfg.get("grid_min")?).unwrap_or(defaults.delta2_min),
        delta2_max: args.grid_max.or(cfg.get("grid_max")?).unwrap_or(defaults.delta2_max),
        points: args.grid_points.or(cfg.get("grid_points")?).unwrap_or(defaults.points),
        keep_mass: args.keep_mass.or(cfg.get("keep_mass")?).unwrap_or(defaults.keep_mass),
    };
    let prior = args.prior.or(cfg.get_enum("prior")?).unwrap_or(crate::args::PriorArg::Invbeta);
    let vprior = VariancePrior::from(prior);
    let partition_prior = PartitionPrior::from(
        args.partition_prior
            .or(cfg.get_enum("partition_prior")?)
            .unwrap_or(crate::args::PartitionPriorArg::Uniform),
    );
    let draws = args.draws.or(cfg.get("draws")?).unwrap_or(10_000);
    let level = args.level.or(cfg.get("level")?).unwrap_or(0.95);
    // 0 means "all available cores", resolved inside the sweep.
    let threads = args.threads.or(cfg.get("threads")?).unwrap_or(0);
    let formats = resolve_formats(&args.common, &cfg)?;
    let out_dir = resolve_out(&args.common, &cfg)?;

    let jp = compute_joint_posterior(&set, &grid, &vprior, partition_prior, threads)?;
    let mu = sample_mu(&jp, &set, draws, seed)?;
    let intervals = summarize(&mu, level)?;
    let overall = overall_effect_interval(&set, &grid, level)?;
    let similarity = similarity_from_grid(&jp)?;

    println!(
        "{label}: {} studies on the {} scale; retained {} of {} sweep cells ({:.2e} mass dropped)",
        set.len(),
        scale_name(set.scale()),
        jp.cells().len(),
        jp.total_cells(),
        jp.dropped_mass()
    );
    println!(
        "pool-all probability {:.3e}; dominant-cluster probability {:.3e}",
        jp.pool_all_prob(),
        jp.dominant_prob()
    );
    if let Some(top) = jp.top_partitions().first() {
        println!(
            "most probable partition {} (probability {:.3})",
            top.rendered, top.probability
        );
    }
    println!(
        "overall effect {:.3} ({:.3}, {:.3}) at the {:.0}% level",
        overall.mean,
        overall.lower,
        overall.upper,
        level * 100.0
    );

    let report = pool_report(
        label,
        &set,
        &jp,
        &intervals,
        overall,
        similarity.clone(),
        PoolConfigEcho {
            grid,
            variance_prior: vprior,
            partition_prior,
            draws,
            level,
        },
        seed,
    );
    let mut files = Vec::new();
    if formats.contains(&FormatArg::Json) {
        files.push(("report.json", render_json(&report)?.into_bytes()));
    }
    if formats.contains(&FormatArg::Csv) {
        let sections = [SummarySection {
            method: "pool".into(),
            key: None,
            intervals,
        }];
        files.push(("summary.csv", summary_csv(&set, &sections).into_bytes()));
    }
    if formats.contains(&FormatArg::Svg) {
        files.push(("similarity.svg", render_similarity(&similarity, RenderFormat::Svg)));
    }
    write_artifacts(&out_dir, files)
}

fn dpm(args: DpmArgs) -> Result<()> {
    let cfg = FileConfig::load(args.common.config.as_deref())?;
    let (label, set) = resolve_studies(&args.input, &cfg)?;
    let seed = require_seed(args.seed, &cfg)?;
    let defaults = DpmConfig::default_for(set.len());
    let config = DpmConfig {
        m_values: args.m.or(cfg.get_list("m")?).unwrap_or(defaults.m_values),
        iterations: args.iterations.or(cfg.get("iterations")?).unwrap_or(defaults.iterations),
        burn_in: args.burn_in.or(cfg.get("burn_in")?).unwrap_or(defaults.burn_in),
        seed,
    };
    let formats = resolve_formats(&args.common, &cfg)?;
    let out_dir = resolve_out(&args.common, &cfg)?;

    let base = mle_base_measure(&set)?;
    let summaries = run_dpm(&set, &base, &config)?;

    println!(
        "{label}: {} studies; base measure η {:.3}, τ² {:.4}",
        set.len(),
        base.eta,
        base.tau2
    );
    for summary in &summaries {
        println!(
            "M = {:<8} mean clusters {:.2}",
            format_number(summary.m),
            summary.mean_clusters
        );
    }

    let report = dpm_report(label, &set, base, &summaries, &config);
    let mut files = Vec::new();
    if formats.contains(&FormatArg::Json) {
        files.push(("report.json", render_json(&report)?.into_bytes()));
    }
    if formats.contains(&FormatArg::Csv) {
        let sections: Vec<SummarySection> = summaries
            .iter()
            .map(|summary| SummarySection {
                method: "dpm".into(),
                key: Some(summary.m),
                intervals: summary.studies.clone(),
            })
            .collect();
        files.push(("summary.csv", summary_csv(&set, &sections).into_bytes()));
    }
    if formats.contains(&FormatArg::Svg) {
        // One canvas only: the first requested concentration. The matrices
        // for every M are in report.json.
        files.push((
            "similarity.svg",
            render_similarity(&summaries[0].similarity, RenderFormat::Svg),
        ));
    }
    write_artifacts(&out_dir, files)
}

fn rjmcmc(args: RjArgs) -> Result<()> {
    let cfg = FileConfig::load(args.common.config.as_deref())?;
    let (label, set) = resolve_studies(&args.input, &cfg)?;
    let seed = require_seed(args.seed, &cfg)?;
    let defaults = RjConfig::default();
    let config = RjConfig {
        iterations: args.iterations.or(cfg.get("iterations")?).unwrap_or(defaults.iterations),
        burn_in: args.burn_in.or(cfg.get("burn_in")?).unwrap_or(defaults.burn_in),
        seed,
        ..defaults
    };
    let want_chain = args.chain || cfg.get("chain")?.unwrap_or(false);
    let formats = resolve_formats(&args.common, &cfg)?;
    let out_dir = resolve_out(&args.common, &cfg)?;

    let summary = run_rj_chain(&set, &config)?;

    println!(
        "{label}: {} studies; kept {} of {} iterations",
        set.len(),
        config.iterations - config.burn_in,
        config.iterations
    );
    println!(
        "mean blocks {:.2}; mean q {:.1}; α acceptance {:.2}",
        summary.mean_block_count, summary.mean_q, summary.alpha_acceptance
    );
    if let Some((partition, frequency)) = summary.partition_frequencies.first() {
        println!(
            "most visited partition {} (frequency {:.3})",
            partition.render(&set.ids()),
            frequency
        );
    }

    let report = rj_report(label, &set, &summary, &config);
    let mut files = Vec::new();
    if formats.contains(&FormatArg::Json) {
        files.push(("report.json", render_json(&report)?.into_bytes()));
    }
    if formats.contains(&FormatArg::Csv) {
        let sections = [SummarySection {
            method: "rjmcmc".into(),
            key: None,
            intervals: summary.studies.clone(),
        }];
        files.push(("summary.csv", summary_csv(&set, &sections).into_bytes()));
    }
    if formats.contains(&FormatArg::Svg) {
        files.push((
            "similarity.svg",
            render_similarity(&summary.similarity, RenderFormat::Svg),
        ));
    }
    if want_chain {
        files.push(("chain.csv", chain_csv(&set, &summary).into_bytes()));
    }
    write_artifacts(&out_dir, files)
}

/// Thinned post-burn-in (q, θ) draws, at most 2000 rows.
fn chain_csv(set: &StudySet, summary: &RjSummary) -> String {
    let kept = summary.q_draws.len();
    let stride = kept.div_ceil(2000).max(1);
    let mut out = String::from("draw,q");
    for id in set.ids() {
        out.push_str(&format!(",theta_{id}"));
    }
    out.push('\n');
    for row in (0..kept).step_by(stride) {
        out.push_str(&format!("{},{}", row + 1, summary.q_draws[row]));
        for column in &summary.theta_draws {
            out.push_str(&format!(",{}", column[row]));
        }
        out.push('\n');
    }
    out
}

fn ppc(args: PpcArgs) -> Result<()> {
    let cfg = FileConfig::load(args.common.config.as_deref())?;
    let (label, set) = resolve_studies(&args.input, &cfg)?;
    let seed = require_seed(args.seed, &cfg)?;
    let defaults = GridSpec::default();
    let grid = GridSpec {
        delta2_min: args.grid_min.or(cfg.get("grid_min")?).unwrap_or(defaults.delta2_min),
        delta2_max: args.grid_max.or(cfg.get("grid_max")?).unwrap_or(defaults.delta2_max),
        points: args.grid_points.or(cfg.get("grid_points")?).unwrap_or(defaults.points),
        keep_mass: defaults.keep_mass,
    };
    // The published check pairs the pooled model with the inverse-gamma prior.
    let prior = args.prior.or(cfg.get_enum("prior")?).unwrap_or(crate::args::PriorArg::Invgamma);
    let vprior = VariancePrior::from(prior);
    let replicates = args.replicates.or(cfg.get("replicates")?).unwrap_or(20_000);
    let formats = resolve_formats(&args.common, &cfg)?;
    let out_dir = resolve_out(&args.common, &cfg)?;

    let result = posterior_predictive_pvalue(&set, &grid, &vprior, replicates, seed)?;

    println!(
        "{label}: posterior predictive p-value {} ({} of {} replicates exceeded the observed discrepancy)",
        result.band(),
        result.exceedances,
        result.num_replicates
    );

    let report = ppc_report(
        label,
        &set,
        &result,
        PpcConfigEcho {
            grid,
            variance_prior: vprior,
            replicates,
        },
        seed,
    );
    let mut files = Vec::new();
    if formats.contains(&FormatArg::Json) {
        files.push(("report.json", render_json(&report)?.into_bytes()));
    }
    write_artifacts(&out_dir, files)
}

fn datasets(args: DatasetsArgs) -> Result<()> {
    if let Some(name) = args.export {
        // Counts only, so the scale choice is immaterial; proportions never
        // reject boundary counts.
        let set = bundled_dataset(&name, EffectScale::Proportion)?;
        let dir = args.out.unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&dir).map_err(|e| {
            Error::Validation(format!("cannot create {}: {e}", dir.display()))
        })?;
        let path = dir.join(format!("{name}.csv"));
        std::fs::write(&path, to_csv(&set)).map_err(|e| {
            Error::Validation(format!("cannot write {}: {e}", path.display()))
        })?;
        println!("wrote {}", path.display());
        return Ok(());
    }
    for name in BUNDLED_NAMES {
        let set = bundled_dataset(name, EffectScale::Proportion)?;
        println!("{name}: {} studies — {}", set.len(), bundled_provenance(name)?);
        let counts: Vec<String> = set
            .studies()
            .iter()
            .map(|s| format!("{}/{}", s.events, s.trials))
            .collect();
        println!("  events/trials: {}", counts.join(" "));
    }
    Ok(())
}

fn resolve_studies(input: &InputArgs, cfg: &FileConfig) -> Result<(String, StudySet)> {
    let scale = input
        .scale
        .or(cfg.get_enum("scale")?)
        .map(EffectScale::from)
        .unwrap_or(EffectScale::LogOdds);
    let continuity = input
        .continuity
        .or(cfg.get_enum("continuity")?)
        .map(ContinuityPolicy::from)
        .unwrap_or(ContinuityPolicy::Reject);

    // A flag names the source outright; otherwise the config file may, but
    // not ambiguously.
    let (dataset, path) = match (&input.dataset, &input.input) {
        (Some(name), None) => (Some(name.clone()), None),
        (None, Some(path)) => (None, Some(path.clone())),
        (Some(_), Some(_)) => unreachable!("clap rejects --dataset together with --input"),
        (None, None) => {
            let dataset = cfg.get::<String>("dataset")?;
            let path = cfg.get::<PathBuf>("input")?;
            if dataset.is_some() && path.is_some() {
                return Err(Error::Validation(
                    "config file sets both dataset and input; keep one".into(),
                ));
            }
            (dataset, path)
        }
    };
    match (dataset, path) {
        (Some(name), None) => {
            let set = bundled_dataset(&name, scale)?;
            Ok((name, set))
        }
        (None, Some(path)) => {
            let file = File::open(&path).map_err(|e| {
                Error::Validation(format!("cannot open {}: {e}", path.display()))
            })?;
            let set = load_studies(file, scale, continuity)?;
            Ok((path.display().to_string(), set))
        }
        _ => Err(Error::Validation(
            "no studies given: pass --dataset <name> or --input <csv>".into(),
        )),
    }
}

fn require_seed(flag: Option<u64>, cfg: &FileConfig) -> Result<u64> {
    flag.or(cfg.get("seed")?).ok_or_else(|| {
        Error::Validation("a seed is required: pass --seed or set seed= in the config file".into())
    })
}

fn resolve_formats(common: &CommonArgs, cfg: &FileConfig) -> Result<Vec<FormatArg>> {
    Ok(common
        .formats
        .clone()
        .or(cfg.get_enum_list("formats")?)
        .unwrap_or_else(|| vec![FormatArg::Json, FormatArg::Csv, FormatArg::Svg]))
}

fn resolve_out(common: &CommonArgs, cfg: &FileConfig) -> Result<PathBuf> {
    Ok(common
        .out
        .clone()
        .or(cfg.get("out")?)
        .unwrap_or_else(|| PathBuf::from(".")))
}

fn write_artifacts(dir: &Path, files: Vec<(&'static str, Vec<u8>)>) -> Result<()> {
    if files.is_empty() {
        println!("nothing to write for the chosen formats");
        return Ok(());
    }
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Validation(format!("cannot create {}: {e}", dir.display())))?;
    let mut written = Vec::new();
    for (name, bytes) in files {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| {
            Error::Validation(format!("cannot write {}: {e}", path.display()))
        })?;
        written.push(path.display().to_string());
    }
    println!("wrote {}", written.join(", "));
    Ok(())
}

fn scale_name(scale: EffectScale) -> &'static str {
    match scale {
        EffectScale::LogOdds => "log-odds",
        EffectScale::Proportion => "proportion",
    }
}

/// Trims trailing zeros so M = 0.2 prints as written, not as 0.200000.
fn format_number(x: f64) -> String {
    let text = format!("{x}");
    if text.len() <= 8 {
        text
    } else {
        format!("{x:.3}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::args::{ContinuityArg, ScaleArg};

    fn bare_input() -> InputArgs {
        InputArgs {
            dataset: None,
            input: None,
            scale: None,
            continuity: None,
        }
    }

    #[test]
    fn flags_beat_config_and_config_beats_defaults() {
        let cfg = FileConfig::parse("dataset = he2020_five\nscale = proportion\n").unwrap();
        let (label, set) = resolve_studies(&bare_input(), &cfg).unwrap();
        assert_eq!(label, "he2020_five");
        assert_eq!(set.scale(), EffectScale::Proportion);

        let flagged = InputArgs {
            dataset: Some("children_six".into()),
            scale: Some(ScaleArg::Logit),
            ..bare_input()
        };
        let (label, set) = resolve_studies(&flagged, &cfg).unwrap();
        assert_eq!(label, "children_six");
        assert_eq!(set.scale(), EffectScale::LogOdds);
    }

    #[test]
    fn missing_source_and_ambiguous_config_fail() {
        let err = resolve_studies(&bare_input(), &FileConfig::empty()).unwrap_err();
        assert!(err.to_string().contains("no studies given"));

        let cfg = FileConfig::parse("dataset = he2020_five\ninput = x.csv\n").unwrap();
        let err = resolve_studies(&bare_input(), &cfg).unwrap_err();
        assert!(err.to_string().contains("keep one"));
    }

    #[test]
    fn seed_comes_from_flag_or_config_but_must_exist() {
        let cfg = FileConfig::parse("seed = 11\n").unwrap();
        assert_eq!(require_seed(None, &cfg).unwrap(), 11);
        assert_eq!(require_seed(Some(3), &cfg).unwrap(), 3);
        assert!(require_seed(None, &FileConfig::empty()).is_err());
    }

    #[test]
    fn continuity_argument_maps_through() {
        let args = InputArgs {
            dataset: Some("he2020_five".into()),
            continuity: Some(ContinuityArg::Haldane),
            ..bare_input()
        };
        // Bundled data has no boundary counts, so this only checks plumbing.
        let (_, set) = resolve_studies(&args, &FileConfig::empty()).unwrap();
        assert_eq!(set.len(), 5);
    }

    #[test]
    fn chain_csv_is_thinned_and_headed() {
        let set = bundled_dataset("he2020_five", EffectScale::LogOdds).unwrap();
        let config = RjConfig {
            iterations: 9_000,
            burn_in: 1_000,
            seed: 5,
            ..RjConfig::default()
        };
        let summary = run_rj_chain(&set, &config).unwrap();
        let csv = chain_csv(&set, &summary);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("draw,q,theta_1,theta_2,theta_3,theta_4,theta_5"));
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 2_000);
        assert!(rows[0].starts_with("1,"));
        for row in rows {
            assert_eq!(row.split(',').count(), 7);
        }
    }
}
