//! Regression offsets on top of the pooled effects: joint posterior draws of
//! (μ, β) by composition.
//!
//! Given a covariate matrix X, the residuals z_i = ȳ_i − μ_i at a posterior
//! draw of μ carry a flat-prior conditional β | μ, y ~ MVN(d, A⁻¹) with
//! A = XᵀVX and V the diagonal of inverse sampling variances. Draws compose:
//! (g, δ²) and μ come from the grid posterior exactly as without covariates,
//! then β from its conditional. The μ draw is not offset-adjusted — the
//! factorization is used exactly as stated, which reuses the no-covariate
//! density for μ; see the crate documentation for the caveat.

use std::io::Read;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::pooling::{sample_mu, EffectInterval, JointPosterior, PosteriorDraws};
use crate::stats::mean_and_interval;
use crate::study_data::StudySet;

/// An L×p covariate matrix with named columns.
#[derive(Debug, Clone)]
pub struct CovariateDesign {
    x: DMatrix<f64>,
    names: Vec<String>,
}

impl CovariateDesign {
    /// Validates shape (p ≥ 1, L > p, one name per column, finite entries);
    /// rank is checked against the study variances when the design is used.
    pub fn new(x: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        let (l, p) = x.shape();
        if p == 0 {
            return Err(Error::Validation("design needs at least one column".into()));
        }
        if l <= p {
            return Err(Error::Validation(format!(
                "design needs more studies than columns, got {l} studies × {p} columns"
            )));
        }
        if names.len() != p {
            return Err(Error::Validation(format!(
                "{} column names for {p} columns",
                names.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("covariate entries must be finite".into()));
        }
        Ok(CovariateDesign { x, names })
    }

    pub fn num_studies(&self) -> usize {
        self.x.nrows()
    }

    pub fn num_covariates(&self) -> usize {
        self.x.ncols()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.x
    }
}

/// Load a covariate table `study_id,<name1>,<name2>,...` and align its rows
/// with `studies` by id. Every study must appear exactly once.
pub fn load_covariates<R: Read>(reader: R, studies: &StudySet) -> Result<CovariateDesign> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = csv_reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if headers.len() < 2 || headers.get(0) != Some("study_id") {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "expected header study_id,<name>,... got {:?}",
                headers.iter().collect::<Vec<_>>()
            ),
        });
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let p = names.len();
    let l = studies.len();
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; l];
    for (index, record) in csv_reader.records().enumerate() {
        let line = index + 2;
        let record = record.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if record.len() != p + 1 {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, got {}", p + 1, record.len()),
            });
        }
        let id: u32 = record[0].parse().map_err(|_| Error::Parse {
            line,
            message: format!("study_id must be an integer, got {:?}", &record[0]),
        })?;
        let position = studies.position_of(id).ok_or_else(|| Error::Parse {
            line,
            message: format!("study id {id} is not in the study set"),
        })?;
        if rows[position].is_some() {
            return Err(Error::Parse {
                line,
                message: format!("duplicate covariate row for study {id}"),
            });
        }
        let values = record
            .iter()
            .skip(1)
            .map(|field| {
                field.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                    line,
                    message: format!("covariate values must be finite numbers, got {field:?}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows[position] = Some(values);
    }
    let mut x = DMatrix::zeros(l, p);
    for (position, row) in rows.into_iter().enumerate() {
        let row = row.ok_or_else(|| {
            Error::Validation(format!(
                "no covariate row for study {}",
                studies.ids()[position]
            ))
        })?;
        for (j, value) in row.into_iter().enumerate() {
            x[(position, j)] = value;
        }
    }
    CovariateDesign::new(x, names)
}

/// The conditional β | μ, y: mean `d` and precision `A = XᵀVX`, where
/// V = diag(1/v_i) and d solves A d = XᵀV(ȳ − μ).
pub fn beta_conditional(
    mu: &[f64],
    studies: &StudySet,
    design: &CovariateDesign,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (precision, chol) = design_precision(studies, design)?;
    let residual_projection = weighted_cross(studies, design, mu)?;
    let d = chol.solve(&residual_projection);
    Ok((d, precision))
}

/// A = XᵀVX with its Cholesky factorization; a failed factorization means a
/// (V-weighted) rank-deficient design.
fn design_precision(
    studies: &StudySet,
    design: &CovariateDesign,
) -> Result<(DMatrix<f64>, Cholesky<f64, nalgebra::Dyn>)> {
    if design.num_studies() != studies.len() {
        return Err(Error::Validation(format!(
            "design has {} rows for {} studies",
            design.num_studies(),
            studies.len()
        )));
    }
    let variances = studies.variances();
    let p = design.num_covariates();
    let mut precision = DMatrix::zeros(p, p);
    for i in 0..studies.len() {
        let w = 1.0 / variances[i];
        for a in 0..p {
            for b in a..p {
                precision[(a, b)] += w * design.x[(i, a)] * design.x[(i, b)];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            precision[(a, b)] = precision[(b, a)];
        }
    }
    let chol = Cholesky::new(precision.clone()).ok_or(Error::SingularDesign)?;
    Ok((precision, chol))
}

/// XᵀV(ȳ − μ) as a column vector.
fn weighted_cross(
    studies: &StudySet,
    design: &CovariateDesign,
    mu: &[f64],
) -> Result<DVector<f64>> {
    if mu.len() != studies.len() {
        return Err(Error::Validation(format!(
            "{} effect draws for {} studies",
            mu.len(),
            studies.len()
        )));
    }
    let effects = studies.effects();
    let variances = studies.variances();
    let p = design.num_covariates();
    let mut projection = DVector::zeros(p);
    for i in 0..studies.len() {
        let weighted_residual = (effects[i] - mu[i]) / variances[i];
        for a in 0..p {
            projection[a] += weighted_residual * design.x[(i, a)];
        }
    }
    Ok(projection)
}

/// Joint composite draws of (μ, β).
#[derive(Debug, Clone)]
pub struct MuBetaDraws {
    pub mu: PosteriorDraws,
    /// Row-major B×p coefficient draws.
    pub beta: Vec<f64>,
    pub names: Vec<String>,
}

impl MuBetaDraws {
    pub fn num_covariates(&self) -> usize {
        self.names.len()
    }

    pub fn beta_column(&self, j: usize) -> Vec<f64> {
        self.beta
            .iter()
            .skip(j)
            .step_by(self.names.len())
            .copied()
            .collect()
    }

    /// Mean and equal-tail interval per coefficient, on the effect scale.
    pub fn beta_summaries(&self, level: f64) -> Vec<(String, EffectInterval)> {
        self.names
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let (mean, lower, upper) = mean_and_interval(&self.beta_column(j), level);
                (name.clone(), EffectInterval { mean, lower, upper })
            })
            .collect()
    }
}

/// Composite sampling per the joint factorization: draw μ from the grid
/// posterior (unchanged by covariates), then β | μ from its MVN conditional.
/// The β stream is seeded independently of the μ stream so either half can
/// be reproduced alone.
pub fn sample_mu_beta(
    jp: &JointPosterior,
    studies: &StudySet,
    design: &CovariateDesign,
    b: usize,
    seed: u64,
) -> Result<MuBetaDraws> {
    let (_, chol) = design_precision(studies, design)?;
    let mu = sample_mu(jp, studies, b, seed)?;
    let l = studies.len();
    let p = design.num_covariates();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let analysis = mu.analysis();
    let mut beta = Vec::with_capacity(b * p);
    let lower = chol.l();
    for row in 0..b {
        let mu_row = &analysis[row * l..(row + 1) * l];
        let projection = weighted_cross(studies, design, mu_row)?;
        let mean = chol.solve(&projection);
        let standard: DVector<f64> =
            DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        // Lᵀ x = u gives x ~ N(0, A⁻¹).
        let noise = lower
            .tr_solve_lower_triangular(&standard)
            .expect("cholesky factor has positive diagonal");
        for j in 0..p {
            beta.push(mean[j] + noise[j]);
        }
    }
    Ok(MuBetaDraws {
        mu,
        beta,
        names: design.names().to_vec(),
    })
}
