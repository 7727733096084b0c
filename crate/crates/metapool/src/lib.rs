//! Bayesian meta-analysis for event-rate studies, built around three views of
//! between-study heterogeneity:
//!
//! * **Uncertain pooling** — exhaustive posterior over every set partition of
//!   the studies crossed with a grid over the between-study variance, yielding
//!   partition-averaged effect estimates, partition probabilities, and
//!   study-similarity summaries.
//! * **Dirichlet process mixture** — collapsed Gibbs sampling over study
//!   clusterings on the log-odds scale with a normal base measure fitted by
//!   marginal maximum likelihood.
//! * **Binomial–beta reversible jump** — split/merge MCMC over partitions with
//!   exact binomial likelihoods, for small-count data where the normal
//!   approximation is suspect.
//!
//! Study inputs are raw event/trial counts; the bundled datasets reproduce
//! published COVID-19 asymptomatic-rate meta-analyses.

pub mod covariates;
pub mod diagnostics;
pub mod dpm;
pub mod error;
pub mod partitions;
pub mod pooling;
pub mod report;
pub mod rjmcmc;
pub mod study_data;

pub(crate) mod runner;
pub(crate) mod stats;

pub use error::{Error, Result};
