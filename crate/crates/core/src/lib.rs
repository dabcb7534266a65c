//! Bayesian model averaging for the Type II Tobit (sample selection) model.
//!
//! A Gibbs sampler alternates latent selection values, the error covariance
//! and the coefficients; between them an MC3 step moves over covariate subsets
//! of both equations using closed-form Bayes factors that condition on the
//! current covariance.

pub mod chain;
pub mod conditionals;
pub mod error;
pub mod io;
pub mod model;
pub mod oracle;
pub mod search;

pub use chain::{
    diagnostic_series, inclusion_probabilities, jump_rate, posterior_summaries, run_chain,
    run_chains, ChainConfig, ChainOutput, DiagnosticSeries, InitStrategy, PosteriorSummary,
    SummaryRow,
};
pub use error::{Result, TbmaError};
pub use model::{CoefVector, Equation, ModelIndicator, PriorSpec, SigmaParams, TobitDataset};
pub use search::ModelPrior;
