//! Conditional VAEs and Gaussian-process prior VAEs that learn from data
//! with missing values in both the observations and the auxiliary
//! covariates.
//!
//! Missing covariates are marginalised with an amortised posterior
//! `q(x^u | x^o)`: categorical entries are summed out exactly, continuous
//! entries are reparameterised. Latent KL terms use inducing-point upper
//! bounds that stay unbiased under mini-batching.

pub mod data;
pub mod diffmath;
pub mod distributions;
pub mod elbo;
pub mod error;
pub mod kernels;
pub mod models;
pub mod networks;
pub mod rng;
pub mod schema;

pub use diffmath::{ParamStore, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use schema::{ColumnKind, CovariateColumn, CovariateSchema, CovariateTable, MaskedTable};
