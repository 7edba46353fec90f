//! Gaussian and categorical densities, closed-form KL divergences,
//! reparameterised sampling and the covariate prior `p_λ(x)`.
//!
//! Each quantity has a plain `f64` form and, where it feeds the training
//! objective, a taped form (`*_var`) that records onto a [`Tape`].

use serde::{Deserialize, Serialize};

use crate::diffmath::{cholesky_factor, logdet_from_factor, solve_triangular, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::schema::{ColumnKind, CovariateSchema, CovariateTable};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Bounds applied to every network log-variance output.
pub const LOG_VAR_MIN: f64 = -6.0;
pub const LOG_VAR_MAX: f64 = 4.0;
/// Pseudo-count added to every category when fitting the prior.
pub const CATEGORICAL_PSEUDO_COUNT: f64 = 0.5;
pub const PRIOR_VARIANCE_FLOOR: f64 = 1e-6;

fn check_var(v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveVariance(v))
    }
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!("{what}: {a} vs {b}")))
    }
}

/// `KL(N(μq, diag σ²q) ‖ N(μp, diag σ²p))`.
pub fn kl_diag_gaussian(mu_q: &[f64], var_q: &[f64], mu_p: &[f64], var_p: &[f64]) -> Result<f64> {
    let d = mu_q.len();
    check_len(var_q.len(), d, "kl_diag_gaussian")?;
    check_len(mu_p.len(), d, "kl_diag_gaussian")?;
    check_len(var_p.len(), d, "kl_diag_gaussian")?;
    let mut acc = 0.0;
    for k in 0..d {
        check_var(var_q[k])?;
        check_var(var_p[k])?;
        let diff = mu_q[k] - mu_p[k];
        acc += 0.5 * ((var_p[k] / var_q[k]).ln() + (var_q[k] + diff * diff) / var_p[k] - 1.0);
    }
    Ok(acc)
}

/// `KL(N(μ1, Σ1) ‖ N(μ0, Σ0))` via Cholesky factors of both covariances.
pub fn kl_full_gaussian(mu1: &[f64], sigma1: &Tensor, mu0: &[f64], sigma0: &Tensor) -> Result<f64> {
    let n = mu1.len();
    check_len(mu0.len(), n, "kl_full_gaussian means")?;
    check_len(sigma1.rows(), n, "kl_full_gaussian Σ1")?;
    check_len(sigma0.rows(), n, "kl_full_gaussian Σ0")?;
    let l1 = cholesky_factor(sigma1, 0.0)?;
    let l0 = cholesky_factor(sigma0, 0.0)?;
    // tr(Σ0⁻¹ Σ1) = ‖L0⁻¹ L1‖²_F
    let a = solve_triangular(&l0, &l1, false)?;
    let trace: f64 = a.data().iter().map(|v| v * v).sum();
    let diff: Vec<f64> = mu0.iter().zip(mu1).map(|(a, b)| a - b).collect();
    let b = solve_triangular(&l0, &Tensor::column(&diff), false)?;
    let maha: f64 = b.data().iter().map(|v| v * v).sum();
    let ld0 = logdet_from_factor(&l0)?;
    let ld1 = logdet_from_factor(&l1)?;
    Ok(0.5 * (trace + maha - n as f64 + ld0 - ld1))
}

/// `Σ_k q_k log(q_k / p_k)` with `0 log 0 = 0`.
pub fn kl_categorical(q: &[f64], p: &[f64]) -> Result<f64> {
    check_len(q.len(), p.len(), "kl_categorical")?;
    let mut acc = 0.0;
    for (k, (&qk, &pk)) in q.iter().zip(p).enumerate() {
        if qk > 0.0 {
            if pk <= 0.0 {
                return Err(Error::SupportViolation(k));
            }
            acc += qk * (qk / pk).ln();
        }
    }
    Ok(acc)
}

/// `Σ_d −½(log 2π + log σ²_d + (y_d − μ_d)² / σ²_d)`.
pub fn gaussian_log_density(y: &[f64], mu: &[f64], var: &[f64]) -> Result<f64> {
    check_len(mu.len(), y.len(), "gaussian_log_density")?;
    check_len(var.len(), y.len(), "gaussian_log_density")?;
    let mut acc = 0.0;
    for k in 0..y.len() {
        check_var(var[k])?;
        let d = y[k] - mu[k];
        acc += -0.5 * (LN_2PI + var[k].ln() + d * d / var[k]);
    }
    Ok(acc)
}

/// `μ + √σ² ε`.
pub fn reparam_gaussian(mu: f64, var: f64, eps: f64) -> Result<f64> {
    check_var(var)?;
    Ok(mu + var.sqrt() * eps)
}

/// Elementwise Gaussian log density on the tape: `y`, `mu` and `log_var`
/// broadcast together; the result has their common shape.
pub fn gaussian_log_density_var(tape: &mut Tape, y: Var, mu: Var, log_var: Var) -> Var {
    let d = tape.sub(y, mu);
    let d2 = tape.square(d);
    let neg = tape.neg(log_var);
    let inv = tape.exp(neg);
    let q = tape.mul(d2, inv);
    let s = tape.add(q, log_var);
    let s = tape.add_scalar(s, LN_2PI);
    tape.scale(s, -0.5)
}

/// Elementwise `KL(N(μq, σ²q) ‖ N(μp, σ²p))` on the tape with log-variances.
pub fn kl_gaussian_var(tape: &mut Tape, mu_q: Var, logvar_q: Var, mu_p: Var, logvar_p: Var) -> Var {
    let d = tape.sub(mu_q, mu_p);
    let d2 = tape.square(d);
    let vq = tape.exp(logvar_q);
    let num = tape.add(vq, d2);
    let neg = tape.neg(logvar_p);
    let inv_p = tape.exp(neg);
    let ratio = tape.mul(num, inv_p);
    let lr = tape.sub(logvar_p, logvar_q);
    let s = tape.add(lr, ratio);
    let s = tape.add_scalar(s, -1.0);
    tape.scale(s, 0.5)
}

/// Row-wise `Σ_k q_k (log q_k − log p_k)` given `log q` on the tape and
/// constant `log p` (a `[1, K]` row or full matrix). Result is `[rows, 1]`.
pub fn kl_categorical_var(tape: &mut Tape, log_q: Var, log_p: Var) -> Var {
    let q = tape.exp(log_q);
    let diff = tape.sub(log_q, log_p);
    let prod = tape.mul(q, diff);
    tape.sum_rows(prod)
}

/// Prior for one covariate column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ColumnPrior {
    Gaussian { mean: f64, variance: f64 },
    Categorical { probs: Vec<f64> },
}

/// Factorised prior `p_λ(x)` over all covariate columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariatePrior {
    pub columns: Vec<ColumnPrior>,
}

impl CovariatePrior {
    /// Standard-normal / uniform prior.
    pub fn fallback(schema: &CovariateSchema) -> Self {
        let columns = schema
            .columns
            .iter()
            .map(|c| match c.kind {
                ColumnKind::Continuous => ColumnPrior::Gaussian {
                    mean: 0.0,
                    variance: 1.0,
                },
                ColumnKind::Categorical { cardinality } => ColumnPrior::Categorical {
                    probs: vec![1.0 / cardinality as f64; cardinality],
                },
            })
            .collect();
        Self { columns }
    }

    pub fn validate(&self, schema: &CovariateSchema) -> Result<()> {
        if self.columns.len() != schema.len() {
            return Err(Error::SchemaMismatch("prior column count".into()));
        }
        for (c, p) in schema.columns.iter().zip(&self.columns) {
            match (c.kind, p) {
                (ColumnKind::Continuous, ColumnPrior::Gaussian { variance, .. }) => check_var(*variance)?,
                (ColumnKind::Categorical { cardinality }, ColumnPrior::Categorical { probs }) => {
                    if probs.len() != cardinality
                        || probs.iter().any(|p| *p < 0.0)
                        || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-12
                    {
                        return Err(Error::SchemaMismatch(format!(
                            "prior for `{}` is not a probability vector of length {cardinality}",
                            c.name
                        )));
                    }
                }
                _ => {
                    return Err(Error::SchemaMismatch(format!(
                        "prior kind for `{}` does not match the schema",
                        c.name
                    )))
                }
            }
        }
        Ok(())
    }

    /// Mean (continuous) or modal category (categorical) of column `j`.
    pub fn central_value(&self, j: usize) -> f64 {
        match &self.columns[j] {
            ColumnPrior::Gaussian { mean, .. } => *mean,
            ColumnPrior::Categorical { probs } => argmax_lowest(probs) as f64,
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = k;
        }
    }
    best
}

/// Fits `p_λ` from the observed entries of a training table: mean and
/// unbiased variance for continuous columns, smoothed frequencies for
/// categorical columns. Columns with no usable observations fall back to
/// `N(0, 1)` or the uniform distribution.
pub fn fit_covariate_prior(x: &CovariateTable, schema: &CovariateSchema) -> CovariatePrior {
    let columns = schema
        .columns
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let obs: Vec<f64> = (0..x.rows()).filter_map(|i| x.value(i, j)).collect();
            match c.kind {
                ColumnKind::Continuous => {
                    if obs.is_empty() {
                        return ColumnPrior::Gaussian {
                            mean: 0.0,
                            variance: 1.0,
                        };
                    }
                    let n = obs.len() as f64;
                    let mean = obs.iter().sum::<f64>() / n;
                    let variance = if obs.len() > 1 {
                        obs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
                    } else {
                        1.0
                    };
                    ColumnPrior::Gaussian {
                        mean,
                        variance: variance.max(PRIOR_VARIANCE_FLOOR),
                    }
                }
                ColumnKind::Categorical { cardinality } => {
                    let mut counts = vec![CATEGORICAL_PSEUDO_COUNT; cardinality];
                    for v in &obs {
                        let k = *v as usize;
                        if k < cardinality {
                            counts[k] += 1.0;
                        }
                    }
                    let total: f64 = counts.iter().sum();
                    ColumnPrior::Categorical {
                        probs: counts.iter().map(|c| c / total).collect(),
                    }
                }
            }
        })
        .collect();
    CovariatePrior { columns }
}

/// Distribution of one missing covariate entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EntryDistribution {
    Gaussian { mean: f64, variance: f64 },
    Categorical { probs: Vec<f64> },
}

impl EntryDistribution {
    pub fn mean_or_mode(&self) -> f64 {
        match self {
            EntryDistribution::Gaussian { mean, .. } => *mean,
            EntryDistribution::Categorical { probs } => argmax_lowest(probs) as f64,
        }
    }
}

/// `q(x^u | x^o)` evaluated for a table: one entry per masked-missing cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariatePosterior {
    /// `rows[i][j]` is `Some` exactly when `x_ij` is missing.
    pub rows: Vec<Vec<Option<EntryDistribution>>>,
}

impl CovariatePosterior {
    pub fn missing_entries(&self) -> usize {
        self.rows.iter().flatten().filter(|e| e.is_some()).count()
    }
}

/// Per-entry closed-form KL of a posterior against the prior, summed.
pub fn posterior_prior_kl(post: &CovariatePosterior, prior: &CovariatePrior) -> Result<f64> {
    let mut acc = 0.0;
    for row in &post.rows {
        for (j, e) in row.iter().enumerate() {
            match (e, &prior.columns[j]) {
                (None, _) => {}
                (Some(EntryDistribution::Gaussian { mean, variance }), ColumnPrior::Gaussian { mean: pm, variance: pv }) => {
                    acc += kl_diag_gaussian(&[*mean], &[*variance], &[*pm], &[*pv])?;
                }
                (Some(EntryDistribution::Categorical { probs }), ColumnPrior::Categorical { probs: pp }) => {
                    acc += kl_categorical(probs, pp)?;
                }
                _ => return Err(Error::SchemaMismatch(format!("posterior/prior kind mismatch in column {j}"))),
            }
        }
    }
    Ok(acc)
}
