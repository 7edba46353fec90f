use serde::{Deserialize, Serialize};

use super::TrainedModel;
use crate::data::Dataset;
use crate::diffmath::{cholesky_factor, solve_triangular, Tape, Tensor};
use crate::distributions::{CovariatePosterior, LN_2PI};
use crate::elbo::expand_groups;
use crate::error::{Error, Result};
use crate::kernels::{check_rows, gram_components_var, prior_diag_var, KernelVars};
use crate::networks::{encode_instantiated, fill_and_mask, fill_and_mask_covariates};
use crate::rng::{normals, stream, Stream};
use crate::schema::{CovariateSchema, CovariateTable, MaskedTable};

/// Draw counts and seed for prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Latent draws per instantiated covariate row.
    #[serde(default = "default_latent_draws")]
    pub latent_draws: usize,
    /// Draws per row for missing continuous covariates.
    #[serde(default = "default_covariate_samples")]
    pub covariate_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_latent_draws() -> usize {
    50
}

fn default_covariate_samples() -> usize {
    10
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            latent_draws: default_latent_draws(),
            covariate_samples: default_covariate_samples(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Predictive mean of `Y`, `[N, D]`.
    pub mean: Tensor,
    /// Predictive variance (mixture variance plus decoder noise).
    pub variance: Tensor,
    /// Per-row negative log predictive density of the observed entries.
    pub row_nll: Option<Vec<f64>>,
    /// Mean of `row_nll` over rows.
    pub nll: Option<f64>,
}

/// Latent predictive means and variances `[n, L]` at fully instantiated
/// covariate rows.
pub fn latent_predictive(model: &TrainedModel, x_rows: &Tensor) -> Result<(Tensor, Tensor)> {
    let n = x_rows.rows();
    let l_dims = model.config.latent_dims;
    let Some(spec) = model.fitted_kernel()? else {
        return Ok((Tensor::zeros(n, l_dims), Tensor::filled(n, l_dims, 1.0)));
    };
    check_rows(&spec, &model.schema, x_rows)?;
    let ind = model.inducing()?;
    let jitter = model.config.elbo.jitter;
    let mut mean = Tensor::zeros(n, l_dims);
    let mut var = Tensor::zeros(n, l_dims);
    let mut tape = Tape::new();
    let kv = KernelVars::constants(&mut tape, &spec);
    let xv = tape.constant(x_rows.clone());
    let shared = spec.shared_components();
    for l in 0..l_dims {
        let mut mu = vec![0.0; n];
        let mut v = vec![spec.noise_variance(l); n];
        if let Some(ind) = &ind {
            let sv = tape.constant(ind.s.clone());
            let kss = gram_components_var(&mut tape, &spec, &kv, l, shared.clone(), sv, sv).expect("shared components");
            let ksx = gram_components_var(&mut tape, &spec, &kv, l, shared.clone(), sv, xv).expect("shared components");
            let lss = cholesky_factor(tape.value(kss), jitter)?;
            let a = solve_triangular(&lss, tape.value(ksx), false)?;
            let lm = solve_triangular(&lss, &ind.m[l], false)?;
            let b = solve_triangular(&lss, &a, true)?;
            let hb = ind.h_factor[l].transpose().matmul(&b);
            let prior = prior_diag_var(&mut tape, &kv, l, shared.clone(), n).expect("shared components");
            let prior = tape.value(prior);
            for i in 0..n {
                let mut m = 0.0;
                let mut q = 0.0;
                for k in 0..a.rows() {
                    m += a.get(k, i) * lm.get(k, 0);
                    q += a.get(k, i) * a.get(k, i);
                }
                let h: f64 = (0..hb.rows()).map(|k| hb.get(k, i) * hb.get(k, i)).sum();
                mu[i] = m;
                v[i] += (prior.get(i, 0) - q).max(0.0) + h;
            }
        } else if !shared.is_empty() {
            return Err(Error::InvalidArgument("model has shared kernel components but no inducing state".into()));
        }
        if let Some(r) = spec.instance_component() {
            let d = prior_diag_var(&mut tape, &kv, l, r..r + 1, n).unwrap();
            let d = tape.value(d);
            for (i, vi) in v.iter_mut().enumerate() {
                *vi += d.get(i, 0);
            }
        }
        for i in 0..n {
            mean.set(i, l, mu[i]);
            var.set(i, l, v[i]);
        }
    }
    Ok((mean, var))
}

fn check_table(model: &TrainedModel, x: &CovariateTable) -> Result<()> {
    if x.cols() != model.schema.len() {
        return Err(Error::SchemaMismatch(format!(
            "covariate table has {} columns, model expects {}",
            x.cols(),
            model.schema.len()
        )));
    }
    x.check_against(&model.schema)
}

/// `Y` with nothing observed, used to query covariate posteriors that
/// condition on `y`.
fn unobserved(rows: usize, cols: usize) -> MaskedTable {
    MaskedTable {
        values: Tensor::zeros(rows, cols),
        mask: vec![false; rows * cols],
    }
}

/// Predictive distribution of `Y` given partially observed covariates, and
/// its negative log density at the observed entries of `y_star`.
pub fn predict_y(model: &TrainedModel, x_star: &CovariateTable, y_star: Option<&MaskedTable>, cfg: &EvalConfig) -> Result<Prediction> {
    check_table(model, x_star)?;
    let schema = &model.schema;
    let nets = &model.networks;
    let d = model.obs_dims();
    let n = x_star.rows();
    if let Some(y) = y_star {
        if y.rows() != n || y.cols() != d {
            return Err(Error::SchemaMismatch(format!(
                "Y* is {}x{}, expected {n}x{d}",
                y.rows(),
                y.cols()
            )));
        }
    }
    if cfg.latent_draws == 0 || cfg.covariate_samples == 0 {
        return Err(Error::config("eval", "draw counts must be >= 1"));
    }
    let mut rng = stream(cfg.seed, Stream::Eval);
    let marginalise = model.config.elbo.marginalise_missing && x_star.has_missing();

    // instantiate covariates
    let mut tape = Tape::new();
    let vars = model.params.register_with(&mut tape, |_| false);
    let x_fm_t = fill_and_mask_covariates(x_star, schema)?;
    let x_fm = tape.constant(x_fm_t.clone());
    let post = if marginalise {
        let y_q = unobserved(n, d);
        let y_fm = tape.constant(fill_and_mask(&y_q.values, &y_q.mask)?);
        Some(nets.encode_covariates(&mut tape, &vars, schema, x_fm, Some(y_fm))?)
    } else {
        None
    };
    let groups: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mc_x = if marginalise { cfg.covariate_samples } else { 1 };
    let exp = expand_groups(&mut tape, x_star, schema, post.as_ref(), &groups, model.config.elbo.enumeration_cap, mc_x, &mut rng)?;
    let xs = tape.value(exp.x).clone();
    let w = tape.value(exp.weight).clone();
    let src = exp.row_source.clone();
    let t_rows = src.len();
    drop(tape);

    let (zm, zv) = latent_predictive(model, &xs)?;
    let s_draws = cfg.latent_draws;
    let l_dims = model.config.latent_dims;

    let mut mean = Tensor::zeros(n, d);
    let mut second = Tensor::zeros(n, d);
    let mut log_terms: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut dec_var = vec![0.0; d];
    const CHUNK: usize = 32;
    for start in (0..t_rows).step_by(CHUNK) {
        let end = (start + CHUNK).min(t_rows);
        let rows: Vec<usize> = (start..end).flat_map(|t| std::iter::repeat_n(t, s_draws)).collect();
        let eps = normals(&mut rng, rows.len() * l_dims);
        let z = Tensor::from_fn(rows.len(), l_dims, |k, l| {
            let t = rows[k];
            zm.get(t, l) + zv.get(t, l).sqrt() * eps[k * l_dims + l]
        });
        let mut tape = Tape::new();
        let vars = model.params.register_with(&mut tape, |_| false);
        let zv_ = tape.constant(z);
        let x_enc = if !nets.decoder_uses_x {
            None
        } else if marginalise {
            let xr = tape.constant(xs.select_rows(&rows));
            Some(encode_instantiated(&mut tape, xr, schema))
        } else {
            let src_rows: Vec<usize> = rows.iter().map(|&t| src[t]).collect();
            Some(tape.constant(x_fm_t.select_rows(&src_rows)))
        };
        let dec = nets.decode(&mut tape, &vars, zv_, x_enc)?;
        let f = tape.value(dec.mean);
        let lv = tape.value(dec.log_var);
        for k in 0..d {
            dec_var[k] = lv.get(0, k).exp();
        }
        for (k, &t) in rows.iter().enumerate() {
            let i = src[t];
            let wt = w.get(exp.row_branch[t], 0) / s_draws as f64;
            let mut lp = 0.0;
            for c in 0..d {
                let fv = f.get(k, c);
                mean.set(i, c, mean.get(i, c) + wt * fv);
                second.set(i, c, second.get(i, c) + wt * fv * fv);
                if let Some(y) = y_star {
                    if y.observed(i, c) {
                        let r = y.get(i, c) - fv;
                        lp += -0.5 * (LN_2PI + lv.get(0, c) + r * r / dec_var[c]);
                    }
                }
            }
            if y_star.is_some() && wt > 0.0 {
                log_terms[i].push(wt.ln() + lp);
            }
        }
    }
    let variance = Tensor::from_fn(n, d, |i, c| (second.get(i, c) - mean.get(i, c).powi(2)).max(0.0) + dec_var[c]);
    let (row_nll, nll) = match y_star {
        Some(_) => {
            let r: Vec<f64> = log_terms.iter().map(|v| -log_sum_exp(v)).collect();
            let m = if n == 0 { 0.0 } else { r.iter().sum::<f64>() / n as f64 };
            (Some(r), Some(m))
        }
        None => (None, None),
    };
    Ok(Prediction {
        mean,
        variance,
        row_nll,
        nll,
    })
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Imputation {
    /// Every entry observed; missing entries hold posterior means or modes.
    pub filled: CovariateTable,
    pub posterior: CovariatePosterior,
}

/// Fills missing covariates with the mean (continuous) or most probable
/// category (categorical, lowest id on ties) of `q(x^u | x^o[, y^o])`.
pub fn impute_covariates(model: &TrainedModel, x: &CovariateTable, y: Option<&MaskedTable>) -> Result<Imputation> {
    check_table(model, x)?;
    let n = x.rows();
    let y_q = match y {
        Some(y) if model.networks.condition_x_posterior_on_y => {
            if y.rows() != n || y.cols() != model.obs_dims() {
                return Err(Error::SchemaMismatch("Y does not match the covariate rows".into()));
            }
            Some(y.clone())
        }
        _ if model.networks.condition_x_posterior_on_y => Some(unobserved(n, model.obs_dims())),
        _ => None,
    };
    let posterior = model.networks.encode_missing_covariates(&model.params, x, y_q.as_ref(), &model.schema)?;
    let mut filled = x.clone();
    for (i, row) in posterior.rows.iter().enumerate() {
        for (j, e) in row.iter().enumerate() {
            if let Some(e) = e {
                filled.values.set(i, j, e.mean_or_mode());
            }
        }
    }
    filled.mask.iter_mut().for_each(|m| *m = true);
    Ok(Imputation { filled, posterior })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateErrors {
    /// Mean squared error over masked continuous entries.
    pub mse: Option<f64>,
    /// Fraction of masked categorical entries recovered.
    pub accuracy: Option<f64>,
    pub continuous_entries: usize,
    pub categorical_entries: usize,
}

/// Imputation errors of `imputed` at the entries recorded in `truth`.
pub fn covariate_errors(imputed: &CovariateTable, truth: Option<&MaskedTable>, schema: &CovariateSchema) -> Result<CovariateErrors> {
    let truth = truth.ok_or_else(|| Error::MissingGroundTruth("masked covariates".into()))?;
    if truth.values.dims() != imputed.values.dims() {
        return Err(Error::DimensionMismatch("truth and imputed tables differ in shape".into()));
    }
    let (mut se, mut nc, mut hits, mut nd) = (0.0, 0usize, 0usize, 0usize);
    for i in 0..truth.rows() {
        for j in 0..truth.cols() {
            if !truth.observed(i, j) {
                continue;
            }
            let t = truth.get(i, j);
            let v = imputed.get(i, j);
            if schema.column(j).is_continuous() {
                se += (v - t).powi(2);
                nc += 1;
            } else {
                nd += 1;
                if v == t {
                    hits += 1;
                }
            }
        }
    }
    Ok(CovariateErrors {
        mse: (nc > 0).then(|| se / nc as f64),
        accuracy: (nd > 0).then(|| hits as f64 / nd as f64),
        continuous_entries: nc,
        categorical_entries: nd,
    })
}

/// Test-set metrics with estimator metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean over test rows of the negative log predictive density of the
    /// row's observed entries.
    pub nll: f64,
    pub covariate_mse: Option<f64>,
    pub covariate_accuracy: Option<f64>,
    pub masked_continuous: usize,
    pub masked_categorical: usize,
    pub latent_draws: usize,
    pub covariate_samples: usize,
    pub nll_convention: String,
    pub notices: Vec<String>,
}

pub const NLL_CONVENTION: &str =
    "mean over rows of -log of the Monte-Carlo mixture density of the observed entries";

/// Predictive NLL on `test` plus covariate imputation errors. `covariates`
/// replaces `test.x` for prediction and imputation (baseline imputers or the
/// oracle); otherwise missing covariates are marginalised for prediction
/// and imputed with the model's posterior.
pub fn evaluate(model: &TrainedModel, test: &Dataset, covariates: Option<&CovariateTable>, cfg: &EvalConfig) -> Result<Metrics> {
    if test.schema != model.schema {
        return Err(Error::SchemaMismatch("test covariate schema differs from the model's".into()));
    }
    let x = covariates.unwrap_or(&test.x);
    let pred = predict_y(model, x, Some(&test.y), cfg)?;
    let imputed = match covariates {
        Some(c) => c.clone(),
        None => impute_covariates(model, &test.x, Some(&test.y))?.filled,
    };
    let mut notices = Vec::new();
    let errs = match covariate_errors(&imputed, test.x_truth.as_ref(), &model.schema) {
        Ok(e) => Some(e),
        Err(e @ Error::MissingGroundTruth(_)) => {
            notices.push(format!("covariate metrics omitted: {e}"));
            None
        }
        Err(e) => return Err(e),
    };
    Ok(Metrics {
        nll: pred.nll.unwrap_or(f64::NAN),
        covariate_mse: errs.as_ref().and_then(|e| e.mse),
        covariate_accuracy: errs.as_ref().and_then(|e| e.accuracy),
        masked_continuous: errs.as_ref().map_or(0, |e| e.continuous_entries),
        masked_categorical: errs.as_ref().map_or(0, |e| e.categorical_entries),
        latent_draws: cfg.latent_draws,
        covariate_samples: cfg.covariate_samples,
        nll_convention: NLL_CONVENTION.to_string(),
        notices,
    })
}
