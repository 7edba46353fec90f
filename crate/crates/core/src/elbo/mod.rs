//! Training objectives: reconstruction, latent KL (exact, inducing-point
//! bound, longitudinal bound, or the CVAE standard-normal KL), the covariate
//! KL, and the expectation over missing covariates.

mod bounds;
mod expectation;
mod inducing;

use serde::{Deserialize, Serialize};

pub use bounds::{
    exact_kl_var, gp_bound_var, inducing_terms, kl_cvae, kl_gp_bound_minibatch, kl_gp_exact, kl_longitudinal_bound,
    longitudinal_instance_var, InducingTerms, EXACT_KL_MAX_ROWS,
};
pub use expectation::{
    covariate_kl_term, covariate_kl_var, enumerate_assignments, expand_groups, expect_over_missing_covariates,
    Expansion, MissingExpectationPlan, RowPlan, DEFAULT_ENUMERATION_CAP,
};
pub use inducing::{factor_name, mean_name, InducingState, InducingVars, INDUCING_S};

use crate::diffmath::{ParamStore, ParamVars, Tape, Tensor, Var, DEFAULT_JITTER};
use crate::distributions::{gaussian_log_density_var, kl_gaussian_var, CovariatePrior};
use crate::error::{Error, Result};
use crate::kernels::{KernelSpec, KernelVars, LongitudinalIndex};
use crate::networks::{encode_instantiated, fill_and_mask, fill_and_mask_covariates, EncoderOutput, Networks};
use crate::rng::{normals, Generator};
use crate::schema::{CovariateSchema, CovariateTable, MaskedTable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Cvae,
    RegressionGp,
    TemporalGp,
    LongitudinalGp,
}

impl Family {
    pub fn is_gp(self) -> bool {
        self != Family::Cvae
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Cvae => "cvae",
            Family::RegressionGp => "regression_gp",
            Family::TemporalGp => "temporal_gp",
            Family::LongitudinalGp => "longitudinal_gp",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElboOptions {
    #[serde(default = "default_cap")]
    pub enumeration_cap: usize,
    /// When false, missing covariates are zero-filled and never marginalised.
    #[serde(default = "default_true")]
    pub marginalise_missing: bool,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

fn default_cap() -> usize {
    DEFAULT_ENUMERATION_CAP
}

fn default_true() -> bool {
    true
}

fn default_jitter() -> f64 {
    DEFAULT_JITTER
}

impl Default for ElboOptions {
    fn default() -> Self {
        Self {
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
            marginalise_missing: true,
            jitter: DEFAULT_JITTER,
        }
    }
}

/// Everything except parameter values that the objective needs.
#[derive(Clone, Copy, Debug)]
pub struct ElboModel<'a> {
    pub family: Family,
    pub schema: &'a CovariateSchema,
    pub networks: &'a Networks,
    /// Kernel structure; parameter values are read from the store.
    pub kernel: Option<&'a KernelSpec>,
    pub prior: &'a CovariatePrior,
    pub options: &'a ElboOptions,
}

/// A mini-batch: rows of `Y` and `X` plus their grouping into sampling
/// units (single rows, or whole instances for the longitudinal family).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub y: MaskedTable,
    pub x: CovariateTable,
    /// Local row indices of each unit.
    pub groups: Vec<Vec<usize>>,
    pub total_units: usize,
    pub total_rows: usize,
}

impl Batch {
    /// Selected rows, each its own unit, out of `total_rows`.
    pub fn rows(y: &MaskedTable, x: &CovariateTable, rows: &[usize]) -> Self {
        Self {
            y: y.select_rows(rows),
            x: x.select_rows(rows),
            groups: (0..rows.len()).map(|i| vec![i]).collect(),
            total_units: y.rows(),
            total_rows: y.rows(),
        }
    }

    /// Every row.
    pub fn full(y: &MaskedTable, x: &CovariateTable) -> Self {
        Self::rows(y, x, &(0..y.rows()).collect::<Vec<_>>())
    }

    /// Whole instances.
    pub fn instances(y: &MaskedTable, x: &CovariateTable, index: &LongitudinalIndex, instances: &[usize]) -> Self {
        let rows = index.rows_of(instances);
        let mut groups = Vec::with_capacity(instances.len());
        let mut off = 0;
        for &p in instances {
            let n = index.ranges[p].len();
            groups.push((off..off + n).collect());
            off += n;
        }
        Self {
            y: y.select_rows(&rows),
            x: x.select_rows(&rows),
            groups,
            total_units: index.instances(),
            total_rows: index.rows(),
        }
    }

    /// Mini-batch correction `N / N̂` (or `P / P̂`).
    pub fn scale(&self) -> f64 {
        self.total_units as f64 / self.groups.len() as f64
    }
}

/// Terms of the bound on the tape.
#[derive(Clone, Copy, Debug)]
pub struct ElboVars {
    pub reconstruction: Var,
    pub latent_kl: Var,
    pub covariate_kl: Var,
    pub total: Var,
    pub scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub reconstruction: f64,
    pub latent_kl: f64,
    pub covariate_kl: f64,
    /// `reconstruction − latent_kl − covariate_kl`.
    pub total: f64,
    /// Mini-batch factor already applied to every term.
    pub scale: f64,
}

impl ElboVars {
    pub fn read(&self, tape: &Tape) -> ElboBreakdown {
        ElboBreakdown {
            reconstruction: tape.scalar(self.reconstruction),
            latent_kl: tape.scalar(self.latent_kl),
            covariate_kl: tape.scalar(self.covariate_kl),
            total: tape.scalar(self.total),
            scale: self.scale,
        }
    }
}

/// Records the bound for `batch` on `tape`. `mc` is the number of
/// Monte-Carlo draws for both the latent variables and continuous missing
/// covariates.
pub fn elbo_graph(
    tape: &mut Tape,
    model: &ElboModel,
    vars: &ParamVars,
    batch: &Batch,
    mc: usize,
    rng: &mut Generator,
) -> Result<ElboVars> {
    let schema = model.schema;
    let nets = model.networks;
    let opts = model.options;
    if mc == 0 {
        return Err(Error::InvalidArgument("at least one Monte-Carlo sample is required".into()));
    }
    if batch.y.rows() != batch.x.rows() {
        return Err(Error::DimensionMismatch("Y and X batches differ in rows".into()));
    }
    if batch.y.cols() != nets.obs_dims {
        return Err(Error::DimensionMismatch(format!(
            "Y has {} columns, model expects {}",
            batch.y.cols(),
            nets.obs_dims
        )));
    }
    batch.x.check_against(schema)?;
    let scale = batch.scale();
    let b = batch.y.rows();
    let l_dims = nets.latent_dims;

    let y_fm = tape.constant(fill_and_mask(&batch.y.values, &batch.y.mask)?);
    let x_fm = tape.constant(fill_and_mask_covariates(&batch.x, schema)?);
    let enc = nets.encode_z(tape, vars, y_fm, x_fm)?;
    let marginalise = opts.marginalise_missing && batch.x.has_missing();
    let post = if marginalise {
        Some(nets.encode_covariates(tape, vars, schema, x_fm, Some(y_fm))?)
    } else {
        None
    };
    let exp = expand_groups(tape, &batch.x, schema, post.as_ref(), &batch.groups, opts.enumeration_cap, mc, rng)?;

    // reconstruction
    let y_mask = Tensor::from_vec(b, batch.y.cols(), batch.y.mask.iter().map(|m| if *m { 1.0 } else { 0.0 }).collect());
    let reconstruction = if model.family == Family::Cvae {
        let src = &exp.row_source;
        let t = src.len();
        let z = draw_latent(tape, enc.mean, enc.log_var, src, l_dims, rng);
        let x_enc = if marginalise {
            encode_instantiated(tape, exp.x, schema)
        } else {
            tape.gather_rows(x_fm, src)
        };
        let dec = nets.decode(tape, vars, z, Some(x_enc))?;
        let ll = masked_log_density(tape, &batch.y.values.select_rows(src), &y_mask.select_rows(src), dec.mean, dec.log_var);
        let w = exp.row_weights(tape);
        debug_assert_eq!(tape.dims(w).0, t);
        let s = tape.dot(ll, w);
        tape.scale(s, scale)
    } else {
        let src: Vec<usize> = (0..mc).flat_map(|_| 0..b).collect();
        let z = draw_latent(tape, enc.mean, enc.log_var, &src, l_dims, rng);
        let dec = nets.decode(tape, vars, z, None)?;
        let ll = masked_log_density(tape, &batch.y.values.select_rows(&src), &y_mask.select_rows(&src), dec.mean, dec.log_var);
        let s = tape.sum(ll);
        tape.scale(s, scale / mc as f64)
    };

    // latent KL
    let latent_kl = match model.family {
        Family::Cvae => {
            let zero = tape.constant_scalar(0.0);
            let kl = kl_gaussian_var(tape, enc.mean, enc.log_var, zero, zero);
            let s = tape.sum(kl);
            tape.scale(s, scale)
        }
        Family::RegressionGp | Family::TemporalGp => {
            let spec = model.kernel.ok_or_else(|| Error::config("model.kernel", "GP families need a kernel"))?;
            if batch.groups.iter().any(|g| g.len() != 1) {
                return Err(Error::InvalidArgument("row-wise bound needs single-row units".into()));
            }
            let kv = KernelVars::from_params(spec, vars)?;
            let iv = InducingVars::from_params(tape, vars, l_dims)?;
            let w = exp.row_weights(tape);
            let mut acc = tape.constant_scalar(0.0);
            for l in 0..l_dims {
                let it = inducing_terms(tape, spec, &kv, &iv, l, 0..spec.components.len(), opts.jitter)?;
                let mean_l = tape.select_cols(enc.mean, &[l]);
                let lv_l = tape.select_cols(enc.log_var, &[l]);
                let mean_e = tape.gather_rows(mean_l, &exp.row_source);
                let lv_e = tape.gather_rows(lv_l, &exp.row_source);
                let v = gp_bound_var(tape, spec, &kv, &it, iv.s, l, exp.x, mean_e, lv_e, Some(w), scale, batch.total_rows)?;
                acc = tape.add(acc, v);
            }
            acc
        }
        Family::LongitudinalGp => {
            let spec = model.kernel.ok_or_else(|| Error::config("model.kernel", "GP families need a kernel"))?;
            let kv = KernelVars::from_params(spec, vars)?;
            let shared = !spec.shared_components().is_empty();
            let iv = if shared {
                Some(InducingVars::from_params(tape, vars, l_dims)?)
            } else {
                None
            };
            let mut acc = tape.constant_scalar(0.0);
            for l in 0..l_dims {
                let it = match &iv {
                    Some(iv) => Some(inducing_terms(tape, spec, &kv, iv, l, spec.shared_components(), opts.jitter)?),
                    None => None,
                };
                let mean_l = tape.select_cols(enc.mean, &[l]);
                let lv_l = tape.select_cols(enc.log_var, &[l]);
                let mut terms = Vec::with_capacity(exp.branches());
                for r in &exp.branch_ranges {
                    let rows: Vec<usize> = r.clone().collect();
                    let src: Vec<usize> = rows.iter().map(|&t| exp.row_source[t]).collect();
                    let xb = tape.gather_rows(exp.x, &rows);
                    let mb = tape.gather_rows(mean_l, &src);
                    let lb = tape.gather_rows(lv_l, &src);
                    terms.push(longitudinal_instance_var(
                        tape,
                        spec,
                        &kv,
                        it.as_ref(),
                        iv.as_ref().map(|v| v.s),
                        l,
                        xb,
                        mb,
                        lb,
                    )?);
                }
                let stacked = tape.concat_rows(&terms);
                let e = tape.dot(stacked, exp.weight);
                let mut v = tape.scale(e, 0.5 * scale);
                v = tape.add_scalar(v, -0.5 * batch.total_rows as f64);
                if let Some(it) = it {
                    v = tape.add(v, it.kl);
                }
                acc = tape.add(acc, v);
            }
            acc
        }
    };

    let covariate_kl = match &post {
        Some(p) => {
            let k = covariate_kl_var(tape, p, &batch.x, schema, model.prior)?;
            tape.scale(k, scale)
        }
        None => tape.constant_scalar(0.0),
    };
    let t = tape.sub(reconstruction, latent_kl);
    let total = tape.sub(t, covariate_kl);
    Ok(ElboVars {
        reconstruction,
        latent_kl,
        covariate_kl,
        total,
        scale,
    })
}

/// `z = μ + σ ε` for stacked rows drawn from batch rows `src`; `ε` is drawn
/// row-major.
fn draw_latent(tape: &mut Tape, mean: Var, log_var: Var, src: &[usize], l: usize, rng: &mut Generator) -> Var {
    let eps = Tensor::from_vec(src.len(), l, normals(rng, src.len() * l));
    let mu = tape.gather_rows(mean, src);
    let lv = tape.gather_rows(log_var, src);
    let half = tape.scale(lv, 0.5);
    let sd = tape.exp(half);
    let e = tape.constant(eps);
    let n = tape.mul(sd, e);
    tape.add(mu, n)
}

/// Row sums of the Gaussian log density over observed entries, `[T, 1]`.
fn masked_log_density(tape: &mut Tape, y: &Tensor, mask: &Tensor, mean: Var, log_var: Var) -> Var {
    let yv = tape.constant(y.clone());
    let ll = gaussian_log_density_var(tape, yv, mean, log_var);
    let m = tape.constant(mask.clone());
    let ll = tape.mul(ll, m);
    tape.sum_rows(ll)
}

/// The bound for `batch` with frozen parameters.
pub fn elbo_step(model: &ElboModel, params: &ParamStore, batch: &Batch, mc: usize, rng: &mut Generator) -> Result<ElboBreakdown> {
    let mut tape = Tape::new();
    let vars = params.register_with(&mut tape, |_| false);
    let e = elbo_graph(&mut tape, model, &vars, batch, mc, rng)?;
    Ok(e.read(&tape))
}

/// The bound and its gradient with respect to the parameters accepted by
/// `trainable` (others receive no entry).
pub fn elbo_value_and_grad(
    model: &ElboModel,
    params: &ParamStore,
    trainable: impl Fn(&str) -> bool,
    batch: &Batch,
    mc: usize,
    rng: &mut Generator,
) -> Result<(ElboBreakdown, ParamStore)> {
    let mut tape = Tape::new();
    let vars = params.register_with(&mut tape, &trainable);
    let e = elbo_graph(&mut tape, model, &vars, batch, mc, rng)?;
    let out = e.read(&tape);
    let grads = tape.backward(e.total);
    let mut g = ParamStore::new();
    for (name, v) in vars.iter() {
        if trainable(name) {
            g.insert(name, grads.get_or_zeros(v, params.get(name).unwrap()));
        }
    }
    Ok((out, g))
}

/// `scale · (1/mc) Σ_s Σ_i Σ_{d observed} log N(y_id | f(z_is[, x_i]), σ²_d)`
/// for frozen encoder statistics. `x` must be fully instantiated and is
/// required exactly when the decoder consumes covariates.
#[allow(clippy::too_many_arguments)]
pub fn expected_reconstruction(
    networks: &Networks,
    params: &ParamStore,
    schema: &CovariateSchema,
    y: &MaskedTable,
    x: Option<&CovariateTable>,
    enc: &EncoderOutput,
    mc: usize,
    scale: f64,
    rng: &mut Generator,
) -> Result<f64> {
    if mc == 0 {
        return Err(Error::InvalidArgument("at least one Monte-Carlo sample is required".into()));
    }
    if enc.variance.data().iter().any(|v| !(*v > 0.0)) {
        return Err(Error::NonPositiveVariance(enc.variance.data().iter().cloned().fold(f64::INFINITY, f64::min)));
    }
    let b = y.rows();
    let mut tape = Tape::new();
    let vars = params.register_with(&mut tape, |_| false);
    let mean = tape.constant(enc.mean.clone());
    let lv = tape.constant(enc.variance.map(f64::ln));
    let src: Vec<usize> = (0..mc).flat_map(|_| 0..b).collect();
    let z = draw_latent(&mut tape, mean, lv, &src, networks.latent_dims, rng);
    let x_enc = match x {
        Some(x) => {
            if x.has_missing() {
                return Err(Error::InvalidArgument("covariates must be fully instantiated".into()));
            }
            let xv = tape.constant(x.values.select_rows(&src));
            Some(encode_instantiated(&mut tape, xv, schema))
        }
        None => None,
    };
    let dec = networks.decode(&mut tape, &vars, z, x_enc)?;
    let mask = Tensor::from_vec(b, y.cols(), y.mask.iter().map(|m| if *m { 1.0 } else { 0.0 }).collect());
    let ll = masked_log_density(&mut tape, &y.values.select_rows(&src), &mask.select_rows(&src), dec.mean, dec.log_var);
    let s = tape.sum(ll);
    Ok(tape.scalar(s) * scale / mc as f64)
}
