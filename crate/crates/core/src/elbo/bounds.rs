use std::ops::Range;

use crate::diffmath::{Tape, Tensor, Var};
use crate::distributions::{kl_diag_gaussian, posterior_prior_kl, CovariatePosterior, CovariatePrior};
use crate::error::{Error, Result};
use crate::kernels::{
    add_noise_diag, check_rows, component_gram_var, gram_components_var, gram_var, prior_diag_var, KernelSpec, KernelVars,
    LongitudinalIndex,
};
use crate::networks::EncoderOutput;
use crate::schema::CovariateSchema;

use super::inducing::{InducingState, InducingVars};

/// Dense exact KL is refused above this many rows.
pub const EXACT_KL_MAX_ROWS: usize = 4096;

/// Quantities of `q(u_l) = N(m_l, H_l)` against `p(u_l) = N(0, K_SS)`.
#[derive(Clone, Copy, Debug)]
pub struct InducingTerms {
    /// Cholesky factor of `K_SS` (jittered).
    pub lss: Var,
    /// `L_SS⁻¹ m`.
    pub lm: Var,
    /// `C` with `H = C Cᵀ`.
    pub hc: Var,
    /// `KL(N(m, H) ‖ N(0, K_SS))`.
    pub kl: Var,
}

pub fn inducing_terms(
    tape: &mut Tape,
    spec: &KernelSpec,
    kv: &KernelVars,
    iv: &InducingVars,
    l: usize,
    comps: Range<usize>,
    jitter: f64,
) -> Result<InducingTerms> {
    let kss = gram_components_var(tape, spec, kv, l, comps, iv.s, iv.s)
        .ok_or_else(|| Error::InvalidArgument("inducing terms need at least one kernel component".into()))?;
    let lss = tape.cholesky(kss, jitter)?;
    let hc = iv.h_factor[l];
    let lm = tape.solve_tri(lss, iv.m[l], false)?;
    let lh = tape.solve_tri(lss, hc, false)?;
    let tr = tape.sum_squares(lh);
    let quad = tape.sum_squares(lm);
    let ld_k = tape.logdet_from_factor(lss);
    let ld_h = tape.logdet_from_factor(hc);
    let m = tape.dims(iv.s).0 as f64;
    let s = tape.add(tr, quad);
    let s = tape.add(s, ld_k);
    let s = tape.sub(s, ld_h);
    let s = tape.add_scalar(s, -m);
    let kl = tape.scale(s, 0.5);
    Ok(InducingTerms { lss, lm, hc, kl })
}

/// `KL(N(μ, diag σ²) ‖ N(0, K_XX + σ²_z I))` for one latent dimension.
#[allow(clippy::too_many_arguments)]
pub fn exact_kl_var(
    tape: &mut Tape,
    spec: &KernelSpec,
    kv: &KernelVars,
    l: usize,
    x: Var,
    mean: Var,
    log_var: Var,
    jitter: f64,
) -> Result<Var> {
    let n = tape.dims(x).0;
    if n > EXACT_KL_MAX_ROWS {
        return Err(Error::SizeGuard {
            n,
            limit: EXACT_KL_MAX_ROWS,
        });
    }
    let k = gram_var(tape, spec, kv, l, x, x, true);
    let lk = tape.cholesky(k, jitter)?;
    let half = tape.scale(log_var, 0.5);
    let sd = tape.exp(half);
    let sdm = tape.diag_matrix(sd);
    let a = tape.solve_tri(lk, sdm, false)?;
    let tr = tape.sum_squares(a);
    let b = tape.solve_tri(lk, mean, false)?;
    let quad = tape.sum_squares(b);
    let ld = tape.logdet_from_factor(lk);
    let slv = tape.sum(log_var);
    let s = tape.add(tr, quad);
    let s = tape.add(s, ld);
    let s = tape.sub(s, slv);
    let s = tape.add_scalar(s, -(n as f64));
    Ok(tape.scale(s, 0.5))
}

/// The mini-batch inducing-point bound for one latent dimension.
///
/// `x` holds `E` instantiated rows whose encoder statistics are `mean` and
/// `log_var` (`[E, 1]`); `weights` (`[E, 1]`) are expectation weights, or
/// `None` for unit weights. Per-row terms are multiplied by `scale = N / N̂`.
#[allow(clippy::too_many_arguments)]
pub fn gp_bound_var(
    tape: &mut Tape,
    spec: &KernelSpec,
    kv: &KernelVars,
    it: &InducingTerms,
    s: Var,
    l: usize,
    x: Var,
    mean: Var,
    log_var: Var,
    weights: Option<Var>,
    scale: f64,
    n_total: usize,
) -> Result<Var> {
    let e = tape.dims(x).0;
    let comps = 0..spec.components.len();
    let kes = gram_components_var(tape, spec, kv, l, comps.clone(), x, s).expect("components");
    let kse = tape.transpose(kes);
    let a = tape.solve_tri(it.lss, kse, false)?;
    let at = tape.transpose(a);
    let proj = tape.matmul(at, it.lm);
    let r = tape.sub(proj, mean);
    let r2 = tape.square(r);
    let var = tape.exp(log_var);
    let kdiag = prior_diag_var(tape, kv, l, comps, e).expect("components");
    let a2 = tape.square(a);
    let asq = tape.sum_cols(a2);
    let asq = tape.transpose(asq);
    let ktilde = tape.sub(kdiag, asq);
    let b = tape.solve_tri(it.lss, a, true)?;
    let hct = tape.transpose(it.hc);
    let hb = tape.matmul(hct, b);
    let hb2 = tape.square(hb);
    let tr = tape.sum_cols(hb2);
    let tr = tape.transpose(tr);
    let num = tape.add(r2, var);
    let num = tape.add(num, ktilde);
    let num = tape.add(num, tr);
    let ln = kv.log_noise(l);
    let neg = tape.neg(ln);
    let inv = tape.exp(neg);
    let per = tape.mul(num, inv);
    let per = tape.sub(per, log_var);
    let per = match weights {
        Some(w) => tape.mul(per, w),
        None => per,
    };
    let sum = tape.sum(per);
    let rows = tape.scale(sum, 0.5 * scale);
    let nf = n_total as f64;
    let g = tape.scale(ln, 0.5 * nf);
    let g = tape.add_scalar(g, -0.5 * nf);
    let g = tape.add(g, it.kl);
    Ok(tape.add(rows, g))
}

/// Unscaled per-instance terms of the longitudinal bound for one latent
/// dimension: `rᵀΣ̂⁻¹r + Σ_i(Σ̂⁻¹)_ii σ²_i + log|Σ̂| + tr(Σ̂⁻¹K̃) +
/// ‖L⁻¹K_pS K_SS⁻¹ C‖² − Σ log σ²_i`.
#[allow(clippy::too_many_arguments)]
pub fn longitudinal_instance_var(
    tape: &mut Tape,
    spec: &KernelSpec,
    kv: &KernelVars,
    it: Option<&InducingTerms>,
    s: Option<Var>,
    l: usize,
    x: Var,
    mean: Var,
    log_var: Var,
) -> Result<Var> {
    let n = tape.dims(x).0;
    let inst = match spec.instance_component() {
        Some(r) => component_gram_var(tape, spec, kv, l, r, x, x),
        None => tape.constant(Tensor::zeros(n, n)),
    };
    let sig = add_noise_diag(tape, kv, l, inst);
    // the noise keeps this block positive definite; jitter only on failure
    let lp = tape.cholesky(sig, 0.0)?;
    let ld = tape.logdet_from_factor(lp);
    let half = tape.scale(log_var, 0.5);
    let sd = tape.exp(half);
    let sdm = tape.diag_matrix(sd);
    let v = tape.solve_tri(lp, sdm, false)?;
    let vterm = tape.sum_squares(v);
    let slv = tape.sum(log_var);
    let mut acc = tape.add(ld, vterm);
    acc = tape.sub(acc, slv);
    let shared = spec.shared_components();
    let r = match (it, s) {
        (Some(it), Some(s)) if !shared.is_empty() => {
            let kps = gram_components_var(tape, spec, kv, l, shared.clone(), x, s).unwrap();
            let ksp = tape.transpose(kps);
            let a = tape.solve_tri(it.lss, ksp, false)?;
            let at = tape.transpose(a);
            let proj = tape.matmul(at, it.lm);
            let kpp = gram_components_var(tape, spec, kv, l, shared, x, x).unwrap();
            let ata = tape.matmul(at, a);
            let ktilde = tape.sub(kpp, ata);
            let eye = tape.constant(Tensor::identity(n));
            let sinv = tape.cholesky_solve(lp, eye)?;
            let tk = tape.dot(sinv, ktilde);
            let c = tape.solve_tri(it.lss, a, true)?;
            let ct = tape.transpose(c);
            let d = tape.matmul(ct, it.hc);
            let ld_ = tape.solve_tri(lp, d, false)?;
            let th = tape.sum_squares(ld_);
            acc = tape.add(acc, tk);
            acc = tape.add(acc, th);
            tape.sub(proj, mean)
        }
        _ => tape.neg(mean),
    };
    let w = tape.solve_tri(lp, r, false)?;
    let q = tape.sum_squares(w);
    Ok(tape.add(acc, q))
}

fn column_var(tape: &mut Tape, t: &Tensor, l: usize, rows: &[usize]) -> Var {
    let c = Tensor::from_fn(rows.len(), 1, |i, _| t.get(rows[i], l));
    tape.constant(c)
}

fn check_encoder(enc: &EncoderOutput, n: usize, latent_dims: usize) -> Result<()> {
    if enc.mean.dims() != (n, latent_dims) || enc.variance.dims() != (n, latent_dims) {
        return Err(Error::DimensionMismatch(format!(
            "encoder statistics are {:?}, expected ({n}, {latent_dims})",
            enc.mean.dims()
        )));
    }
    if enc.variance.data().iter().any(|v| !(*v > 0.0)) {
        return Err(Error::NonPositiveVariance(
            enc.variance.data().iter().cloned().fold(f64::INFINITY, f64::min),
        ));
    }
    Ok(())
}

/// `Σ_l KL(N(μ̄_l, W_l) ‖ N(0, K^(l)_XX))` on instantiated covariates.
pub fn kl_gp_exact(enc: &EncoderOutput, spec: &KernelSpec, schema: &CovariateSchema, x: &Tensor, jitter: f64) -> Result<f64> {
    let n = x.rows();
    if n > EXACT_KL_MAX_ROWS {
        return Err(Error::SizeGuard {
            n,
            limit: EXACT_KL_MAX_ROWS,
        });
    }
    check_encoder(enc, n, spec.latent_dims)?;
    check_rows(spec, schema, x)?;
    let mut tape = Tape::new();
    let kv = KernelVars::constants(&mut tape, spec);
    let xv = tape.constant(x.clone());
    let rows: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    for l in 0..spec.latent_dims {
        let m = column_var(&mut tape, &enc.mean, l, &rows);
        let lv = column_var(&mut tape, &enc.variance.map(f64::ln), l, &rows);
        let k = exact_kl_var(&mut tape, spec, &kv, l, xv, m, lv, jitter)?;
        total += tape.scalar(k);
    }
    Ok(total)
}

/// The mini-batch inducing-point bound summed over latent dimensions, for
/// the rows in `batch` of an instantiated table `x` with `n_total` rows in
/// the full data set.
#[allow(clippy::too_many_arguments)]
pub fn kl_gp_bound_minibatch(
    batch: &[usize],
    enc: &EncoderOutput,
    inducing: &InducingState,
    spec: &KernelSpec,
    schema: &CovariateSchema,
    x: &Tensor,
    n_total: usize,
    jitter: f64,
) -> Result<f64> {
    if batch.is_empty() || batch.iter().any(|&i| i >= x.rows()) {
        return Err(Error::InvalidArgument("batch indices out of range".into()));
    }
    check_encoder(enc, x.rows(), spec.latent_dims)?;
    check_rows(spec, schema, x)?;
    let mut tape = Tape::new();
    let kv = KernelVars::constants(&mut tape, spec);
    let iv = InducingVars::constants(&mut tape, inducing);
    let xb = tape.constant(x.select_rows(batch));
    let scale = n_total as f64 / batch.len() as f64;
    let mut total = 0.0;
    for l in 0..spec.latent_dims {
        let it = inducing_terms(&mut tape, spec, &kv, &iv, l, 0..spec.components.len(), jitter)?;
        let m = column_var(&mut tape, &enc.mean, l, batch);
        let lv = column_var(&mut tape, &enc.variance.map(f64::ln), l, batch);
        let v = gp_bound_var(&mut tape, spec, &kv, &it, iv.s, l, xb, m, lv, None, scale, n_total)?;
        total += tape.scalar(v);
    }
    Ok(total)
}

/// The longitudinal bound summed over latent dimensions for a batch of whole
/// instances. `inducing` may be `None` only when the kernel has no shared
/// components.
#[allow(clippy::too_many_arguments)]
pub fn kl_longitudinal_bound(
    batch_instances: &[usize],
    enc: &EncoderOutput,
    inducing: Option<&InducingState>,
    spec: &KernelSpec,
    schema: &CovariateSchema,
    index: &LongitudinalIndex,
    x: &Tensor,
    jitter: f64,
) -> Result<f64> {
    if batch_instances.is_empty() || batch_instances.iter().any(|&p| p >= index.instances()) {
        return Err(Error::InvalidArgument("instance indices out of range".into()));
    }
    if index.rows() != x.rows() {
        return Err(Error::DimensionMismatch("index does not cover the rows".into()));
    }
    check_encoder(enc, x.rows(), spec.latent_dims)?;
    check_rows(spec, schema, x)?;
    let shared = !spec.shared_components().is_empty();
    if shared && inducing.is_none() {
        return Err(Error::InvalidArgument("shared kernel components need inducing points".into()));
    }
    let mut tape = Tape::new();
    let kv = KernelVars::constants(&mut tape, spec);
    let iv = match (shared, inducing) {
        (true, Some(s)) => Some(InducingVars::constants(&mut tape, s)),
        _ => None,
    };
    let xv = tape.constant(x.clone());
    let lv_all = enc.variance.map(f64::ln);
    let scale = index.instances() as f64 / batch_instances.len() as f64;
    let n_total = index.rows() as f64;
    let mut total = 0.0;
    for l in 0..spec.latent_dims {
        let it = match &iv {
            Some(iv) => Some(inducing_terms(&mut tape, spec, &kv, iv, l, spec.shared_components(), jitter)?),
            None => None,
        };
        let mut sum = 0.0;
        for &p in batch_instances {
            let rows: Vec<usize> = index.ranges[p].clone().collect();
            let xp = tape.gather_rows(xv, &rows);
            let m = column_var(&mut tape, &enc.mean, l, &rows);
            let lv = column_var(&mut tape, &lv_all, l, &rows);
            let v = longitudinal_instance_var(&mut tape, spec, &kv, it.as_ref(), iv.as_ref().map(|v| v.s), l, xp, m, lv)?;
            sum += tape.scalar(v);
        }
        total += 0.5 * scale * sum - 0.5 * n_total;
        if let Some(it) = it {
            total += tape.scalar(it.kl);
        }
    }
    Ok(total)
}

/// `N/N̂ Σ_{i∈batch} [KL(q(z_i) ‖ N(0, I)) + KL(q(x_i^u) ‖ p_λ(x_i^u))]`.
pub fn kl_cvae(
    batch: &[usize],
    enc: &EncoderOutput,
    posterior: &CovariatePosterior,
    prior: &CovariatePrior,
    n_total: usize,
) -> Result<f64> {
    if batch.is_empty() || batch.iter().any(|&i| i >= enc.mean.rows() || i >= posterior.rows.len()) {
        return Err(Error::InvalidArgument("batch indices out of range".into()));
    }
    let l = enc.mean.cols();
    let zeros = vec![0.0; l];
    let ones = vec![1.0; l];
    let mut acc = 0.0;
    for &i in batch {
        acc += kl_diag_gaussian(enc.mean.row_slice(i), enc.variance.row_slice(i), &zeros, &ones)?;
        let row = CovariatePosterior {
            rows: vec![posterior.rows[i].clone()],
        };
        acc += posterior_prior_kl(&row, prior)?;
    }
    Ok(acc * n_total as f64 / batch.len() as f64)
}
