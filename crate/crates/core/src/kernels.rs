//! Covariance functions for the latent Gaussian-process priors.
//!
//! A [`KernelSpec`] is an additive sum of components per latent dimension.
//! Each component is a squared-exponential kernel over a subset of
//! continuous covariates, multiplied by 0/1 indicator kernels over a subset
//! of categorical covariates, scaled by a component variance. A per-dimension
//! noise variance `σ²_zl` is added on the diagonal of training Gram matrices.
//! All positive parameters are stored as logarithms.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::diffmath::{cholesky_factor, solve_triangular, ParamStore, ParamVars, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::schema::{ColumnKind, CovariateSchema, CovariateTable};

pub const DEFAULT_LOG_NOISE: f64 = -2.302_585_092_994_046; // ln 0.1

/// `exp(log_variance) · exp(−½ Σ_q ((x_q − x2_q) / ℓ_q)²)`.
pub fn se_kernel(x: &[f64], x2: &[f64], log_lengthscales: &[f64], log_variance: f64) -> Result<f64> {
    if x.len() != x2.len() || x.len() != log_lengthscales.len() {
        return Err(Error::DimensionMismatch(format!(
            "se_kernel: inputs {} / {} with {} lengthscales",
            x.len(),
            x2.len(),
            log_lengthscales.len()
        )));
    }
    let mut d = 0.0;
    for q in 0..x.len() {
        let r = (x[q] - x2[q]) / log_lengthscales[q].exp();
        d += r * r;
    }
    Ok(log_variance.exp() * (-0.5 * d).exp())
}

/// 0/1 indicator on category ids.
pub fn categorical_kernel(a: usize, b: usize, cardinality: usize) -> Result<f64> {
    for v in [a, b] {
        if v >= cardinality {
            return Err(Error::InvalidCategory {
                value: v as f64,
                cardinality,
            });
        }
    }
    Ok(if a == b { 1.0 } else { 0.0 })
}

/// Which covariate columns one additive component reads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelComponent {
    /// Schema indices of the continuous columns entering the SE factor.
    #[serde(default)]
    pub continuous: Vec<usize>,
    /// Schema indices of the categorical columns entering indicator factors.
    #[serde(default)]
    pub categorical: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentParams {
    pub log_lengthscales: Vec<f64>,
    pub log_variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub latent_dims: usize,
    pub components: Vec<KernelComponent>,
    /// Marks the last component as the instance-specific one used by the
    /// longitudinal bound.
    #[serde(default)]
    pub last_is_instance: bool,
    /// `params[l][r]`.
    pub params: Vec<Vec<ComponentParams>>,
    /// `log σ²_zl` per latent dimension.
    pub log_noise: Vec<f64>,
}

impl KernelSpec {
    /// Spec with default initial parameters for the given structure.
    pub fn with_components(latent_dims: usize, components: Vec<KernelComponent>, last_is_instance: bool) -> Self {
        let params = (0..latent_dims)
            .map(|_| {
                components
                    .iter()
                    .map(|c| ComponentParams {
                        log_lengthscales: vec![0.0; c.continuous.len()],
                        log_variance: 0.0,
                    })
                    .collect()
            })
            .collect();
        Self {
            latent_dims,
            components,
            last_is_instance,
            params,
            log_noise: vec![DEFAULT_LOG_NOISE; latent_dims],
        }
    }

    /// One component: SE over every continuous column times indicators over
    /// every categorical column (excluding an instance-id column).
    pub fn regression(schema: &CovariateSchema, latent_dims: usize) -> Self {
        let continuous = schema.continuous_columns();
        let categorical = schema
            .categorical_columns()
            .into_iter()
            .filter(|&j| !schema.column(j).is_instance)
            .collect();
        Self::with_components(latent_dims, vec![KernelComponent { continuous, categorical }], false)
    }

    /// Shared components (time; each other continuous column; each
    /// categorical column crossed with time) followed by the
    /// instance × time component.
    pub fn longitudinal(schema: &CovariateSchema, latent_dims: usize) -> Result<Self> {
        let time = schema
            .time_column()
            .ok_or_else(|| Error::SchemaMismatch("longitudinal kernel needs a time column".into()))?;
        let id = schema
            .instance_column()
            .ok_or_else(|| Error::SchemaMismatch("longitudinal kernel needs an instance column".into()))?;
        let mut comps = vec![KernelComponent {
            continuous: vec![time],
            categorical: vec![],
        }];
        for (j, c) in schema.columns.iter().enumerate() {
            if j == time || j == id {
                continue;
            }
            match c.kind {
                ColumnKind::Continuous => comps.push(KernelComponent {
                    continuous: vec![j],
                    categorical: vec![],
                }),
                ColumnKind::Categorical { .. } => comps.push(KernelComponent {
                    continuous: vec![time],
                    categorical: vec![j],
                }),
            }
        }
        comps.push(KernelComponent {
            continuous: vec![time],
            categorical: vec![id],
        });
        Ok(Self::with_components(latent_dims, comps, true))
    }

    pub fn validate(&self, schema: &CovariateSchema) -> Result<()> {
        let bad = |m: String| Err(Error::config("model.kernel", m));
        if self.components.is_empty() {
            return bad("at least one component is required".into());
        }
        if self.latent_dims == 0 {
            return bad("latent_dims must be >= 1".into());
        }
        if self.params.len() != self.latent_dims || self.log_noise.len() != self.latent_dims {
            return bad("parameter blocks must match latent_dims".into());
        }
        for (r, c) in self.components.iter().enumerate() {
            for &j in &c.continuous {
                if j >= schema.len() || !schema.column(j).is_continuous() {
                    return bad(format!("component {r}: column {j} is not a continuous covariate"));
                }
            }
            for &j in &c.categorical {
                if j >= schema.len() || schema.column(j).is_continuous() {
                    return bad(format!("component {r}: column {j} is not a categorical covariate"));
                }
            }
        }
        for ps in &self.params {
            if ps.len() != self.components.len() {
                return bad("one parameter block per component".into());
            }
            for (p, c) in ps.iter().zip(&self.components) {
                if p.log_lengthscales.len() != c.continuous.len() {
                    return bad("one lengthscale per continuous column".into());
                }
            }
        }
        if self.last_is_instance && self.components.len() < 1 {
            return bad("instance component missing".into());
        }
        Ok(())
    }

    /// Indices of the components shared across instances.
    pub fn shared_components(&self) -> Range<usize> {
        let r = self.components.len();
        if self.last_is_instance {
            0..r - 1
        } else {
            0..r
        }
    }

    pub fn instance_component(&self) -> Option<usize> {
        self.last_is_instance.then(|| self.components.len() - 1)
    }

    pub fn lengthscale_name(l: usize, r: usize) -> String {
        format!("kernel.l{l}.r{r}.log_lengthscale")
    }

    pub fn variance_name(l: usize, r: usize) -> String {
        format!("kernel.l{l}.r{r}.log_variance")
    }

    pub fn noise_name(l: usize) -> String {
        format!("kernel.l{l}.log_noise")
    }

    /// Writes the parameters into a store under their canonical names.
    pub fn store_params(&self, store: &mut ParamStore) {
        for l in 0..self.latent_dims {
            for (r, p) in self.params[l].iter().enumerate() {
                store.insert(Self::lengthscale_name(l, r), Tensor::row(&p.log_lengthscales));
                store.insert(Self::variance_name(l, r), Tensor::scalar(p.log_variance));
            }
            store.insert(Self::noise_name(l), Tensor::scalar(self.log_noise[l]));
        }
    }

    /// Copy with parameters read back from a store.
    pub fn with_params_from(&self, store: &ParamStore) -> Result<Self> {
        let mut out = self.clone();
        for l in 0..self.latent_dims {
            for r in 0..self.components.len() {
                out.params[l][r].log_lengthscales = store.require(&Self::lengthscale_name(l, r))?.data().to_vec();
                out.params[l][r].log_variance = store.require(&Self::variance_name(l, r))?.item();
            }
            out.log_noise[l] = store.require(&Self::noise_name(l))?.item();
        }
        Ok(out)
    }

    pub fn noise_variance(&self, l: usize) -> f64 {
        self.log_noise[l].exp()
    }
}

/// Tape handles for the kernel parameters of every latent dimension.
#[derive(Clone, Debug)]
pub struct KernelVars {
    /// `[l][r]` → `(log lengthscales [1, q], log variance [1, 1])`.
    comps: Vec<Vec<(Var, Var)>>,
    log_noise: Vec<Var>,
}

impl KernelVars {
    pub fn from_params(spec: &KernelSpec, vars: &ParamVars) -> Result<Self> {
        let mut comps = Vec::new();
        let mut log_noise = Vec::new();
        for l in 0..spec.latent_dims {
            let mut row = Vec::new();
            for r in 0..spec.components.len() {
                row.push((
                    vars.get(&KernelSpec::lengthscale_name(l, r))?,
                    vars.get(&KernelSpec::variance_name(l, r))?,
                ));
            }
            comps.push(row);
            log_noise.push(vars.get(&KernelSpec::noise_name(l))?);
        }
        Ok(Self { comps, log_noise })
    }

    /// Parameters recorded as constants (no gradients).
    pub fn constants(tape: &mut Tape, spec: &KernelSpec) -> Self {
        Self::record(tape, spec, false)
    }

    /// Parameters recorded as differentiable leaves.
    pub fn params(tape: &mut Tape, spec: &KernelSpec) -> Self {
        Self::record(tape, spec, true)
    }

    fn record(tape: &mut Tape, spec: &KernelSpec, trainable: bool) -> Self {
        let mut leaf = |t: Tensor| if trainable { tape.param(t) } else { tape.constant(t) };
        let mut comps = Vec::new();
        let mut log_noise = Vec::new();
        for l in 0..spec.latent_dims {
            let row = spec.params[l]
                .iter()
                .map(|p| (leaf(Tensor::row(&p.log_lengthscales)), leaf(Tensor::scalar(p.log_variance))))
                .collect();
            comps.push(row);
            log_noise.push(leaf(Tensor::scalar(spec.log_noise[l])));
        }
        Self { comps, log_noise }
    }

    pub fn log_noise(&self, l: usize) -> Var {
        self.log_noise[l]
    }
}

fn category_ids(tape: &Tape, rows: Var, col: usize) -> Vec<usize> {
    let v = tape.value(rows);
    (0..v.rows()).map(|i| v.get(i, col) as usize).collect()
}

/// Gram matrix of one component between instantiated row sets `a` and `b`
/// (both `[n, Q]` with categorical columns holding ids).
pub fn component_gram_var(
    tape: &mut Tape,
    spec: &KernelSpec,
    kv: &KernelVars,
    l: usize,
    r: usize,
    a: Var,
    b: Var,
) -> Var {
    let comp = &spec.components[r];
    let (na, nb) = (tape.dims(a).0, tape.dims(b).0);
    let (log_ls, log_var) = kv.comps[l][r];
    let scale = tape.exp(log_var);
    let mut k = if comp.continuous.is_empty() {
        let ones = tape.constant(Tensor::filled(na, nb, 1.0));
        tape.mul(ones, scale)
    } else {
        let xa = tape.select_cols(a, &comp.continuous);
        let xb = tape.select_cols(b, &comp.continuous);
        let neg = tape.neg(log_ls);
        let inv_ls = tape.exp(neg);
        let xa = tape.mul(xa, inv_ls);
        let xb = tape.mul(xb, inv_ls);
        let d = tape.pairwise_sq_dist(xa, xb);
        let e = tape.scale(d, -0.5);
        let e = tape.exp(e);
        tape.mul(e, scale)
    };
    if !comp.categorical.is_empty() {
        let mut ind = Tensor::filled(na, nb, 1.0);
        for &j in &comp.categorical {
            let ia = category_ids(tape, a, j);
            let ib = category_ids(tape, b, j);
            for i in 0..na {
                for jj in 0..nb {
                    if ia[i] != ib[jj] {
                        ind.set(i, jj, 0.0);
                    }
                }
            }
        }
        let ind = tape.constant(ind);
        k = tape.mul(k, ind);
    }
    k
}

/// Sum of the listed components' Gram matrices.
pub fn gram_components_var(
    tape: &mut Tape,
    spec: &KernelSpec,
    kv: &KernelVars,
    l: usize,
    comps: Range<usize>,
    a: Var,
    b: Var,
) -> Option<Var> {
    let mut acc: Option<Var> = None;
    for r in comps {
        let k = component_gram_var(tape, spec, kv, l, r, a, b);
        acc = Some(match acc {
            Some(s) => tape.add(s, k),
            None => k,
        });
    }
    acc
}

/// `Σ_r K^(l,r)(a, b)`, optionally with `σ²_zl I` (only meaningful for `a = b`).
pub fn gram_var(tape: &mut Tape, spec: &KernelSpec, kv: &KernelVars, l: usize, a: Var, b: Var, include_noise: bool) -> Var {
    let k = gram_components_var(tape, spec, kv, l, 0..spec.components.len(), a, b).expect("at least one component");
    if include_noise {
        add_noise_diag(tape, kv, l, k)
    } else {
        k
    }
}

/// Adds `σ²_zl` to the diagonal of a square matrix.
pub fn add_noise_diag(tape: &mut Tape, kv: &KernelVars, l: usize, k: Var) -> Var {
    let n = tape.dims(k).0;
    let eye = tape.constant(Tensor::identity(n));
    let nv = tape.exp(kv.log_noise[l]);
    let noise = tape.mul(eye, nv);
    tape.add(k, noise)
}

/// Prior variances `k(x_i, x_i)` of the listed components as an `[n, 1]` column.
pub fn prior_diag_var(tape: &mut Tape, kv: &KernelVars, l: usize, comps: Range<usize>, n: usize) -> Option<Var> {
    let mut acc: Option<Var> = None;
    for r in comps {
        let v = tape.exp(kv.comps[l][r].1);
        acc = Some(match acc {
            Some(s) => tape.add(s, v),
            None => v,
        });
    }
    acc.map(|s| {
        let ones = tape.constant(Tensor::filled(n, 1, 1.0));
        tape.mul(ones, s)
    })
}

/// Validates instantiated rows against the schema and the columns a spec reads.
pub fn check_rows(spec: &KernelSpec, schema: &CovariateSchema, rows: &Tensor) -> Result<()> {
    if rows.cols() != schema.len() {
        return Err(Error::DimensionMismatch(format!(
            "covariate rows have {} columns, schema has {}",
            rows.cols(),
            schema.len()
        )));
    }
    for c in &spec.components {
        for &j in &c.categorical {
            let card = schema.column(j).cardinality().unwrap_or(0);
            for i in 0..rows.rows() {
                let v = rows.get(i, j);
                if v < 0.0 || v.fract() != 0.0 || v as usize >= card {
                    return Err(Error::InvalidCategory { value: v, cardinality: card });
                }
            }
        }
        for &j in &c.continuous {
            for i in 0..rows.rows() {
                if !rows.get(i, j).is_finite() {
                    return Err(Error::InvalidArgument(format!("non-finite covariate at ({i}, {j})")));
                }
            }
        }
    }
    Ok(())
}

/// Gram matrix for latent dimension `l` between fully instantiated row sets.
/// When `b` is `None` the matrix is `K(a, a)` and noise may be included.
pub fn gram(
    spec: &KernelSpec,
    schema: &CovariateSchema,
    l: usize,
    a: &Tensor,
    b: Option<&Tensor>,
    include_noise: bool,
) -> Result<Tensor> {
    if l >= spec.latent_dims {
        return Err(Error::DimensionMismatch(format!("latent dimension {l} out of range")));
    }
    check_rows(spec, schema, a)?;
    if let Some(b) = b {
        check_rows(spec, schema, b)?;
    }
    let mut tape = Tape::new();
    let kv = KernelVars::constants(&mut tape, spec);
    let av = tape.constant(a.clone());
    let bv = match b {
        Some(b) => tape.constant(b.clone()),
        None => av,
    };
    let k = gram_var(&mut tape, spec, &kv, l, av, bv, include_noise && b.is_none());
    Ok(tape.value(k).clone())
}

/// Cross and inducing covariances plus the Nyström residual diagonal.
#[derive(Clone, Debug)]
pub struct GramBundle {
    pub k_xx_diag: Vec<f64>,
    pub k_xs: Tensor,
    pub k_ss: Tensor,
    /// `diag(K_XX − K_XS K_SS⁻¹ K_SX)`, clamped at zero.
    pub nystrom_diag: Vec<f64>,
    /// The same before clamping.
    pub nystrom_diag_raw: Vec<f64>,
}

pub fn gram_bundle(
    spec: &KernelSpec,
    schema: &CovariateSchema,
    l: usize,
    x_rows: &Tensor,
    s_rows: &Tensor,
    jitter: f64,
) -> Result<GramBundle> {
    if s_rows.rows() == 0 {
        return Err(Error::InvalidArgument("at least one inducing point is required".into()));
    }
    let k_xx = gram(spec, schema, l, x_rows, None, false)?;
    let k_xs = gram(spec, schema, l, x_rows, Some(s_rows), false)?;
    let k_ss = gram(spec, schema, l, s_rows, None, false)?;
    let lss = cholesky_factor(&k_ss, jitter)?;
    let a = solve_triangular(&lss, &k_xs.transpose(), false)?;
    let n = x_rows.rows();
    let k_xx_diag = k_xx.diagonal();
    let mut raw = vec![0.0; n];
    for i in 0..n {
        let q: f64 = (0..a.rows()).map(|m| a.get(m, i) * a.get(m, i)).sum();
        raw[i] = k_xx_diag[i] - q;
    }
    Ok(GramBundle {
        k_xx_diag,
        k_xs,
        k_ss,
        nystrom_diag: raw.iter().map(|v| v.max(0.0)).collect(),
        nystrom_diag_raw: raw,
    })
}

/// Rows grouped into instances; rows of one instance are contiguous.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalIndex {
    pub instance_of_row: Vec<usize>,
    pub ranges: Vec<Range<usize>>,
}

impl LongitudinalIndex {
    /// Builds the index from an instance-id column; fails if an instance's
    /// rows are not contiguous or an id is missing.
    pub fn from_table(x: &CovariateTable, schema: &CovariateSchema) -> Result<Self> {
        let col = schema
            .instance_column()
            .ok_or_else(|| Error::SchemaMismatch("no instance-id column".into()))?;
        let mut ids = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let v = x
                .value(i, col)
                .ok_or_else(|| Error::SchemaMismatch(format!("instance id missing in row {i}")))?;
            ids.push(v as usize);
        }
        Self::from_ids(&ids)
    }

    pub fn from_ids(ids: &[usize]) -> Result<Self> {
        let mut ranges: Vec<Range<usize>> = Vec::new();
        let mut instance_of_row = Vec::with_capacity(ids.len());
        let mut seen = std::collections::HashSet::new();
        let mut start = 0;
        for i in 0..=ids.len() {
            if i == ids.len() || (i > start && ids[i] != ids[start]) {
                if i > start {
                    if !seen.insert(ids[start]) {
                        return Err(Error::SchemaMismatch(format!(
                            "rows of instance {} are not contiguous",
                            ids[start]
                        )));
                    }
                    ranges.push(start..i);
                }
                start = i;
            }
            if i < ids.len() {
                instance_of_row.push(ranges.len());
            }
        }
        Ok(Self { instance_of_row, ranges })
    }

    /// A single instance spanning `n` rows.
    pub fn single(n: usize) -> Self {
        Self {
            instance_of_row: vec![0; n],
            ranges: vec![0..n],
        }
    }

    pub fn instances(&self) -> usize {
        self.ranges.len()
    }

    pub fn rows(&self) -> usize {
        self.instance_of_row.len()
    }

    /// Row indices of the given instances, in order.
    pub fn rows_of(&self, instances: &[usize]) -> Vec<usize> {
        instances.iter().flat_map(|&p| self.ranges[p].clone()).collect()
    }
}

/// Per-instance `Σ̂_p` factors and shared-component covariances.
#[derive(Clone, Debug)]
pub struct LongitudinalBlocks {
    /// Cholesky factor of `K^(R)_{X_p X_p} + σ²_z I` for each instance.
    pub sigma_factors: Vec<Tensor>,
    /// `K^(A)_{XS}`; `None` when there are no shared components.
    pub k_xs_shared: Option<Tensor>,
    /// `K^(A)_{SS}`; `None` when there are no shared components.
    pub k_ss_shared: Option<Tensor>,
}

pub fn longitudinal_blocks(
    spec: &KernelSpec,
    schema: &CovariateSchema,
    l: usize,
    index: &LongitudinalIndex,
    x_rows: &Tensor,
    s_rows: &Tensor,
    jitter: f64,
) -> Result<LongitudinalBlocks> {
    check_rows(spec, schema, x_rows)?;
    check_rows(spec, schema, s_rows)?;
    if index.rows() != x_rows.rows() {
        return Err(Error::DimensionMismatch("index does not cover the rows".into()));
    }
    let mut tape = Tape::new();
    let kv = KernelVars::constants(&mut tape, spec);
    let x = tape.constant(x_rows.clone());
    let s = tape.constant(s_rows.clone());
    let mut sigma_factors = Vec::new();
    for range in &index.ranges {
        let idx: Vec<usize> = range.clone().collect();
        let xp = tape.gather_rows(x, &idx);
        let k = match spec.instance_component() {
            Some(r) => component_gram_var(&mut tape, spec, &kv, l, r, xp, xp),
            None => tape.constant(Tensor::zeros(idx.len(), idx.len())),
        };
        let sig = add_noise_diag(&mut tape, &kv, l, k);
        let f = tape.cholesky(sig, 0.0)?;
        sigma_factors.push(tape.value(f).clone());
    }
    let shared = spec.shared_components();
    let (k_xs_shared, k_ss_shared) = if shared.is_empty() {
        (None, None)
    } else {
        let kxs = gram_components_var(&mut tape, spec, &kv, l, shared.clone(), x, s).unwrap();
        let kss = gram_components_var(&mut tape, spec, &kv, l, shared, s, s).unwrap();
        let _ = jitter;
        (Some(tape.value(kxs).clone()), Some(tape.value(kss).clone()))
    };
    Ok(LongitudinalBlocks {
        sigma_factors,
        k_xs_shared,
        k_ss_shared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::CovariateColumn;

    fn schema() -> CovariateSchema {
        CovariateSchema::new(vec![
            CovariateColumn::continuous("a"),
            CovariateColumn::continuous("b"),
            CovariateColumn::categorical("c", 3),
        ])
        .unwrap()
    }

    #[test]
    fn se_cases() {
        assert_eq!(se_kernel(&[0.3, 1.0], &[0.3, 1.0], &[0.1, -0.2], 0.7).unwrap(), 0.7f64.exp());
        let v = se_kernel(&[1.0], &[0.0], &[0.0], 0.0).unwrap();
        assert!((v - 0.606_530_659_712_633_4).abs() < 1e-15);
        assert!(se_kernel(&[25.0], &[0.0], &[0.0], 0.0).unwrap() < 1e-80);
        assert!(se_kernel(&[1.0], &[0.0, 1.0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn categorical_cases() {
        assert_eq!(categorical_kernel(2, 2, 3).unwrap(), 1.0);
        assert_eq!(categorical_kernel(0, 1, 3).unwrap(), 0.0);
        assert!(matches!(categorical_kernel(0, 3, 3), Err(Error::InvalidCategory { .. })));
    }

    #[test]
    fn single_row_gram_is_variance() {
        let spec = KernelSpec::regression(&schema(), 1);
        let x = Tensor::from_rows(&[vec![0.2, -0.4, 1.0]]);
        let k = gram(&spec, &schema(), 0, &x, None, false).unwrap();
        assert_eq!(k.dims(), (1, 1));
        assert!((k.item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn noise_only_on_diagonal() {
        let spec = KernelSpec::regression(&schema(), 2);
        let x = Tensor::from_rows(&[vec![0.2, -0.4, 1.0], vec![0.0, 0.5, 1.0], vec![1.0, 1.0, 2.0]]);
        let k0 = gram(&spec, &schema(), 1, &x, None, false).unwrap();
        let k1 = gram(&spec, &schema(), 1, &x, None, true).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 0.1 } else { 0.0 };
                assert!((k1.get(i, j) - k0.get(i, j) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn invalid_category_in_rows() {
        let spec = KernelSpec::regression(&schema(), 1);
        let x = Tensor::from_rows(&[vec![0.2, -0.4, 3.0]]);
        assert!(matches!(
            gram(&spec, &schema(), 0, &x, None, false),
            Err(Error::InvalidCategory { .. })
        ));
    }

    #[test]
    fn longitudinal_index_from_ids() {
        let idx = LongitudinalIndex::from_ids(&[4, 4, 1, 1, 1, 7]).unwrap();
        assert_eq!(idx.ranges, vec![0..2, 2..5, 5..6]);
        assert_eq!(idx.instance_of_row, vec![0, 0, 1, 1, 1, 2]);
        assert!(LongitudinalIndex::from_ids(&[1, 2, 1]).is_err());
    }
}
