//! Feed-forward encoder, covariate-posterior and decoder networks.
//!
//! Network inputs use the zero-fill convention: missing values are replaced
//! by zero and a mask channel is appended. Categorical covariates are one-hot
//! encoded, with an all-zero block when missing. The instance-id column of a
//! longitudinal schema is never fed to the networks; it only enters kernels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{ParamStore, ParamVars, Tape, Tensor, Var};
use crate::distributions::{CovariatePosterior, EntryDistribution, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::error::{Error, Result};
use crate::rng::Generator;
use crate::schema::{ColumnKind, CovariateSchema, CovariateTable, MaskedTable};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

fn default_hidden() -> Vec<usize> {
    vec![128, 64]
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            activation: Activation::Relu,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.iter().any(|w| *w == 0) {
            return Err(Error::config("model.network.hidden", "layer widths must be >= 1"));
        }
        Ok(())
    }
}

/// One multilayer perceptron whose parameters live in a [`ParamStore`]
/// under `{prefix}.w{k}` (`[in, out]`) and `{prefix}.b{k}` (`[1, out]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub prefix: String,
    pub dims: Vec<usize>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(prefix: &str, input: usize, config: &MlpConfig, output: usize) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(&config.hidden);
        dims.push(output);
        Self {
            prefix: prefix.to_string(),
            dims,
            activation: config.activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn weight_name(&self, k: usize) -> String {
        format!("{}.w{k}", self.prefix)
    }

    pub fn bias_name(&self, k: usize) -> String {
        format!("{}.b{k}", self.prefix)
    }

    /// Glorot-uniform weights and zero biases.
    pub fn init(&self, store: &mut ParamStore, rng: &mut Generator) {
        for k in 0..self.layers() {
            let (fi, fo) = (self.dims[k], self.dims[k + 1]);
            let a = (6.0 / (fi + fo) as f64).sqrt();
            let w = Tensor::from_fn(fi, fo, |_, _| rng.random_range(-a..a));
            store.insert(self.weight_name(k), w);
            store.insert(self.bias_name(k), Tensor::zeros(1, fo));
        }
    }

    /// All-zero parameters.
    pub fn init_zero(&self, store: &mut ParamStore) {
        for k in 0..self.layers() {
            store.insert(self.weight_name(k), Tensor::zeros(self.dims[k], self.dims[k + 1]));
            store.insert(self.bias_name(k), Tensor::zeros(1, self.dims[k + 1]));
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, input: Var) -> Result<Var> {
        let width = tape.dims(input).1;
        if width != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "{}: input width {width}, expected {}",
                self.prefix,
                self.input_dim()
            )));
        }
        let mut h = input;
        for k in 0..self.layers() {
            let w = vars.get(&self.weight_name(k))?;
            let b = vars.get(&self.bias_name(k))?;
            let a = tape.matmul(h, w);
            h = tape.add(a, b);
            if k + 1 < self.layers() {
                h = match self.activation {
                    Activation::Relu => tape.relu(h),
                    Activation::Tanh => tape.tanh(h),
                };
            }
        }
        Ok(h)
    }
}

/// `[zero-filled values | mask bits]` for a plain table.
pub fn fill_and_mask(values: &Tensor, mask: &[bool]) -> Result<Tensor> {
    if values.len() != mask.len() {
        return Err(Error::DimensionMismatch(format!(
            "mask has {} entries, values have {}",
            mask.len(),
            values.len()
        )));
    }
    let (n, d) = values.dims();
    Ok(Tensor::from_fn(n, 2 * d, |i, j| {
        let m = mask[i * d + (j % d)];
        if j < d {
            if m {
                values.get(i, j)
            } else {
                0.0
            }
        } else if m {
            1.0
        } else {
            0.0
        }
    }))
}

/// Columns of the schema that networks consume (everything except the
/// instance id).
pub fn network_columns(schema: &CovariateSchema) -> Vec<usize> {
    (0..schema.len()).filter(|&j| !schema.column(j).is_instance).collect()
}

/// Width of [`fill_and_mask_covariates`].
pub fn covariate_encoding_width(schema: &CovariateSchema) -> usize {
    network_columns(schema)
        .into_iter()
        .map(|j| schema.column(j).encoded_width())
        .sum()
}

/// Per network column: continuous `[value, mask]`, categorical
/// `[one-hot…, mask]`; missing entries encode as zeros.
pub fn fill_and_mask_covariates(x: &CovariateTable, schema: &CovariateSchema) -> Result<Tensor> {
    if x.cols() != schema.len() {
        return Err(Error::DimensionMismatch(format!(
            "table has {} columns, schema has {}",
            x.cols(),
            schema.len()
        )));
    }
    let cols = network_columns(schema);
    let width = covariate_encoding_width(schema);
    let mut out = Tensor::zeros(x.rows(), width);
    for i in 0..x.rows() {
        let mut off = 0;
        for &j in &cols {
            let c = schema.column(j);
            match c.kind {
                ColumnKind::Continuous => {
                    if let Some(v) = x.value(i, j) {
                        out.set(i, off, v);
                        out.set(i, off + 1, 1.0);
                    }
                }
                ColumnKind::Categorical { cardinality } => {
                    if let Some(v) = x.value(i, j) {
                        let k = v as usize;
                        if v < 0.0 || k >= cardinality {
                            return Err(Error::InvalidCategory { value: v, cardinality });
                        }
                        out.set(i, off + k, 1.0);
                        out.set(i, off + cardinality, 1.0);
                    }
                }
            }
            off += c.encoded_width();
        }
    }
    Ok(out)
}

/// In-graph encoding of fully instantiated covariates `[n, Q]` (mask bits 1).
/// Gradients flow into the continuous entries.
pub fn encode_instantiated(tape: &mut Tape, x: Var, schema: &CovariateSchema) -> Var {
    let n = tape.dims(x).0;
    let mut parts = Vec::new();
    let ones = tape.constant(Tensor::filled(n, 1, 1.0));
    for j in network_columns(schema) {
        match schema.column(j).kind {
            ColumnKind::Continuous => {
                parts.push(tape.select_cols(x, &[j]));
                parts.push(ones);
            }
            ColumnKind::Categorical { cardinality } => {
                let v = tape.value(x);
                let oh = Tensor::from_fn(n, cardinality + 1, |i, k| {
                    if k == cardinality || v.get(i, j) as usize == k {
                        1.0
                    } else {
                        0.0
                    }
                });
                parts.push(tape.constant(oh));
            }
        }
    }
    if parts.is_empty() {
        return tape.constant(Tensor::zeros(n, 0));
    }
    tape.concat_cols(&parts)
}

/// Latent posterior parameters on the tape, `[B, L]` each.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub mean: Var,
    pub log_var: Var,
}

/// Covariate posterior on the tape. `mean`/`log_var` are `[B, Q]` and only
/// meaningful in continuous columns; `log_probs[j]` is `[B, card_j]` for
/// categorical network columns.
#[derive(Clone, Debug)]
pub struct CovariatePosteriorVars {
    pub mean: Var,
    pub log_var: Var,
    pub log_probs: Vec<Option<Var>>,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    pub mean: Var,
    /// `[1, D]`.
    pub log_var: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub mean: Tensor,
    pub variance: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutput {
    pub mean: Tensor,
    pub log_var: Vec<f64>,
}

/// The three networks of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Networks {
    pub encoder: Mlp,
    pub covariate: Mlp,
    pub decoder: Mlp,
    pub latent_dims: usize,
    pub obs_dims: usize,
    /// The decoder consumes covariates (CVAE family).
    pub decoder_uses_x: bool,
    pub condition_x_posterior_on_y: bool,
}

pub const DECODER_LOG_VAR: &str = "decoder.log_var";

impl Networks {
    pub fn new(
        schema: &CovariateSchema,
        obs_dims: usize,
        latent_dims: usize,
        config: &MlpConfig,
        decoder_uses_x: bool,
        condition_x_posterior_on_y: bool,
    ) -> Self {
        let wx = covariate_encoding_width(schema);
        let cov_out: usize = network_columns(schema)
            .into_iter()
            .map(|j| match schema.column(j).kind {
                ColumnKind::Continuous => 2,
                ColumnKind::Categorical { cardinality } => cardinality,
            })
            .sum();
        let cov_in = wx + if condition_x_posterior_on_y { 2 * obs_dims } else { 0 };
        let dec_in = latent_dims + if decoder_uses_x { wx } else { 0 };
        Self {
            encoder: Mlp::new("encoder", 2 * obs_dims + wx, config, 2 * latent_dims),
            covariate: Mlp::new("covariate", cov_in.max(1), config, cov_out.max(1)),
            decoder: Mlp::new("decoder", dec_in, config, obs_dims),
            latent_dims,
            obs_dims,
            decoder_uses_x,
            condition_x_posterior_on_y,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Generator) {
        self.encoder.init(store, rng);
        self.covariate.init(store, rng);
        self.decoder.init(store, rng);
        store.insert(DECODER_LOG_VAR, Tensor::zeros(1, self.obs_dims));
    }

    pub fn init_zero(&self, store: &mut ParamStore) {
        self.encoder.init_zero(store);
        self.covariate.init_zero(store);
        self.decoder.init_zero(store);
        store.insert(DECODER_LOG_VAR, Tensor::zeros(1, self.obs_dims));
    }

    /// `q(z | y^o, x^o)`.
    pub fn encode_z(&self, tape: &mut Tape, vars: &ParamVars, y_fm: Var, x_fm: Var) -> Result<EncoderVars> {
        let input = tape.concat_cols(&[y_fm, x_fm]);
        let out = self.encoder.forward(tape, vars, input)?;
        let l = self.latent_dims;
        let mean = tape.select_cols(out, &(0..l).collect::<Vec<_>>());
        let raw = tape.select_cols(out, &(l..2 * l).collect::<Vec<_>>());
        let log_var = tape.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX);
        Ok(EncoderVars { mean, log_var })
    }

    /// `q(x^u | x^o)` or `q(x^u | y^o, x^o)`.
    pub fn encode_covariates(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        schema: &CovariateSchema,
        x_fm: Var,
        y_fm: Option<Var>,
    ) -> Result<CovariatePosteriorVars> {
        let n = tape.dims(x_fm).0;
        let input = match (self.condition_x_posterior_on_y, y_fm) {
            (true, Some(y)) => tape.concat_cols(&[x_fm, y]),
            (true, None) => {
                return Err(Error::DimensionMismatch(
                    "covariate posterior is conditioned on y but no y was given".into(),
                ))
            }
            (false, _) => {
                if tape.dims(x_fm).1 == 0 {
                    tape.constant(Tensor::zeros(n, 1))
                } else {
                    x_fm
                }
            }
        };
        let out = self.covariate.forward(tape, vars, input)?;
        let q = schema.len();
        let w = self.covariate.output_dim();
        let mut pm = Tensor::zeros(w, q);
        let mut pv = Tensor::zeros(w, q);
        let mut cat_ranges = Vec::new();
        let mut off = 0;
        for j in network_columns(schema) {
            match schema.column(j).kind {
                ColumnKind::Continuous => {
                    pm.set(off, j, 1.0);
                    pv.set(off + 1, j, 1.0);
                    off += 2;
                }
                ColumnKind::Categorical { cardinality } => {
                    cat_ranges.push((j, off..off + cardinality));
                    off += cardinality;
                }
            }
        }
        let pm = tape.constant(pm);
        let pv = tape.constant(pv);
        let mean = tape.matmul(out, pm);
        let raw = tape.matmul(out, pv);
        let log_var = tape.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX);
        let mut log_probs = vec![None; q];
        for (j, r) in cat_ranges {
            let logits = tape.select_cols(out, &r.collect::<Vec<_>>());
            log_probs[j] = Some(tape.log_softmax_rows(logits));
        }
        Ok(CovariatePosteriorVars { mean, log_var, log_probs })
    }

    /// `p(y | z)` or `p(y | z, x)`; `x_enc` must be given exactly when the
    /// decoder uses covariates.
    pub fn decode(&self, tape: &mut Tape, vars: &ParamVars, z: Var, x_enc: Option<Var>) -> Result<DecoderVars> {
        let input = match (self.decoder_uses_x, x_enc) {
            (true, Some(x)) => tape.concat_cols(&[z, x]),
            (false, None) => z,
            (true, None) => {
                return Err(Error::DimensionMismatch("this decoder needs covariates".into()));
            }
            (false, Some(_)) => {
                return Err(Error::DimensionMismatch("this decoder does not take covariates".into()));
            }
        };
        let mean = self.decoder.forward(tape, vars, input)?;
        let raw = vars.get(DECODER_LOG_VAR)?;
        let log_var = tape.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX);
        Ok(DecoderVars { mean, log_var })
    }

    /// Plain evaluation of the latent encoder.
    pub fn encode_z_plain(&self, params: &ParamStore, y: &MaskedTable, x: &CovariateTable, schema: &CovariateSchema) -> Result<EncoderOutput> {
        let mut tape = Tape::new();
        let vars = params.register_with(&mut tape, |_| false);
        let yv = tape.constant(fill_and_mask(&y.values, &y.mask)?);
        let xv = tape.constant(fill_and_mask_covariates(x, schema)?);
        let e = self.encode_z(&mut tape, &vars, yv, xv)?;
        Ok(EncoderOutput {
            mean: tape.value(e.mean).clone(),
            variance: tape.value(e.log_var).map(f64::exp),
        })
    }

    /// Plain evaluation of the covariate posterior, keeping only entries
    /// that are missing in `x`.
    pub fn encode_missing_covariates(
        &self,
        params: &ParamStore,
        x: &CovariateTable,
        y: Option<&MaskedTable>,
        schema: &CovariateSchema,
    ) -> Result<CovariatePosterior> {
        let mut tape = Tape::new();
        let vars = params.register_with(&mut tape, |_| false);
        let xv = tape.constant(fill_and_mask_covariates(x, schema)?);
        let yv = match y {
            Some(y) => Some(tape.constant(fill_and_mask(&y.values, &y.mask)?)),
            None => None,
        };
        let p = self.encode_covariates(&mut tape, &vars, schema, xv, yv)?;
        posterior_from_vars(&tape, &p, x, schema)
    }

    /// Plain evaluation of the decoder.
    pub fn decode_plain(&self, params: &ParamStore, z: &Tensor, x: Option<&CovariateTable>, schema: &CovariateSchema) -> Result<DecoderOutput> {
        let mut tape = Tape::new();
        let vars = params.register_with(&mut tape, |_| false);
        let zv = tape.constant(z.clone());
        let xe = match x {
            Some(x) => {
                if x.has_missing() {
                    return Err(Error::InvalidArgument("decoder covariates must be fully instantiated".into()));
                }
                let xv = tape.constant(x.values.clone());
                Some(encode_instantiated(&mut tape, xv, schema))
            }
            None => None,
        };
        let d = self.decode(&mut tape, &vars, zv, xe)?;
        Ok(DecoderOutput {
            mean: tape.value(d.mean).clone(),
            log_var: tape.value(d.log_var).data().to_vec(),
        })
    }
}

/// Extracts the missing-entry distributions from an in-graph posterior.
pub fn posterior_from_vars(
    tape: &Tape,
    p: &CovariatePosteriorVars,
    x: &CovariateTable,
    schema: &CovariateSchema,
) -> Result<CovariatePosterior> {
    let mean = tape.value(p.mean);
    let lv = tape.value(p.log_var);
    let mut rows = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let mut row = Vec::with_capacity(schema.len());
        for j in 0..schema.len() {
            if x.observed(i, j) {
                row.push(None);
                continue;
            }
            let e = match schema.column(j).kind {
                ColumnKind::Continuous => EntryDistribution::Gaussian {
                    mean: mean.get(i, j),
                    variance: lv.get(i, j).exp(),
                },
                ColumnKind::Categorical { .. } => {
                    let lp = p.log_probs[j].ok_or_else(|| {
                        Error::SchemaMismatch(format!("column {j} has no posterior head"))
                    })?;
                    let lp = tape.value(lp);
                    EntryDistribution::Categorical {
                        probs: lp.row_slice(i).iter().map(|v| v.exp()).collect(),
                    }
                }
            };
            row.push(Some(e));
        }
        rows.push(row);
    }
    Ok(CovariatePosterior { rows })
}
