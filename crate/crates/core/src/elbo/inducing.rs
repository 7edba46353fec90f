use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::diffmath::{cholesky_factor, ParamStore, ParamVars, Tape, Tensor, Var};
use crate::distributions::CovariatePrior;
use crate::error::{Error, Result};
use crate::kernels::{gram_components_var, KernelSpec, KernelVars};
use crate::rng::Generator;
use crate::schema::{CovariateSchema, CovariateTable};

pub const INDUCING_S: &str = "inducing.s";

pub fn mean_name(l: usize) -> String {
    format!("inducing.l{l}.m")
}

pub fn factor_name(l: usize) -> String {
    format!("inducing.l{l}.h_raw")
}

/// Inducing locations shared by all latent dimensions plus one Gaussian
/// `N(m_l, H_l)` per dimension, `H_l = C_l C_lᵀ` with `C_l` lower triangular.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InducingState {
    /// `[M, Q]`, categorical columns hold category ids.
    pub s: Tensor,
    /// `[M, 1]` per latent dimension.
    pub m: Vec<Tensor>,
    /// Lower-triangular `C_l` with positive diagonal.
    pub h_factor: Vec<Tensor>,
}

impl InducingState {
    /// `S` is a random subset of training rows with missing entries replaced
    /// by prior means (or modes); `m = 0` and `H = K_SS`.
    pub fn init(
        spec: &KernelSpec,
        schema: &CovariateSchema,
        x: &CovariateTable,
        prior: &CovariatePrior,
        count: usize,
        jitter: f64,
        rng: &mut Generator,
    ) -> Result<Self> {
        if count == 0 {
            return Err(Error::config("model.inducing_points", "must be >= 1"));
        }
        if x.rows() == 0 {
            return Err(Error::InvalidArgument("no training rows to place inducing points".into()));
        }
        let m = count.min(x.rows());
        let mut idx: Vec<usize> = sample(rng, x.rows(), m).into_vec();
        idx.sort_unstable();
        let s = Tensor::from_fn(m, schema.len(), |a, j| {
            x.value(idx[a], j).unwrap_or_else(|| prior.central_value(j))
        });
        Self::with_locations(spec, schema, s, jitter)
    }

    pub fn with_locations(spec: &KernelSpec, schema: &CovariateSchema, s: Tensor, jitter: f64) -> Result<Self> {
        let _ = schema;
        let mut tape = Tape::new();
        let kv = KernelVars::constants(&mut tape, spec);
        let sv = tape.constant(s.clone());
        let mut means = Vec::new();
        let mut factors = Vec::new();
        for l in 0..spec.latent_dims {
            let kss = gram_components_var(&mut tape, spec, &kv, l, spec.shared_components(), sv, sv)
                .ok_or_else(|| Error::InvalidArgument("inducing points need a shared kernel component".into()))?;
            let c = cholesky_factor(tape.value(kss), jitter)?;
            means.push(Tensor::zeros(s.rows(), 1));
            factors.push(c);
        }
        Ok(Self {
            s,
            m: means,
            h_factor: factors,
        })
    }

    pub fn count(&self) -> usize {
        self.s.rows()
    }

    pub fn store_params(&self, store: &mut ParamStore) {
        store.insert(INDUCING_S, self.s.clone());
        for (l, (m, c)) in self.m.iter().zip(&self.h_factor).enumerate() {
            store.insert(mean_name(l), m.clone());
            let raw = Tensor::from_fn(c.rows(), c.cols(), |i, j| match i.cmp(&j) {
                std::cmp::Ordering::Greater => c.get(i, j),
                std::cmp::Ordering::Equal => c.get(i, i).ln(),
                std::cmp::Ordering::Less => 0.0,
            });
            store.insert(factor_name(l), raw);
        }
    }

    pub fn from_params(store: &ParamStore, latent_dims: usize) -> Result<Self> {
        let s = store.require(INDUCING_S)?.clone();
        let mut m = Vec::new();
        let mut h_factor = Vec::new();
        for l in 0..latent_dims {
            m.push(store.require(&mean_name(l))?.clone());
            let raw = store.require(&factor_name(l))?;
            h_factor.push(Tensor::from_fn(raw.rows(), raw.cols(), |i, j| match i.cmp(&j) {
                std::cmp::Ordering::Greater => raw.get(i, j),
                std::cmp::Ordering::Equal => raw.get(i, i).exp(),
                std::cmp::Ordering::Less => 0.0,
            }));
        }
        Ok(Self { s, m, h_factor })
    }

    /// `H_l = C_l C_lᵀ`.
    pub fn covariance(&self, l: usize) -> Tensor {
        self.h_factor[l].matmul(&self.h_factor[l].transpose())
    }
}

/// Inducing parameters on the tape.
#[derive(Clone, Debug)]
pub struct InducingVars {
    pub s: Var,
    pub m: Vec<Var>,
    pub h_factor: Vec<Var>,
}

impl InducingVars {
    pub fn from_params(tape: &mut Tape, vars: &ParamVars, latent_dims: usize) -> Result<Self> {
        let s = vars.get(INDUCING_S)?;
        let mut m = Vec::new();
        let mut h_factor = Vec::new();
        for l in 0..latent_dims {
            m.push(vars.get(&mean_name(l))?);
            let raw = vars.get(&factor_name(l))?;
            h_factor.push(tape.tril_exp_diag(raw));
        }
        Ok(Self { s, m, h_factor })
    }

    pub fn constants(tape: &mut Tape, state: &InducingState) -> Self {
        Self {
            s: tape.constant(state.s.clone()),
            m: state.m.iter().map(|m| tape.constant(m.clone())).collect(),
            h_factor: state.h_factor.iter().map(|c| tape.constant(c.clone())).collect(),
        }
    }
}
