//! Model assembly, training with early stopping, prediction and covariate
//! imputation.

mod baselines;
mod experiment;
mod predict;
mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use baselines::{apply_method, Method, MethodData};
pub use experiment::{mask_seed, masked_digits, run_cell, CellResult};
pub use predict::{
    covariate_errors, evaluate, impute_covariates, latent_predictive, predict_y, CovariateErrors, EvalConfig,
    Imputation, Metrics, Prediction,
};
pub use train::{resume, train, train_with_observer};

use crate::diffmath::ParamStore;
use crate::distributions::CovariatePrior;
use crate::elbo::{ElboBreakdown, ElboModel, ElboOptions, Family, InducingState};
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::networks::{MlpConfig, Networks};
use crate::schema::CovariateSchema;

pub const MODEL_FORMAT: &str = "covae-model/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    #[serde(default = "default_latent")]
    pub latent_dims: usize,
    #[serde(default)]
    pub network: MlpConfig,
    /// GP kernel structure (and initial hyperparameters). `None` picks the
    /// family default.
    #[serde(default)]
    pub kernel: Option<KernelSpec>,
    #[serde(default = "default_inducing")]
    pub inducing_points: usize,
    #[serde(default = "default_true")]
    pub train_inducing_locations: bool,
    #[serde(default)]
    pub elbo: ElboOptions,
    /// Monte-Carlo draws per training step.
    #[serde(default = "default_one")]
    pub train_mc: usize,
    /// Feeds `y^o` to the covariate posterior. Off by default so test rows
    /// can be predicted from covariates alone.
    #[serde(default)]
    pub condition_x_posterior_on_y: bool,
    /// Replaces the empirically fitted covariate prior.
    #[serde(default)]
    pub prior: Option<CovariatePrior>,
}

fn default_latent() -> usize {
    2
}

fn default_inducing() -> usize {
    16
}

fn default_true() -> bool {
    true
}

fn default_one() -> usize {
    1
}

impl ModelConfig {
    pub fn new(family: Family) -> Self {
        Self {
            family,
            latent_dims: default_latent(),
            network: MlpConfig::default(),
            kernel: None,
            inducing_points: default_inducing(),
            train_inducing_locations: true,
            elbo: ElboOptions::default(),
            train_mc: 1,
            condition_x_posterior_on_y: false,
            prior: None,
        }
    }

    /// Checks family prerequisites against `schema` and returns the kernel
    /// the model will use.
    pub fn resolve_kernel(&self, schema: &CovariateSchema) -> Result<Option<KernelSpec>> {
        if self.latent_dims == 0 {
            return Err(Error::config("model.latent_dims", "must be >= 1"));
        }
        if self.train_mc == 0 {
            return Err(Error::config("model.train_mc", "must be >= 1"));
        }
        if self.elbo.enumeration_cap == 0 {
            return Err(Error::config("model.elbo.enumeration_cap", "must be >= 1"));
        }
        if !(self.elbo.jitter >= 0.0) {
            return Err(Error::config("model.elbo.jitter", "must be >= 0"));
        }
        self.network.validate()?;
        if let Some(p) = &self.prior {
            p.validate(schema).map_err(|e| Error::config("model.prior", e.to_string()))?;
        }
        let spec = match self.family {
            Family::Cvae => return Ok(None),
            Family::RegressionGp => self.kernel.clone().unwrap_or_else(|| KernelSpec::regression(schema, self.latent_dims)),
            Family::TemporalGp => {
                if schema.time_column().is_none() {
                    return Err(Error::config("model.family", "temporal_gp needs a time column"));
                }
                self.kernel.clone().unwrap_or_else(|| KernelSpec::regression(schema, self.latent_dims))
            }
            Family::LongitudinalGp => {
                if schema.instance_column().is_none() {
                    return Err(Error::config("model.family", "longitudinal_gp needs an instance-id column"));
                }
                match &self.kernel {
                    Some(k) => {
                        if !k.last_is_instance {
                            return Err(Error::config("model.kernel", "longitudinal kernels end with the instance component"));
                        }
                        k.clone()
                    }
                    None => KernelSpec::longitudinal(schema, self.latent_dims)?,
                }
            }
        };
        if spec.latent_dims != self.latent_dims {
            return Err(Error::config("model.kernel", "latent_dims differs from model.latent_dims"));
        }
        if self.family != Family::LongitudinalGp && spec.last_is_instance {
            return Err(Error::config("model.kernel", "instance components need the longitudinal family"));
        }
        spec.validate(schema)?;
        if self.inducing_points == 0 && !spec.shared_components().is_empty() {
            return Err(Error::config("model.inducing_points", "must be >= 1"));
        }
        Ok(Some(spec))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    /// Rows per batch, or instances for the longitudinal family. `None`
    /// uses 64 rows or 8 instances.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
    /// Monte-Carlo draws for the validation bound.
    #[serde(default = "default_validation_mc")]
    pub validation_mc: usize,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epochs() -> usize {
    500
}
fn default_patience() -> usize {
    10
}
fn default_validation_mc() -> usize {
    50
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            batch_size: None,
            max_epochs: default_epochs(),
            patience: default_patience(),
            seed: 0,
            validation_mc: default_validation_mc(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        for (k, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(k, "must lie in [0, 1)"));
            }
        }
        if self.patience == 0 {
            return Err(Error::config("train.patience", "must be >= 1"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if self.validation_mc == 0 {
            return Err(Error::config("train.validation_mc", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub elbo: ElboBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the mini-batch bounds of the epoch.
    pub train_elbo: f64,
    pub validation_elbo: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_validation_elbo: Option<f64>,
}

impl History {
    pub fn next_step(&self) -> usize {
        self.steps.last().map_or(0, |s| s.step + 1)
    }

    pub fn next_epoch(&self) -> usize {
        self.epochs.last().map_or(0, |e| e.epoch + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub format: String,
    pub config: ModelConfig,
    pub schema: CovariateSchema,
    pub obs_names: Vec<String>,
    pub networks: Networks,
    /// Kernel structure; current hyperparameters live in `params`.
    pub kernel: Option<KernelSpec>,
    pub prior: CovariatePrior,
    /// Network weights, kernel hyperparameters and inducing state.
    pub params: ParamStore,
    pub history: History,
}

impl TrainedModel {
    pub fn family(&self) -> Family {
        self.config.family
    }

    pub fn obs_dims(&self) -> usize {
        self.networks.obs_dims
    }

    pub fn elbo_model(&self) -> ElboModel<'_> {
        ElboModel {
            family: self.config.family,
            schema: &self.schema,
            networks: &self.networks,
            kernel: self.kernel.as_ref(),
            prior: &self.prior,
            options: &self.config.elbo,
        }
    }

    /// Kernel with its current hyperparameters.
    pub fn fitted_kernel(&self) -> Result<Option<KernelSpec>> {
        self.kernel.as_ref().map(|k| k.with_params_from(&self.params)).transpose()
    }

    pub fn inducing(&self) -> Result<Option<InducingState>> {
        match &self.kernel {
            Some(k) if !k.shared_components().is_empty() => {
                Ok(Some(InducingState::from_params(&self.params, self.config.latent_dims)?))
            }
            _ => Ok(None),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: TrainedModel = serde_json::from_str(text)?;
        if m.format != MODEL_FORMAT {
            return Err(Error::SchemaMismatch(format!("unsupported model format `{}`", m.format)));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
