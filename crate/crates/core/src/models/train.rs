use rand::seq::SliceRandom;

use super::{EpochRecord, History, ModelConfig, StepRecord, TrainConfig, TrainedModel, MODEL_FORMAT};
use crate::data::Dataset;
use crate::diffmath::Adam;
use crate::distributions::fit_covariate_prior;
use crate::elbo::{elbo_step, elbo_value_and_grad, Batch, Family, InducingState, INDUCING_S};
use crate::error::{Error, Result};
use crate::kernels::LongitudinalIndex;
use crate::networks::Networks;
use crate::rng::{stream, Stream};

const DEFAULT_ROW_BATCH: usize = 64;
const DEFAULT_INSTANCE_BATCH: usize = 8;

/// Trains a fresh model. See [`train_with_observer`].
pub fn train(model: &ModelConfig, train_set: &Dataset, validation_set: &Dataset, config: &TrainConfig) -> Result<TrainedModel> {
    train_with_observer(model, train_set, validation_set, config, &mut |_| {})
}

/// Trains a fresh model, calling `on_step` after every optimiser step.
pub fn train_with_observer(
    model: &ModelConfig,
    train_set: &Dataset,
    validation_set: &Dataset,
    config: &TrainConfig,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<TrainedModel> {
    let init = initialise(model, train_set, config.seed)?;
    fit(init, train_set, validation_set, config, on_step)
}

/// Continues training from `model`; step and epoch indices continue from its
/// history. Optimiser moments start afresh.
pub fn resume(
    model: TrainedModel,
    train_set: &Dataset,
    validation_set: &Dataset,
    config: &TrainConfig,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<TrainedModel> {
    fit(model, train_set, validation_set, config, on_step)
}

fn initialise(config: &ModelConfig, train_set: &Dataset, seed: u64) -> Result<TrainedModel> {
    train_set.validate()?;
    let schema = &train_set.schema;
    let kernel = config.resolve_kernel(schema)?;
    let prior = match &config.prior {
        Some(p) => p.clone(),
        None => fit_covariate_prior(&train_set.x, schema),
    };
    let networks = Networks::new(
        schema,
        train_set.obs_dims(),
        config.latent_dims,
        &config.network,
        config.family == Family::Cvae,
        config.condition_x_posterior_on_y,
    );
    let mut rng = stream(seed, Stream::Init);
    let mut params = crate::diffmath::ParamStore::new();
    networks.init(&mut params, &mut rng);
    if let Some(spec) = &kernel {
        spec.store_params(&mut params);
        if !spec.shared_components().is_empty() {
            let ind = InducingState::init(spec, schema, &train_set.x, &prior, config.inducing_points, config.elbo.jitter, &mut rng)?;
            ind.store_params(&mut params);
        }
    }
    Ok(TrainedModel {
        format: MODEL_FORMAT.to_string(),
        config: config.clone(),
        schema: schema.clone(),
        obs_names: train_set.y_names.clone(),
        networks,
        kernel,
        prior,
        params,
        history: History::default(),
    })
}

/// Sampling units of a dataset: rows, or whole instances.
enum Units {
    Rows(usize),
    Instances(LongitudinalIndex),
}

impl Units {
    fn of(family: Family, d: &Dataset) -> Result<Self> {
        Ok(if family == Family::LongitudinalGp {
            Units::Instances(d.index()?)
        } else {
            Units::Rows(d.rows())
        })
    }

    fn count(&self) -> usize {
        match self {
            Units::Rows(n) => *n,
            Units::Instances(ix) => ix.instances(),
        }
    }

    fn batch(&self, d: &Dataset, units: &[usize]) -> Batch {
        match self {
            Units::Rows(_) => Batch::rows(&d.y, &d.x, units),
            Units::Instances(ix) => Batch::instances(&d.y, &d.x, ix, units),
        }
    }
}

fn fit(
    mut model: TrainedModel,
    train_set: &Dataset,
    validation_set: &Dataset,
    config: &TrainConfig,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<TrainedModel> {
    config.validate()?;
    train_set.validate()?;
    validation_set.validate()?;
    for (name, d) in [("training", train_set), ("validation", validation_set)] {
        if d.schema != model.schema {
            return Err(Error::SchemaMismatch(format!("{name} covariate schema differs from the model's")));
        }
        if d.obs_dims() != model.obs_dims() {
            return Err(Error::SchemaMismatch(format!("{name} observation width differs from the model's")));
        }
    }
    if config.max_epochs == 0 {
        return Ok(model);
    }
    let family = model.family();
    let units = Units::of(family, train_set)?;
    let n_units = units.count();
    if n_units == 0 {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let batch_size = match config.batch_size {
        Some(b) if b > n_units => {
            return Err(Error::config("train.batch_size", format!("{b} exceeds the {n_units} training units")));
        }
        Some(b) => b,
        None => {
            let d = if family == Family::LongitudinalGp {
                DEFAULT_INSTANCE_BATCH
            } else {
                DEFAULT_ROW_BATCH
            };
            d.min(n_units)
        }
    };
    let validation = {
        let u = Units::of(family, validation_set)?;
        let all: Vec<usize> = (0..u.count()).collect();
        if all.is_empty() {
            None
        } else {
            Some(u.batch(validation_set, &all))
        }
    };

    let train_inducing = model.config.train_inducing_locations;
    let trainable = move |name: &str| train_inducing || name != INDUCING_S;
    let mut opt = Adam::new(config.learning_rate, config.beta1, config.beta2);
    let mut rng = stream(config.seed, Stream::Training);
    let mut step = model.history.next_step();
    let first_epoch = model.history.next_epoch();
    let mut best = model.history.best_validation_elbo;
    let mut best_params = model.params.clone();
    let mut stale = 0;
    let mut order: Vec<usize> = (0..n_units).collect();
    let mc = model.config.train_mc;

    for epoch in first_epoch..first_epoch + config.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch_size) {
            let batch = units.batch(train_set, chunk);
            let (out, grad) = elbo_value_and_grad(&model.elbo_model(), &model.params, &trainable, &batch, mc, &mut rng)?;
            if !out.total.is_finite() || !grad.all_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            opt.ascend(&mut model.params, &grad, &trainable);
            let rec = StepRecord { step, epoch, elbo: out };
            on_step(&rec);
            model.history.steps.push(rec);
            sum += out.total;
            batches += 1;
            step += 1;
        }
        let train_elbo = sum / batches as f64;
        let validation_elbo = match &validation {
            Some(b) => {
                let mut eval_rng = stream(config.seed, Stream::Eval);
                elbo_step(&model.elbo_model(), &model.params, b, config.validation_mc, &mut eval_rng)?.total
            }
            None => train_elbo,
        };
        model.history.epochs.push(EpochRecord {
            epoch,
            train_elbo,
            validation_elbo,
        });
        if validation_elbo.is_finite() && best.is_none_or(|b| validation_elbo > b) {
            best = Some(validation_elbo);
            best_params = model.params.clone();
            model.history.best_epoch = Some(epoch);
            model.history.best_validation_elbo = best;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    model.params = best_params;
    Ok(model)
}
