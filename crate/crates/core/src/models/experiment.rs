use serde::{Deserialize, Serialize};

use super::{apply_method, evaluate, train, EvalConfig, Method, Metrics, ModelConfig, TrainConfig};
use crate::data::{generate_rotated_digits, inject_mcar, Dataset, RotatedDigitsConfig};
use crate::error::Result;

/// Per-split seeds for masking, derived from one cell seed.
pub fn mask_seed(seed: u64, split: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(split + 1)
}

/// Generated train, validation and test sets with MCAR masking at `rate` on
/// both `X` and `Y`. `seed` replaces the generator seed.
pub fn masked_digits(data: &RotatedDigitsConfig, rate: f64, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let mut cfg = data.clone();
    cfg.seed = seed;
    let (a, b, c) = generate_rotated_digits(&cfg)?;
    Ok((
        inject_mcar(&a, rate, rate, mask_seed(seed, 0))?,
        inject_mcar(&b, rate, rate, mask_seed(seed, 1))?,
        inject_mcar(&c, rate, rate, mask_seed(seed, 2))?,
    ))
}

/// One cell of a method comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: Method,
    pub rate: f64,
    pub seed: u64,
    pub metrics: Metrics,
    pub epochs: usize,
}

/// Routes the sets through `method`, trains with `seed` and evaluates on the
/// test split.
pub fn run_cell(
    sets: &(Dataset, Dataset, Dataset),
    method: Method,
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    knn_k: usize,
    rate: f64,
    seed: u64,
) -> Result<CellResult> {
    let routed = apply_method(method, &sets.0, &sets.1, &sets.2, knn_k);
    let tc = TrainConfig { seed, ..train_cfg.clone() };
    let m = train(model, &routed.train, &routed.validation, &tc)?;
    let ec = EvalConfig { seed, ..eval_cfg.clone() };
    let metrics = evaluate(&m, &routed.test, None, &ec)?;
    Ok(CellResult {
        method,
        rate,
        seed,
        metrics,
        epochs: m.history.epochs.len(),
    })
}
