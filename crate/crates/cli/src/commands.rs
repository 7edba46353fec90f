use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use covae::data::{
    generate_rotated_digits, inject_mcar, load_csv, read_truth_csv, write_dataset_csv, write_truth_csv, Dataset,
};
use covae::distributions::EntryDistribution;
use covae::models::{
    apply_method, evaluate, impute_covariates, mask_seed, resume, train_with_observer, Method, Metrics, StepRecord,
    TrainedModel,
};
use covae::{ColumnKind, CovariateSchema, CovariateTable, Error};
use serde::Serialize;
use serde_json::json;

use crate::config::ExperimentConfig;

pub const SPLITS: [&str; 3] = ["train", "validation", "test"];

/// Train, validation and test sets from files or the generator, with the
/// configured MCAR rates applied using masks derived from `seed`.
pub fn load_splits(cfg: &ExperimentConfig, rate_x: f64, rate_y: f64, seed: u64) -> Result<[Dataset; 3], Error> {
    let sets = if let Some(f) = &cfg.data.files {
        let (train, ranges) = load_csv(&f.train, &f.manifest, None)?;
        let (validation, _) = load_csv(&f.validation, &f.manifest, Some(&ranges))?;
        let (test, _) = load_csv(&f.test, &f.manifest, Some(&ranges))?;
        let mut sets = [train, validation, test];
        for (d, t) in sets.iter_mut().zip([&f.train_truth, &f.validation_truth, &f.test_truth]) {
            if let Some(t) = t {
                read_truth_csv(d, t)?;
            }
        }
        sets
    } else if let Some(g) = &cfg.data.generator {
        let mut g = g.clone();
        g.seed = seed;
        let (a, b, c) = generate_rotated_digits(&g)?;
        [a, b, c]
    } else {
        return Err(Error::config("data", "needs `generator` or `files`"));
    };
    if rate_x == 0.0 && rate_y == 0.0 {
        return Ok(sets);
    }
    let mut out = Vec::with_capacity(3);
    for (k, d) in sets.iter().enumerate() {
        out.push(inject_mcar(d, rate_x, rate_y, mask_seed(seed, k as u64))?);
    }
    Ok(out.try_into().expect("three splits"))
}

fn configured_splits(cfg: &ExperimentConfig) -> Result<[Dataset; 3], Error> {
    load_splits(cfg, cfg.data.missing_rate_x, cfg.data.missing_rate_y, cfg.seed)
}

fn routed(cfg: &ExperimentConfig, method: Method) -> Result<[Dataset; 3], Error> {
    let [a, b, c] = configured_splits(cfg)?;
    let r = apply_method(method, &a, &b, &c, cfg.eval.knn_k);
    Ok([r.train, r.validation, r.test])
}

pub fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn csv_writer(path: &Path) -> Result<csv::Writer<File>, Error> {
    csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

pub fn generate(cfg: &ExperimentConfig) -> Result<()> {
    let sets = configured_splits(cfg)?;
    let dir = &cfg.output.dir;
    create_dir(dir)?;
    let manifest = dir.join("manifest.json");
    for (name, d) in SPLITS.iter().zip(&sets) {
        let path = dir.join(format!("{name}.csv"));
        let m = (*name == "train").then_some(manifest.as_path());
        write_dataset_csv(d, &path, m)?;
        write_truth_csv(d, &dir.join(format!("{name}.truth.csv")))?;
    }
    let rows: Vec<usize> = sets.iter().map(Dataset::rows).collect();
    let mask_seeds: Vec<u64> = (0..3).map(|k| mask_seed(cfg.seed, k)).collect();
    write_json(
        &dir.join("metadata.json"),
        &json!({
            "config": cfg,
            "generator": cfg.data.generator,
            "source_files": cfg.data.files,
            "missing_rate_x": cfg.data.missing_rate_x,
            "missing_rate_y": cfg.data.missing_rate_y,
            "mask_seeds": mask_seeds,
            "rows": {"train": rows[0], "validation": rows[1], "test": rows[2]},
            "schema": sets[0].schema,
            "observation_names": sets[0].y_names,
        }),
    )?;
    eprintln!("wrote {} / {} / {} rows to {}", rows[0], rows[1], rows[2], dir.display());
    Ok(())
}

pub fn train(cfg: &ExperimentConfig, method: Method, resume_from_archive: bool) -> Result<()> {
    let [tr, va, _] = routed(cfg, method)?;
    let dir = &cfg.output.dir;
    create_dir(dir)?;
    let archive = cfg.output.model_path();
    let history_path = dir.join("history.csv");
    let append = resume_from_archive && history_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&history_path)
        .map_err(|e| Error::io(&history_path, e))?;
    let mut log = std::io::BufWriter::new(file);
    if !append {
        writeln!(log, "step,epoch,reconstruction,latent_kl,covariate_kl,total,scale,wall_seconds")?;
    }
    let start = Instant::now();
    let mut write_err: Option<std::io::Error> = None;
    let mut on_step = |s: &StepRecord| {
        let e = &s.elbo;
        let line = format!(
            "{},{},{},{},{},{},{},{:.6}",
            s.step,
            s.epoch,
            e.reconstruction,
            e.latent_kl,
            e.covariate_kl,
            e.total,
            e.scale,
            start.elapsed().as_secs_f64()
        );
        if write_err.is_none() {
            if let Err(err) = writeln!(log, "{line}").and_then(|_| log.flush()) {
                write_err = Some(err);
            }
        }
    };
    let result = if resume_from_archive {
        if !archive.exists() {
            return Err(Error::config("output.model", format!("{} does not exist", archive.display())).into());
        }
        let prior = TrainedModel::load(&archive)?;
        resume(prior, &tr, &va, &cfg.train, &mut on_step)
    } else {
        train_with_observer(&cfg.model, &tr, &va, &cfg.train, &mut on_step)
    };
    if let Some(e) = write_err {
        return Err(Error::io(&history_path, e).into());
    }
    let model = result.with_context(|| format!("training failed; step log kept in {}", history_path.display()))?;
    if let Some(parent) = archive.parent() {
        create_dir(parent)?;
    }
    model.save(&archive)?;
    let mut w = csv_writer(&dir.join("epochs.csv"))?;
    w.write_record(["epoch", "train_elbo", "validation_elbo"])?;
    for e in &model.history.epochs {
        w.write_record([e.epoch.to_string(), e.train_elbo.to_string(), e.validation_elbo.to_string()])?;
    }
    w.flush()?;
    write_json(
        &dir.join("train_summary.json"),
        &json!({
            "config": cfg,
            "method": method,
            "archive": archive,
            "steps": model.history.steps.len(),
            "epochs": model.history.epochs.len(),
            "best_epoch": model.history.best_epoch,
            "best_validation_elbo": model.history.best_validation_elbo,
            "wall_seconds": start.elapsed().as_secs_f64(),
        }),
    )?;
    eprintln!(
        "trained {} epochs (best {:?}); archive {}",
        model.history.epochs.len(),
        model.history.best_epoch,
        archive.display()
    );
    Ok(())
}

fn load_model(cfg: &ExperimentConfig) -> Result<TrainedModel, Error> {
    let archive = cfg.output.model_path();
    if !archive.exists() {
        return Err(Error::config("output.model", format!("{} does not exist", archive.display())));
    }
    TrainedModel::load(&archive)
}

pub const METRIC_COLUMNS: [&str; 9] = [
    "method",
    "seed",
    "nll",
    "covariate_mse",
    "covariate_accuracy",
    "masked_continuous",
    "masked_categorical",
    "latent_draws",
    "covariate_samples",
];

pub fn metric_record(method: Method, seed: u64, m: &Metrics) -> Vec<String> {
    vec![
        method.name().to_string(),
        seed.to_string(),
        m.nll.to_string(),
        opt(m.covariate_mse),
        opt(m.covariate_accuracy),
        m.masked_continuous.to_string(),
        m.masked_categorical.to_string(),
        m.latent_draws.to_string(),
        m.covariate_samples.to_string(),
    ]
}

pub fn evaluate_cmd(cfg: &ExperimentConfig, method: Method) -> Result<()> {
    let model = load_model(cfg)?;
    let [_, _, te] = routed(cfg, method)?;
    let metrics = evaluate(&model, &te, None, &cfg.eval.eval_config(cfg.seed))?;
    let dir = &cfg.output.dir;
    create_dir(dir)?;
    write_json(
        &dir.join("metrics.json"),
        &json!({
            "config": cfg,
            "method": method,
            "seed": cfg.seed,
            "archive": cfg.output.model_path(),
            "metrics": metrics,
        }),
    )?;
    let mut w = csv_writer(&dir.join("metrics.csv"))?;
    w.write_record(METRIC_COLUMNS)?;
    w.write_record(metric_record(method, cfg.seed, &metrics))?;
    w.flush()?;
    for n in &metrics.notices {
        eprintln!("notice: {n}");
    }
    eprintln!("test NLL {:.4} ({} method)", metrics.nll, method.name());
    Ok(())
}

/// Category label of id `v`: the declared level name, else the id.
fn label(schema: &CovariateSchema, j: usize, v: f64) -> String {
    let c = schema.column(j);
    match (&c.kind, &c.levels) {
        (ColumnKind::Categorical { .. }, Some(levels)) => levels[v as usize].clone(),
        (ColumnKind::Categorical { .. }, None) => (v as usize).to_string(),
        _ => v.to_string(),
    }
}

pub fn write_covariates(path: &Path, x: &CovariateTable, schema: &CovariateSchema) -> Result<(), Error> {
    let mut w = csv_writer(path)?;
    w.write_record(schema.columns.iter().map(|c| c.name.as_str()))?;
    for i in 0..x.rows() {
        let rec: Vec<String> = (0..x.cols()).map(|j| x.value(i, j).map_or(String::new(), |v| label(schema, j, v))).collect();
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn impute_cmd(cfg: &ExperimentConfig, split: usize) -> Result<PathBuf> {
    let model = load_model(cfg)?;
    let sets = configured_splits(cfg)?;
    let d = &sets[split];
    let imp = impute_covariates(&model, &d.x, Some(&d.y))?;
    let dir = &cfg.output.dir;
    create_dir(dir)?;
    let name = SPLITS[split];
    let table = dir.join(format!("{name}.imputed.csv"));
    write_covariates(&table, &imp.filled, &model.schema)?;
    let mut entries = Vec::new();
    for (i, row) in imp.posterior.rows.iter().enumerate() {
        for (j, e) in row.iter().enumerate() {
            let column = &model.schema.column(j).name;
            match e {
                Some(EntryDistribution::Gaussian { mean, variance }) => {
                    entries.push(json!({"row": i, "column": column, "mean": mean, "variance": variance}));
                }
                Some(EntryDistribution::Categorical { probs }) => {
                    let levels: Vec<String> = (0..probs.len()).map(|k| label(&model.schema, j, k as f64)).collect();
                    entries.push(json!({"row": i, "column": column, "levels": levels, "probabilities": probs}));
                }
                None => {}
            }
        }
    }
    write_json(
        &dir.join(format!("{name}.imputed.distributions.json")),
        &json!({"config": cfg, "split": name, "archive": cfg.output.model_path(), "entries": entries}),
    )?;
    eprintln!("imputed {} entries; table {}", entries.len(), table.display());
    Ok(table)
}
