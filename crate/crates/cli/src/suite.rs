use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::Result;
use covae::models::{run_cell, CellResult, Method};
use covae::Error;
use serde::Serialize;
use serde_json::json;

use crate::commands::{create_dir, csv_writer, load_splits, write_json};
use crate::config::ExperimentConfig;

#[derive(Clone, Debug)]
struct Cell {
    rate: f64,
    method: Method,
    seed: u64,
}

#[derive(Debug, Serialize)]
struct Row {
    method: Method,
    rate: f64,
    seeds_ok: usize,
    seeds_failed: usize,
    nll_mean: Option<f64>,
    nll_sd: Option<f64>,
    mse_mean: Option<f64>,
    mse_sd: Option<f64>,
    accuracy_mean: Option<f64>,
    accuracy_sd: Option<f64>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some((m, sd))
}

fn run_one(cfg: &ExperimentConfig, c: &Cell) -> Result<CellResult, Error> {
    let [a, b, t] = load_splits(cfg, c.rate, c.rate, c.seed)?;
    let ec = cfg.eval.eval_config(c.seed);
    run_cell(&(a, b, t), c.method, &cfg.model, &cfg.train, &ec, cfg.eval.knn_k, c.rate, c.seed)
}

/// Runs the rate × method × seed grid on `jobs` threads. Failed cells are
/// reported and left out of the aggregates; the first failure (in grid
/// order) is returned after all outputs are written.
pub fn suite(cfg: &ExperimentConfig, jobs: usize) -> Result<()> {
    let mut cells = Vec::new();
    for &rate in &cfg.eval.rates {
        for &method in &cfg.eval.methods {
            for &seed in &cfg.eval.seeds {
                cells.push(Cell { rate, method, seed });
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::config("eval", "suite grid is empty").into());
    }
    let results: Mutex<Vec<Option<Result<CellResult, Error>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, cells.len()) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(c) = cells.get(k) else { break };
                let r = run_one(cfg, c);
                match &r {
                    Ok(r) => eprintln!("cell rate={} method={} seed={}: NLL {:.4}", c.rate, c.method.name(), c.seed, r.metrics.nll),
                    Err(e) => eprintln!("cell rate={} method={} seed={}: failed: {e}", c.rate, c.method.name(), c.seed),
                }
                results.lock().unwrap()[k] = Some(r);
            });
        }
    });
    let results: Vec<Result<CellResult, Error>> = results.into_inner().unwrap().into_iter().map(|r| r.expect("every cell ran")).collect();

    let dir = &cfg.output.dir;
    create_dir(dir)?;
    let mut w = csv_writer(&dir.join("suite_cells.csv"))?;
    w.write_record(["rate", "method", "seed", "status", "nll", "covariate_mse", "covariate_accuracy", "epochs", "error"])?;
    for (c, r) in cells.iter().zip(&results) {
        let rec = match r {
            Ok(r) => vec![
                c.rate.to_string(),
                c.method.name().into(),
                c.seed.to_string(),
                "ok".into(),
                r.metrics.nll.to_string(),
                r.metrics.covariate_mse.map_or(String::new(), |v| v.to_string()),
                r.metrics.covariate_accuracy.map_or(String::new(), |v| v.to_string()),
                r.epochs.to_string(),
                String::new(),
            ],
            Err(e) => vec![
                c.rate.to_string(),
                c.method.name().into(),
                c.seed.to_string(),
                "failed".into(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                e.to_string(),
            ],
        };
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut rows = Vec::new();
    for &rate in &cfg.eval.rates {
        for &method in &cfg.eval.methods {
            let ok: Vec<&CellResult> = cells
                .iter()
                .zip(&results)
                .filter(|(c, _)| c.rate == rate && c.method == method)
                .filter_map(|(_, r)| r.as_ref().ok())
                .collect();
            let failed = cfg.eval.seeds.len() - ok.len();
            let nll = mean_sd(&ok.iter().map(|r| r.metrics.nll).collect::<Vec<_>>());
            let mse = mean_sd(&ok.iter().filter_map(|r| r.metrics.covariate_mse).collect::<Vec<_>>());
            let acc = mean_sd(&ok.iter().filter_map(|r| r.metrics.covariate_accuracy).collect::<Vec<_>>());
            rows.push(Row {
                method,
                rate,
                seeds_ok: ok.len(),
                seeds_failed: failed,
                nll_mean: nll.map(|p| p.0),
                nll_sd: nll.map(|p| p.1),
                mse_mean: mse.map(|p| p.0),
                mse_sd: mse.map(|p| p.1),
                accuracy_mean: acc.map(|p| p.0),
                accuracy_sd: acc.map(|p| p.1),
            });
        }
    }
    let fmt = |m: Option<f64>, s: Option<f64>| match (m, s) {
        (Some(m), Some(s)) => format!("{m:.4} ± {s:.4}"),
        _ => String::new(),
    };
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    let mut w = csv_writer(&dir.join("suite_table.csv"))?;
    w.write_record([
        "method",
        "rate",
        "seeds_ok",
        "seeds_failed",
        "nll_mean",
        "nll_sd",
        "covariate_mse_mean",
        "covariate_mse_sd",
        "covariate_accuracy_mean",
        "covariate_accuracy_sd",
        "nll",
        "covariate_mse",
    ])?;
    for r in &rows {
        w.write_record([
            r.method.name().to_string(),
            r.rate.to_string(),
            r.seeds_ok.to_string(),
            r.seeds_failed.to_string(),
            opt(r.nll_mean),
            opt(r.nll_sd),
            opt(r.mse_mean),
            opt(r.mse_sd),
            opt(r.accuracy_mean),
            opt(r.accuracy_sd),
            fmt(r.nll_mean, r.nll_sd),
            fmt(r.mse_mean, r.mse_sd),
        ])?;
    }
    w.flush()?;
    let cell_docs: Vec<serde_json::Value> = cells
        .iter()
        .zip(&results)
        .map(|(c, r)| match r {
            Ok(r) => json!({"rate": c.rate, "method": c.method, "seed": c.seed, "metrics": r.metrics, "epochs": r.epochs}),
            Err(e) => json!({"rate": c.rate, "method": c.method, "seed": c.seed, "error": e.to_string()}),
        })
        .collect();
    write_json(&dir.join("suite.json"), &json!({"config": cfg, "cells": cell_docs, "table": rows}))?;

    let failures = results.iter().filter(|r| r.is_err()).count();
    eprintln!("{} of {} cells succeeded; table {}", cells.len() - failures, cells.len(), dir.join("suite_table.csv").display());
    match results.into_iter().find_map(Result::err) {
        Some(e) => Err(anyhow::Error::new(e).context(format!("{failures} suite cell(s) failed"))),
        None => Ok(()),
    }
}
