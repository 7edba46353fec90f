//! Mean/mode and k-nearest-neighbour imputation of covariates.

use serde::{Deserialize, Serialize};

use crate::distributions::argmax_lowest;
use crate::schema::{ColumnKind, CovariateSchema, CovariateTable};

pub const DEFAULT_K: usize = 5;

/// Training-split column statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImputeStats {
    /// Mean (continuous) or modal category (categorical) per column; 0 for
    /// columns with no observed value.
    pub fill: Vec<f64>,
    /// Standard deviation of continuous columns, 1 where undefined or 0.
    pub scale: Vec<f64>,
}

impl ImputeStats {
    pub fn fit(x: &CovariateTable, schema: &CovariateSchema) -> Self {
        let mut fill = vec![0.0; schema.len()];
        let mut scale = vec![1.0; schema.len()];
        for (j, col) in schema.columns.iter().enumerate() {
            let vals: Vec<f64> = (0..x.rows()).filter_map(|i| x.value(i, j)).collect();
            if vals.is_empty() {
                continue;
            }
            match col.kind {
                ColumnKind::Continuous => {
                    let n = vals.len() as f64;
                    let m = vals.iter().sum::<f64>() / n;
                    let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
                    fill[j] = m;
                    if var > 0.0 {
                        scale[j] = var.sqrt();
                    }
                }
                ColumnKind::Categorical { cardinality } => {
                    let mut counts = vec![0.0; cardinality];
                    for v in vals {
                        counts[v as usize] += 1.0;
                    }
                    fill[j] = argmax_lowest(&counts) as f64;
                }
            }
        }
        Self { fill, scale }
    }
}

/// Fills missing entries with training means or modes; the result is fully
/// observed.
pub fn mean_impute(x: &CovariateTable, stats: &ImputeStats) -> CovariateTable {
    let mut out = x.clone();
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            if !x.observed(i, j) {
                out.values.set(i, j, stats.fill[j]);
            }
        }
    }
    out.mask.iter_mut().for_each(|m| *m = true);
    out
}

/// Mean distance over columns observed in both rows: squared standardised
/// difference for continuous columns, 0/1 mismatch for categorical ones.
/// Instance ids are ignored. `None` when no column is comparable.
fn distance(a: &CovariateTable, i: usize, b: &CovariateTable, k: usize, schema: &CovariateSchema, stats: &ImputeStats) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (j, col) in schema.columns.iter().enumerate() {
        if col.is_instance {
            continue;
        }
        let (Some(u), Some(v)) = (a.value(i, j), b.value(k, j)) else {
            continue;
        };
        sum += match col.kind {
            ColumnKind::Continuous => ((u - v) / stats.scale[j]).powi(2),
            ColumnKind::Categorical { .. } => f64::from(u != v),
        };
        count += 1;
    }
    (count > 0).then(|| sum / count as f64)
}

/// For each missing entry, averages (continuous) or majority-votes
/// (categorical, lowest id on ties) the `k` nearest training rows that
/// observe that column. Distance ties go to the earlier training row. Rows
/// sharing no observed column with any training row get [`mean_impute`]
/// values.
pub fn knn_impute(x: &CovariateTable, train_x: &CovariateTable, schema: &CovariateSchema, k: usize) -> CovariateTable {
    let k = k.max(1);
    let stats = ImputeStats::fit(train_x, schema);
    let mut out = mean_impute(x, &stats);
    for i in 0..x.rows() {
        if !x.mask[i * x.cols()..(i + 1) * x.cols()].contains(&false) {
            continue;
        }
        let mut near: Vec<(f64, usize)> = (0..train_x.rows())
            .filter_map(|t| distance(x, i, train_x, t, schema, &stats).map(|d| (d, t)))
            .collect();
        if near.is_empty() {
            continue;
        }
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (j, col) in schema.columns.iter().enumerate() {
            if x.observed(i, j) {
                continue;
            }
            let donors: Vec<f64> = near.iter().filter_map(|&(_, t)| train_x.value(t, j)).take(k).collect();
            if donors.is_empty() {
                continue;
            }
            let v = match col.kind {
                ColumnKind::Continuous => donors.iter().sum::<f64>() / donors.len() as f64,
                ColumnKind::Categorical { cardinality } => {
                    let mut votes = vec![0.0; cardinality];
                    for d in donors {
                        votes[d as usize] += 1.0;
                    }
                    argmax_lowest(&votes) as f64
                }
            };
            out.values.set(i, j, v);
        }
    }
    out
}
