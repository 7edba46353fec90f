//! CSV tables described by a JSON manifest, and truth triples.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::schema::{ColumnKind, CovariateColumn, CovariateSchema, MaskedTable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    Observation,
    Continuous,
    Categorical,
    Time,
    Instance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnRecord {
    pub name: String,
    pub role: ColumnRole,
    /// Level names, in category-id order. Required for categorical columns;
    /// instance ids without levels are numbered by first appearance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<String>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Normalisation {
    #[serde(rename = "minmax-train")]
    MinMaxTrain,
    #[serde(rename = "none")]
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub columns: Vec<ColumnRecord>,
    #[serde(default = "default_normalisation")]
    pub normalisation: Normalisation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_column: Option<String>,
}

fn default_normalisation() -> Normalisation {
    Normalisation::MinMaxTrain
}

/// Per observation column `(min, max)` of the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationRanges {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ObservationRanges {
    pub fn fit(y: &MaskedTable) -> Self {
        let d = y.cols();
        let (mut min, mut max) = (vec![f64::INFINITY; d], vec![f64::NEG_INFINITY; d]);
        for i in 0..y.rows() {
            for j in 0..d {
                if let Some(v) = y.value(i, j) {
                    min[j] = min[j].min(v);
                    max[j] = max[j].max(v);
                }
            }
        }
        for j in 0..d {
            if !min[j].is_finite() {
                (min[j], max[j]) = (0.0, 1.0);
            }
        }
        Self { min, max }
    }

    /// Maps observed values to `(v - min) / (max - min)`; constant columns
    /// are only shifted.
    pub fn apply(&self, y: &mut MaskedTable) {
        for i in 0..y.rows() {
            for j in 0..y.cols() {
                if y.observed(i, j) {
                    let span = self.max[j] - self.min[j];
                    let span = if span > 0.0 { span } else { 1.0 };
                    y.values.set(i, j, (y.get(i, j) - self.min[j]) / span);
                }
            }
        }
    }
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))
    }

    fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Manifest(format!("column `{}` declared twice", c.name)));
            }
            match (c.role, &c.levels) {
                (ColumnRole::Categorical, None) => {
                    return Err(Error::Manifest(format!("categorical column `{}` needs levels", c.name)));
                }
                (ColumnRole::Categorical | ColumnRole::Instance, Some(_)) => {}
                (_, Some(_)) => {
                    return Err(Error::Manifest(format!("column `{}` cannot have levels", c.name)));
                }
                _ => {}
            }
        }
        for (field, role, name) in [
            ("time_column", ColumnRole::Time, &self.time_column),
            ("instance_column", ColumnRole::Instance, &self.instance_column),
        ] {
            if let Some(n) = name {
                match self.columns.iter().find(|c| &c.name == n) {
                    None => return Err(Error::Manifest(format!("{field} names unknown column `{n}`"))),
                    Some(c) if c.role != role && c.role != ColumnRole::Continuous && c.role != ColumnRole::Categorical => {
                        return Err(Error::Manifest(format!("{field} `{n}` has role {:?}", c.role)));
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    fn effective_role(&self, c: &ColumnRecord) -> ColumnRole {
        if self.time_column.as_deref() == Some(c.name.as_str()) {
            ColumnRole::Time
        } else if self.instance_column.as_deref() == Some(c.name.as_str()) {
            ColumnRole::Instance
        } else {
            c.role
        }
    }
}

fn canonical_levels(card: usize) -> Vec<String> {
    (0..card).map(|k| k.to_string()).collect()
}

/// Level names of a column; `None` in the schema stands for `"0".."k-1"`.
fn levels_of(col: &CovariateColumn) -> Vec<String> {
    col.levels.clone().unwrap_or_else(|| canonical_levels(col.cardinality().unwrap_or(0)))
}

fn schema_levels(levels: Vec<String>) -> Option<Vec<String>> {
    (levels != canonical_levels(levels.len())).then_some(levels)
}

/// Loads a table with the training split's own observation ranges.
pub fn load_longitudinal_csv(data_path: &Path, manifest_path: &Path) -> Result<Dataset> {
    Ok(load_csv(data_path, manifest_path, None)?.0)
}

/// Loads a table, min-max normalising observations with `ranges` when
/// given (validation and test splits) or with ranges fitted on this file.
/// Rows of one instance are gathered in order of first appearance.
pub fn load_csv(data_path: &Path, manifest_path: &Path, ranges: Option<&ObservationRanges>) -> Result<(Dataset, ObservationRanges)> {
    let manifest = Manifest::read(manifest_path)?;
    manifest.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(data_path)
        .map_err(|e| Error::Manifest(format!("{}: {e}", data_path.display())))?;
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut position = HashMap::new();
    for (k, h) in header.iter().enumerate() {
        if !manifest.columns.iter().any(|c| &c.name == h) {
            return Err(Error::Manifest(format!("unknown column `{h}` in {}", data_path.display())));
        }
        position.insert(h.clone(), k);
    }
    for c in &manifest.columns {
        if !position.contains_key(&c.name) {
            return Err(Error::Manifest(format!("column `{}` missing from {}", c.name, data_path.display())));
        }
    }

    let obs: Vec<&ColumnRecord> = manifest
        .columns
        .iter()
        .filter(|c| manifest.effective_role(c) == ColumnRole::Observation)
        .collect();
    let covs: Vec<(&ColumnRecord, ColumnRole)> = manifest
        .columns
        .iter()
        .map(|c| (c, manifest.effective_role(c)))
        .filter(|(_, r)| *r != ColumnRole::Observation)
        .collect();
    // instance ids without declared levels, numbered as they appear
    let mut discovered: Vec<Vec<String>> = covs.iter().map(|(c, _)| c.levels.clone().unwrap_or_default()).collect();

    let mut y_rows: Vec<Vec<Option<f64>>> = Vec::new();
    let mut x_rows: Vec<Vec<Option<f64>>> = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        let cell = |name: &str| rec.get(position[name]).unwrap_or("").trim();
        let parse = |name: &str| -> Result<Option<f64>> {
            let s = cell(name);
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<f64>().map(Some).map_err(|_| Error::Parse {
                row,
                column: name.to_string(),
                message: format!("`{s}` is not a number"),
            })
        };
        y_rows.push(obs.iter().map(|c| parse(&c.name)).collect::<Result<_>>()?);
        let mut xr = Vec::with_capacity(covs.len());
        for (k, (c, role)) in covs.iter().enumerate() {
            let v = match role {
                ColumnRole::Categorical | ColumnRole::Instance => {
                    let s = cell(&c.name);
                    if s.is_empty() {
                        if *role == ColumnRole::Instance {
                            return Err(Error::Parse {
                                row,
                                column: c.name.clone(),
                                message: "instance id is required".into(),
                            });
                        }
                        None
                    } else if let Some(id) = discovered[k].iter().position(|l| l == s) {
                        Some(id as f64)
                    } else if c.levels.is_none() {
                        discovered[k].push(s.to_string());
                        Some((discovered[k].len() - 1) as f64)
                    } else {
                        return Err(Error::Manifest(format!("level `{s}` of column `{}` is not declared", c.name)));
                    }
                }
                _ => parse(&c.name)?,
            };
            xr.push(v);
        }
        x_rows.push(xr);
    }

    let mut columns = Vec::with_capacity(covs.len());
    for (k, (c, role)) in covs.iter().enumerate() {
        let col = match role {
            ColumnRole::Continuous => CovariateColumn::continuous(&c.name),
            ColumnRole::Time => CovariateColumn::time(&c.name),
            ColumnRole::Categorical => CovariateColumn::categorical(&c.name, discovered[k].len()),
            ColumnRole::Instance => CovariateColumn::instance(&c.name, discovered[k].len().max(1)),
            ColumnRole::Observation => unreachable!(),
        };
        let levels = if matches!(role, ColumnRole::Categorical | ColumnRole::Instance) {
            schema_levels(discovered[k].clone())
        } else {
            None
        };
        columns.push(CovariateColumn { levels, ..col });
    }
    let schema = CovariateSchema::new(columns).map_err(|e| Error::Manifest(e.to_string()))?;

    // gather instances contiguously
    let mut order: Vec<usize> = (0..x_rows.len()).collect();
    if let Some(ic) = covs.iter().position(|(_, r)| *r == ColumnRole::Instance) {
        let mut first = HashMap::new();
        for (i, xr) in x_rows.iter().enumerate() {
            first.entry(xr[ic].unwrap() as usize).or_insert(i);
        }
        order.sort_by_key(|&i| first[&(x_rows[i][ic].unwrap() as usize)]);
    }
    let table = |rows: &[Vec<Option<f64>>], cols: usize| {
        let n = rows.len();
        let mut values = Tensor::zeros(n, cols);
        let mut mask = vec![false; n * cols];
        for (i, &src) in order.iter().enumerate() {
            for (j, v) in rows[src].iter().enumerate() {
                if let Some(v) = v {
                    values.set(i, j, *v);
                    mask[i * cols + j] = true;
                }
            }
        }
        MaskedTable { values, mask }
    };
    let mut y = table(&y_rows, obs.len());
    let x = table(&x_rows, covs.len());
    let fitted = match ranges {
        Some(r) => {
            if r.min.len() != obs.len() {
                return Err(Error::DimensionMismatch("observation ranges do not match the manifest".into()));
            }
            r.clone()
        }
        None => ObservationRanges::fit(&y),
    };
    if manifest.normalisation == Normalisation::MinMaxTrain {
        fitted.apply(&mut y);
    }
    let names = obs.iter().map(|c| c.name.clone()).collect();
    let d = Dataset::new(schema, names, y, x)?;
    Ok((d, fitted))
}

fn manifest_for(d: &Dataset) -> Manifest {
    let mut columns: Vec<ColumnRecord> = d
        .y_names
        .iter()
        .map(|n| ColumnRecord {
            name: n.clone(),
            role: ColumnRole::Observation,
            levels: None,
        })
        .collect();
    for c in &d.schema.columns {
        let (role, levels) = match c.kind {
            ColumnKind::Categorical { .. } if c.is_instance => (ColumnRole::Instance, Some(levels_of(c))),
            ColumnKind::Categorical { .. } => (ColumnRole::Categorical, Some(levels_of(c))),
            ColumnKind::Continuous if c.is_time => (ColumnRole::Time, None),
            ColumnKind::Continuous => (ColumnRole::Continuous, None),
        };
        columns.push(ColumnRecord {
            name: c.name.clone(),
            role,
            levels,
        });
    }
    Manifest {
        columns,
        normalisation: Normalisation::None,
        time_column: None,
        instance_column: None,
    }
}

fn format_cell(d: &Dataset, j: usize, v: f64) -> String {
    let c = d.schema.column(j);
    match c.kind {
        ColumnKind::Categorical { .. } => levels_of(c)[v as usize].clone(),
        ColumnKind::Continuous => v.to_string(),
    }
}

/// Writes the data CSV (missing entries empty) and, when `manifest_path`
/// is given, a manifest without normalisation so that loading the pair
/// reproduces `d` exactly.
pub fn write_dataset_csv(d: &Dataset, data_path: &Path, manifest_path: Option<&Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(data_path).map_err(|e| csv_io(data_path, e))?;
    let header: Vec<&str> = d.y_names.iter().map(String::as_str).chain(d.schema.columns.iter().map(|c| c.name.as_str())).collect();
    w.write_record(&header).map_err(|e| csv_io(data_path, e))?;
    for i in 0..d.rows() {
        let mut rec: Vec<String> = (0..d.obs_dims()).map(|j| d.y.value(i, j).map_or(String::new(), |v| v.to_string())).collect();
        for j in 0..d.schema.len() {
            rec.push(d.x.value(i, j).map_or(String::new(), |v| format_cell(d, j, v)));
        }
        w.write_record(&rec).map_err(|e| csv_io(data_path, e))?;
    }
    w.flush().map_err(|e| Error::io(data_path, e))?;
    if let Some(mp) = manifest_path {
        let text = serde_json::to_string_pretty(&manifest_for(d))?;
        std::fs::write(mp, text + "\n").map_err(|e| Error::io(mp, e))?;
    }
    Ok(())
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Manifest(format!("{}: {other:?}", path.display())),
    }
}

/// Writes `(row, column, value)` triples for every artificially hidden
/// entry of `Y` and `X`.
pub fn write_truth_csv(d: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(["row", "column", "value"]).map_err(|e| csv_io(path, e))?;
    for i in 0..d.rows() {
        if let Some(t) = &d.y_truth {
            for j in 0..t.cols() {
                if let Some(v) = t.value(i, j) {
                    w.write_record([i.to_string(), d.y_names[j].clone(), v.to_string()]).map_err(|e| csv_io(path, e))?;
                }
            }
        }
        if let Some(t) = &d.x_truth {
            for j in 0..t.cols() {
                if let Some(v) = t.value(i, j) {
                    w.write_record([i.to_string(), d.schema.column(j).name.clone(), format_cell(d, j, v)])
                        .map_err(|e| csv_io(path, e))?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Attaches truth triples written by [`write_truth_csv`] to `d`.
pub fn read_truth_csv(d: &mut Dataset, path: &Path) -> Result<()> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let empty = |t: &MaskedTable| MaskedTable {
        values: Tensor::zeros(t.rows(), t.cols()),
        mask: vec![false; t.mask.len()],
    };
    let mut yt = empty(&d.y);
    let mut xt = empty(&d.x);
    let mut any = false;
    for (r, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        let bad = |column: &str, message: String| Error::Parse {
            row,
            column: column.to_string(),
            message,
        };
        let (si, name, sv) = (rec.get(0).unwrap_or(""), rec.get(1).unwrap_or(""), rec.get(2).unwrap_or(""));
        let i: usize = si.parse().map_err(|_| bad("row", format!("`{si}` is not a row index")))?;
        if i >= d.rows() {
            return Err(bad("row", format!("row {i} out of range")));
        }
        if let Some(j) = d.y_names.iter().position(|n| n == name) {
            let v = sv.parse().map_err(|_| bad("value", format!("`{sv}` is not a number")))?;
            yt.values.set(i, j, v);
            yt.set_observed(i, j, true);
        } else if let Some(j) = d.schema.index_of(name) {
            let col = d.schema.column(j);
            let v = match col.kind {
                ColumnKind::Categorical { .. } => levels_of(col)
                    .iter()
                    .position(|l| l == sv)
                    .ok_or_else(|| Error::Manifest(format!("level `{sv}` of column `{name}` is not declared")))?
                    as f64,
                ColumnKind::Continuous => sv.parse().map_err(|_| bad("value", format!("`{sv}` is not a number")))?,
            };
            xt.values.set(i, j, v);
            xt.set_observed(i, j, true);
        } else {
            return Err(Error::Manifest(format!("unknown column `{name}` in {}", path.display())));
        }
        any = true;
    }
    if any {
        d.y_truth = Some(yt);
        d.x_truth = Some(xt);
    }
    d.validate()
}
