//! Tables with per-entry observation masks and the covariate schema.

use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    Categorical { cardinality: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateColumn {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default)]
    pub is_time: bool,
    #[serde(default)]
    pub is_instance: bool,
    /// Level names of a categorical column, in category-id order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<String>>,
}

impl CovariateColumn {
    pub fn continuous(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Continuous,
            is_time: false,
            is_instance: false,
            levels: None,
        }
    }

    pub fn categorical(name: impl Into<String>, cardinality: usize) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Categorical { cardinality },
            is_time: false,
            is_instance: false,
            levels: None,
        }
    }

    pub fn time(name: impl Into<String>) -> Self {
        Self {
            is_time: true,
            ..Self::continuous(name)
        }
    }

    pub fn instance(name: impl Into<String>, cardinality: usize) -> Self {
        Self {
            is_instance: true,
            ..Self::categorical(name, cardinality)
        }
    }

    pub fn cardinality(&self) -> Option<usize> {
        match self.kind {
            ColumnKind::Categorical { cardinality } => Some(cardinality),
            ColumnKind::Continuous => None,
        }
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self.kind, ColumnKind::Continuous)
    }

    /// Width of this column after zero-fill encoding plus its mask bit.
    pub fn encoded_width(&self) -> usize {
        match self.kind {
            ColumnKind::Continuous => 2,
            ColumnKind::Categorical { cardinality } => cardinality + 1,
        }
    }
}

/// Column layout of the covariate table `X`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateSchema {
    pub columns: Vec<CovariateColumn>,
}

impl CovariateSchema {
    pub fn new(columns: Vec<CovariateColumn>) -> Result<Self> {
        let s = Self { columns };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let times = self.columns.iter().filter(|c| c.is_time).count();
        let ids = self.columns.iter().filter(|c| c.is_instance).count();
        if times > 1 || ids > 1 {
            return Err(Error::SchemaMismatch(
                "at most one time column and one instance-id column are allowed".into(),
            ));
        }
        for c in &self.columns {
            match c.kind {
                ColumnKind::Categorical { cardinality } => {
                    // an instance column may hold a single instance
                    let min = if c.is_instance { 1 } else { 2 };
                    if cardinality < min {
                        return Err(Error::SchemaMismatch(format!(
                            "categorical column `{}` has cardinality {cardinality}",
                            c.name
                        )));
                    }
                    if c.is_time {
                        return Err(Error::SchemaMismatch(format!(
                            "time column `{}` must be continuous",
                            c.name
                        )));
                    }
                }
                ColumnKind::Continuous => {
                    if c.is_instance {
                        return Err(Error::SchemaMismatch(format!(
                            "instance column `{}` must be categorical",
                            c.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn column(&self, j: usize) -> &CovariateColumn {
        &self.columns[j]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn continuous_columns(&self) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.columns[j].is_continuous()).collect()
    }

    pub fn categorical_columns(&self) -> Vec<usize> {
        (0..self.len()).filter(|&j| !self.columns[j].is_continuous()).collect()
    }

    /// Position of column `j` within its kind (continuous or categorical).
    pub fn kind_position(&self, j: usize) -> usize {
        let cont = self.columns[j].is_continuous();
        self.columns[..j]
            .iter()
            .filter(|c| c.is_continuous() == cont)
            .count()
    }

    pub fn time_column(&self) -> Option<usize> {
        self.columns.iter().position(|c| c.is_time)
    }

    pub fn instance_column(&self) -> Option<usize> {
        self.columns.iter().position(|c| c.is_instance)
    }

    pub fn encoded_width(&self) -> usize {
        self.columns.iter().map(CovariateColumn::encoded_width).sum()
    }
}

/// Values with a boolean observed-mask per entry. Missing entries keep
/// whatever value is stored; consumers must never read them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedTable {
    pub values: Tensor,
    pub mask: Vec<bool>,
}

/// Covariates `X`; categorical entries hold category ids as floats.
pub type CovariateTable = MaskedTable;

impl MaskedTable {
    pub fn new(values: Tensor, mask: Vec<bool>) -> Result<Self> {
        if values.len() != mask.len() {
            return Err(Error::DimensionMismatch(format!(
                "mask has {} entries, values have {}",
                mask.len(),
                values.len()
            )));
        }
        Ok(Self { values, mask })
    }

    pub fn fully_observed(values: Tensor) -> Self {
        let n = values.len();
        Self {
            values,
            mask: vec![true; n],
        }
    }

    pub fn empty(cols: usize) -> Self {
        Self {
            values: Tensor::zeros(0, cols),
            mask: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    #[inline]
    pub fn observed(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.cols() + j]
    }

    pub fn set_observed(&mut self, i: usize, j: usize, observed: bool) {
        let c = self.cols();
        self.mask[i * c + j] = observed;
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.get(i, j)
    }

    /// Value if observed.
    pub fn value(&self, i: usize, j: usize) -> Option<f64> {
        self.observed(i, j).then(|| self.values.get(i, j))
    }

    pub fn row_mask(&self, i: usize) -> &[bool] {
        let c = self.cols();
        &self.mask[i * c..(i + 1) * c]
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn missing_count(&self) -> usize {
        self.mask.len() - self.observed_count()
    }

    pub fn has_missing(&self) -> bool {
        self.mask.iter().any(|m| !m)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut mask = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            mask.extend_from_slice(self.row_mask(i));
        }
        Self {
            values: self.values.select_rows(idx),
            mask,
        }
    }

    /// Copy with every missing entry overwritten by `fill`; masks unchanged.
    pub fn zero_filled(&self) -> Self {
        let mut out = self.clone();
        for (v, m) in out.values.data_mut().iter_mut().zip(&self.mask) {
            if !m {
                *v = 0.0;
            }
        }
        out
    }

    pub fn concat_rows(parts: &[&MaskedTable]) -> Result<Self> {
        let cols = parts.first().map_or(0, |p| p.cols());
        let mut data = Vec::new();
        let mut mask = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != cols {
                return Err(Error::DimensionMismatch("column count differs".into()));
            }
            data.extend_from_slice(p.values.data());
            mask.extend_from_slice(&p.mask);
            rows += p.rows();
        }
        Ok(Self {
            values: Tensor::from_vec(rows, cols, data),
            mask,
        })
    }

    /// Checks that observed categorical entries are valid ids.
    pub fn check_against(&self, schema: &CovariateSchema) -> Result<()> {
        if self.cols() != schema.len() {
            return Err(Error::SchemaMismatch(format!(
                "table has {} columns, schema has {}",
                self.cols(),
                schema.len()
            )));
        }
        for (j, col) in schema.columns.iter().enumerate() {
            if let Some(card) = col.cardinality() {
                for i in 0..self.rows() {
                    if let Some(v) = self.value(i, j) {
                        if v < 0.0 || v.fract() != 0.0 || v as usize >= card {
                            return Err(Error::InvalidCategory {
                                value: v,
                                cardinality: card,
                            });
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
