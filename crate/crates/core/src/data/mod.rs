//! Datasets: the rotated-digits generator, MCAR masking, CSV ingestion,
//! splits and the baseline imputers.

mod csvio;
mod digits;
mod impute;
mod mcar;
mod split;

use serde::{Deserialize, Serialize};

pub use csvio::{
    load_csv, load_longitudinal_csv, read_truth_csv, write_dataset_csv, write_truth_csv, ColumnRecord, ColumnRole,
    Manifest, Normalisation, ObservationRanges,
};
pub use digits::{
    builtin_glyph, generate_rotated_digits, read_pgm, transform_glyph, DigitsVariant, Normal, RotatedDigitsConfig,
    MIN_CONTRAST,
};
pub use impute::{knn_impute, mean_impute, ImputeStats, DEFAULT_K};
pub use mcar::inject_mcar;
pub use split::{apportion, split};

use crate::error::{Error, Result};
use crate::kernels::LongitudinalIndex;
use crate::schema::{CovariateSchema, CovariateTable, MaskedTable};

/// Observations `Y`, covariates `X` and, for artificially masked entries,
/// the values that were hidden.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: CovariateSchema,
    pub y_names: Vec<String>,
    pub y: MaskedTable,
    pub x: CovariateTable,
    /// Mask is true exactly where a value was hidden by masking.
    pub y_truth: Option<MaskedTable>,
    pub x_truth: Option<MaskedTable>,
}

impl Dataset {
    pub fn new(schema: CovariateSchema, y_names: Vec<String>, y: MaskedTable, x: CovariateTable) -> Result<Self> {
        let d = Self {
            schema,
            y_names,
            y,
            x,
            y_truth: None,
            x_truth: None,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        if self.y.rows() != self.x.rows() {
            return Err(Error::DimensionMismatch(format!(
                "Y has {} rows, X has {}",
                self.y.rows(),
                self.x.rows()
            )));
        }
        if self.y_names.len() != self.y.cols() {
            return Err(Error::DimensionMismatch("one name per observation column".into()));
        }
        self.x.check_against(&self.schema)?;
        for (t, base) in [(&self.y_truth, &self.y), (&self.x_truth, &self.x)] {
            if let Some(t) = t {
                if t.values.dims() != base.values.dims() {
                    return Err(Error::DimensionMismatch("truth table shape".into()));
                }
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.y.rows()
    }

    pub fn obs_dims(&self) -> usize {
        self.y.cols()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            schema: self.schema.clone(),
            y_names: self.y_names.clone(),
            y: self.y.select_rows(idx),
            x: self.x.select_rows(idx),
            y_truth: self.y_truth.as_ref().map(|t| t.select_rows(idx)),
            x_truth: self.x_truth.as_ref().map(|t| t.select_rows(idx)),
        }
    }

    /// Groups rows by the instance-id column.
    pub fn index(&self) -> Result<LongitudinalIndex> {
        LongitudinalIndex::from_table(&self.x, &self.schema)
    }

    /// `X` with every artificially masked entry restored from the truth
    /// table (the oracle condition).
    pub fn oracle_covariates(&self) -> CovariateTable {
        restore(&self.x, self.x_truth.as_ref())
    }

    /// `Y` with artificially masked entries restored.
    pub fn oracle_observations(&self) -> MaskedTable {
        restore(&self.y, self.y_truth.as_ref())
    }
}

fn restore(base: &MaskedTable, truth: Option<&MaskedTable>) -> MaskedTable {
    let mut out = base.clone();
    if let Some(t) = truth {
        for (k, m) in t.mask.iter().enumerate() {
            if *m {
                out.values.data_mut()[k] = t.values.data()[k];
                out.mask[k] = true;
            }
        }
    }
    out
}
