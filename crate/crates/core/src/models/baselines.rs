use serde::{Deserialize, Serialize};

use crate::data::{knn_impute, mean_impute, Dataset, ImputeStats};

/// How covariates reach the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Missing covariates are marginalised with the learned posterior.
    Ours,
    /// Training means or modes.
    Mean,
    /// k-nearest training rows.
    Knn,
    /// Missing entries set to 0 and treated as observed.
    Zero,
    /// Artificially hidden entries restored from the truth tables.
    Oracle,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Ours, Method::Mean, Method::Knn, Method::Zero, Method::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::Mean => "mean",
            Method::Knn => "knn",
            Method::Zero => "zero",
            Method::Oracle => "oracle",
        }
    }
}

/// Train, validation and test sets with covariates routed through a method.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodData {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Rewrites the covariates of all three sets. Imputers are fitted on the
/// training split. Imputed sets keep their covariate truth tables so the
/// imputation error stays measurable; the oracle restores hidden values and
/// drops the covariate truth.
pub fn apply_method(method: Method, train: &Dataset, validation: &Dataset, test: &Dataset, k: usize) -> MethodData {
    let stats = ImputeStats::fit(&train.x, &train.schema);
    let route = |d: &Dataset| -> Dataset {
        let mut out = d.clone();
        match method {
            Method::Ours => {}
            Method::Mean => out.x = mean_impute(&d.x, &stats),
            Method::Knn => out.x = knn_impute(&d.x, &train.x, &d.schema, k),
            Method::Zero => {
                out.x = d.x.zero_filled();
                out.x.mask.iter_mut().for_each(|m| *m = true);
            }
            Method::Oracle => {
                out.x = d.oracle_covariates();
                out.x_truth = None;
            }
        }
        out
    };
    MethodData {
        train: route(train),
        validation: route(validation),
        test: route(test),
    }
}
