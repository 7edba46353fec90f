use std::ops::Range;

use rand::Rng;

use crate::diffmath::{Tape, Tensor, Var};
use crate::distributions::{
    kl_categorical_var, kl_gaussian_var, posterior_prior_kl, ColumnPrior, CovariatePosterior, CovariatePrior,
    EntryDistribution,
};
use crate::error::{Error, Result};
use crate::networks::CovariatePosteriorVars;
use crate::rng::{standard_normal, Generator};
use crate::schema::{ColumnKind, CovariateSchema, CovariateTable};

pub const DEFAULT_ENUMERATION_CAP: usize = 64;

/// Missing entries of one row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RowPlan {
    /// `(column, cardinality)` of missing categorical entries.
    pub categorical: Vec<(usize, usize)>,
    /// Columns of missing continuous entries.
    pub continuous: Vec<usize>,
}

/// How the expectation over missing covariates is taken.
#[derive(Clone, Debug, PartialEq)]
pub struct MissingExpectationPlan {
    pub rows: Vec<RowPlan>,
    pub enumeration_cap: usize,
    pub mc_samples: usize,
}

impl MissingExpectationPlan {
    pub fn new(x: &CovariateTable, schema: &CovariateSchema, enumeration_cap: usize, mc_samples: usize) -> Result<Self> {
        if mc_samples == 0 {
            return Err(Error::InvalidArgument("at least one Monte-Carlo sample is required".into()));
        }
        let rows = (0..x.rows())
            .map(|i| {
                let mut p = RowPlan::default();
                for j in 0..schema.len() {
                    if x.observed(i, j) {
                        continue;
                    }
                    match schema.column(j).kind {
                        ColumnKind::Continuous => p.continuous.push(j),
                        ColumnKind::Categorical { cardinality } => p.categorical.push((j, cardinality)),
                    }
                }
                p
            })
            .collect();
        Ok(Self {
            rows,
            enumeration_cap,
            mc_samples,
        })
    }

    /// Joint number of categorical assignments over the whole table
    /// (saturating).
    pub fn joint_size(&self) -> usize {
        self.rows
            .iter()
            .flat_map(|r| r.categorical.iter())
            .fold(1usize, |acc, (_, k)| acc.saturating_mul(*k))
    }
}

/// Cartesian product of `0..cards[k]`, last index fastest.
pub fn enumerate_assignments(cards: &[usize], cap: usize) -> Result<Vec<Vec<usize>>> {
    let size = cards.iter().fold(1usize, |a, k| a.saturating_mul(*k));
    if size > cap {
        return Err(Error::EnumerationOverflow { size, cap });
    }
    let mut out = Vec::with_capacity(size);
    let mut cur = vec![0; cards.len()];
    for _ in 0..size {
        out.push(cur.clone());
        for k in (0..cards.len()).rev() {
            cur[k] += 1;
            if cur[k] < cards[k] {
                break;
            }
            cur[k] = 0;
        }
    }
    Ok(out)
}

/// `E_q[f(X)]` for a whole table: exact sum over the joint categorical
/// assignments weighted by posterior probabilities, with continuous missing
/// entries reparameterised afresh in every branch and sample.
pub fn expect_over_missing_covariates<F>(
    x: &CovariateTable,
    posterior: &CovariatePosterior,
    plan: &MissingExpectationPlan,
    rng: &mut Generator,
    mut term_fn: F,
) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if plan.rows.len() != x.rows() || posterior.rows.len() != x.rows() {
        return Err(Error::DimensionMismatch("plan, posterior and table disagree on rows".into()));
    }
    let mut cat_entries = Vec::new();
    for (i, r) in plan.rows.iter().enumerate() {
        for &(j, k) in &r.categorical {
            cat_entries.push((i, j, k));
        }
    }
    let cards: Vec<usize> = cat_entries.iter().map(|e| e.2).collect();
    let assignments = enumerate_assignments(&cards, plan.enumeration_cap)?;
    let entry = |i: usize, j: usize| -> Result<&EntryDistribution> {
        posterior.rows[i][j]
            .as_ref()
            .ok_or_else(|| Error::SchemaMismatch(format!("no posterior for missing entry ({i}, {j})")))
    };
    let mut total = 0.0;
    for a in &assignments {
        let mut w = 1.0;
        let mut inst = x.values.clone();
        for (&(i, j, _), &k) in cat_entries.iter().zip(a) {
            match entry(i, j)? {
                EntryDistribution::Categorical { probs } => w *= probs[k],
                _ => return Err(Error::SchemaMismatch(format!("entry ({i}, {j}) is not categorical"))),
            }
            inst.set(i, j, k as f64);
        }
        let mut acc = 0.0;
        for _ in 0..plan.mc_samples {
            for (i, r) in plan.rows.iter().enumerate() {
                for &j in &r.continuous {
                    match entry(i, j)? {
                        EntryDistribution::Gaussian { mean, variance } => {
                            inst.set(i, j, mean + variance.sqrt() * standard_normal(rng));
                        }
                        _ => return Err(Error::SchemaMismatch(format!("entry ({i}, {j}) is not continuous"))),
                    }
                }
            }
            acc += term_fn(&inst)?;
        }
        total += w * acc / plan.mc_samples as f64;
    }
    Ok(total)
}

/// `Σ_i KL[q(x_i^u | x_i^o) ‖ p_λ(x_i^u)] · scale`.
pub fn covariate_kl_term(posterior: &CovariatePosterior, prior: &CovariatePrior, schema: &CovariateSchema, scale: f64) -> Result<f64> {
    prior.validate(schema)?;
    for row in &posterior.rows {
        if row.len() != schema.len() {
            return Err(Error::SchemaMismatch("posterior row width differs from schema".into()));
        }
    }
    Ok(posterior_prior_kl(posterior, prior)? * scale)
}

/// In-graph covariate KL over the missing entries of `x` (unscaled).
pub fn covariate_kl_var(
    tape: &mut Tape,
    post: &CovariatePosteriorVars,
    x: &CovariateTable,
    schema: &CovariateSchema,
    prior: &CovariatePrior,
) -> Result<Var> {
    let (n, q) = (x.rows(), schema.len());
    let mut acc = tape.constant_scalar(0.0);
    let cont_mask = Tensor::from_fn(n, q, |i, j| {
        if schema.column(j).is_continuous() && !x.observed(i, j) {
            1.0
        } else {
            0.0
        }
    });
    if cont_mask.sum() > 0.0 {
        let mut pm = vec![0.0; q];
        let mut plv = vec![0.0; q];
        for (j, c) in prior.columns.iter().enumerate() {
            if let ColumnPrior::Gaussian { mean, variance } = c {
                pm[j] = *mean;
                plv[j] = variance.ln();
            }
        }
        let pm = tape.constant(Tensor::row(&pm));
        let plv = tape.constant(Tensor::row(&plv));
        let kl = kl_gaussian_var(tape, post.mean, post.log_var, pm, plv);
        let mask = tape.constant(cont_mask);
        let masked = tape.mul(kl, mask);
        let s = tape.sum(masked);
        acc = tape.add(acc, s);
    }
    for j in 0..q {
        let ColumnKind::Categorical { .. } = schema.column(j).kind else { continue };
        let miss = Tensor::from_fn(n, 1, |i, _| if x.observed(i, j) { 0.0 } else { 1.0 });
        if miss.sum() == 0.0 {
            continue;
        }
        let lq = post.log_probs[j].ok_or_else(|| Error::SchemaMismatch(format!("column {j} has no posterior head")))?;
        let ColumnPrior::Categorical { probs } = &prior.columns[j] else {
            return Err(Error::SchemaMismatch(format!("prior for column {j} is not categorical")));
        };
        let lp: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        let lp = tape.constant(Tensor::row(&lp));
        let kl = kl_categorical_var(tape, lq, lp);
        let m = tape.constant(miss);
        let masked = tape.mul(kl, m);
        let s = tape.sum(masked);
        acc = tape.add(acc, s);
    }
    Ok(acc)
}

/// Instantiated covariates for every expectation branch of every group.
///
/// Stacked rows `branch_ranges[b]` hold one full copy of group
/// `branch_group[b]`'s rows; `weight[b]` is the branch probability divided by
/// the number of Monte-Carlo samples, so weights of one group sum to one.
#[derive(Clone, Debug)]
pub struct Expansion {
    /// `[T, Q]`.
    pub x: Var,
    /// Batch row of each stacked row.
    pub row_source: Vec<usize>,
    /// Branch of each stacked row.
    pub row_branch: Vec<usize>,
    pub branch_ranges: Vec<Range<usize>>,
    pub branch_group: Vec<usize>,
    /// `[B_branches, 1]`.
    pub weight: Var,
}

impl Expansion {
    pub fn branches(&self) -> usize {
        self.branch_ranges.len()
    }

    /// Branch weights repeated for every stacked row.
    pub fn row_weights(&self, tape: &mut Tape) -> Var {
        tape.gather_rows(self.weight, &self.row_branch)
    }
}

struct BranchDraft {
    group: usize,
    /// `(row, column, category)` assignments that carry gradient.
    graded: Vec<(usize, usize, usize)>,
    /// Sampled assignments (no gradient).
    sampled: Vec<(usize, usize, usize)>,
    log_offset: f64,
}

/// Builds the branches for `groups` of batch rows. With `post = None`
/// missing entries are zero-filled and every group gets `mc` identical
/// branches. Groups whose joint categorical enumeration exceeds `cap` draw
/// one categorical assignment per sample from the posterior instead.
pub fn expand_groups(
    tape: &mut Tape,
    x: &CovariateTable,
    schema: &CovariateSchema,
    post: Option<&CovariatePosteriorVars>,
    groups: &[Vec<usize>],
    cap: usize,
    mc: usize,
    rng: &mut Generator,
) -> Result<Expansion> {
    if mc == 0 {
        return Err(Error::InvalidArgument("at least one Monte-Carlo sample is required".into()));
    }
    let q = schema.len();
    let mut drafts: Vec<BranchDraft> = Vec::new();
    for (g, rows) in groups.iter().enumerate() {
        let mut cat = Vec::new();
        if post.is_some() {
            for &i in rows {
                for j in 0..q {
                    if let ColumnKind::Categorical { cardinality } = schema.column(j).kind {
                        if !x.observed(i, j) {
                            cat.push((i, j, cardinality));
                        }
                    }
                }
            }
        }
        let cards: Vec<usize> = cat.iter().map(|c| c.2).collect();
        let ln_mc = (mc as f64).ln();
        match enumerate_assignments(&cards, cap) {
            Ok(list) => {
                for a in list {
                    let graded: Vec<_> = cat.iter().zip(&a).map(|(&(i, j, _), &k)| (i, j, k)).collect();
                    for _ in 0..mc {
                        drafts.push(BranchDraft {
                            group: g,
                            graded: graded.clone(),
                            sampled: Vec::new(),
                            log_offset: -ln_mc,
                        });
                    }
                }
            }
            Err(Error::EnumerationOverflow { .. }) => {
                let post = post.expect("categorical entries imply a posterior");
                for _ in 0..mc {
                    let mut sampled = Vec::with_capacity(cat.len());
                    for &(i, j, _) in &cat {
                        let lp = tape.value(post.log_probs[j].expect("categorical head"));
                        let u: f64 = rng.random();
                        let mut acc = 0.0;
                        let mut k = lp.cols() - 1;
                        for (kk, v) in lp.row_slice(i).iter().enumerate() {
                            acc += v.exp();
                            if u < acc {
                                k = kk;
                                break;
                            }
                        }
                        sampled.push((i, j, k));
                    }
                    drafts.push(BranchDraft {
                        group: g,
                        graded: Vec::new(),
                        sampled,
                        log_offset: -ln_mc,
                    });
                }
            }
            Err(e) => return Err(e),
        }
    }

    let total_rows: usize = drafts.iter().map(|d| groups[d.group].len()).sum();
    let mut base = Tensor::zeros(total_rows, q);
    let mut cont_mask = Tensor::zeros(total_rows, q);
    let mut eps = Tensor::zeros(total_rows, q);
    let mut row_source = Vec::with_capacity(total_rows);
    let mut row_branch = Vec::with_capacity(total_rows);
    let mut branch_ranges = Vec::with_capacity(drafts.len());
    let mut t = 0;
    for (b, d) in drafts.iter().enumerate() {
        let start = t;
        for &i in &groups[d.group] {
            for j in 0..q {
                if x.observed(i, j) {
                    base.set(t, j, x.get(i, j));
                } else if post.is_some() && schema.column(j).is_continuous() {
                    cont_mask.set(t, j, 1.0);
                    eps.set(t, j, standard_normal(rng));
                }
            }
            for &(ri, j, k) in d.graded.iter().chain(&d.sampled) {
                if ri == i {
                    base.set(t, j, k as f64);
                }
            }
            row_source.push(i);
            row_branch.push(b);
            t += 1;
        }
        branch_ranges.push(start..t);
    }

    let mut xv = tape.constant(base);
    if let Some(p) = post {
        if cont_mask.sum() > 0.0 {
            let mu = tape.gather_rows(p.mean, &row_source);
            let lv = tape.gather_rows(p.log_var, &row_source);
            let half = tape.scale(lv, 0.5);
            let sd = tape.exp(half);
            let e = tape.constant(eps);
            let noise = tape.mul(sd, e);
            let draw = tape.add(mu, noise);
            let m = tape.constant(cont_mask);
            let draw = tape.mul(draw, m);
            xv = tape.add(xv, draw);
        }
    }

    let nb = drafts.len();
    let offsets = Tensor::from_fn(nb, 1, |b, _| drafts[b].log_offset);
    let mut logw = tape.constant(offsets);
    if let Some(p) = post {
        for j in 0..q {
            let Some(lq) = p.log_probs[j] else { continue };
            let per_branch: Vec<Vec<(usize, usize)>> = drafts
                .iter()
                .map(|d| d.graded.iter().filter(|e| e.1 == j).map(|e| (e.0, e.2)).collect())
                .collect();
            let slots = per_branch.iter().map(Vec::len).max().unwrap_or(0);
            for s in 0..slots {
                let idx: Vec<(usize, usize)> = per_branch.iter().map(|v| v.get(s).copied().unwrap_or((0, 0))).collect();
                let on = Tensor::from_fn(nb, 1, |b, _| if per_branch[b].len() > s { 1.0 } else { 0.0 });
                let g = tape.gather(lq, &idx);
                let on = tape.constant(on);
                let g = tape.mul(g, on);
                logw = tape.add(logw, g);
            }
        }
    }
    let weight = tape.exp(logw);
    Ok(Expansion {
        x: xv,
        row_source,
        row_branch,
        branch_ranges,
        branch_group: drafts.iter().map(|d| d.group).collect(),
        weight,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use crate::schema::CovariateColumn;

    fn schema() -> CovariateSchema {
        CovariateSchema::new(vec![CovariateColumn::categorical("b", 2), CovariateColumn::continuous("c")]).unwrap()
    }

    #[test]
    fn enumeration_order_and_cap() {
        let a = enumerate_assignments(&[2, 3], 64).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(a[0], vec![0, 0]);
        assert_eq!(a[1], vec![0, 1]);
        assert_eq!(a[5], vec![1, 2]);
        assert_eq!(enumerate_assignments(&[], 1).unwrap(), vec![Vec::<usize>::new()]);
        assert!(matches!(
            enumerate_assignments(&[3, 4], 10),
            Err(Error::EnumerationOverflow { size: 12, cap: 10 })
        ));
    }

    #[test]
    fn no_missing_evaluates_once() {
        let s = schema();
        let x = CovariateTable::fully_observed(Tensor::from_rows(&[vec![1.0, 0.5]]));
        let plan = MissingExpectationPlan::new(&x, &s, 64, 3).unwrap();
        let post = CovariatePosterior { rows: vec![vec![None, None]] };
        let mut calls = 0;
        let v = expect_over_missing_covariates(&x, &post, &plan, &mut stream(1, Stream::Eval), |t| {
            calls += 1;
            Ok(t.get(0, 0) + t.get(0, 1))
        })
        .unwrap();
        assert_eq!(calls, 3);
        assert!((v - 1.5).abs() < 1e-15);
    }

    #[test]
    fn two_branch_binary_expectation() {
        let s = schema();
        let x = CovariateTable::new(Tensor::from_rows(&[vec![0.0, 0.5]]), vec![false, true]).unwrap();
        let plan = MissingExpectationPlan::new(&x, &s, 64, 1).unwrap();
        let post = CovariatePosterior {
            rows: vec![vec![Some(EntryDistribution::Categorical { probs: vec![0.3, 0.7] }), None]],
        };
        let f = |t: &Tensor| Ok(if t.get(0, 0) == 0.0 { 2.0 } else { 10.0 });
        let v = expect_over_missing_covariates(&x, &post, &plan, &mut stream(1, Stream::Eval), f).unwrap();
        assert!((v - (0.3 * 2.0 + 0.7 * 10.0)).abs() < 1e-14);
    }

    #[test]
    fn joint_cap_breach() {
        let s = CovariateSchema::new(vec![CovariateColumn::categorical("a", 3), CovariateColumn::categorical("b", 4)]).unwrap();
        let x = CovariateTable::new(Tensor::zeros(1, 2), vec![false, false]).unwrap();
        let plan = MissingExpectationPlan::new(&x, &s, 10, 1).unwrap();
        let post = CovariatePosterior {
            rows: vec![vec![
                Some(EntryDistribution::Categorical { probs: vec![1.0 / 3.0; 3] }),
                Some(EntryDistribution::Categorical { probs: vec![0.25; 4] }),
            ]],
        };
        let r = expect_over_missing_covariates(&x, &post, &plan, &mut stream(1, Stream::Eval), |_| Ok(0.0));
        assert!(matches!(r, Err(Error::EnumerationOverflow { size: 12, cap: 10 })));
    }

    #[test]
    fn covariate_kl_cases() {
        let s = CovariateSchema::new(vec![CovariateColumn::continuous("c")]).unwrap();
        let prior = CovariatePrior {
            columns: vec![ColumnPrior::Gaussian { mean: 0.0, variance: 1.0 }],
        };
        let post = CovariatePosterior {
            rows: vec![vec![Some(EntryDistribution::Gaussian { mean: 1.0, variance: 1.0 })], vec![None]],
        };
        assert!((covariate_kl_term(&post, &prior, &s, 3.0).unwrap() - 1.5).abs() < 1e-15);
        let same = CovariatePosterior {
            rows: vec![vec![Some(EntryDistribution::Gaussian { mean: 0.0, variance: 1.0 })]],
        };
        assert_eq!(covariate_kl_term(&same, &prior, &s, 1.0).unwrap(), 0.0);
    }
}
