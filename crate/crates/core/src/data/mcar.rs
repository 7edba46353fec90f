use rand::Rng;

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{stream, Generator, Stream};
use crate::schema::MaskedTable;

/// Keep-mask for one row: every entry is dropped with probability `rate`.
/// Redrawn until an entry among `eligible` that was observed before stays
/// observed (when there is one).
fn draw_row(rng: &mut Generator, rate: f64, before: &[bool], eligible: &[bool]) -> Vec<bool> {
    let can_keep = before.iter().zip(eligible).any(|(b, e)| *b && *e);
    loop {
        let keep: Vec<bool> = (0..before.len()).map(|_| !rng.random_bool(rate)).collect();
        if !can_keep || before.iter().zip(eligible).zip(&keep).any(|((b, e), k)| *b && *e && *k) {
            return keep;
        }
    }
}

fn apply(table: &mut MaskedTable, truth: &mut MaskedTable, i: usize, keep: &[bool], eligible: &[bool]) -> usize {
    let mut hidden = 0;
    for (j, (&k, &e)) in keep.iter().zip(eligible).enumerate() {
        if e && !k && table.observed(i, j) {
            table.set_observed(i, j, false);
            truth.values.set(i, j, table.get(i, j));
            truth.set_observed(i, j, true);
            table.values.set(i, j, 0.0);
            hidden += 1;
        }
    }
    hidden
}

fn truth_or_empty(t: &Option<MaskedTable>, like: &MaskedTable) -> MaskedTable {
    t.clone().unwrap_or_else(|| MaskedTable {
        values: crate::diffmath::Tensor::zeros(like.rows(), like.cols()),
        mask: vec![false; like.mask.len()],
    })
}

/// Hides entries completely at random, independently with `rate_y` on `Y`
/// and `rate_x` on `X` (the instance-id column is never hidden). Hidden
/// values move to the truth tables and read as 0. Each row keeps at least
/// one observed `Y` entry and one observed maskable `X` entry if it had one.
///
/// Draws depend only on the seed and table shapes, never on values.
pub fn inject_mcar(dataset: &Dataset, rate_x: f64, rate_y: f64, seed: u64) -> Result<Dataset> {
    for r in [rate_x, rate_y] {
        if !(0.0..1.0).contains(&r) {
            return Err(Error::Rate(r));
        }
    }
    let mut out = dataset.clone();
    let mut y_truth = truth_or_empty(&dataset.y_truth, &dataset.y);
    let mut x_truth = truth_or_empty(&dataset.x_truth, &dataset.x);
    let y_all = vec![true; dataset.y.cols()];
    let x_eligible: Vec<bool> = dataset.schema.columns.iter().map(|c| !c.is_instance).collect();
    let mut rng = stream(seed, Stream::Mask);
    let mut hidden = 0;
    for i in 0..dataset.rows() {
        let keep = draw_row(&mut rng, rate_y, dataset.y.row_mask(i), &y_all);
        hidden += apply(&mut out.y, &mut y_truth, i, &keep, &y_all);
        let keep = draw_row(&mut rng, rate_x, dataset.x.row_mask(i), &x_eligible);
        hidden += apply(&mut out.x, &mut x_truth, i, &keep, &x_eligible);
    }
    if hidden > 0 {
        out.y_truth = Some(y_truth);
        out.x_truth = Some(x_truth);
    }
    Ok(out)
}
