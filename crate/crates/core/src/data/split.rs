use rand::seq::SliceRandom;

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

/// Largest-remainder apportionment of `n` units; ties go to the earlier part.
pub fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = n.saturating_sub(counts.iter().sum());
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    counts
}

/// Splits rows, or whole instances when `by_instance`, into train,
/// validation and test parts. Each part keeps the original row order.
pub fn split(dataset: &Dataset, fractions: [f64; 3], by_instance: bool, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config("data.split", "fractions must be non-negative and sum to 1"));
    }
    let groups: Vec<Vec<usize>> = if by_instance {
        if dataset.schema.instance_column().is_none() {
            return Err(Error::TooFewInstances("the dataset has no instance-id column".into()));
        }
        dataset.index()?.ranges.into_iter().map(|r| r.collect()).collect()
    } else {
        (0..dataset.rows()).map(|i| vec![i]).collect()
    };
    let counts = apportion(groups.len(), &fractions);
    for (k, (&c, &f)) in counts.iter().zip(&fractions).enumerate() {
        if f > 0.0 && c == 0 {
            let what = if by_instance { "instances" } else { "rows" };
            let msg = format!("{} {what} leave part {k} of the split empty", groups.len());
            return Err(if by_instance {
                Error::TooFewInstances(msg)
            } else {
                Error::InvalidArgument(msg)
            });
        }
    }
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(&mut stream(seed, Stream::Split));
    let mut parts = Vec::with_capacity(3);
    let mut start = 0;
    for c in counts {
        let mut chosen = order[start..start + c].to_vec();
        chosen.sort_unstable();
        start += c;
        let rows: Vec<usize> = chosen.iter().flat_map(|&g| groups[g].iter().copied()).collect();
        parts.push(dataset.select_rows(&rows));
    }
    let test = parts.pop().unwrap();
    let valid = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    Ok((train, valid, test))
}
