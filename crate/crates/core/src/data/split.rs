use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::TabularDataset;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub labeled_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
    /// Absolute labeled-set size; overrides `labeled_fraction` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labeled_count: Option<usize>,
}

impl SplitSpec {
    pub fn new(labeled_fraction: f64, test_fraction: f64, seed: u64) -> Self {
        Self {
            labeled_fraction,
            test_fraction,
            seed,
            labeled_count: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "labeled_fraction {} outside (0, 1]",
                self.labeled_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::InvalidArgument(format!(
                "test_fraction {} outside [0, 1)",
                self.test_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DataSplit {
    pub labeled: TabularDataset,
    /// Labels moved to `held_out_labels`; never visible to training.
    pub unlabeled: TabularDataset,
    pub test: TabularDataset,
}

/// Largest-remainder allocation of `total` across classes proportional to `counts`.
fn allocate(counts: &[usize], total: usize) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return vec![0; counts.len()];
    }
    let exact: Vec<f64> = counts
        .iter()
        .map(|&c| total as f64 * c as f64 / n as f64)
        .collect();
    let mut alloc: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut remaining = total.saturating_sub(alloc.iter().sum());
    let mut order: Vec<usize> = (0..counts.len()).collect();
    // Stable sort keeps lower class indices first among equal remainders.
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
    });
    for &c in order.iter().cycle().take(counts.len() * 2) {
        if remaining == 0 {
            break;
        }
        if alloc[c] < counts[c] {
            alloc[c] += 1;
            remaining -= 1;
        }
    }
    alloc
}

/// Draws `alloc[c]` rows from each class's members; returns (picked, rest), both sorted.
fn stratified_pick(
    members: &[Vec<usize>],
    alloc: &[usize],
    rng: &mut crate::rng::Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut picked = Vec::new();
    let mut rest = Vec::new();
    for (class_rows, &take) in members.iter().zip(alloc) {
        let mut rows = class_rows.clone();
        rows.shuffle(rng);
        picked.extend_from_slice(&rows[..take]);
        rest.extend_from_slice(&rows[take..]);
    }
    picked.sort_unstable();
    rest.sort_unstable();
    (picked, rest)
}

fn members_by_class(labels: &[usize], rows: &[usize], n_classes: usize) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); n_classes];
    for &r in rows {
        members[labels[r]].push(r);
    }
    members
}

/// Splits a labeled dataset into labeled / unlabeled / test partitions.
///
/// The test partition (stratified, `test_fraction`) is drawn first from its own
/// random stream, so it does not depend on how many rows are labeled. The
/// labeled subset is then a stratified sample of the remaining pool.
pub fn split(ds: &TabularDataset, spec: &SplitSpec) -> Result<DataSplit> {
    spec.validate()?;
    let labels = ds
        .labels
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("split requires a labeled dataset".into()))?;
    let all: Vec<usize> = (0..ds.n_rows()).collect();

    let members = members_by_class(labels, &all, ds.n_classes);
    let counts: Vec<usize> = members.iter().map(Vec::len).collect();
    let n_test = (spec.test_fraction * ds.n_rows() as f64).round() as usize;
    let mut test_rng = stream(spec.seed, Stream::Split, 0);
    let (test_rows, pool) = stratified_pick(&members, &allocate(&counts, n_test), &mut test_rng);

    let members = members_by_class(labels, &pool, ds.n_classes);
    let counts: Vec<usize> = members.iter().map(Vec::len).collect();
    let n_labeled = match spec.labeled_count {
        Some(c) if c > pool.len() => {
            return Err(Error::InvalidArgument(format!(
                "labeled_count {c} exceeds the training pool ({})",
                pool.len()
            )))
        }
        Some(c) => c,
        None => (spec.labeled_fraction * pool.len() as f64).round() as usize,
    };
    let alloc = allocate(&counts, n_labeled);
    if let Some(class) = (0..counts.len()).find(|&c| counts[c] > 0 && alloc[c] == 0) {
        return Err(Error::EmptyClass { class });
    }
    let mut lab_rng = stream(spec.seed, Stream::Split, 1);
    let (labeled_rows, unlabeled_rows) = stratified_pick(&members, &alloc, &mut lab_rng);

    Ok(DataSplit {
        labeled: ds.take(&labeled_rows),
        unlabeled: ds.take(&unlabeled_rows).hide_labels(),
        test: ds.take(&test_rows),
    })
}
