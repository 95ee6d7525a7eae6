use rand::seq::SliceRandom;

use super::TabularDataset;
use crate::error::{Error, Result};
use crate::rng::{stream, Rng, Stream};

/// Row indices into the labeled and unlabeled pools for one optimisation step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPair {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Per-epoch batches for a labeled and an unlabeled pool, shuffled from
/// `(seed, epoch)`. The longer pool (in batch count) is visited exactly once;
/// the shorter one cycles.
pub fn make_epoch_batches(
    labeled: &TabularDataset,
    unlabeled: &TabularDataset,
    batch_size_labeled: usize,
    batch_size_unlabeled: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<BatchPair>> {
    let mut rng = stream(seed, Stream::Batching, epoch);
    epoch_batches(
        labeled.n_rows(),
        unlabeled.n_rows(),
        batch_size_labeled,
        batch_size_unlabeled,
        &mut rng,
    )
}

pub fn epoch_batches(
    n_labeled: usize,
    n_unlabeled: usize,
    batch_size_labeled: usize,
    batch_size_unlabeled: usize,
    rng: &mut Rng,
) -> Result<Vec<BatchPair>> {
    if batch_size_labeled < 2 || batch_size_unlabeled < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch sizes must be >= 2, got {batch_size_labeled}/{batch_size_unlabeled}"
        )));
    }
    let mut perm_l: Vec<usize> = (0..n_labeled).collect();
    let mut perm_u: Vec<usize> = (0..n_unlabeled).collect();
    perm_l.shuffle(rng);
    perm_u.shuffle(rng);

    let nb_l = n_labeled.div_ceil(batch_size_labeled);
    let nb_u = n_unlabeled.div_ceil(batch_size_unlabeled);
    let n_batches = nb_l.max(nb_u);

    let slice = |perm: &[usize], size: usize, b: usize, cycles: bool| -> Vec<usize> {
        let n = perm.len();
        if n == 0 {
            return Vec::new();
        }
        if cycles {
            (0..size.min(n)).map(|j| perm[(b * size + j) % n]).collect()
        } else {
            perm[b * size..((b + 1) * size).min(n)].to_vec()
        }
    };
    Ok((0..n_batches)
        .map(|b| BatchPair {
            labeled: slice(&perm_l, batch_size_labeled, b, nb_l < n_batches),
            unlabeled: slice(&perm_u, batch_size_unlabeled, b, nb_u < n_batches),
        })
        .collect())
}
