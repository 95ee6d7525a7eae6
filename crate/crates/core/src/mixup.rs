//! Interpolation of hidden representations.
//!
//! `within_class_mixup` pairs each row with another row of the same (pseudo-)label,
//! so the mixed row keeps a hard label. `random_mixup` pairs rows regardless of
//! label and is used by the predictor and by the random-mixing ablation.

use rand::seq::SliceRandom;
use rand::RngExt;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;

/// Partner index for every row; the mixed row `i` is
/// `λ_i · h[i] + (1 − λ_i) · h[partner[i]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pairing {
    pub partner: Vec<usize>,
}

/// `n` i.i.d. draws from `U(0, alpha)`.
pub fn sample_lambda(alpha: f64, n: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "mixup alpha {alpha} outside [0, 1]"
        )));
    }
    Ok((0..n).map(|_| alpha * rng.random::<f64>()).collect())
}

pub fn apply_mix(h: &Matrix, partner: &[usize], lambda: &[f64]) -> Matrix {
    let mut out = Matrix::zeros(h.rows(), h.cols());
    for i in 0..h.rows() {
        let l = lambda[i];
        let (a, b) = (h.row(i), h.row(partner[i]));
        for (o, (x, y)) in out.row_mut(i).iter_mut().zip(a.iter().zip(b)) {
            *o = l * x + (1.0 - l) * y;
        }
    }
    out
}

/// Uniform random derangement of `members` (identity for a single member).
fn derange(members: &[usize], rng: &mut Rng) -> Vec<usize> {
    if members.len() < 2 {
        return members.to_vec();
    }
    let mut perm: Vec<usize> = (0..members.len()).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm.iter().map(|&p| members[p]).collect();
        }
    }
}

/// Partners restricted to rows sharing the same label. Each class is
/// deranged independently; rows alone in their class pair with themselves.
pub fn within_class_pairing(labels: &[usize], rng: &mut Rng) -> Pairing {
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut members = vec![Vec::new(); n_classes];
    for (i, &y) in labels.iter().enumerate() {
        members[y].push(i);
    }
    let mut partner = vec![0; labels.len()];
    for class_rows in &members {
        for (&row, p) in class_rows.iter().zip(derange(class_rows, rng)) {
            partner[row] = p;
        }
    }
    Pairing { partner }
}

/// Each row draws a partner uniformly among the other rows.
pub fn random_pairing(n: usize, rng: &mut Rng) -> Result<Pairing> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "random mixup needs at least 2 rows, got {n}"
        )));
    }
    let partner = (0..n)
        .map(|i| {
            let j = rng.random_range(0..n - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        })
        .collect();
    Ok(Pairing { partner })
}

pub fn within_class_mixup(
    h: &Matrix,
    labels: &[usize],
    lambda: &[f64],
    rng: &mut Rng,
) -> Result<(Matrix, Pairing)> {
    if labels.len() != h.rows() || lambda.len() != h.rows() {
        return Err(Error::ShapeMismatch {
            context: "within_class_mixup",
            expected: (h.rows(), 1),
            found: (labels.len(), lambda.len()),
        });
    }
    let pairing = within_class_pairing(labels, rng);
    Ok((apply_mix(h, &pairing.partner, lambda), pairing))
}

pub fn random_mixup(h: &Matrix, lambda: &[f64], rng: &mut Rng) -> Result<(Matrix, Pairing)> {
    if lambda.len() != h.rows() {
        return Err(Error::ShapeMismatch {
            context: "random_mixup",
            expected: (h.rows(), 1),
            found: (lambda.len(), 1),
        });
    }
    let pairing = random_pairing(h.rows(), rng)?;
    Ok((apply_mix(h, &pairing.partner, lambda), pairing))
}

/// Soft targets `λ·onehot(y_i) + (1 − λ)·onehot(y_partner)`.
pub fn mixed_targets(labels: &[usize], pairing: &Pairing, lambda: &[f64], n_classes: usize) -> Matrix {
    let mut t = Matrix::zeros(labels.len(), n_classes);
    for i in 0..labels.len() {
        t[(i, labels[i])] += lambda[i];
        t[(i, labels[pairing.partner[i]])] += 1.0 - lambda[i];
    }
    t
}
