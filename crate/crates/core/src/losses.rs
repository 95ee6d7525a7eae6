//! Loss terms with closed-form gradients.
//!
//! Every function returns the batch-mean loss together with its gradient with
//! respect to the input matrix, ready to be recorded with `Tape::loss`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Normalizer inside the log of each positive pair's term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// Negatives of the anchor plus the positive itself.
    #[default]
    NegativesAndPositive,
    /// Negatives of the anchor only.
    Negatives,
    /// Every pooled row except the anchor.
    AllOthers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Cosine,
    Dot,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupConConfig {
    pub temperature: f64,
    pub denominator: Denominator,
    pub similarity: Similarity,
}

impl Default for SupConConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            denominator: Denominator::default(),
            similarity: Similarity::default(),
        }
    }
}

/// Pooled projections of both views with one label distribution per row.
///
/// Hard labels are one-hot rows. The positive weight of a pair is `q_i · q_j`
/// and its negative weight `1 − q_i · q_j`, which reduces to same/different
/// label for one-hot rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub projections: Matrix,
    pub targets: Matrix,
    /// Per-anchor weight; pseudo-labeled anchors carry the pseudo-label weight.
    pub anchor_weights: Vec<f64>,
}

impl ContrastiveBatch {
    /// Stacks `view1` over `view2`; row `i` of each view carries `labels[i]`.
    pub fn from_views(view1: &Matrix, view2: &Matrix, labels: &[usize], n_classes: usize) -> Result<Self> {
        if view1.shape() != view2.shape() || labels.len() != view1.rows() {
            return Err(Error::ShapeMismatch {
                context: "contrastive views",
                expected: view1.shape(),
                found: (labels.len(), view2.cols()),
            });
        }
        let both: Vec<usize> = labels.iter().chain(labels).copied().collect();
        Ok(Self {
            projections: Matrix::vstack(&[view1, view2])?,
            targets: one_hot(&both, n_classes)?,
            anchor_weights: vec![1.0; both.len()],
        })
    }

    pub fn from_labels(projections: Matrix, labels: &[usize], n_classes: usize) -> Result<Self> {
        let n = projections.rows();
        Ok(Self {
            projections,
            targets: one_hot(labels, n_classes)?,
            anchor_weights: vec![1.0; n],
        })
    }
}

pub fn one_hot(labels: &[usize], n_classes: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(labels.len(), n_classes);
    for (i, &y) in labels.iter().enumerate() {
        if y >= n_classes {
            return Err(Error::IndexOutOfRange {
                context: "class label",
                index: y,
                bound: n_classes,
            });
        }
        m[(i, y)] = 1.0;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupConOutput {
    pub loss: f64,
    /// Unweighted loss of every anchor (0 for anchors without positives).
    pub per_anchor: Vec<f64>,
    pub grad: Matrix,
}

/// Supervised contrastive loss over the pooled rows, averaged over anchors.
pub fn supcon_loss(batch: &ContrastiveBatch, cfg: &SupConConfig) -> Result<SupConOutput> {
    let v = &batch.projections;
    let n = v.rows();
    if batch.targets.rows() != n || batch.anchor_weights.len() != n {
        return Err(Error::ShapeMismatch {
            context: "contrastive batch",
            expected: (n, n),
            found: (batch.targets.rows(), batch.anchor_weights.len()),
        });
    }
    if cfg.temperature <= 0.0 || !cfg.temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {}",
            cfg.temperature
        )));
    }
    let tau = cfg.temperature;
    let (u, norms) = match cfg.similarity {
        Similarity::Cosine => normalize_rows(v),
        Similarity::Dot => (v.clone(), vec![1.0; n]),
    };
    let mut s = u.gemm(false, &u, true)?;
    s.scale(1.0 / tau);
    let pi = batch.targets.gemm(false, &batch.targets, true)?;

    let any_negative = (0..n).any(|i| (0..n).any(|k| k != i && 1.0 - pi[(i, k)] > 0.0));
    if !any_negative {
        return Err(Error::DegenerateBatch("every pooled row shares one label"));
    }

    let mut g = Matrix::zeros(n, n);
    let mut per_anchor = vec![0.0; n];
    let mut loss = 0.0;
    let mut e = vec![0.0; n];
    let mut inv_d = vec![0.0; n];
    for i in 0..n {
        let p_i: f64 = (0..n).filter(|&k| k != i).map(|k| pi[(i, k)]).sum();
        if p_i <= 0.0 {
            continue;
        }
        let row = s.row(i);
        let m = (0..n)
            .filter(|&k| k != i)
            .map(|k| row[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let nu = |k: usize| (1.0 - pi[(i, k)]).max(0.0);
        let mut neg = 0.0;
        let mut all = 0.0;
        for k in 0..n {
            e[k] = if k == i { 0.0 } else { (row[k] - m).exp() };
            neg += nu(k) * e[k];
            all += e[k];
        }
        let scale = batch.anchor_weights[i] / n as f64;
        let mut l_i = 0.0;
        let gi = g.row_mut(i);
        match cfg.denominator {
            Denominator::NegativesAndPositive => {
                let mut acc = 0.0;
                for j in 0..n {
                    if j == i || pi[(i, j)] <= 0.0 {
                        inv_d[j] = 0.0;
                        continue;
                    }
                    let d = e[j] + neg;
                    inv_d[j] = 1.0 / d;
                    l_i -= pi[(i, j)] * ((row[j] - m) - d.ln());
                    acc += pi[(i, j)] * inv_d[j];
                }
                for k in (0..n).filter(|&k| k != i) {
                    let p = pi[(i, k)];
                    gi[k] = -(p - p * e[k] * inv_d[k] - nu(k) * e[k] * acc) / p_i;
                }
            }
            Denominator::Negatives | Denominator::AllOthers => {
                let d = if cfg.denominator == Denominator::Negatives { neg } else { all };
                if d <= 0.0 {
                    continue;
                }
                let ln_d = d.ln();
                for j in (0..n).filter(|&j| j != i) {
                    l_i -= pi[(i, j)] * ((row[j] - m) - ln_d);
                }
                for k in (0..n).filter(|&k| k != i) {
                    let w = if cfg.denominator == Denominator::Negatives { nu(k) } else { 1.0 };
                    gi[k] = -(pi[(i, k)] - p_i * w * e[k] / d) / p_i;
                }
            }
        }
        l_i /= p_i;
        per_anchor[i] = l_i;
        loss += scale * l_i;
        gi.iter_mut().for_each(|x| *x *= scale);
    }

    // s = U Uᵀ / τ, so dL/dU = (G + Gᵀ) U / τ.
    let mut gs = g.transpose();
    gs.add_assign(&g);
    let mut gu = gs.matmul(&u)?;
    gu.scale(1.0 / tau);
    let grad = match cfg.similarity {
        Similarity::Cosine => normalize_backward(&u, &norms, &gu),
        Similarity::Dot => gu,
    };
    Ok(SupConOutput {
        loss,
        per_anchor,
        grad,
    })
}

const NORM_FLOOR: f64 = 1e-12;

fn normalize_rows(v: &Matrix) -> (Matrix, Vec<f64>) {
    let mut u = v.clone();
    let mut norms = Vec::with_capacity(v.rows());
    for i in 0..v.rows() {
        let r = u.row_mut(i);
        let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
        r.iter_mut().for_each(|x| *x /= norm);
        norms.push(norm);
    }
    (u, norms)
}

/// Backprop through `u = v / ‖v‖`: `dv = (du − u (u · du)) / ‖v‖`.
fn normalize_backward(u: &Matrix, norms: &[f64], gu: &Matrix) -> Matrix {
    let mut out = gu.clone();
    for i in 0..u.rows() {
        let (ui, gi) = (u.row(i), gu.row(i));
        let dot: f64 = ui.iter().zip(gi).map(|(a, b)| a * b).sum();
        for (o, (a, b)) in out.row_mut(i).iter_mut().zip(ui.iter().zip(gi)) {
            *o = (b - a * dot) / norms[i];
        }
    }
    out
}

/// Weights of the two reconstruction terms. The defaults are the column
/// fractions `|C|/d` and `|D|/d`; a negative categorical weight flips the sign
/// of the likelihood term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconWeights {
    pub continuous: f64,
    pub categorical: f64,
}

impl ReconWeights {
    pub fn from_counts(n_continuous: usize, n_categorical: usize) -> Self {
        let d = (n_continuous + n_categorical).max(1) as f64;
        Self {
            continuous: n_continuous as f64 / d,
            categorical: n_categorical as f64 / d,
        }
    }
}

pub const PROB_FLOOR: f64 = 1e-12;

/// Reconstruction loss over a decoder output laid out as
/// `[continuous ‖ logits of column 1 ‖ …]`, averaged over rows.
///
/// Per row: `w_C · Σ_c (r_c − x_c)² + w_D · Σ_j −log max(p_j[x_j], 1e-12)`.
pub fn reconstruction_loss(
    raw: &Matrix,
    continuous: &Matrix,
    categorical: &[u32],
    cardinalities: &[usize],
    weights: ReconWeights,
) -> Result<(f64, Matrix)> {
    let n = raw.rows();
    let n_cont = continuous.cols();
    let expected = n_cont + cardinalities.iter().sum::<usize>();
    if raw.cols() != expected || continuous.rows() != n || categorical.len() != n * cardinalities.len() {
        return Err(Error::ShapeMismatch {
            context: "reconstruction target",
            expected: (n, expected),
            found: raw.shape(),
        });
    }
    let mut grad = Matrix::zeros(n, raw.cols());
    let mut loss = 0.0;
    let inv_n = 1.0 / n.max(1) as f64;
    for i in 0..n {
        let r = raw.row(i);
        let g = grad.row_mut(i);
        for c in 0..n_cont {
            let diff = r[c] - continuous[(i, c)];
            loss += weights.continuous * diff * diff;
            g[c] = 2.0 * weights.continuous * diff * inv_n;
        }
        let mut offset = n_cont;
        for (j, &card) in cardinalities.iter().enumerate() {
            let target = categorical[i * cardinalities.len() + j] as usize;
            if target >= card {
                return Err(Error::IndexOutOfRange {
                    context: "reconstruction category",
                    index: target,
                    bound: card,
                });
            }
            let logits = &r[offset..offset + card];
            let probs = softmax(logits);
            let p = probs[target];
            loss += weights.categorical * -(p.max(PROB_FLOOR)).ln();
            if p >= PROB_FLOOR {
                for (o, (gk, pk)) in g[offset..offset + card].iter_mut().zip(&probs).enumerate() {
                    let indicator = if o == target { 1.0 } else { 0.0 };
                    *gk = weights.categorical * (pk - indicator) * inv_n;
                }
            }
            offset += card;
        }
    }
    Ok((loss * inv_n, grad))
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// Mean over rows of `−log softmax(logits)[target]`.
pub fn cross_entropy(logits: &Matrix, targets: &[usize]) -> Result<(f64, Matrix)> {
    let t = one_hot(targets, logits.cols())?;
    soft_cross_entropy(logits, &t)
}

/// Mean over rows of `Σ_k t_k · (−log softmax_k)`.
pub fn soft_cross_entropy(logits: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
    if logits.shape() != targets.shape() {
        return Err(Error::ShapeMismatch {
            context: "cross-entropy targets",
            expected: logits.shape(),
            found: targets.shape(),
        });
    }
    let n = logits.rows();
    let inv_n = 1.0 / n.max(1) as f64;
    let mut grad = Matrix::zeros(n, logits.cols());
    let mut loss = 0.0;
    for i in 0..n {
        let ls = log_softmax(logits.row(i));
        let t = targets.row(i);
        let mass: f64 = t.iter().sum();
        for (k, g) in grad.row_mut(i).iter_mut().enumerate() {
            loss -= t[k] * ls[k];
            *g = (mass * ls[k].exp() - t[k]) * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}
