//! Transductive pseudo-labeling by diffusion over a kNN graph of latent codes.
//!
//! The graph keeps each point's `k` most similar neighbors, is symmetrized and
//! normalized, and class scores solve `(I − αA) C = Y` by conjugate gradient.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GraphSimilarity {
    /// `max(0, cos(z_i, z_j))³`
    #[default]
    CosineCubed,
    /// `max(0, z_i · z_j)`
    Dot,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelPropConfig {
    pub k: usize,
    pub alpha: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub similarity: GraphSimilarity,
    /// Cap on unlabeled rows fed to the graph; `None` uses all of them.
    pub max_unlabeled: Option<usize>,
}

impl Default for LabelPropConfig {
    fn default() -> Self {
        Self {
            k: 3,
            alpha: 0.999,
            tol: 1e-6,
            max_iter: 200,
            similarity: GraphSimilarity::default(),
            max_unlabeled: None,
        }
    }
}

/// Square sparse matrix in compressed sparse row form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed and zeros dropped.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Result<Self> {
        if let Some(&(i, j, _)) = triplets.iter().find(|&&(i, j, _)| i >= n || j >= n) {
            return Err(Error::IndexOutOfRange {
                context: "sparse entry",
                index: i.max(j),
                bound: n,
            });
        }
        triplets.sort_by_key(|&(i, j, _)| (i, j));
        let mut row_ptr = vec![0; n + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last = None;
        for (i, j, v) in triplets {
            if last == Some((i, j)) {
                *values.last_mut().expect("entry exists") += v;
            } else {
                cols.push(j);
                values.push(v);
                row_ptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        let mut m = Self {
            n,
            row_ptr,
            cols,
            values,
        };
        m.drop_zeros();
        Ok(m)
    }

    fn drop_zeros(&mut self) {
        let mut row_ptr = vec![0; self.n + 1];
        let mut cols = Vec::with_capacity(self.cols.len());
        let mut values = Vec::with_capacity(self.values.len());
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                if v != 0.0 {
                    cols.push(j);
                    values.push(v);
                }
            }
            row_ptr[i + 1] = cols.len();
        }
        self.row_ptr = row_ptr;
        self.cols = cols;
        self.values = values;
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.row(i).map(|(j, v)| v * x[j]).sum();
        }
    }

    pub fn transpose(&self) -> Self {
        let triplets = (0..self.n)
            .flat_map(|i| self.row(i).map(move |(j, v)| (j, i, v)))
            .collect();
        Self::from_triplets(self.n, triplets).expect("indices in range")
    }

    pub fn is_symmetric(&self) -> bool {
        *self == self.transpose()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).map(|(_, v)| v).sum()).collect()
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                m[(i, j)] = v;
            }
        }
        m
    }
}

/// Symmetric affinity `W = G + Gᵀ` and its degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityGraph {
    pub weights: SparseMatrix,
    pub degree: Vec<f64>,
}

const BLOCK_ROWS: usize = 256;

/// Exact kNN graph. Neighbors are ranked by similarity with ties going to the
/// lower index; the stored weight is the clipped similarity.
pub fn knn_graph(z: &Matrix, k: usize, similarity: GraphSimilarity) -> Result<AffinityGraph> {
    let n = z.rows();
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if n < k + 1 {
        return Err(Error::TooFewPoints { needed: k + 1, got: n });
    }
    z.check_finite("latent codes")?;
    let base = match similarity {
        GraphSimilarity::CosineCubed => {
            let mut u = z.clone();
            for i in 0..n {
                let r = u.row_mut(i);
                let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    r.iter_mut().for_each(|x| *x /= norm);
                }
            }
            u
        }
        GraphSimilarity::Dot => z.clone(),
    };
    let mut triplets = Vec::with_capacity(2 * n * k);
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for start in (0..n).step_by(BLOCK_ROWS) {
        let end = (start + BLOCK_ROWS).min(n);
        let block = base.slice_rows(start, end);
        let sims = block.gemm(false, &base, true)?;
        for (bi, i) in (start..end).enumerate() {
            best.clear();
            for (j, &s) in sims.row(bi).iter().enumerate() {
                if j == i {
                    continue;
                }
                // Strict comparison keeps the earlier (lower) index on ties.
                if best.len() < k || s > best[best.len() - 1].0 {
                    let pos = best.iter().position(|&(b, _)| s > b).unwrap_or(best.len());
                    best.insert(pos, (s, j));
                    best.truncate(k);
                }
            }
            for &(s, j) in &best {
                let w = match similarity {
                    GraphSimilarity::CosineCubed => s.max(0.0).powi(3),
                    GraphSimilarity::Dot => s.max(0.0),
                };
                triplets.push((i, j, w));
                triplets.push((j, i, w));
            }
        }
    }
    let weights = SparseMatrix::from_triplets(n, triplets)?;
    let degree = weights.row_sums();
    Ok(AffinityGraph { weights, degree })
}

/// `A = D^{-1/2} W D^{-1/2}`; zero-degree nodes get empty rows.
pub fn normalize_adjacency(g: &AffinityGraph) -> SparseMatrix {
    let inv: Vec<f64> = g
        .degree
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let w = &g.weights;
    let mut a = w.clone();
    for i in 0..w.n {
        for idx in w.row_ptr[i]..w.row_ptr[i + 1] {
            let j = w.cols[idx];
            a.values[idx] = w.values[idx] * (inv[i] * inv[j]);
        }
    }
    a
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionResult {
    /// `n × c` class scores.
    pub scores: Matrix,
    /// Largest iteration count over the class columns.
    pub iterations: usize,
    /// `‖(I − αA)C − Y‖_F / ‖Y‖_F`.
    pub residual: f64,
}

/// Solves `(I − αA) C = Y` one class column at a time by conjugate gradient.
pub fn cg_solve(a: &SparseMatrix, alpha: f64, y: &Matrix, tol: f64, max_iter: usize) -> Result<DiffusionResult> {
    let n = a.n();
    if y.rows() != n {
        return Err(Error::ShapeMismatch {
            context: "diffusion targets",
            expected: (n, y.cols()),
            found: y.shape(),
        });
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1), got {alpha}")));
    }
    let apply = |x: &[f64], out: &mut [f64]| {
        a.matvec(x, out);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = xi - alpha * *o;
        }
    };
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).sum::<f64>();
    let mut scores = Matrix::zeros(n, y.cols());
    let mut iterations = 0;
    let mut resid_sq = 0.0;
    let mut ap = vec![0.0; n];
    for c in 0..y.cols() {
        let b = y.column(c);
        let b_norm = dot(&b, &b).sqrt();
        let mut x = vec![0.0; n];
        let mut r = b.clone();
        let mut p = r.clone();
        let mut rr = dot(&r, &r);
        let mut it = 0;
        while rr.sqrt() > tol * b_norm {
            if it == max_iter {
                let total = resid_sq + rr;
                return Err(Error::ConvergenceFailure {
                    iterations: it,
                    residual: total.sqrt() / y.frobenius_norm(),
                });
            }
            apply(&p, &mut ap);
            let step = rr / dot(&p, &ap);
            for i in 0..n {
                x[i] += step * p[i];
                r[i] -= step * ap[i];
            }
            let rr_next = dot(&r, &r);
            let beta = rr_next / rr;
            for i in 0..n {
                p[i] = r[i] + beta * p[i];
            }
            rr = rr_next;
            it += 1;
        }
        // Report the true residual rather than the recursively updated one.
        apply(&x, &mut ap);
        resid_sq += ap.iter().zip(&b).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
        iterations = iterations.max(it);
        for i in 0..n {
            scores[(i, c)] = x[i];
        }
    }
    let y_norm = y.frobenius_norm();
    Ok(DiffusionResult {
        scores,
        iterations,
        residual: if y_norm > 0.0 { resid_sq.sqrt() / y_norm } else { 0.0 },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelAssignment {
    /// Dataset row of each assigned or unassigned node.
    pub rows: Vec<usize>,
    /// Argmax class, `None` when every score is zero.
    pub labels: Vec<Option<usize>>,
    pub top_scores: Vec<f64>,
    pub scores: Matrix,
    /// Epoch at which the assignment was computed.
    pub epoch: usize,
}

impl PseudoLabelAssignment {
    /// `(row, label)` for assigned rows only.
    pub fn assigned(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows
            .iter()
            .zip(&self.labels)
            .filter_map(|(&r, l)| l.map(|l| (r, l)))
    }

    pub fn n_assigned(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    /// Fraction of assigned rows whose label matches `truth(row)`.
    pub fn accuracy(&self, truth: impl Fn(usize) -> usize) -> f64 {
        let n = self.n_assigned();
        if n == 0 {
            return 0.0;
        }
        self.assigned().filter(|&(r, l)| truth(r) == l).count() as f64 / n as f64
    }

    /// Writes `row_id,pseudo_label,top_score`; unassigned rows have an empty label.
    pub fn write_csv(&self, path: &Path, row_ids: &[u64]) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let mut body = String::from("row_id,pseudo_label,top_score\n");
        for ((&r, l), s) in self.rows.iter().zip(&self.labels).zip(&self.top_scores) {
            let label = l.map_or(String::new(), |l| l.to_string());
            body.push_str(&format!("{},{},{}\n", row_ids[r], label, s));
        }
        w.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Argmax of the score rows at `nodes`, low class index on ties.
pub fn assign_pseudolabels(result: &DiffusionResult, nodes: &[usize], rows: &[usize], epoch: usize) -> PseudoLabelAssignment {
    let scores = result.scores.gather_rows(nodes);
    let argmax = scores.argmax_rows();
    let mut labels = Vec::with_capacity(nodes.len());
    let mut top_scores = Vec::with_capacity(nodes.len());
    for (i, &best) in argmax.iter().enumerate() {
        let row = scores.row(i);
        let assigned = row.iter().any(|&v| v != 0.0);
        labels.push(assigned.then_some(best));
        top_scores.push(row[best]);
    }
    PseudoLabelAssignment {
        rows: rows.to_vec(),
        labels,
        top_scores,
        scores,
        epoch,
    }
}

/// Full propagation: graph over `[labeled; unlabeled]` codes, diffusion of the
/// labeled one-hots, and assignments for the unlabeled rows.
pub fn propagate(
    z_labeled: &Matrix,
    labels: &[usize],
    z_unlabeled: &Matrix,
    unlabeled_rows: &[usize],
    n_classes: usize,
    cfg: &LabelPropConfig,
    epoch: usize,
) -> Result<(PseudoLabelAssignment, DiffusionResult)> {
    if labels.len() != z_labeled.rows() || unlabeled_rows.len() != z_unlabeled.rows() {
        return Err(Error::ShapeMismatch {
            context: "propagation inputs",
            expected: (z_labeled.rows(), z_unlabeled.rows()),
            found: (labels.len(), unlabeled_rows.len()),
        });
    }
    let z = Matrix::vstack(&[z_labeled, z_unlabeled])?;
    let graph = knn_graph(&z, cfg.k, cfg.similarity)?;
    let a = normalize_adjacency(&graph);
    let mut y = Matrix::zeros(z.rows(), n_classes);
    for (i, &l) in labels.iter().enumerate() {
        if l >= n_classes {
            return Err(Error::IndexOutOfRange {
                context: "class label",
                index: l,
                bound: n_classes,
            });
        }
        y[(i, l)] = 1.0;
    }
    let result = cg_solve(&a, cfg.alpha, &y, cfg.tol, cfg.max_iter)?;
    let nodes: Vec<usize> = (z_labeled.rows()..z.rows()).collect();
    Ok((assign_pseudolabels(&result, &nodes, unlabeled_rows, epoch), result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, stream, Rng, Stream};
    use proptest::prelude::*;
    use rand::RngExt;

    /// Dense Gaussian elimination with partial pivoting.
    fn dense_solve(mut a: Matrix, mut b: Matrix) -> Matrix {
        let n = a.rows();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| a[(i, col)].abs().total_cmp(&a[(j, col)].abs())).unwrap();
            for c in 0..n {
                let t = a[(col, c)];
                a[(col, c)] = a[(piv, c)];
                a[(piv, c)] = t;
            }
            for c in 0..b.cols() {
                let t = b[(col, c)];
                b[(col, c)] = b[(piv, c)];
                b[(piv, c)] = t;
            }
            for r in col + 1..n {
                let f = a[(r, col)] / a[(col, col)];
                for c in col..n {
                    a[(r, c)] -= f * a[(col, c)];
                }
                for c in 0..b.cols() {
                    b[(r, c)] -= f * b[(col, c)];
                }
            }
        }
        let mut x = Matrix::zeros(n, b.cols());
        for c in 0..b.cols() {
            for r in (0..n).rev() {
                let s: f64 = (r + 1..n).map(|k| a[(r, k)] * x[(k, c)]).sum();
                x[(r, c)] = (b[(r, c)] - s) / a[(r, r)];
            }
        }
        x
    }

    fn system(a: &SparseMatrix, alpha: f64) -> Matrix {
        let mut m = a.to_dense();
        m.scale(-alpha);
        for i in 0..a.n() {
            m[(i, i)] += 1.0;
        }
        m
    }

    fn random_graph(n: usize, rng: &mut Rng) -> SparseMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            for j in 0..i {
                if rng.random::<f64>() < 0.3 {
                    let w = rng.random_range(0.01..2.0);
                    t.push((i, j, w));
                    t.push((j, i, w));
                }
            }
        }
        SparseMatrix::from_triplets(n, t).unwrap()
    }

    fn normalized(w: SparseMatrix) -> SparseMatrix {
        let degree = w.row_sums();
        normalize_adjacency(&AffinityGraph { weights: w, degree })
    }

    fn labels_matrix(n: usize, c: usize, labeled: &[(usize, usize)]) -> Matrix {
        let mut y = Matrix::zeros(n, c);
        for &(i, l) in labeled {
            y[(i, l)] = 1.0;
        }
        y
    }

    fn brute_knn(z: &Matrix, i: usize, k: usize) -> Vec<usize> {
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let mut cand: Vec<(f64, usize)> = (0..z.rows()).filter(|&j| j != i).map(|j| (cos(z.row(i), z.row(j)), j)).collect();
        cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        cand.into_iter().take(k).map(|(_, j)| j).collect()
    }

    #[test]
    fn collinear_points_pick_nearest_angle() {
        let z = Matrix::from_rows(&[[1.0, 1.0], [2.0, 1.0], [3.0, 1.0]]);
        let g = knn_graph(&z, 1, GraphSimilarity::CosineCubed).unwrap();
        for i in 0..3 {
            assert_eq!(brute_knn(&z, i, 1).len(), 1);
        }
        assert_eq!(brute_knn(&z, 0, 1), vec![1]);
        assert_eq!(brute_knn(&z, 1, 1), vec![2]);
        assert_eq!(brute_knn(&z, 2, 1), vec![1]);
        // W = G + Gᵀ: edges A–B and B–C; B–C appears in both directions.
        let cos_ab: f64 = 3.0 / (2f64.sqrt() * 5f64.sqrt());
        let cos_bc: f64 = 7.0 / (5f64.sqrt() * 10f64.sqrt());
        assert!((g.weights.get(0, 1) - cos_ab.powi(3)).abs() < 1e-12);
        assert!((g.weights.get(1, 2) - 2.0 * cos_bc.powi(3)).abs() < 1e-12);
        assert_eq!(g.weights.get(0, 2), 0.0);
        assert!(g.weights.is_symmetric());
    }

    #[test]
    fn ties_go_to_lower_index() {
        let z = Matrix::from_rows(&[[1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [4.0, 0.0]]);
        let g = knn_graph(&z, 1, GraphSimilarity::CosineCubed).unwrap();
        // Every point's neighbor is the lowest other index.
        assert!(g.weights.get(0, 1) > 0.0);
        for j in 2..4 {
            assert!(g.weights.get(j, 0) > 0.0);
            assert_eq!(g.weights.get(j, 1), 0.0);
        }
    }

    #[test]
    fn full_k_gives_complete_graph() {
        let mut r = stream(1, Stream::Synthetic, 10);
        let z = Matrix::from_vec(6, 3, (0..18).map(|_| r.random_range(0.1..1.0)).collect()).unwrap();
        let g = knn_graph(&z, 5, GraphSimilarity::CosineCubed).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(g.weights.get(i, j) > 0.0, i != j);
            }
        }
        assert!(matches!(
            knn_graph(&z, 6, GraphSimilarity::CosineCubed),
            Err(Error::TooFewPoints { needed: 7, got: 6 })
        ));
    }

    #[test]
    fn duplicates_are_mutual_neighbors() {
        let z = Matrix::from_rows(&[[1.0, 0.2], [0.0, 1.0], [1.0, 0.2], [0.3, -1.0]]);
        let g = knn_graph(&z, 1, GraphSimilarity::CosineCubed).unwrap();
        assert!((g.weights.get(0, 2) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut r = stream(2, Stream::Synthetic, 10);
        let n = 300;
        let z = Matrix::from_vec(n, 4, (0..n * 4).map(|_| normal(&mut r)).collect()).unwrap();
        let g = knn_graph(&z, 3, GraphSimilarity::CosineCubed).unwrap();
        for i in 0..n {
            for j in brute_knn(&z, i, 3) {
                let cos = {
                    let (a, b) = (z.row(i), z.row(j));
                    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
                };
                if cos > 0.0 {
                    assert!(g.weights.get(i, j) >= cos.powi(3) - 1e-12);
                }
            }
        }
        assert!(g.weights.is_symmetric());
        assert!((0..n).all(|i| g.weights.get(i, i) == 0.0));
    }

    #[test]
    fn normalization_examples() {
        let w = SparseMatrix::from_triplets(2, vec![(0, 1, 4.0), (1, 0, 4.0)]).unwrap();
        let a = normalized(w);
        assert!((a.get(0, 1) - 1.0).abs() < 1e-15);

        // 4-cycle, unit weights: A = W / 2.
        let t = (0..4).flat_map(|i| [(i, (i + 1) % 4, 1.0), ((i + 1) % 4, i, 1.0)]).collect();
        let a = normalized(SparseMatrix::from_triplets(4, t).unwrap());
        for i in 0..4 {
            assert!((a.get(i, (i + 1) % 4) - 0.5).abs() < 1e-15);
        }

        let w = SparseMatrix::from_triplets(3, vec![(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let a = normalized(w);
        assert_eq!(a.row(2).count(), 0);
        assert_eq!(a.get(0, 2), 0.0);
        assert!(a.is_symmetric());
    }

    #[test]
    fn empty_graph_returns_targets() {
        let a = SparseMatrix::from_triplets(4, vec![]).unwrap();
        let y = labels_matrix(4, 2, &[(0, 1), (3, 0)]);
        let res = cg_solve(&a, 0.999, &y, 1e-6, 200).unwrap();
        assert_eq!(res.scores, y);
    }

    #[test]
    fn disconnected_component_gets_no_signal() {
        let t = vec![(0, 1, 1.0), (1, 0, 1.0), (1, 2, 1.0), (2, 1, 1.0), (3, 4, 1.0), (4, 3, 1.0)];
        let a = normalized(SparseMatrix::from_triplets(5, t).unwrap());
        let y = labels_matrix(5, 2, &[(0, 0), (2, 1)]);
        let res = cg_solve(&a, 0.999, &y, 1e-10, 200).unwrap();
        for i in 3..5 {
            assert!(res.scores.row(i).iter().all(|&v| v == 0.0));
        }
        let asg = assign_pseudolabels(&res, &[1, 3, 4], &[11, 13, 14], 7);
        assert_eq!(asg.labels, vec![Some(0), None, None]);
        assert_eq!(asg.epoch, 7);
        assert_eq!(asg.assigned().collect::<Vec<_>>(), vec![(11, 0)]);
    }

    #[test]
    fn argmax_and_ties() {
        let res = DiffusionResult {
            scores: Matrix::from_rows(&[[0.1, 0.9], [0.5, 0.5], [0.0, 0.0]]),
            iterations: 0,
            residual: 0.0,
        };
        let asg = assign_pseudolabels(&res, &[0, 1, 2], &[0, 1, 2], 0);
        assert_eq!(asg.labels, vec![Some(1), Some(0), None]);
    }

    #[test]
    fn convergence_failure_reports_residual() {
        let mut r = stream(3, Stream::Synthetic, 10);
        let a = normalized(random_graph(40, &mut r));
        let y = labels_matrix(40, 2, &[(0, 0), (1, 1)]);
        match cg_solve(&a, 0.999, &y, 1e-14, 1) {
            Err(Error::ConvergenceFailure { iterations: 1, residual }) => assert!(residual > 0.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn two_blobs_are_separated() {
        let mut r = stream(4, Stream::Synthetic, 10);
        let d = 8;
        let point = |c: usize, r: &mut Rng| -> Vec<f64> {
            (0..d).map(|j| if j == c { 4.0 } else { 0.0 } + normal(r)).collect()
        };
        let mut zl = Vec::new();
        let mut yl = Vec::new();
        for c in 0..2 {
            for _ in 0..5 {
                zl.extend(point(c, &mut r));
                yl.push(c);
            }
        }
        let mut zu = Vec::new();
        let mut yu = Vec::new();
        for i in 0..200 {
            zu.extend(point(i % 2, &mut r));
            yu.push(i % 2);
        }
        let zl = Matrix::from_vec(10, d, zl).unwrap();
        let zu = Matrix::from_vec(200, d, zu).unwrap();
        let rows: Vec<usize> = (0..200).collect();
        let (asg, res) = propagate(&zl, &yl, &zu, &rows, 2, &LabelPropConfig::default(), 0).unwrap();
        assert!(res.residual <= 1e-6);
        let correct = asg.assigned().filter(|&(row, l)| yu[row] == l).count();
        assert!(correct as f64 / 200.0 >= 0.99, "{correct}/200");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pl.csv");
        let ids: Vec<u64> = (0..200).map(|i| 1000 + i).collect();
        asg.write_csv(&path, &ids).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("row_id,pseudo_label,top_score\n1000,"));
        assert_eq!(text.lines().count(), 201);

        let (again, _) = propagate(&zl, &yl, &zu, &rows, 2, &LabelPropConfig::default(), 0).unwrap();
        assert_eq!(again, asg);
    }

    proptest! {
        #[test]
        fn cg_matches_dense_solve(seed in any::<u64>(), n in 2usize..50, c in 1usize..4) {
            let mut r = stream(seed, Stream::Synthetic, 11);
            let a = normalized(random_graph(n, &mut r));
            prop_assert!(a.is_symmetric());
            let mut labeled = Vec::new();
            for i in 0..n {
                if r.random::<f64>() < 0.3 {
                    labeled.push((i, r.random_range(0..c)));
                }
            }
            let y = labels_matrix(n, c, &labeled);
            let res = cg_solve(&a, 0.999, &y, 1e-14, 2000).unwrap();
            let oracle = dense_solve(system(&a, 0.999), y);
            prop_assert!(res.scores.max_abs_diff(&oracle) < 1e-8, "{}", res.scores.max_abs_diff(&oracle));
        }

        #[test]
        fn extra_label_only_raises_its_class(seed in any::<u64>(), n in 3usize..30) {
            let mut r = stream(seed, Stream::Synthetic, 12);
            // A path keeps the graph connected; random chords add structure.
            let mut t: Vec<(usize, usize, f64)> = (1..n).flat_map(|i| [(i, i - 1, 1.0), (i - 1, i, 1.0)]).collect();
            for i in 0..n {
                for j in 0..i.saturating_sub(1) {
                    if r.random::<f64>() < 0.2 {
                        let w = r.random_range(0.1..1.0);
                        t.push((i, j, w));
                        t.push((j, i, w));
                    }
                }
            }
            let a = normalized(SparseMatrix::from_triplets(n, t).unwrap());
            let base = vec![(0, 0), (n - 1, 1)];
            let extra = r.random_range(1..n - 1);
            let mut more = base.clone();
            more.push((extra, 1));
            let before = cg_solve(&a, 0.999, &labels_matrix(n, 2, &base), 1e-13, 2000).unwrap();
            let after = cg_solve(&a, 0.999, &labels_matrix(n, 2, &more), 1e-13, 2000).unwrap();
            for i in 0..n {
                prop_assert!(after.scores[(i, 1)] >= before.scores[(i, 1)] - 1e-9);
            }
        }
    }
}
