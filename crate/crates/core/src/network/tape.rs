//! Reverse-mode gradient tape for the handful of operations the models use.
//!
//! Nodes are appended in evaluation order, so walking indices backwards is a
//! reverse topological traversal that visits every node once.

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Input,
    Dense {
        input: NodeId,
        weight: ParamId,
        bias: ParamId,
    },
    Relu {
        input: NodeId,
    },
    BatchNorm {
        input: NodeId,
        gamma: ParamId,
        beta: ParamId,
        normalized: Matrix,
        inv_std: Vec<f64>,
        train: bool,
    },
    Embed {
        continuous: NodeId,
        /// (table, row index per batch row, output column offset)
        columns: Vec<(ParamId, Vec<u32>, usize)>,
    },
    Mix {
        input: NodeId,
        partner: Vec<usize>,
        lambda: Vec<f64>,
    },
    Gather {
        input: NodeId,
        rows: Vec<usize>,
    },
    ConcatRows {
        inputs: Vec<NodeId>,
    },
    /// Scalar whose gradient with respect to each input was computed by the caller.
    Loss {
        terms: Vec<(NodeId, Matrix)>,
    },
    WeightedSum {
        terms: Vec<(NodeId, f64)>,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
    consumed: bool,
}

pub struct BatchNormArgs<'a> {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: &'a mut [f64],
    pub running_var: &'a mut [f64],
    pub momentum: f64,
    pub eps: f64,
    pub mode: Mode,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op, context: &'static str) -> Result<NodeId> {
        value.check_finite(context)?;
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[(0, 0)]
    }

    /// Gradient with respect to an input node, available after `backward`.
    pub fn grad(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Matrix) -> Result<NodeId> {
        self.push(value, Op::Input, "input")
    }

    /// `x · W + b` with `W` stored as `in × out` and `b` as `1 × out`.
    pub fn dense(
        &mut self,
        params: &ParamStore,
        input: NodeId,
        weight: ParamId,
        bias: ParamId,
    ) -> Result<NodeId> {
        let mut out = self.value(input).matmul(params.value(weight))?;
        let b = params.value(bias);
        for i in 0..out.rows() {
            for (o, bv) in out.row_mut(i).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        self.push(
            out,
            Op::Dense {
                input,
                weight,
                bias,
            },
            "dense",
        )
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let out = self.value(input).map(|x| x.max(0.0));
        self.push(out, Op::Relu { input }, "relu")
    }

    /// Batch normalization. Train mode normalizes with batch statistics
    /// (biased variance) and updates the running estimates; eval mode applies
    /// the running estimates as a fixed affine map.
    pub fn batch_norm(
        &mut self,
        params: &ParamStore,
        input: NodeId,
        args: BatchNormArgs<'_>,
    ) -> Result<NodeId> {
        let x = self.value(input);
        let (n, w) = x.shape();
        let train = args.mode == Mode::Train && n > 0;
        let (mean, var) = if train {
            let mut mean = vec![0.0; w];
            let mut var = vec![0.0; w];
            for i in 0..n {
                for (m, v) in mean.iter_mut().zip(x.row(i)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            for i in 0..n {
                for j in 0..w {
                    var[j] += (x[(i, j)] - mean[j]).powi(2);
                }
            }
            var.iter_mut().for_each(|v| *v /= n as f64);
            let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
            for j in 0..w {
                args.running_mean[j] =
                    (1.0 - args.momentum) * args.running_mean[j] + args.momentum * mean[j];
                args.running_var[j] =
                    (1.0 - args.momentum) * args.running_var[j] + args.momentum * var[j] * unbias;
            }
            (mean, var)
        } else {
            (args.running_mean.to_vec(), args.running_var.to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + args.eps).sqrt()).collect();
        let gamma = params.value(args.gamma).data();
        let beta = params.value(args.beta).data();
        let mut normalized = Matrix::zeros(n, w);
        let mut out = Matrix::zeros(n, w);
        for i in 0..n {
            for j in 0..w {
                let h = (x[(i, j)] - mean[j]) * inv_std[j];
                normalized[(i, j)] = h;
                out[(i, j)] = gamma[j] * h + beta[j];
            }
        }
        self.push(
            out,
            Op::BatchNorm {
                input,
                gamma: args.gamma,
                beta: args.beta,
                normalized,
                inv_std,
                train,
            },
            "batch_norm",
        )
    }

    /// `[continuous ‖ table_1[idx_1] ‖ …]`; `columns` pairs each table with its indices.
    pub fn embed(
        &mut self,
        params: &ParamStore,
        continuous: NodeId,
        columns: Vec<(ParamId, Vec<u32>)>,
    ) -> Result<NodeId> {
        let base = self.value(continuous);
        let n = base.rows();
        let mut widths = Vec::with_capacity(columns.len());
        for (table, idx) in &columns {
            let t = params.value(*table);
            if idx.len() != n {
                return Err(Error::ShapeMismatch {
                    context: "embed indices",
                    expected: (n, 1),
                    found: (idx.len(), 1),
                });
            }
            if let Some(&bad) = idx.iter().find(|&&v| v as usize >= t.rows()) {
                return Err(Error::IndexOutOfRange {
                    context: "embedding lookup",
                    index: bad as usize,
                    bound: t.rows(),
                });
            }
            widths.push(t.cols());
        }
        let total = base.cols() + widths.iter().sum::<usize>();
        let mut out = Matrix::zeros(n, total);
        let mut placed = Vec::with_capacity(columns.len());
        let mut offset = base.cols();
        for i in 0..n {
            out.row_mut(i)[..base.cols()].copy_from_slice(base.row(i));
        }
        for ((table, idx), w) in columns.into_iter().zip(widths) {
            let t = params.value(table);
            for i in 0..n {
                out.row_mut(i)[offset..offset + w].copy_from_slice(t.row(idx[i] as usize));
            }
            placed.push((table, idx, offset));
            offset += w;
        }
        self.push(
            out,
            Op::Embed {
                continuous,
                columns: placed,
            },
            "embed",
        )
    }

    /// Row-wise convex combination `λ_i · x[i] + (1 − λ_i) · x[partner[i]]`.
    pub fn mix(&mut self, input: NodeId, partner: Vec<usize>, lambda: Vec<f64>) -> Result<NodeId> {
        let x = self.value(input);
        if partner.len() != x.rows() || lambda.len() != x.rows() {
            return Err(Error::ShapeMismatch {
                context: "mix",
                expected: (x.rows(), 1),
                found: (partner.len(), lambda.len()),
            });
        }
        let out = crate::mixup::apply_mix(x, &partner, &lambda);
        self.push(
            out,
            Op::Mix {
                input,
                partner,
                lambda,
            },
            "mix",
        )
    }

    pub fn gather(&mut self, input: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let out = self.value(input).gather_rows(&rows);
        self.push(out, Op::Gather { input, rows }, "gather")
    }

    pub fn concat_rows(&mut self, inputs: Vec<NodeId>) -> Result<NodeId> {
        let parts: Vec<&Matrix> = inputs.iter().map(|&i| self.value(i)).collect();
        let out = Matrix::vstack(&parts)?;
        self.push(out, Op::ConcatRows { inputs }, "concat_rows")
    }

    /// Records a scalar loss whose gradients with respect to `terms` are already known.
    pub fn loss(&mut self, value: f64, terms: Vec<(NodeId, Matrix)>) -> Result<NodeId> {
        for (node, g) in &terms {
            if g.shape() != self.value(*node).shape() {
                return Err(Error::ShapeMismatch {
                    context: "loss gradient",
                    expected: self.value(*node).shape(),
                    found: g.shape(),
                });
            }
        }
        self.push(Matrix::filled(1, 1, value), Op::Loss { terms }, "loss")
    }

    pub fn weighted_sum(&mut self, terms: Vec<(NodeId, f64)>) -> Result<NodeId> {
        let v = terms.iter().map(|&(n, w)| w * self.scalar(n)).sum();
        self.push(Matrix::filled(1, 1, v), Op::WeightedSum { terms }, "weighted_sum")
    }

    /// Propagates d(root)/d(·) through the tape, accumulating parameter
    /// gradients into `params`. Parameters not on the path receive nothing.
    pub fn backward(&mut self, root: NodeId, params: &mut ParamStore) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeReuse);
        }
        self.consumed = true;
        let mut grads: Vec<Option<Matrix>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));

        fn add(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
            match &mut grads[id.0] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Input) {
                grads[idx] = Some(g);
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Dense {
                    input,
                    weight,
                    bias,
                } => {
                    let x = &self.nodes[input.0].value;
                    params.accumulate(*weight, &x.gemm(true, &g, false)?);
                    let mut db = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (d, v) in db.data_mut().iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    params.accumulate(*bias, &db);
                    let dx = g.gemm(false, params.value(*weight), true)?;
                    add(&mut grads, *input, dx);
                }
                Op::Relu { input } => {
                    let mut dx = g;
                    for (d, y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        if *y <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    add(&mut grads, *input, dx);
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    normalized,
                    inv_std,
                    train,
                } => {
                    let (n, w) = g.shape();
                    let gm = params.value(*gamma).data().to_vec();
                    let mut dgamma = Matrix::zeros(1, w);
                    let mut dbeta = Matrix::zeros(1, w);
                    let mut sum_dh = vec![0.0; w];
                    let mut sum_dh_h = vec![0.0; w];
                    for i in 0..n {
                        for j in 0..w {
                            let gij = g[(i, j)];
                            let h = normalized[(i, j)];
                            dgamma[(0, j)] += gij * h;
                            dbeta[(0, j)] += gij;
                            let dh = gij * gm[j];
                            sum_dh[j] += dh;
                            sum_dh_h[j] += dh * h;
                        }
                    }
                    params.accumulate(*gamma, &dgamma);
                    params.accumulate(*beta, &dbeta);
                    let mut dx = Matrix::zeros(n, w);
                    let nf = n as f64;
                    for i in 0..n {
                        for j in 0..w {
                            let dh = g[(i, j)] * gm[j];
                            dx[(i, j)] = if *train {
                                inv_std[j] / nf
                                    * (nf * dh - sum_dh[j] - normalized[(i, j)] * sum_dh_h[j])
                            } else {
                                dh * inv_std[j]
                            };
                        }
                    }
                    add(&mut grads, *input, dx);
                }
                Op::Embed {
                    continuous,
                    columns,
                } => {
                    let base_cols = self.nodes[continuous.0].value.cols();
                    add(&mut grads, *continuous, g.slice_cols(0, base_cols));
                    for (table, idx, offset) in columns {
                        let t = params.value(*table);
                        let w = t.cols();
                        let mut dt = Matrix::zeros(t.rows(), w);
                        for (i, &r) in idx.iter().enumerate() {
                            for (d, v) in dt
                                .row_mut(r as usize)
                                .iter_mut()
                                .zip(&g.row(i)[*offset..offset + w])
                            {
                                *d += v;
                            }
                        }
                        params.accumulate(*table, &dt);
                    }
                }
                Op::Mix {
                    input,
                    partner,
                    lambda,
                } => {
                    let mut dx = Matrix::zeros(g.rows(), g.cols());
                    for i in 0..g.rows() {
                        let l = lambda[i];
                        for (d, v) in dx.row_mut(i).iter_mut().zip(g.row(i)) {
                            *d += l * v;
                        }
                        for (d, v) in dx.row_mut(partner[i]).iter_mut().zip(g.row(i)) {
                            *d += (1.0 - l) * v;
                        }
                    }
                    add(&mut grads, *input, dx);
                }
                Op::Gather { input, rows } => {
                    let src = &self.nodes[input.0].value;
                    let mut dx = Matrix::zeros(src.rows(), src.cols());
                    for (k, &r) in rows.iter().enumerate() {
                        for (d, v) in dx.row_mut(r).iter_mut().zip(g.row(k)) {
                            *d += v;
                        }
                    }
                    add(&mut grads, *input, dx);
                }
                Op::ConcatRows { inputs } => {
                    let mut start = 0;
                    for &inp in inputs {
                        let r = self.nodes[inp.0].value.rows();
                        let rows: Vec<usize> = (start..start + r).collect();
                        add(&mut grads, inp, g.gather_rows(&rows));
                        start += r;
                    }
                }
                Op::Loss { terms } => {
                    let s = g[(0, 0)];
                    for (node_id, local) in terms {
                        let mut d = local.clone();
                        d.scale(s);
                        add(&mut grads, *node_id, d);
                    }
                }
                Op::WeightedSum { terms } => {
                    let s = g[(0, 0)];
                    for &(node_id, w) in terms {
                        add(&mut grads, node_id, Matrix::filled(1, 1, s * w));
                    }
                }
            }
        }
        self.grads = grads;
        Ok(())
    }
}
