use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::{NodeId, Tape};
use crate::data::TabularDataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{normal, Rng};

/// Embedding width for a categorical column: `min(600, round(1.6 · cardinality^0.56))`.
pub fn embedding_dim(cardinality: usize) -> usize {
    let d = (1.6 * (cardinality as f64).powf(0.56)).round() as usize;
    d.clamp(1, 600)
}

/// Raw features of a batch of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    pub continuous: Matrix,
    /// Row-major `rows × n_categorical` category indices.
    pub categorical: Vec<u32>,
    pub n_categorical: usize,
}

impl FeatureBatch {
    pub fn from_rows(ds: &TabularDataset, rows: &[usize]) -> Self {
        let d = ds.n_categorical();
        let mut categorical = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            categorical.extend_from_slice(ds.categorical_row(r));
        }
        Self {
            continuous: ds.continuous.gather_rows(rows),
            categorical,
            n_categorical: d,
        }
    }

    pub fn all(ds: &TabularDataset) -> Self {
        Self {
            continuous: ds.continuous.clone(),
            categorical: ds.categorical.clone(),
            n_categorical: ds.n_categorical(),
        }
    }

    pub fn rows(&self) -> usize {
        self.continuous.rows()
    }

    pub fn stack(parts: &[&FeatureBatch]) -> Result<FeatureBatch> {
        let n_categorical = parts.first().map_or(0, |p| p.n_categorical);
        let cont: Vec<&Matrix> = parts.iter().map(|p| &p.continuous).collect();
        Ok(FeatureBatch {
            continuous: Matrix::vstack(&cont)?,
            categorical: parts.iter().flat_map(|p| p.categorical.iter().copied()).collect(),
            n_categorical,
        })
    }

    /// Category index of column `j` for every row.
    pub fn categorical_column(&self, j: usize) -> Vec<u32> {
        (0..self.rows())
            .map(|i| self.categorical[i * self.n_categorical + j])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingColumn {
    pub cardinality: usize,
    pub dim: usize,
    pub table: ParamId,
}

/// Maps raw rows to `[continuous ‖ embedded categoricals]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub n_continuous: usize,
    pub columns: Vec<EmbeddingColumn>,
}

impl Embedding {
    /// Tables drawn from `N(0, 0.01²)`.
    pub fn new(
        params: &mut ParamStore,
        name: &str,
        n_continuous: usize,
        cardinalities: &[usize],
        rng: &mut Rng,
    ) -> Self {
        let columns = cardinalities
            .iter()
            .enumerate()
            .map(|(j, &cardinality)| {
                let dim = embedding_dim(cardinality);
                let init: Vec<f64> = (0..cardinality * dim).map(|_| 0.01 * normal(rng)).collect();
                let table = params.add(
                    format!("{name}.{j}"),
                    Matrix::from_vec(cardinality, dim, init).expect("sized"),
                );
                EmbeddingColumn {
                    cardinality,
                    dim,
                    table,
                }
            })
            .collect();
        Self {
            n_continuous,
            columns,
        }
    }

    pub fn output_width(&self) -> usize {
        self.n_continuous + self.columns.iter().map(|c| c.dim).sum::<usize>()
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, batch: &FeatureBatch) -> Result<NodeId> {
        if batch.continuous.cols() != self.n_continuous || batch.n_categorical != self.columns.len() {
            return Err(Error::ShapeMismatch {
                context: "embedding input",
                expected: (self.n_continuous, self.columns.len()),
                found: (batch.continuous.cols(), batch.n_categorical),
            });
        }
        let cont = tape.input(batch.continuous.clone())?;
        if self.columns.is_empty() {
            return Ok(cont);
        }
        let cols = self
            .columns
            .iter()
            .enumerate()
            .map(|(j, c)| (c.table, batch.categorical_column(j)))
            .collect();
        tape.embed(params, cont, cols)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.columns.iter().map(|c| c.table).collect()
    }
}
