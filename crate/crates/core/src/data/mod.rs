//! Mixed-type tabular data: schema, CSV ingestion, standardization,
//! stratified labeled/unlabeled/test splitting and epoch batching.

mod batches;
mod csv_io;
mod split;
mod standardize;
mod synthetic;

pub use batches::{epoch_batches, make_epoch_batches, BatchPair};
pub use csv_io::{load_csv, load_csv_with_vocabulary, read_header, Vocabulary};
pub use split::{split, DataSplit, SplitSpec};
pub use standardize::{fit_standardizer, Standardizer};
pub use synthetic::two_blobs;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Categorical,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub kind: ColumnKind,
    /// Number of distinct categories; filled in when a vocabulary is fitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cardinality: Option<usize>,
}

impl ColumnSchema {
    pub fn continuous(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Continuous,
            cardinality: None,
        }
    }

    pub fn categorical(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Categorical,
            cardinality: None,
        }
    }
}

/// Checks the declared-schema invariants that do not depend on data.
pub fn validate_schema(schema: &[ColumnSchema]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for col in schema {
        if !seen.insert(col.name.as_str()) {
            return Err(Error::InvalidSchema(format!(
                "duplicate column name `{}`",
                col.name
            )));
        }
        if let (ColumnKind::Categorical, Some(card)) = (col.kind, col.cardinality) {
            if card < 2 {
                return Err(Error::InvalidSchema(format!(
                    "categorical column `{}` has cardinality {card} (< 2)",
                    col.name
                )));
            }
        }
    }
    Ok(())
}

/// Rows of mixed categorical/continuous features with optional class labels.
///
/// Continuous columns are stored in schema order in `continuous`, categorical
/// indices in schema order in `categorical` (row-major, `n_rows × n_categorical`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularDataset {
    pub schema: Vec<ColumnSchema>,
    pub continuous: Matrix,
    pub categorical: Vec<u32>,
    pub labels: Option<Vec<usize>>,
    /// True labels of rows whose labels are hidden from training (unlabeled
    /// split). Only read when scoring pseudo-labels.
    pub held_out_labels: Option<Vec<usize>>,
    pub n_classes: usize,
    pub row_ids: Vec<u64>,
}

impl TabularDataset {
    pub fn n_rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_ids.is_empty()
    }

    pub fn n_continuous(&self) -> usize {
        self.continuous.cols()
    }

    pub fn n_categorical(&self) -> usize {
        self.schema
            .iter()
            .filter(|c| c.kind == ColumnKind::Categorical)
            .count()
    }

    /// Raw column count `|C| + |D|`.
    pub fn n_columns(&self) -> usize {
        self.schema.len()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.schema
            .iter()
            .filter(|c| c.kind == ColumnKind::Categorical)
            .map(|c| c.cardinality.unwrap_or(0))
            .collect()
    }

    pub fn categorical_row(&self, i: usize) -> &[u32] {
        let d = self.n_categorical();
        &self.categorical[i * d..(i + 1) * d]
    }

    /// Visible labels if present, otherwise the held-out ones.
    pub fn true_labels(&self) -> Option<&[usize]> {
        self.labels
            .as_deref()
            .or(self.held_out_labels.as_deref())
    }

    /// Subset of rows in the given order.
    pub fn take(&self, rows: &[usize]) -> TabularDataset {
        let d = self.n_categorical();
        let mut categorical = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            categorical.extend_from_slice(self.categorical_row(r));
        }
        let pick = |v: &Vec<usize>| rows.iter().map(|&r| v[r]).collect::<Vec<_>>();
        TabularDataset {
            schema: self.schema.clone(),
            continuous: self.continuous.gather_rows(rows),
            categorical,
            labels: self.labels.as_ref().map(pick),
            held_out_labels: self.held_out_labels.as_ref().map(pick),
            n_classes: self.n_classes,
            row_ids: rows.iter().map(|&r| self.row_ids[r]).collect(),
        }
    }

    /// Moves visible labels into `held_out_labels`.
    pub fn hide_labels(mut self) -> TabularDataset {
        if let Some(labels) = self.labels.take() {
            self.held_out_labels = Some(labels);
        }
        self
    }

    /// Checks data invariants: index bounds and label range.
    pub fn validate(&self) -> Result<()> {
        validate_schema(&self.schema)?;
        let cards = self.cardinalities();
        let d = cards.len();
        if self.categorical.len() != self.n_rows() * d {
            return Err(Error::SchemaMismatch(format!(
                "categorical storage has {} entries, expected {}",
                self.categorical.len(),
                self.n_rows() * d
            )));
        }
        if self.continuous.rows() != self.n_rows() {
            return Err(Error::SchemaMismatch(
                "continuous row count differs from row_ids".into(),
            ));
        }
        for (k, &v) in self.categorical.iter().enumerate() {
            let card = cards[k % d];
            if v as usize >= card {
                return Err(Error::IndexOutOfRange {
                    context: "categorical value",
                    index: v as usize,
                    bound: card,
                });
            }
        }
        for labels in [&self.labels, &self.held_out_labels].into_iter().flatten() {
            if let Some(&bad) = labels.iter().find(|&&y| y >= self.n_classes) {
                return Err(Error::IndexOutOfRange {
                    context: "label",
                    index: bad,
                    bound: self.n_classes,
                });
            }
        }
        Ok(())
    }

    /// Stable content hash for manifests (FNV-1a over ids, labels and values).
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for id in &self.row_ids {
            feed(&id.to_le_bytes());
        }
        for v in self.continuous.data() {
            feed(&v.to_bits().to_le_bytes());
        }
        for v in &self.categorical {
            feed(&v.to_le_bytes());
        }
        if let Some(l) = self.true_labels() {
            for y in l {
                feed(&(*y as u64).to_le_bytes());
            }
        }
        format!("{h:016x}")
    }
}
