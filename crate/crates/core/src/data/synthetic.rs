//! Synthetic datasets with known class structure.

use super::{ColumnSchema, TabularDataset};
use crate::matrix::Matrix;
use crate::rng::{normal, stream, Stream};

/// Two isotropic unit-variance Gaussian blobs in 2-D centred at
/// `(±separation / 2, 0)`. Classes alternate row by row, so any prefix of
/// even length is balanced.
pub fn two_blobs(n_rows: usize, separation: f64, seed: u64) -> TabularDataset {
    let mut rng = stream(seed, Stream::Synthetic, 0);
    let mut data = Vec::with_capacity(2 * n_rows);
    let mut labels = Vec::with_capacity(n_rows);
    for i in 0..n_rows {
        let class = i % 2;
        let cx = if class == 0 { -separation / 2.0 } else { separation / 2.0 };
        data.push(cx + normal(&mut rng));
        data.push(normal(&mut rng));
        labels.push(class);
    }
    TabularDataset {
        schema: vec![ColumnSchema::continuous("x0"), ColumnSchema::continuous("x1")],
        continuous: Matrix::from_vec(n_rows, 2, data).expect("two columns per row"),
        categorical: Vec::new(),
        labels: Some(labels),
        held_out_labels: None,
        n_classes: 2,
        row_ids: (0..n_rows as u64).collect(),
    }
}
