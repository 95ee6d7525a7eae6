use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ColumnKind, TabularDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizedColumn {
    pub name: String,
    pub mean: f64,
    /// Population standard deviation; zero marks a constant column.
    pub std: f64,
}

/// Zero-mean / unit-variance scaling of continuous columns, fitted on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub columns: Vec<StandardizedColumn>,
}

fn continuous_names(ds: &TabularDataset) -> Vec<&str> {
    ds.schema
        .iter()
        .filter(|c| c.kind == ColumnKind::Continuous)
        .map(|c| c.name.as_str())
        .collect()
}

pub fn fit_standardizer(ds: &TabularDataset) -> Standardizer {
    let n = ds.n_rows();
    let columns = continuous_names(ds)
        .into_iter()
        .enumerate()
        .map(|(j, name)| {
            let (mean, std) = if n == 0 {
                (0.0, 0.0)
            } else {
                let mean = (0..n).map(|i| ds.continuous[(i, j)]).sum::<f64>() / n as f64;
                let var = (0..n)
                    .map(|i| (ds.continuous[(i, j)] - mean).powi(2))
                    .sum::<f64>()
                    / n as f64;
                (mean, var.sqrt())
            };
            StandardizedColumn {
                name: name.to_string(),
                mean,
                std,
            }
        })
        .collect();
    Standardizer { columns }
}

impl Standardizer {
    fn check(&self, ds: &TabularDataset) -> Result<()> {
        let names = continuous_names(ds);
        if names.len() != self.columns.len()
            || names.iter().zip(&self.columns).any(|(a, b)| *a != b.name)
        {
            return Err(Error::SchemaMismatch(format!(
                "standardizer fitted on {:?}, dataset has {:?}",
                self.columns.iter().map(|c| &c.name).collect::<Vec<_>>(),
                names
            )));
        }
        Ok(())
    }

    pub fn apply(&self, ds: &TabularDataset) -> Result<TabularDataset> {
        self.check(ds)?;
        let mut out = ds.clone();
        for i in 0..out.n_rows() {
            for (j, col) in self.columns.iter().enumerate() {
                let v = &mut out.continuous[(i, j)];
                *v = if col.std > 0.0 {
                    (*v - col.mean) / col.std
                } else {
                    0.0
                };
            }
        }
        Ok(out)
    }

    /// Maps standardized values back to raw units; constant columns return their mean.
    pub fn invert(&self, ds: &TabularDataset) -> Result<TabularDataset> {
        self.check(ds)?;
        let mut out = ds.clone();
        for i in 0..out.n_rows() {
            for (j, col) in self.columns.iter().enumerate() {
                let v = &mut out.continuous[(i, j)];
                *v = *v * col.std + col.mean;
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ColumnSchema;
    use crate::matrix::Matrix;
    use proptest::prelude::*;

    fn dataset(cols: &[Vec<f64>]) -> TabularDataset {
        let n = cols.first().map_or(0, Vec::len);
        let rows: Vec<Vec<f64>> = (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
        let continuous = if n == 0 {
            Matrix::zeros(0, cols.len())
        } else {
            Matrix::from_rows(&rows)
        };
        TabularDataset {
            schema: (0..cols.len())
                .map(|j| ColumnSchema::continuous(format!("c{j}")))
                .collect(),
            continuous,
            categorical: vec![],
            labels: None,
            held_out_labels: None,
            n_classes: 0,
            row_ids: (0..n as u64).collect(),
        }
    }

    #[test]
    fn standardizes_with_population_std() {
        let ds = dataset(&[vec![2.0, 4.0, 6.0]]);
        let out = fit_standardizer(&ds).apply(&ds).unwrap();
        let expect = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in out.continuous.column(0).iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let ds = dataset(&[vec![5.0, 5.0, 5.0]]);
        let s = fit_standardizer(&ds);
        assert_eq!(s.apply(&ds).unwrap().continuous.column(0), vec![0.0; 3]);
        assert_eq!(s.invert(&s.apply(&ds).unwrap()).unwrap(), ds);
    }

    #[test]
    fn idempotent_on_standardized_data() {
        let ds = dataset(&[vec![1.0, 7.0, -2.0, 3.5]]);
        let once = fit_standardizer(&ds).apply(&ds).unwrap();
        let twice = fit_standardizer(&once).apply(&once).unwrap();
        assert!(once.continuous.max_abs_diff(&twice.continuous) < 1e-6);
    }

    #[test]
    fn schema_mismatch_rejected() {
        let a = dataset(&[vec![1.0, 2.0]]);
        let b = dataset(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert!(matches!(
            fit_standardizer(&a).apply(&b),
            Err(Error::SchemaMismatch(_))
        ));
    }

    proptest! {
        #[test]
        fn fitted_split_is_standard_and_round_trips(
            col in proptest::collection::vec(-1e3f64..1e3, 2..60),
            shift in -50.0f64..50.0,
        ) {
            let col2: Vec<f64> = col.iter().map(|x| x * 0.5 + shift).collect();
            let ds = dataset(&[col.clone(), col2]);
            let s = fit_standardizer(&ds);
            let out = s.apply(&ds).unwrap();
            for (j, c) in s.columns.iter().enumerate() {
                if c.std > 1e-9 {
                    let v = out.continuous.column(j);
                    let n = v.len() as f64;
                    let mean = v.iter().sum::<f64>() / n;
                    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
                    prop_assert!(mean.abs() < 1e-6);
                    prop_assert!((std - 1.0).abs() < 1e-6);
                }
            }
            let back = s.invert(&out).unwrap();
            prop_assert!(back.continuous.max_abs_diff(&ds.continuous) < 1e-9);
        }
    }
}
