use std::collections::HashMap;
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{validate_schema, ColumnKind, ColumnSchema, TabularDataset};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Category and label vocabularies fitted on the training file.
///
/// Category indices follow first-occurrence order. Label classes are sorted
/// (numerically when every label parses as an integer) so that class indices
/// do not depend on row order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub schema: Vec<ColumnSchema>,
    /// One entry per categorical column, schema order.
    pub categories: Vec<Vec<String>>,
    pub label_column: Option<String>,
    pub classes: Vec<String>,
}

impl Vocabulary {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn read_header(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    Ok(reader.headers()?.iter().map(|h| h.trim().to_string()).collect())
}

struct RawTable {
    continuous: Vec<f64>,
    categorical: Vec<String>,
    labels: Vec<String>,
    n_rows: usize,
}

fn read_raw(path: &Path, schema: &[ColumnSchema], label_column: Option<&str>) -> Result<RawTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let position = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let mut cont_idx = Vec::new();
    let mut cat_idx = Vec::new();
    for col in schema {
        let at = position(&col.name)?;
        match col.kind {
            ColumnKind::Continuous => cont_idx.push((at, col.name.as_str())),
            ColumnKind::Categorical => cat_idx.push((at, col.name.as_str())),
        }
    }
    let label_idx = label_column.map(position).transpose()?;

    let mut table = RawTable {
        continuous: Vec::new(),
        categorical: Vec::new(),
        labels: Vec::new(),
        n_rows: 0,
    };
    for (k, record) in reader.records().enumerate() {
        let record = record?;
        let row = k + 1;
        let field = |at: usize, name: &str| -> Result<&str> {
            match record.get(at) {
                Some(v) if !v.is_empty() => Ok(v),
                other => Err(Error::Parse {
                    row,
                    column: name.to_string(),
                    value: other.unwrap_or("").to_string(),
                }),
            }
        };
        for &(at, name) in &cont_idx {
            let raw = field(at, name)?;
            let v: f64 = raw.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| {
                Error::Parse {
                    row,
                    column: name.to_string(),
                    value: raw.to_string(),
                }
            })?;
            table.continuous.push(v);
        }
        for &(at, name) in &cat_idx {
            table.categorical.push(field(at, name)?.to_string());
        }
        if let (Some(at), Some(name)) = (label_idx, label_column) {
            table.labels.push(field(at, name)?.to_string());
        }
        table.n_rows += 1;
    }
    Ok(table)
}

fn sort_classes(mut classes: Vec<String>) -> Vec<String> {
    let numeric: Option<Vec<i64>> = classes.iter().map(|c| c.parse().ok()).collect();
    match numeric {
        Some(_) => classes.sort_by_key(|c| c.parse::<i64>().unwrap_or_default()),
        None => classes.sort(),
    }
    classes
}

/// Reads a training CSV, fitting category and label vocabularies.
pub fn load_csv(
    path: &Path,
    schema: &[ColumnSchema],
    label_column: Option<&str>,
) -> Result<(TabularDataset, Vocabulary)> {
    validate_schema(schema)?;
    let raw = read_raw(path, schema, label_column)?;
    let n_cat = schema
        .iter()
        .filter(|c| c.kind == ColumnKind::Categorical)
        .count();
    let mut categories: Vec<Vec<String>> = vec![Vec::new(); n_cat];
    let mut lookup: Vec<HashMap<String, u32>> = vec![HashMap::new(); n_cat];
    let mut categorical = Vec::with_capacity(raw.categorical.len());
    for (k, value) in raw.categorical.iter().enumerate() {
        let j = k % n_cat.max(1);
        let next = lookup[j].len() as u32;
        let idx = *lookup[j].entry(value.clone()).or_insert_with(|| {
            categories[j].push(value.clone());
            next
        });
        categorical.push(idx);
    }

    let mut fitted = schema.to_vec();
    let mut j = 0;
    for col in fitted.iter_mut() {
        if col.kind == ColumnKind::Categorical {
            let card = categories[j].len();
            if raw.n_rows > 0 && card < 2 {
                return Err(Error::InvalidSchema(format!(
                    "categorical column `{}` has {card} distinct value(s); at least 2 required",
                    col.name
                )));
            }
            col.cardinality = Some(card);
            j += 1;
        }
    }

    let mut classes: Vec<String> = Vec::new();
    if label_column.is_some() {
        let mut seen = std::collections::HashSet::new();
        for l in &raw.labels {
            if seen.insert(l.as_str()) {
                classes.push(l.clone());
            }
        }
        classes = sort_classes(classes);
    }
    let vocab = Vocabulary {
        schema: fitted,
        categories,
        label_column: label_column.map(str::to_string),
        classes,
    };
    let labels = encode_labels(&raw, &vocab)?;
    let ds = TabularDataset {
        schema: vocab.schema.clone(),
        continuous: Matrix::from_vec(raw.n_rows, schema.len() - n_cat, raw.continuous)?,
        categorical,
        labels,
        held_out_labels: None,
        n_classes: vocab.classes.len(),
        row_ids: (0..raw.n_rows as u64).collect(),
    };
    Ok((ds, vocab))
}

fn encode_labels(raw: &RawTable, vocab: &Vocabulary) -> Result<Option<Vec<usize>>> {
    let Some(name) = &vocab.label_column else {
        return Ok(None);
    };
    let lookup: HashMap<&str, usize> = vocab
        .classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    raw.labels
        .iter()
        .enumerate()
        .map(|(k, l)| {
            lookup.get(l.as_str()).copied().ok_or_else(|| Error::UnknownCategory {
                column: name.clone(),
                value: l.clone(),
                row: k + 1,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Reads a CSV (typically the test file) using a previously fitted vocabulary.
/// Categories or labels absent from the vocabulary raise `UnknownCategory`.
pub fn load_csv_with_vocabulary(path: &Path, vocab: &Vocabulary) -> Result<TabularDataset> {
    let raw = read_raw(path, &vocab.schema, vocab.label_column.as_deref())?;
    let n_cat = vocab.categories.len();
    let lookup: Vec<HashMap<&str, u32>> = vocab
        .categories
        .iter()
        .map(|cats| {
            cats.iter()
                .enumerate()
                .map(|(i, c)| (c.as_str(), i as u32))
                .collect()
        })
        .collect();
    let cat_names: Vec<&str> = vocab
        .schema
        .iter()
        .filter(|c| c.kind == ColumnKind::Categorical)
        .map(|c| c.name.as_str())
        .collect();
    let categorical = raw
        .categorical
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let j = k % n_cat;
            lookup[j]
                .get(v.as_str())
                .copied()
                .ok_or_else(|| Error::UnknownCategory {
                    column: cat_names[j].to_string(),
                    value: v.clone(),
                    row: k / n_cat + 1,
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = encode_labels(&raw, vocab)?;
    Ok(TabularDataset {
        schema: vocab.schema.clone(),
        continuous: Matrix::from_vec(raw.n_rows, vocab.schema.len() - n_cat, raw.continuous)?,
        categorical,
        labels,
        held_out_labels: None,
        n_classes: vocab.classes.len(),
        row_ids: (0..raw.n_rows as u64).collect(),
    })
}
