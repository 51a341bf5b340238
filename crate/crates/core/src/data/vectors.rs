//! Real-valued vector data (precomputed embeddings, tabular features).

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};

/// Features whose most frequent value covers more than this fraction of
/// rows are dropped by [`preprocess_tabular`].
pub const DEFAULT_UNIQUENESS_THRESHOLD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorDataset {
    /// `n × d`.
    pub data: Tensor,
    pub columns: Vec<String>,
    pub labels: Option<Vec<usize>>,
    pub standardization: Option<Standardization>,
}

impl VectorDataset {
    pub fn new(data: Tensor, columns: Vec<String>, labels: Option<Vec<usize>>) -> Result<Self> {
        if data.shape().len() != 2 || data.cols() == 0 {
            return Err(Error::input(
                "vector dataset must be a non-empty n × d matrix",
            ));
        }
        if columns.len() != data.cols() {
            return Err(Error::input(format!(
                "{} column names for {} features",
                columns.len(),
                data.cols()
            )));
        }
        if !data.is_finite() {
            return Err(Error::input("vector dataset contains non-finite values"));
        }
        if let Some(l) = &labels {
            if l.len() != data.rows() {
                return Err(Error::input(format!(
                    "{} labels for {} rows",
                    l.len(),
                    data.rows()
                )));
            }
        }
        Ok(VectorDataset {
            data,
            columns,
            labels,
            standardization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn subset(&self, rows: &[usize]) -> VectorDataset {
        VectorDataset {
            data: self.data.select_rows(rows),
            columns: self.columns.clone(),
            labels: self
                .labels
                .as_ref()
                .map(|l| rows.iter().map(|&r| l[r]).collect()),
            standardization: self.standardization.clone(),
        }
    }
}

/// Reads a CSV with a header row. Every cell must parse as a finite real;
/// `label_column`, if given, holds non-negative integer class labels and is
/// removed from the features.
pub fn load_vectors_csv(
    path: impl AsRef<Path>,
    label_column: Option<&str>,
) -> Result<VectorDataset> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(&shown, 1, 0, e))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(&shown, 1, 0, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let label_at =
        match label_column {
            Some(name) => Some(headers.iter().position(|h| h == name).ok_or_else(|| {
                Error::config(format!("{shown}: no label column named {name:?}"))
            })?),
            None => None,
        };
    let columns: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(k, _)| Some(*k) != label_at)
        .map(|(_, h)| h.clone())
        .collect();
    if columns.is_empty() {
        return Err(Error::input(format!("{shown}: no feature columns")));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        // line 1 is the header
        let line = r + 2;
        let record = record.map_err(|e| csv_error(&shown, line, 0, e))?;
        if record.len() != headers.len() {
            return Err(Error::Csv {
                path: shown.clone(),
                row: line,
                column: record.len().min(headers.len()) + 1,
                detail: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        for (k, cell) in record.iter().enumerate() {
            let bad = |what: &str| Error::Csv {
                path: shown.clone(),
                row: line,
                column: k + 1,
                detail: format!("{what}: {cell:?}"),
            };
            if Some(k) == label_at {
                labels.push(
                    cell.parse::<usize>()
                        .map_err(|_| bad("label is not a non-negative integer"))?,
                );
            } else {
                let v: f64 = cell.parse().map_err(|_| bad("not a number"))?;
                if !v.is_finite() {
                    return Err(bad("not finite"));
                }
                data.push(v);
            }
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::input(format!("{shown}: no data rows")));
    }
    let d = columns.len();
    VectorDataset::new(
        Tensor::matrix(rows, d, data)?,
        columns,
        label_at.map(|_| labels),
    )
}

fn csv_error(path: &str, row: usize, column: usize, e: csv::Error) -> Error {
    if e.is_io_error() {
        if let csv::ErrorKind::Io(io) = e.into_kind() {
            return Error::io(path, io);
        }
        return Error::input(format!("{path}: unreadable"));
    }
    Error::Csv {
        path: path.to_string(),
        row,
        column,
        detail: e.to_string(),
    }
}

/// Which features survived filtering and the train-split statistics used to
/// standardize them.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularRecord {
    pub kept: Vec<usize>,
    pub standardization: Standardization,
}

impl TabularRecord {
    /// Select the kept features of `ds` and standardize them.
    pub fn apply(&self, ds: &VectorDataset) -> Result<VectorDataset> {
        if let Some(&max) = self.kept.iter().max() {
            if max >= ds.dim() {
                return Err(Error::input(format!(
                    "record keeps feature {max} but the dataset has {} features",
                    ds.dim()
                )));
            }
        }
        let (n, d) = (ds.len(), self.kept.len());
        let Standardization { mean, std } = &self.standardization;
        let mut out = Vec::with_capacity(n * d);
        for r in 0..n {
            let row = ds.data.row_slice(r);
            out.extend(
                self.kept
                    .iter()
                    .enumerate()
                    .map(|(k, &c)| (row[c] - mean[k]) / std[k]),
            );
        }
        Ok(VectorDataset {
            data: Tensor::matrix(n, d, out)?,
            columns: self.kept.iter().map(|&c| ds.columns[c].clone()).collect(),
            labels: ds.labels.clone(),
            standardization: Some(self.standardization.clone()),
        })
    }
}

/// Drop features whose most frequent value occupies more than `threshold`
/// of the rows, then standardize the rest with `train`'s statistics.
pub fn preprocess_tabular(
    train: &VectorDataset,
    threshold: f64,
) -> Result<(VectorDataset, TabularRecord)> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::config(format!(
            "uniqueness threshold must be in (0, 1], got {threshold}"
        )));
    }
    let n = train.len();
    let mut kept = Vec::new();
    for c in 0..train.dim() {
        let mut counts: HashMap<u64, usize> = HashMap::new();
        for r in 0..n {
            // +0.0 and -0.0 count as the same value
            let v = train.data.get2(r, c) + 0.0;
            *counts.entry(v.to_bits()).or_default() += 1;
        }
        let most = counts.values().copied().max().unwrap_or(0);
        if (most as f64) / (n as f64) <= threshold {
            kept.push(c);
        }
    }
    if kept.is_empty() {
        return Err(Error::input(format!(
            "every feature has a value repeated in more than {threshold} of the rows"
        )));
    }
    let mut mean = Vec::with_capacity(kept.len());
    let mut std = Vec::with_capacity(kept.len());
    for &c in &kept {
        let m = (0..n).map(|r| train.data.get2(r, c)).sum::<f64>() / n as f64;
        let var = (0..n)
            .map(|r| (train.data.get2(r, c) - m).powi(2))
            .sum::<f64>()
            / n as f64;
        mean.push(m);
        std.push(if var > 0.0 { var.sqrt() } else { 1.0 });
    }
    let record = TabularRecord {
        kept,
        standardization: Standardization { mean, std },
    };
    Ok((record.apply(train)?, record))
}

/// Write `ds` as a headed CSV that [`load_vectors_csv`] reads back exactly;
/// labels, if any, go to a trailing `label` column.
pub fn write_vectors_csv(path: impl AsRef<Path>, ds: &VectorDataset) -> Result<()> {
    let path = path.as_ref();
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::input(format!("{}: {other:?}", path.display())),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header = ds.columns.clone();
    if ds.labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header).map_err(io)?;
    for r in 0..ds.len() {
        let mut rec: Vec<String> = ds.data.row_slice(r).iter().map(|v| v.to_string()).collect();
        if let Some(l) = &ds.labels {
            rec.push(l[r].to_string());
        }
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One class's rows, split into train and held-out test parts.
#[derive(Clone, Debug)]
pub struct ClassSplit {
    pub class: usize,
    pub train: VectorDataset,
    pub test: VectorDataset,
}

/// Per class, a seeded random `test_fraction` of the rows is held out.
pub fn class_split(ds: &VectorDataset, test_fraction: f64, seed: u64) -> Result<Vec<ClassSplit>> {
    let labels = ds
        .labels
        .as_ref()
        .ok_or_else(|| Error::input("class split needs a labelled dataset"))?;
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config(format!(
            "test fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let mut classes: Vec<usize> = labels.clone();
    classes.sort_unstable();
    classes.dedup();
    let mut out = Vec::new();
    for class in classes {
        let mut rows: Vec<usize> = (0..ds.len()).filter(|&r| labels[r] == class).collect();
        let mut rng = RngStream::new(seed, 200 + class as u64);
        rng.shuffle(&mut rows);
        let n_test = ((rows.len() as f64) * test_fraction).round().max(1.0) as usize;
        if n_test >= rows.len() {
            return Err(Error::input(format!(
                "class {class} has {} rows, too few to hold out a test split",
                rows.len()
            )));
        }
        let (test, train) = rows.split_at(n_test);
        out.push(ClassSplit {
            class,
            train: ds.subset(train),
            test: ds.subset(test),
        });
    }
    Ok(out)
}
