//! Loader for headered CSV feature tables.

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reads a CSV file with a header row into a dataset.
///
/// `label_column` names the class column (non-negative integers); every
/// other column is a numeric feature, in header order. The class count is
/// the largest label plus one. Ragged rows, non-numeric cells, and a
/// missing label column are errors carrying the 1-based line number.
pub fn load_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => {
                Error::io(path.display().to_string(), std::io::Error::other(e.to_string()))
            }
            _ => parse_err(1, e.to_string()),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| {
            parse_err(
                1,
                format!(
                    "no column named {label_column:?}; header has {:?}",
                    headers.iter().collect::<Vec<_>>()
                ),
            )
        })?;
    let feature_count = headers.len().saturating_sub(1);
    if feature_count == 0 {
        return Err(parse_err(1, "need at least one feature column".into()));
    }

    let mut values = Vec::new();
    let mut y = Vec::new();
    for (row_i, record) in reader.records().enumerate() {
        let line = row_i + 2;
        let record = record.map_err(|e| parse_err(line, e.to_string()))?;
        if record.len() != headers.len() {
            return Err(parse_err(
                line,
                format!("row has {} cells, header has {}", record.len(), headers.len()),
            ));
        }
        for (col, cell) in record.iter().enumerate() {
            if col == label_idx {
                let label: usize = cell.trim().parse().map_err(|_| {
                    parse_err(line, format!("label {cell:?} is not a non-negative integer"))
                })?;
                y.push(label);
            } else {
                let v: f64 = cell.trim().parse().map_err(|_| {
                    parse_err(
                        line,
                        format!("cell {cell:?} in column {:?} is not numeric", &headers[col]),
                    )
                })?;
                values.push(v);
            }
        }
    }
    if y.is_empty() {
        return Err(parse_err(2, "file has a header but no data rows".into()));
    }
    let n = y.len();
    let num_classes = y.iter().max().map_or(0, |m| m + 1).max(2);
    Dataset::new(
        Tensor::from_vec(vec![n, feature_count], values)?,
        y,
        num_classes,
    )
}
