//! Loading and conditioning of numeric data matrices.
//!
//! Supported sources are header-first CSV files, IDX image/label pairs (the
//! MNIST distribution format) and a small JSON matrix format used for
//! externally exported activations, e.g. hidden states plus logits.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const MIN_STD: f64 = 1e-12;

/// A column removed during loading or standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedColumn {
    pub index: usize,
    pub name: String,
    pub reason: String,
}

/// `N x p` matrix of finite values with unique column names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataMatrix {
    #[serde(with = "crate::serde_rows")]
    pub values: Array2<f64>,
    pub column_names: Vec<String>,
    /// Columns removed while loading, indexed against the source file.
    #[serde(default)]
    pub drop_log: Vec<DroppedColumn>,
}

impl DataMatrix {
    pub fn new(values: Array2<f64>, column_names: Vec<String>) -> Result<Self> {
        if column_names.len() != values.ncols() {
            return Err(Error::data(format!(
                "{} column names for {} columns",
                column_names.len(),
                values.ncols()
            )));
        }
        let mut seen = HashSet::with_capacity(column_names.len());
        for name in &column_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::data(format!("duplicate column name {name:?}")));
            }
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos / values.ncols().max(1), pos % values.ncols().max(1));
            return Err(Error::data(format!("non-finite value at row {r}, column {c}")));
        }
        Ok(DataMatrix {
            values,
            column_names,
            drop_log: Vec::new(),
        })
    }

    /// Matrix with generated column names `x0, x1, ...`.
    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        let names = (0..values.ncols()).map(|i| format!("x{i}")).collect();
        Self::new(values, names)
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    /// Sub-matrix of the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> DataMatrix {
        DataMatrix {
            values: self.values.select(Axis(0), rows),
            column_names: self.column_names.clone(),
            drop_log: self.drop_log.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    /// Drop any column holding an empty or non-numeric cell.
    #[default]
    DropColumn,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvOptions {
    pub delimiter: u8,
    pub missing_policy: MissingPolicy,
    /// Columns removed by name before anything else (identifiers, fold numbers, ...).
    pub exclude: Vec<String>,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions {
            delimiter: b',',
            missing_policy: MissingPolicy::DropColumn,
            exclude: Vec::new(),
        }
    }
}

fn parse_cell(cell: &str) -> Option<f64> {
    let v: f64 = cell.trim().parse().ok()?;
    v.is_finite().then_some(v)
}

/// Load a header-first CSV file, keeping the fully numeric columns.
pub fn load_csv(path: impl AsRef<Path>, options: &CsvOptions) -> Result<DataMatrix> {
    let path = path.as_ref();
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, options)
}

/// [`load_csv`] on an in-memory buffer.
pub fn parse_csv(bytes: &[u8], options: &CsvOptions) -> Result<DataMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(options.delimiter)
        .has_headers(true)
        .flexible(false)
        .from_reader(bytes);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::data(format!("bad CSV header: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(Error::data("no data rows"));
    }
    let p = header.len();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); p];
    let mut numeric = vec![true; p];
    let mut rows = 0usize;
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { .. } => {
                Error::data(format!("ragged rows: record {} has wrong field count", r + 1))
            }
            _ => Error::data(format!("CSV parse error: {e}")),
        })?;
        for (c, cell) in record.iter().enumerate() {
            match parse_cell(cell) {
                Some(v) if numeric[c] => columns[c].push(v),
                Some(_) => {}
                None => {
                    if options.missing_policy == MissingPolicy::Error
                        && !options.exclude.contains(&header[c])
                    {
                        return Err(Error::data(format!(
                            "missing or non-numeric value {:?} in column {:?}, row {}",
                            cell,
                            header[c],
                            r + 1
                        )));
                    }
                    numeric[c] = false;
                    columns[c].clear();
                }
            }
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::data("no data rows"));
    }

    let mut kept = Vec::new();
    let mut drop_log = Vec::new();
    for c in 0..p {
        if options.exclude.contains(&header[c]) {
            drop_log.push(DroppedColumn {
                index: c,
                name: header[c].clone(),
                reason: "excluded".into(),
            });
        } else if !numeric[c] {
            drop_log.push(DroppedColumn {
                index: c,
                name: header[c].clone(),
                reason: "missing or non-numeric values".into(),
            });
        } else {
            kept.push(c);
        }
    }
    if kept.is_empty() {
        return Err(Error::data("zero numeric columns remain"));
    }
    let mut values = Array2::<f64>::zeros((rows, kept.len()));
    for (j, &c) in kept.iter().enumerate() {
        for (i, v) in columns[c].iter().enumerate() {
            values[[i, j]] = *v;
        }
    }
    let names = kept.iter().map(|&c| header[c].clone()).collect();
    let mut m = DataMatrix::new(values, names)?;
    m.drop_log = drop_log;
    Ok(m)
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::data("truncated IDX header"))
}

/// Parse an IDX image file (magic `0x00000803`) into `(n, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::data(format!("bad IDX magic {magic:#010x} for images")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(Error::data(format!(
            "truncated IDX payload: expected {need} pixel bytes, found {}",
            payload.len()
        )));
    }
    Ok((n, rows, cols, &payload[..need]))
}

/// Parse an IDX label file (magic `0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::data(format!("bad IDX magic {magic:#010x} for labels")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(Error::data(format!(
            "truncated IDX payload: expected {n} labels, found {}",
            payload.len()
        )));
    }
    Ok(payload[..n].to_vec())
}

/// Images flattened row-major and scaled to `[0, 1]`, plus their labels.
pub fn idx_from_bytes(images: &[u8], labels: &[u8]) -> Result<(DataMatrix, Vec<u32>)> {
    let (n, rows, cols, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != n {
        return Err(Error::data(format!(
            "count mismatch: {n} images but {} labels",
            labels.len()
        )));
    }
    let p = rows * cols;
    let values = Array2::from_shape_fn((n, p), |(i, j)| pixels[i * p + j] as f64 / 255.0);
    let names = (0..p)
        .map(|j| format!("px_{}_{}", j / cols, j % cols))
        .collect();
    let m = DataMatrix::new(values, names)?;
    Ok((m, labels.into_iter().map(u32::from).collect()))
}

pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<(DataMatrix, Vec<u32>)> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let labels = fs::read(lp).map_err(|e| Error::io(lp, e))?;
    idx_from_bytes(&images, &labels)
}

/// On-disk layout for exported matrices: `{"columns": [...], "rows": [[...], ...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixFile {
    #[serde(default)]
    pub columns: Option<Vec<String>>,
    pub rows: Vec<Vec<f64>>,
}

pub fn matrix_from_json(text: &str) -> Result<DataMatrix> {
    let file: MatrixFile = serde_json::from_str(text)?;
    let n = file.rows.len();
    if n == 0 {
        return Err(Error::data("no data rows"));
    }
    let p = file.rows[0].len();
    if let Some(r) = file.rows.iter().position(|r| r.len() != p) {
        return Err(Error::data(format!("ragged rows: row {r} has wrong length")));
    }
    let flat: Vec<f64> = file.rows.into_iter().flatten().collect();
    let values = Array2::from_shape_vec((n, p), flat).expect("shape checked");
    match file.columns {
        Some(names) => DataMatrix::new(values, names),
        None => DataMatrix::from_values(values),
    }
}

pub fn load_matrix_json(path: impl AsRef<Path>) -> Result<DataMatrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    matrix_from_json(&text)
}

pub fn matrix_to_json(m: &DataMatrix) -> Result<String> {
    let file = MatrixFile {
        columns: Some(m.column_names.clone()),
        rows: m.values.outer_iter().map(|r| r.to_vec()).collect(),
    };
    Ok(serde_json::to_string(&file)?)
}

/// Column-wise standardization parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Indices (into the input matrix) of the columns kept, ascending.
    pub retained: Vec<usize>,
    pub dropped_columns: Vec<DroppedColumn>,
    /// Column count of the matrix the scaler was fitted on.
    pub input_cols: usize,
}

impl Scaler {
    /// Standardize `data` with these parameters. `data` must have the
    /// column layout the scaler was fitted on.
    pub fn apply(&self, data: &DataMatrix) -> Result<DataMatrix> {
        if data.ncols() != self.input_cols {
            return Err(Error::invalid(format!(
                "dimension mismatch: scaler fitted on {} columns, got {}",
                self.input_cols,
                data.ncols()
            )));
        }
        let mut out = data.values.select(Axis(1), &self.retained);
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (mu, sd) = (self.means[j], self.stds[j]);
            col.mapv_inplace(|v| (v - mu) / sd);
        }
        let names = self
            .retained
            .iter()
            .map(|&c| data.column_names[c].clone())
            .collect();
        DataMatrix::new(out, names)
    }

    /// Map standardized values back to the original units of the retained columns.
    pub fn inverse(&self, z: &Array2<f64>) -> Array2<f64> {
        let mut out = z.clone();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (mu, sd) = (self.means[j], self.stds[j]);
            col.mapv_inplace(|v| v * sd + mu);
        }
        out
    }
}

/// Z-score every column (mean 0, divisor-`N` standard deviation 1).
///
/// Columns whose standard deviation falls below `1e-12` are dropped and
/// listed in the returned [`Scaler`].
pub fn standardize(data: &DataMatrix) -> Result<(DataMatrix, Scaler)> {
    let n = data.nrows();
    if n < 2 {
        return Err(Error::invalid(format!(
            "standardization needs at least 2 rows, got {n}"
        )));
    }
    let nf = n as f64;
    let mut means = Vec::new();
    let mut stds = Vec::new();
    let mut retained = Vec::new();
    let mut dropped = Vec::new();
    for (c, col) in data.values.axis_iter(Axis(1)).enumerate() {
        let mean = col.sum() / nf;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
        let sd = var.sqrt();
        if sd < MIN_STD {
            dropped.push(DroppedColumn {
                index: c,
                name: data.column_names[c].clone(),
                reason: "zero variance".into(),
            });
        } else {
            means.push(mean);
            stds.push(sd);
            retained.push(c);
        }
    }
    if retained.is_empty() {
        return Err(Error::data("all columns constant"));
    }
    let scaler = Scaler {
        means,
        stds,
        retained,
        dropped_columns: dropped,
        input_cols: data.ncols(),
    };
    let out = scaler.apply(data)?;
    Ok((out, scaler))
}

/// Column-wise concatenation `[a | b]`.
///
/// Names from `b` that collide with names already present get `_b`
/// appended (repeatedly, until unique).
pub fn concat_features(a: &DataMatrix, b: &DataMatrix) -> Result<DataMatrix> {
    if a.nrows() != b.nrows() {
        return Err(Error::data(format!(
            "row-count mismatch: {} vs {}",
            a.nrows(),
            b.nrows()
        )));
    }
    let (pa, pb) = (a.ncols(), b.ncols());
    let mut values = Array2::<f64>::zeros((a.nrows(), pa + pb));
    values.slice_mut(s![.., ..pa]).assign(&a.values);
    values.slice_mut(s![.., pa..]).assign(&b.values);
    let mut names = a.column_names.clone();
    let mut seen: HashSet<String> = names.iter().cloned().collect();
    for name in &b.column_names {
        let mut candidate = name.clone();
        while seen.contains(&candidate) {
            candidate.push_str("_b");
        }
        seen.insert(candidate.clone());
        names.push(candidate);
    }
    let mut m = DataMatrix::new(values, names)?;
    m.drop_log = a.drop_log.clone();
    Ok(m)
}
