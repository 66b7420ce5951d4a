//! Data matrices with missing-value masks, CSV input/output and
//! preprocessing.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense `n × d` matrix. Missing cells hold `0.0` and are flagged in the
/// mask; they never enter any statistic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataMatrix {
    n: usize,
    d: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
    pub row_labels: Option<Vec<String>>,
    pub col_labels: Option<Vec<String>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsvFormat {
    /// Plain numeric grid; empty cells are missing.
    CsvDense,
    /// First row holds column labels and first column row labels.
    LabeledCsv,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preprocess {
    /// Global affine map onto `[0, 1]`.
    Minmax01,
    /// TF-IDF weighting followed by row-wise ℓ2 normalization.
    TfidfL2,
    #[default]
    None,
}

impl DataMatrix {
    pub fn new(n: usize, d: usize, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::InvalidData(format!("matrix must be non-empty, got {n}×{d}")));
        }
        if values.len() != n * d {
            return Err(Error::dim("matrix values", n * d, values.len()));
        }
        if mask.len() != n * d {
            return Err(Error::dim("matrix mask", n * d, mask.len()));
        }
        let mut values = values;
        for (i, (v, &m)) in values.iter_mut().zip(&mask).enumerate() {
            if !m {
                *v = 0.0;
            } else if !v.is_finite() {
                return Err(Error::NonFinite(format!("matrix cell ({}, {})", i / d, i % d)));
            }
        }
        Ok(Self {
            n,
            d,
            values,
            mask,
            row_labels: None,
            col_labels: None,
        })
    }

    /// Fully observed matrix from rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != d) {
            return Err(Error::RaggedRows {
                line: i + 1,
                expected: d,
                found: r.len(),
            });
        }
        Self::new(n, d, rows.concat(), vec![true; n * d])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.d + j]
    }

    pub fn is_present(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.d + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn row_mask(&self, i: usize) -> &[bool] {
        &self.mask[i * self.d..(i + 1) * self.d]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, j)).collect()
    }

    pub fn column_mask(&self, j: usize) -> Vec<bool> {
        (0..self.n).map(|i| self.is_present(i, j)).collect()
    }

    pub fn present_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Marks a cell missing.
    pub fn hide(&mut self, i: usize, j: usize) {
        self.mask[i * self.d + j] = false;
        self.values[i * self.d + j] = 0.0;
    }

    /// Present values in row-major order.
    pub fn present_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().zip(&self.mask).filter(|(_, m)| **m).map(|(v, _)| *v)
    }

    /// Values with missing cells replaced by their column mean (0 for
    /// columns with no observations). Used as encoder input.
    pub fn imputed(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.d];
        let mut counts = vec![0usize; self.d];
        for i in 0..self.n {
            for j in 0..self.d {
                if self.is_present(i, j) {
                    sums[j] += self.get(i, j);
                    counts[j] += 1;
                }
            }
        }
        let means: Vec<f64> = sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect();
        let mut out = self.values.clone();
        for i in 0..self.n {
            for j in 0..self.d {
                if !self.is_present(i, j) {
                    out[i * self.d + j] = means[j];
                }
            }
        }
        out
    }

    /// Matrix restricted to the given rows and columns (labels dropped).
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(rows.len() * cols.len());
        let mut mask = Vec::with_capacity(rows.len() * cols.len());
        for &i in rows {
            for &j in cols {
                values.push(self.get(i, j));
                mask.push(self.is_present(i, j));
            }
        }
        Self::new(rows.len(), cols.len(), values, mask)
    }

    pub fn transpose(&self) -> Self {
        let mut values = Vec::with_capacity(self.n * self.d);
        let mut mask = Vec::with_capacity(self.n * self.d);
        for j in 0..self.d {
            for i in 0..self.n {
                values.push(self.get(i, j));
                mask.push(self.is_present(i, j));
            }
        }
        Self {
            n: self.d,
            d: self.n,
            values,
            mask,
            row_labels: self.col_labels.clone(),
            col_labels: self.row_labels.clone(),
        }
    }
}

fn parse_cell(field: &str, line: usize, column: usize) -> Result<Option<f64>> {
    let t = field.trim();
    if t.is_empty() {
        return Ok(None);
    }
    match t.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(Error::NonNumeric {
            line,
            field: column + 1,
            value: t.to_string(),
        }),
    }
}

pub fn load_matrix(path: &Path, format: CsvFormat) -> Result<DataMatrix> {
    let text = fs::read_to_string(path)?;
    parse_matrix(&text, format)
}

pub fn parse_matrix(text: &str, format: CsvFormat) -> Result<DataMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        let line = rec.position().map_or(records.len() + 1, |p| p.line() as usize);
        records.push((line, rec));
    }
    if records.is_empty() {
        return Err(Error::EmptyFile);
    }
    let (col_labels, body, skip) = match format {
        CsvFormat::CsvDense => (None, &records[..], 0),
        CsvFormat::LabeledCsv => {
            let header = &records[0].1;
            let labels: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
            if records.len() < 2 {
                return Err(Error::EmptyFile);
            }
            (Some(labels), &records[1..], 1)
        }
    };
    let width = body[0].1.len();
    if let Some(labels) = &col_labels {
        if labels.len() + 1 != width {
            return Err(Error::RaggedRows {
                line: records[0].0,
                expected: width,
                found: labels.len() + 1,
            });
        }
    }
    let d = width - skip;
    if d == 0 {
        return Err(Error::EmptyFile);
    }
    let mut values = Vec::with_capacity(body.len() * d);
    let mut mask = Vec::with_capacity(body.len() * d);
    let mut row_labels = Vec::new();
    for (line, rec) in body {
        if rec.len() != width {
            return Err(Error::RaggedRows {
                line: *line,
                expected: width,
                found: rec.len(),
            });
        }
        if skip == 1 {
            row_labels.push(rec[0].trim().to_string());
        }
        for (c, field) in rec.iter().enumerate().skip(skip) {
            match parse_cell(field, *line, c)? {
                Some(v) => {
                    values.push(v);
                    mask.push(true);
                }
                None => {
                    values.push(0.0);
                    mask.push(false);
                }
            }
        }
    }
    let mut m = DataMatrix::new(body.len(), d, values, mask)?;
    if skip == 1 {
        m.row_labels = Some(row_labels);
        m.col_labels = col_labels;
    }
    Ok(m)
}

/// Writes `contents` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Dense CSV text; missing cells are left empty.
pub fn to_csv(matrix: &DataMatrix) -> String {
    let mut out = String::new();
    let labeled = matrix.row_labels.is_some() && matrix.col_labels.is_some();
    if labeled {
        out.push_str("label");
        for l in matrix.col_labels.as_ref().expect("checked") {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
    }
    for i in 0..matrix.n {
        if labeled {
            out.push_str(&matrix.row_labels.as_ref().expect("checked")[i]);
            out.push(',');
        }
        for j in 0..matrix.d {
            if j > 0 {
                out.push(',');
            }
            if matrix.is_present(i, j) {
                out.push_str(&format!("{}", matrix.get(i, j)));
            }
        }
        out.push('\n');
    }
    out
}

pub fn write_matrix(matrix: &DataMatrix, path: &Path) -> Result<()> {
    write_atomic(path, to_csv(matrix).as_bytes())
}

pub fn preprocess(matrix: &DataMatrix, mode: Preprocess) -> Result<DataMatrix> {
    let mut out = matrix.clone();
    match mode {
        Preprocess::None => {}
        Preprocess::Minmax01 => {
            let lo = matrix.present_values().fold(f64::INFINITY, f64::min);
            let hi = matrix.present_values().fold(f64::NEG_INFINITY, f64::max);
            if !(hi > lo) {
                return Err(Error::InvalidData("min-max scaling of a constant matrix".into()));
            }
            for (v, &m) in out.values.iter_mut().zip(&matrix.mask) {
                if m {
                    *v = ((*v - lo) / (hi - lo)).clamp(0.0, 1.0);
                }
            }
        }
        Preprocess::TfidfL2 => {
            if matrix.present_values().any(|v| v < 0.0) {
                return Err(Error::InvalidData("TF-IDF needs nonnegative counts".into()));
            }
            let n = matrix.n as f64;
            let idf: Vec<f64> = (0..matrix.d)
                .map(|j| {
                    let df = (0..matrix.n)
                        .filter(|&i| matrix.is_present(i, j) && matrix.get(i, j) > 0.0)
                        .count();
                    (n / (1.0 + df as f64)).ln()
                })
                .collect();
            for i in 0..matrix.n {
                let row = &mut out.values[i * matrix.d..(i + 1) * matrix.d];
                for (j, v) in row.iter_mut().enumerate() {
                    *v *= idf[j];
                }
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for v in row.iter_mut() {
                        *v /= norm;
                    }
                }
            }
        }
    }
    Ok(out)
}
