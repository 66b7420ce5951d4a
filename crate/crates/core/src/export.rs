//! Block-ordered matrices and latent coordinates for external plotting.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::Mode;
use crate::data::{to_csv, write_atomic, DataMatrix};
use crate::error::{Error, Result};
use crate::side::Side;
use crate::trainer::{CoClusterResult, Trainer};

/// Indices sorted by `(label, index)` and the `[start, end)` span of each
/// label in that order.
pub fn block_order(labels: &[usize]) -> (Vec<usize>, Vec<(usize, usize, usize)>) {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by_key(|&i| (labels[i], i));
    let mut spans = Vec::new();
    let mut start = 0;
    for k in 1..=order.len() {
        if k == order.len() || labels[order[k]] != labels[order[start]] {
            spans.push((labels[order[start]], start, k));
            start = k;
        }
    }
    (order, spans)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoclusterLayout {
    /// `row_order[new] = old`.
    pub row_order: Vec<usize>,
    pub col_order: Vec<usize>,
    /// `(label, start, end)` per row block.
    pub row_blocks: Vec<(usize, usize, usize)>,
    pub col_blocks: Vec<(usize, usize, usize)>,
    pub matrix: DataMatrix,
}

fn permute(matrix: &DataMatrix, rows: &[usize], cols: &[usize]) -> Result<DataMatrix> {
    let mut out = matrix.submatrix(rows, cols)?;
    out.row_labels = matrix
        .row_labels
        .as_ref()
        .map(|l| rows.iter().map(|&i| l[i].clone()).collect());
    out.col_labels = matrix
        .col_labels
        .as_ref()
        .map(|l| cols.iter().map(|&j| l[j].clone()).collect());
    Ok(out)
}

/// Rows and columns grouped by hard label.
pub fn cocluster_layout(matrix: &DataMatrix, row_labels: &[usize], col_labels: &[usize]) -> Result<CoclusterLayout> {
    if row_labels.len() != matrix.n() {
        return Err(Error::dim("row labels", matrix.n(), row_labels.len()));
    }
    if col_labels.len() != matrix.d() {
        return Err(Error::dim("column labels", matrix.d(), col_labels.len()));
    }
    let (row_order, row_blocks) = block_order(row_labels);
    let (col_order, col_blocks) = block_order(col_labels);
    let reordered = permute(matrix, &row_order, &col_order)?;
    Ok(CoclusterLayout {
        row_order,
        col_order,
        row_blocks,
        col_blocks,
        matrix: reordered,
    })
}

/// Undoes a layout permutation.
pub fn restore_order(reordered: &DataMatrix, row_order: &[usize], col_order: &[usize]) -> Result<DataMatrix> {
    let inverse = |order: &[usize]| -> Result<Vec<usize>> {
        let mut inv = vec![usize::MAX; order.len()];
        for (new, &old) in order.iter().enumerate() {
            if old >= order.len() || inv[old] != usize::MAX {
                return Err(Error::InvalidArgument("order is not a permutation".into()));
            }
            inv[old] = new;
        }
        Ok(inv)
    };
    permute(reordered, &inverse(row_order)?, &inverse(col_order)?)
}

/// `<out>.perm.csv` and `<out>.blocks.csv` next to `out`.
pub fn companion_paths(out: &Path) -> (PathBuf, PathBuf) {
    let base = out.as_os_str().to_string_lossy().into_owned();
    (
        PathBuf::from(format!("{base}.perm.csv")),
        PathBuf::from(format!("{base}.blocks.csv")),
    )
}

/// Writes the block-ordered matrix to `out`, the new→old index map to
/// `<out>.perm.csv` and the block spans to `<out>.blocks.csv`.
pub fn export_cocluster(matrix: &DataMatrix, result: &CoClusterResult, out: &Path) -> Result<CoclusterLayout> {
    let layout = cocluster_layout(matrix, &result.row_labels, &result.col_labels)?;
    write_atomic(out, to_csv(&layout.matrix).as_bytes())?;
    let (perm_path, block_path) = companion_paths(out);
    let mut perm = String::from("axis,new,old\n");
    for (axis, order) in [("row", &layout.row_order), ("col", &layout.col_order)] {
        for (new, old) in order.iter().enumerate() {
            let _ = writeln!(perm, "{axis},{new},{old}");
        }
    }
    write_atomic(&perm_path, perm.as_bytes())?;
    let mut blocks = String::from("axis,label,start,end\n");
    for (axis, spans) in [("row", &layout.row_blocks), ("col", &layout.col_blocks)] {
        for (label, start, end) in spans {
            let _ = writeln!(blocks, "{axis},{label},{start},{end}");
        }
    }
    write_atomic(&block_path, blocks.as_bytes())?;
    Ok(layout)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub index: usize,
    /// Unscaled posterior mean.
    pub mean: Vec<f64>,
    pub label: usize,
    pub memberships: Vec<f64>,
}

/// Posterior means with the result's memberships. Rows are omitted in
/// feature-only mode, where no row encoder is trained.
pub fn embeddings(trainer: &Trainer, result: &CoClusterResult) -> Result<(Vec<EmbeddingRecord>, Vec<EmbeddingRecord>)> {
    let records = |s: Side, labels: &[usize], memberships: &[Vec<f64>]| -> Result<Vec<EmbeddingRecord>> {
        let vae = trainer.model().side(s);
        let inputs = trainer.encoder_inputs(s);
        if labels.len() != inputs.len() || memberships.len() != inputs.len() {
            return Err(Error::dim("result entries", inputs.len(), labels.len()));
        }
        inputs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                Ok(EmbeddingRecord {
                    index: i,
                    mean: vae.encode(x)?.mu_raw,
                    label: labels[i],
                    memberships: memberships[i].clone(),
                })
            })
            .collect()
    };
    let rows = if trainer.config().mode == Mode::FeatureOnly {
        Vec::new()
    } else {
        records(Side::Row, &result.row_labels, &result.row_memberships)?
    };
    let cols = records(Side::Column, &result.col_labels, &result.col_memberships)?;
    Ok((rows, cols))
}

pub fn embeddings_csv(records: &[EmbeddingRecord]) -> String {
    let mut out = String::from("index,label");
    if let Some(r) = records.first() {
        for k in 0..r.mean.len() {
            let _ = write!(out, ",z{k}");
        }
        for k in 0..r.memberships.len() {
            let _ = write!(out, ",p{k}");
        }
    }
    out.push('\n');
    for r in records {
        let _ = write!(out, "{},{}", r.index, r.label);
        for v in r.mean.iter().chain(&r.memberships) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Writes `<out>.rows.csv` (unless empty) and `<out>.cols.csv`.
pub fn export_embeddings(trainer: &Trainer, result: &CoClusterResult, out: &Path) -> Result<Vec<PathBuf>> {
    let (rows, cols) = embeddings(trainer, result)?;
    let base = out.as_os_str().to_string_lossy().into_owned();
    let mut written = Vec::new();
    if !rows.is_empty() {
        let p = PathBuf::from(format!("{base}.rows.csv"));
        write_atomic(&p, embeddings_csv(&rows).as_bytes())?;
        written.push(p);
    }
    let p = PathBuf::from(format!("{base}.cols.csv"));
    write_atomic(&p, embeddings_csv(&cols).as_bytes())?;
    written.push(p);
    Ok(written)
}
