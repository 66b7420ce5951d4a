//! Clustering accuracy under optimal label matching, and normalized mutual
//! information.

use std::collections::HashMap;

use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;

use crate::error::{Error, Result};

fn check(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::InvalidArgument("empty label vector".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::dim("label vectors", truth.len(), pred.len()));
    }
    Ok(())
}

fn compact(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut ids = HashMap::new();
    let out = labels
        .iter()
        .map(|l| {
            let next = ids.len();
            *ids.entry(*l).or_insert(next)
        })
        .collect();
    (out, ids.len())
}

/// Contingency table `counts[p][t]` over compacted labels.
fn contingency(pred: &[usize], truth: &[usize]) -> Vec<Vec<usize>> {
    let (p, kp) = compact(pred);
    let (t, kt) = compact(truth);
    let mut c = vec![vec![0usize; kt]; kp];
    for (a, b) in p.iter().zip(&t) {
        c[*a][*b] += 1;
    }
    c
}

/// Fraction of items correct after the best one-to-one matching of
/// predicted clusters to true classes.
pub fn accuracy_hungarian(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check(pred, truth)?;
    let mut table = contingency(pred, truth);
    if table.len() > table[0].len() {
        let (r, c) = (table.len(), table[0].len());
        table = (0..c).map(|j| (0..r).map(|i| table[i][j]).collect()).collect();
    }
    let weights = Matrix::from_rows(table.iter().map(|r| r.iter().map(|&v| v as i64).collect::<Vec<_>>()))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let (matched, _) = kuhn_munkres(&weights);
    Ok(matched as f64 / pred.len() as f64)
}

fn entropy(counts: impl Iterator<Item = usize>, total: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalized by the arithmetic mean of the two
/// entropies; 0 when either labeling has a single class.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check(pred, truth)?;
    let table = contingency(pred, truth);
    let total = pred.len() as f64;
    let rows: Vec<usize> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<usize> = (0..table[0].len()).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let hp = entropy(rows.iter().copied(), total);
    let ht = entropy(cols.iter().copied(), total);
    if hp <= 0.0 || ht <= 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (a, r) in table.iter().enumerate() {
        for (b, &c) in r.iter().enumerate() {
            if c > 0 {
                let pab = c as f64 / total;
                mi += pab * (pab * total * total / (rows[a] as f64 * cols[b] as f64)).ln();
            }
        }
    }
    Ok((mi / (0.5 * (hp + ht))).clamp(0.0, 1.0))
}

/// Index of the largest entry of each row.
pub fn hard_labels(soft: &[Vec<f64>]) -> Vec<usize> {
    soft.iter().map(|r| crate::estimators::argmax(r)).collect()
}
