//! Clustering evaluation: accuracy under the optimal label matching, NMI,
//! ARI, and a scale-free compactness ratio for latent geometry.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{DcgError, Result};
use crate::tape::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
    /// `K_pred × K_true` counts over the dense relabelling of both sides.
    pub contingency: Vec<Vec<usize>>,
}

fn check_lengths(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(DcgError::Argument(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    Ok(())
}

/// Maps arbitrary label values onto `0..k` in ascending order.
fn densify(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut ids = BTreeMap::new();
    for &l in labels {
        let next = ids.len();
        ids.entry(l).or_insert(next);
    }
    // ascending value order
    for (rank, id) in ids.values_mut().enumerate() {
        *id = rank;
    }
    (labels.iter().map(|l| ids[l]).collect(), ids.len())
}

/// Contingency counts `[pred cluster][true cluster]`.
pub fn contingency(pred: &[usize], truth: &[usize]) -> Result<Array2<usize>> {
    check_lengths(pred, truth)?;
    let (p, kp) = densify(pred);
    let (t, kt) = densify(truth);
    let mut c = Array2::zeros((kp, kt));
    for (&a, &b) in p.iter().zip(&t) {
        c[[a, b]] += 1;
    }
    Ok(c)
}

/// Minimum-cost perfect matching on a square cost matrix (Kuhn–Munkres with
/// potentials). Returns `assignment[row] = col`.
pub fn hungarian_min(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "square cost matrix");
    if n == 0 {
        return Vec::new();
    }
    let inf = f64::INFINITY;
    // 1-based arrays; p[j] = row matched to column j
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    assignment
}

/// Fraction of samples matched under the best bijection between predicted
/// and true clusters. The contingency matrix is zero-padded to square.
pub fn clustering_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth)?;
    if pred.is_empty() {
        return Ok(1.0);
    }
    let c = contingency(pred, truth)?;
    let k = c.nrows().max(c.ncols());
    let max = *c.iter().max().unwrap_or(&0) as f64;
    let cost = Array2::from_shape_fn((k, k), |(i, j)| {
        let count = if i < c.nrows() && j < c.ncols() { c[[i, j]] } else { 0 };
        max - count as f64
    });
    let assign = hungarian_min(&cost);
    let matched: usize = assign.iter().enumerate().filter(|&(i, &j)| i < c.nrows() && j < c.ncols()).map(|(i, &j)| c[[i, j]]).sum();
    Ok(matched as f64 / pred.len() as f64)
}

fn entropy_of(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts.filter(|&c| c > 0).map(|c| c as f64 / n).map(|p| -p * p.ln()).sum()
}

/// Mutual information normalised by the geometric mean of the entropies.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let c = contingency(pred, truth)?;
    let n = pred.len() as f64;
    if pred.is_empty() {
        return Ok(1.0);
    }
    let rows: Vec<usize> = c.rows().into_iter().map(|r| r.sum()).collect();
    let cols: Vec<usize> = c.columns().into_iter().map(|r| r.sum()).collect();
    let hp = entropy_of(rows.iter().copied(), n);
    let ht = entropy_of(cols.iter().copied(), n);
    if hp == 0.0 && ht == 0.0 {
        return Ok(1.0);
    }
    if hp == 0.0 || ht == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for ((i, j), &nij) in c.indexed_iter() {
        if nij > 0 {
            let nij = nij as f64;
            mi += nij / n * (n * nij / (rows[i] as f64 * cols[j] as f64)).ln();
        }
    }
    Ok((mi / (hp * ht).sqrt()).clamp(0.0, 1.0))
}

fn comb2(x: usize) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index from pair counts.
pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let c = contingency(pred, truth)?;
    let n = pred.len();
    let index: f64 = c.iter().map(|&x| comb2(x)).sum();
    let a: f64 = c.rows().into_iter().map(|r| comb2(r.sum())).sum();
    let b: f64 = c.columns().into_iter().map(|r| comb2(r.sum())).sum();
    let total = comb2(n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = a * b / total;
    let max_index = 0.5 * (a + b);
    if max_index == expected {
        // both partitions trivial (all-in-one or all singletons)
        return Ok(if index == max_index { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max_index - expected))
}

pub fn evaluate(pred: &[usize], truth: &[usize]) -> Result<MetricReport> {
    let c = contingency(pred, truth)?;
    Ok(MetricReport {
        acc: clustering_accuracy(pred, truth)?,
        nmi: nmi(pred, truth)?,
        ari: ari(pred, truth)?,
        contingency: c.rows().into_iter().map(|r| r.to_vec()).collect(),
    })
}

fn dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean distance of each sample to its own cluster centroid divided by the
/// mean distance between distinct centroids.
pub fn compactness(latents: &Mat, labels: &[usize]) -> Result<f64> {
    if latents.nrows() != labels.len() {
        return Err(DcgError::Argument(format!("{} latents for {} labels", latents.nrows(), labels.len())));
    }
    let (dense, k) = densify(labels);
    if k < 2 {
        return Err(DcgError::Argument("compactness needs at least 2 clusters".into()));
    }
    let d = latents.ncols();
    let mut centroids = Mat::zeros((k, d));
    let mut counts = vec![0usize; k];
    for (row, &c) in latents.rows().into_iter().zip(&dense) {
        let mut dst = centroids.row_mut(c);
        dst += &row;
        counts[c] += 1;
    }
    for (mut c, &n) in centroids.rows_mut().into_iter().zip(&counts) {
        c /= n as f64;
    }
    let within: f64 = latents.rows().into_iter().zip(&dense).map(|(r, &c)| dist(r, centroids.row(c))).sum::<f64>() / labels.len() as f64;
    let mut between = 0.0;
    let mut pairs = 0usize;
    for a in 0..k {
        for b in a + 1..k {
            between += dist(centroids.row(a), centroids.row(b));
            pairs += 1;
        }
    }
    let between = between / pairs as f64;
    if between == 0.0 {
        return Err(DcgError::Argument("all centroids coincide".into()));
    }
    Ok(within / between)
}

/// Row argmax; ties go to the smallest index.
pub fn argmax_rows(q: &Mat) -> Vec<usize> {
    q.rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (j, &x) in r.iter().enumerate() {
                if x > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
