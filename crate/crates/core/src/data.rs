//! Multi-view datasets: loading, synthesis, missing-view corruption and
//! minibatching.
//!
//! A dataset keeps every view as a rectangular `N×D_v` matrix. Absent
//! `(sample, view)` entries are zero-filled; the availability mask is the only
//! authority on which entries exist.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DcgError, Result};
use crate::rng::{stream_rng, TAG_BATCH};
use crate::tape::Mat;

/// Per-view feature matrices with optional labels and an availability mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewDataset {
    views: Vec<Mat>,
    labels: Option<Vec<usize>>,
    mask: Array2<bool>,
    name: String,
}

/// How many instances lose a view, and the seed choosing them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MissingnessSpec {
    pub rate: f64,
    pub seed: u64,
}

impl MissingnessSpec {
    /// Number of corrupted instances for a dataset of `n` rows.
    pub fn count(&self, n: usize) -> Result<usize> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(DcgError::Argument(format!("missing rate {} not in [0, 1)", self.rate)));
        }
        let m = (self.rate * n as f64).round() as usize;
        if n > 0 && m >= n {
            return Err(DcgError::Argument(format!("missing rate {} corrupts all {n} rows", self.rate)));
        }
        Ok(m)
    }
}

/// Rows whose views are all present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairedIndexSet {
    pub indices: Vec<usize>,
}

impl PairedIndexSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }
}

impl MultiViewDataset {
    /// Builds a dataset, checking every structural invariant.
    pub fn new(views: Vec<Mat>, labels: Option<Vec<usize>>, mask: Array2<bool>, name: impl Into<String>) -> Result<Self> {
        if views.is_empty() {
            return Err(DcgError::Argument("a dataset needs at least one view".into()));
        }
        let n = views[0].nrows();
        for (v, x) in views.iter().enumerate() {
            if x.nrows() != n {
                return Err(DcgError::Argument(format!("view {v} has {} rows, view 0 has {n}", x.nrows())));
            }
        }
        if mask.dim() != (n, views.len()) {
            return Err(DcgError::Argument(format!(
                "mask is {:?}, expected ({n}, {})",
                mask.dim(),
                views.len()
            )));
        }
        if let Some(row) = mask.rows().into_iter().position(|r| !r.iter().any(|&b| b)) {
            return Err(DcgError::InvalidMask { row });
        }
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(DcgError::Argument(format!("{} labels for {n} samples", labels.len())));
            }
            let distinct: BTreeSet<_> = labels.iter().collect();
            if distinct.len() < 2 {
                return Err(DcgError::Argument("labels must contain at least 2 distinct values".into()));
            }
        }
        Ok(Self { views, labels, mask, name: name.into() })
    }

    pub fn n(&self) -> usize {
        self.views[0].nrows()
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn view(&self, v: usize) -> &Mat {
        &self.views[v]
    }

    pub fn views(&self) -> &[Mat] {
        &self.views
    }

    pub fn view_dims(&self) -> Vec<usize> {
        self.views.iter().map(|x| x.ncols()).collect()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Number of distinct label values, when labelled.
    pub fn n_classes(&self) -> Option<usize> {
        self.labels.as_ref().map(|l| l.iter().collect::<BTreeSet<_>>().len())
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_present(&self, i: usize, v: usize) -> bool {
        self.mask[[i, v]]
    }

    pub fn is_complete(&self) -> bool {
        self.mask.iter().all(|&b| b)
    }

    /// Total number of present `(sample, view)` entries.
    pub fn present_count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// Row subset, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let views = self.views.iter().map(|x| x.select(ndarray::Axis(0), rows)).collect();
        let labels = self.labels.as_ref().map(|l| rows.iter().map(|&i| l[i]).collect());
        let mask = self.mask.select(ndarray::Axis(0), rows);
        Self::new(views, labels, mask, self.name.clone())
    }

    /// Writes the directory layout read by [`load_dataset`].
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (v, x) in self.views.iter().enumerate() {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_path(dir.join(format!("view_{v}.csv"))).map_err(csv_io)?;
            for row in x.rows() {
                w.write_record(row.iter().map(|x| format!("{x:?}"))).map_err(csv_io)?;
            }
            w.flush()?;
        }
        if let Some(labels) = &self.labels {
            let mut f = fs::File::create(dir.join("labels.csv"))?;
            for l in labels {
                writeln!(f, "{l}")?;
            }
        }
        if !self.is_complete() {
            let mut f = fs::File::create(dir.join("mask.csv"))?;
            for row in self.mask.rows() {
                let cells: Vec<&str> = row.iter().map(|&b| if b { "1" } else { "0" }).collect();
                writeln!(f, "{}", cells.join(","))?;
            }
        }
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> DcgError {
    DcgError::Io(std::io::Error::other(e))
}

fn read_rows(path: &Path) -> Result<Vec<(u64, Vec<String>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| DcgError::Format { path: path.to_path_buf(), message: e.to_string() })?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| DcgError::Format { path: path.to_path_buf(), message: e.to_string() })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        rows.push((line, rec.iter().map(|s| s.trim().to_string()).collect()));
    }
    Ok(rows)
}

fn read_matrix(path: &Path) -> Result<Mat> {
    let rows = read_rows(path)?;
    let cols = rows.first().map_or(0, |(_, r)| r.len());
    let mut data = Vec::with_capacity(rows.len() * cols);
    for (line, row) in &rows {
        if row.len() != cols {
            return Err(DcgError::Format {
                path: path.to_path_buf(),
                message: format!("line {line} has {} columns, expected {cols}", row.len()),
            });
        }
        for cell in row {
            let x: f64 = cell.parse().map_err(|_| DcgError::Parse {
                file: path.to_path_buf(),
                line: *line,
                message: format!("non-numeric cell {cell:?}"),
            })?;
            data.push(x);
        }
    }
    Array2::from_shape_vec((rows.len(), cols), data).map_err(|e| DcgError::Format { path: path.to_path_buf(), message: e.to_string() })
}

/// Loads `view_0.csv … view_{V-1}.csv` plus optional `labels.csv` and
/// `mask.csv` from `dir`.
pub fn load_dataset(dir: &Path) -> Result<MultiViewDataset> {
    let mut views = Vec::new();
    loop {
        let p = dir.join(format!("view_{}.csv", views.len()));
        if !p.is_file() {
            break;
        }
        views.push(read_matrix(&p)?);
    }
    if views.is_empty() {
        return Err(DcgError::Format { path: dir.to_path_buf(), message: "no view_0.csv found".into() });
    }
    let n = views[0].nrows();
    for (v, x) in views.iter().enumerate() {
        if x.nrows() != n {
            return Err(DcgError::Format {
                path: dir.join(format!("view_{v}.csv")),
                message: format!("{} rows, but view_0.csv has {n}", x.nrows()),
            });
        }
    }

    let labels_path = dir.join("labels.csv");
    let labels = if labels_path.is_file() {
        let rows = read_rows(&labels_path)?;
        let mut labels = Vec::with_capacity(rows.len());
        for (line, row) in rows {
            let cell = row.first().map(String::as_str).unwrap_or("");
            let l: usize = cell.parse().map_err(|_| DcgError::Parse {
                file: labels_path.clone(),
                line,
                message: format!("label {cell:?} is not a nonnegative integer"),
            })?;
            labels.push(l);
        }
        if labels.len() != n {
            return Err(DcgError::Format { path: labels_path, message: format!("{} labels for {n} samples", labels.len()) });
        }
        Some(labels)
    } else {
        None
    };

    let mask_path = dir.join("mask.csv");
    let mask = if mask_path.is_file() {
        read_mask(&mask_path, n, views.len())?
    } else {
        Array2::from_elem((n, views.len()), true)
    };
    let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut ds = MultiViewDataset::new(views, labels, mask, name)?;
    for v in 0..ds.n_views() {
        for i in 0..n {
            if !ds.mask[[i, v]] {
                ds.views[v].row_mut(i).fill(0.0);
            }
        }
    }
    Ok(ds)
}

fn read_mask(path: &Path, n: usize, v: usize) -> Result<Array2<bool>> {
    let rows = read_rows(path)?;
    if rows.len() != n {
        return Err(DcgError::Format { path: path.to_path_buf(), message: format!("{} mask rows for {n} samples", rows.len()) });
    }
    let mut mask = Array2::from_elem((n, v), false);
    for (i, (line, row)) in rows.iter().enumerate() {
        if row.len() != v {
            return Err(DcgError::Format { path: path.to_path_buf(), message: format!("line {line} has {} entries, expected {v}", row.len()) });
        }
        for (j, cell) in row.iter().enumerate() {
            mask[[i, j]] = match cell.as_str() {
                "1" => true,
                "0" => false,
                other => {
                    return Err(DcgError::Parse { file: path.to_path_buf(), line: *line, message: format!("mask value {other:?} is not 0 or 1") })
                }
            };
        }
        if !mask.row(i).iter().any(|&b| b) {
            return Err(DcgError::InvalidMask { row: i });
        }
    }
    Ok(mask)
}

/// `k` Gaussian clusters seen through `dims.len()` independent random linear
/// maps of shared cluster centres, each with isotropic noise.
pub fn generate_synthetic(n_per_cluster: usize, k: usize, dims: &[usize], sep: f64, noise: f64, seed: u64) -> Result<MultiViewDataset> {
    if k < 2 {
        return Err(DcgError::Argument(format!("need k >= 2, got {k}")));
    }
    if dims.is_empty() || dims.iter().any(|&d| d < 2) {
        return Err(DcgError::Argument(format!("every view dimension must be >= 2, got {dims:?}")));
    }
    if !(sep > 0.0 && sep.is_finite()) {
        return Err(DcgError::Argument(format!("sep must be positive, got {sep}")));
    }
    if !(noise > 0.0 && noise.is_finite()) {
        return Err(DcgError::Argument(format!("noise must be positive, got {noise}")));
    }
    let n = n_per_cluster * k;
    let labels: Vec<usize> = (0..n).map(|i| i / n_per_cluster.max(1)).collect();
    let mut views = Vec::with_capacity(dims.len());
    for (v, &d) in dims.iter().enumerate() {
        let mut rng = stream_rng(seed, &[0x5EED, v as u64]);
        // centre c_j = sep * e_j, so mapped centre j is sep * column j of the map
        let map = Mat::from_shape_fn((d, k), |_| StandardNormal.sample(&mut rng));
        let mut x = Mat::zeros((n, d));
        for (i, mut row) in x.rows_mut().into_iter().enumerate() {
            let centre = map.column(labels[i]);
            for (c, out) in row.iter_mut().enumerate() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *out = sep * centre[c] + noise * e;
            }
        }
        views.push(x);
    }
    let mask = Array2::from_elem((n, dims.len()), true);
    MultiViewDataset::new(views, Some(labels), mask, format!("synthetic-k{k}-n{n}"))
}

/// Deletes exactly one uniformly chosen view from `round(rate·N)` uniformly
/// chosen rows.
pub fn apply_missingness(ds: &MultiViewDataset, spec: &MissingnessSpec) -> Result<MultiViewDataset> {
    if !ds.is_complete() {
        return Err(DcgError::Precondition("dataset is already incomplete".into()));
    }
    let n = ds.n();
    let m = spec.count(n)?;
    if m == 0 {
        return Ok(ds.clone());
    }
    if ds.n_views() < 2 {
        return Err(DcgError::Precondition("deleting a view needs at least two views".into()));
    }
    let mut rng = stream_rng(spec.seed, &[0x0B5E]);
    let rows = index::sample(&mut rng, n, m).into_vec();
    let mut out = ds.clone();
    for i in rows {
        let v = rng.random_range(0..ds.n_views());
        out.mask[[i, v]] = false;
        out.views[v].row_mut(i).fill(0.0);
    }
    Ok(out)
}

/// All fully observed rows, ascending.
pub fn paired_indices(ds: &MultiViewDataset) -> PairedIndexSet {
    let indices = ds.mask.rows().into_iter().enumerate().filter(|(_, r)| r.iter().all(|&b| b)).map(|(i, _)| i).collect();
    PairedIndexSet { indices }
}

/// Shuffled partition of `0..ds.n()` into batches of `batch` (the last one
/// may be smaller). The order depends only on `(seed, epoch)`.
pub fn minibatches(ds: &MultiViewDataset, batch: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    shuffled_batches(ds.n(), batch, seed, epoch)
}

pub fn shuffled_batches(n: usize, batch: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch < 1 {
        return Err(DcgError::Argument("batch size must be >= 1".into()));
    }
    if batch > n.max(1) {
        return Err(DcgError::Argument(format!("batch size {batch} exceeds dataset size {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, &[TAG_BATCH, epoch]));
    Ok(order.chunks(batch).map(<[usize]>::to_vec).collect())
}
