//! Post-training recovery of every missing view by full reverse sampling,
//! followed by fusion and clustering.

use std::path::Path;

use serde::Serialize;

use crate::data::MultiViewDataset;
use crate::diffusion::{recover_missing, DiffusionSchedule};
use crate::error::{DcgError, Result};
use crate::metrics::argmax_rows;
use crate::networks::ModelParams;
use crate::tape::Mat;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    /// Row argmax of `fused_assignments`, ties to the smallest index.
    pub labels: Vec<usize>,
    pub fused_assignments: Mat,
    pub per_view_assignments: Vec<Mat>,
    pub fused_embedding: Mat,
    /// Encoder outputs for present entries, recovered latents elsewhere.
    pub recovered_latents: Vec<Mat>,
    pub fusion_weights: Vec<f64>,
}

fn guard(what: &str, m: &Mat) -> Result<()> {
    if let Some(((i, j), _)) = m.indexed_iter().find(|(_, x)| !x.is_finite()) {
        return Err(DcgError::NonFinite { component: what.into(), detail: format!(" at [{i}, {j}]") });
    }
    Ok(())
}

/// Encodes the present views, recovers the missing ones with `t_ext`
/// reverse steps, fuses and classifies.
pub fn impute_and_cluster(params: &ModelParams, sched: &DiffusionSchedule, ds: &MultiViewDataset, t_ext: usize, seed: u64) -> Result<ClusterResult> {
    if !params.all_finite() {
        return Err(DcgError::NonFinite { component: "parameters".into(), detail: String::new() });
    }
    let zs = (0..ds.n_views()).map(|v| params.encode(v, ds.view(v))).collect::<Result<Vec<_>>>()?;
    let recovered = recover_missing(params, sched, ds, &zs, t_ext, seed)?;
    for z in &recovered {
        guard("recovered latents", z)?;
    }
    let (h, w) = params.fuse(&recovered)?;
    let q = params.classify(&h)?;
    guard("fused assignments", &q)?;
    let per_view = recovered.iter().map(|z| params.classify(z)).collect::<Result<Vec<_>>>()?;
    Ok(ClusterResult {
        labels: argmax_rows(&q),
        fused_assignments: q,
        per_view_assignments: per_view,
        fused_embedding: h,
        recovered_latents: recovered,
        fusion_weights: w,
    })
}

#[derive(Serialize)]
struct LabelRow {
    label: usize,
}

/// CSV with a header and one row per sample: index, predicted label, true
/// label (or −1) and the fused-embedding coordinates.
pub fn export_embeddings(result: &ClusterResult, truth: Option<&[usize]>, path: &Path) -> Result<()> {
    let n = result.labels.len();
    if let Some(t) = truth {
        if t.len() != n {
            return Err(DcgError::Argument(format!("{} true labels for {n} samples", t.len())));
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    let d = result.fused_embedding.ncols();
    let mut header = vec!["index".to_string(), "pred".into(), "true".into()];
    header.extend((0..d).map(|j| format!("h{j}")));
    w.write_record(&header).map_err(|e| io_err(path, e))?;
    for i in 0..n {
        let true_label = truth.map_or(-1, |t| t[i] as i64);
        let mut row = vec![i.to_string(), result.labels[i].to_string(), true_label.to_string()];
        row.extend(result.fused_embedding.row(i).iter().map(|x| x.to_string()));
        w.write_record(&row).map_err(|e| io_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// One-column CSV of predicted labels.
pub fn export_labels(result: &ClusterResult, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for &label in &result.labels {
        w.serialize(LabelRow { label }).map_err(|e| io_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

fn io_err(path: &Path, e: csv::Error) -> DcgError {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => DcgError::Io(e),
        other => DcgError::Format { path: path.to_path_buf(), message: format!("{other:?}") },
    }
}
