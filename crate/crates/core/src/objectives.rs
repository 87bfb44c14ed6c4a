//! Loss functions and their weighted composition.
//!
//! Naming follows the breakdown reported during training: `recon`
//! (reconstruction), `diff` (noise prediction), `gcl` (generated-vs-real
//! feature contrast), `mi` (negative mutual information between fused and
//! per-view assignments), `ccl` (cluster-column contrast), `ent` (cluster-size
//! regulariser) and `kl` (self-training divergence).

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, DcgError, Result};
use crate::tape::{Mat, Var};

const LN_EPS: f64 = 1e-300;
const NORM_EPS: f64 = 1e-12;

/// Trade-off coefficients and temperatures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau_f: f64,
    pub tau_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 1.0, lambda3: 1.0, tau_f: 0.5, tau_c: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, x) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(DcgError::Argument(format!("{name} must be >= 0, got {x}")));
            }
        }
        for (name, x) in [("tau_f", self.tau_f), ("tau_c", self.tau_c)] {
            if !(x > 0.0 && x.is_finite()) {
                return Err(DcgError::Argument(format!("{name} must be > 0, got {x}")));
            }
        }
        Ok(())
    }
}

/// Named loss components and their weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub diff: f64,
    pub gcl: f64,
    pub mi: f64,
    pub ccl: f64,
    pub ent: f64,
    pub kl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const COMPONENTS: [&'static str; 7] = ["recon", "diff", "gcl", "mi", "ccl", "ent", "kl"];

    pub fn components(&self) -> [f64; 7] {
        [self.recon, self.diff, self.gcl, self.mi, self.ccl, self.ent, self.kl]
    }

    /// First non-finite field, components before the total.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        let comps = self.components();
        Self::COMPONENTS.iter().zip(comps).find(|(_, x)| !x.is_finite()).map(|(n, _)| *n).or((!self.total.is_finite()).then_some("total"))
    }
}

/// `recon + λ1(diff + gcl) + λ2·mi + λ3(ccl + ent + kl)`.
pub fn total_loss(components: [f64; 7], weights: &LossWeights) -> LossBreakdown {
    let [recon, diff, gcl, mi, ccl, ent, kl] = components;
    let total = recon + weights.lambda1 * (diff + gcl) + weights.lambda2 * mi + weights.lambda3 * (ccl + ent + kl);
    LossBreakdown { recon, diff, gcl, mi, ccl, ent, kl, total }
}

/// On-tape loss components; absent terms count as zero.
#[derive(Default, Clone, Copy)]
pub struct LossTerms<'t> {
    pub recon: Option<Var<'t>>,
    pub diff: Option<Var<'t>>,
    pub gcl: Option<Var<'t>>,
    pub mi: Option<Var<'t>>,
    pub ccl: Option<Var<'t>>,
    pub ent: Option<Var<'t>>,
    pub kl: Option<Var<'t>>,
}

impl<'t> LossTerms<'t> {
    fn all(&self) -> [Option<Var<'t>>; 7] {
        [self.recon, self.diff, self.gcl, self.mi, self.ccl, self.ent, self.kl]
    }

    pub fn breakdown(&self, weights: &LossWeights) -> LossBreakdown {
        total_loss(self.all().map(|v| v.map_or(0.0, |v| v.item())), weights)
    }

    /// The weighted objective actually differentiated, or `None` when no term
    /// is present.
    pub fn total(&self, weights: &LossWeights) -> Option<Var<'t>> {
        let w = [1.0, weights.lambda1, weights.lambda1, weights.lambda2, weights.lambda3, weights.lambda3, weights.lambda3];
        self.all().into_iter().zip(w).filter_map(|(v, w)| v.map(|v| v.scale(w))).reduce(|a, b| a.add(b))
    }
}

/// Mean over present pairs of `‖x − x̂‖²`. `pairs` holds, per view, the
/// present rows and their reconstructions.
pub fn reconstruction_error<'t>(pairs: &[(Var<'t>, Var<'t>)]) -> Option<Var<'t>> {
    let count: usize = pairs.iter().map(|(x, _)| x.rows()).sum();
    if count == 0 {
        return None;
    }
    let sum = pairs.iter().filter(|(x, _)| x.rows() > 0).map(|&(x, xh)| x.sub(xh).square().sum()).reduce(|a, b| a.add(b))?;
    Some(sum.scale(1.0 / count as f64))
}

/// Reconstruction loss of the rows in `batch`, reading only present entries.
pub fn recon_loss<'t>(
    fwd: &crate::networks::Forward<'_, 't>,
    ds: &crate::data::MultiViewDataset,
    batch: &[usize],
) -> Result<Option<Var<'t>>> {
    let tape = fwd.tape();
    let mut pairs = Vec::new();
    for v in 0..ds.n_views() {
        let rows: Vec<usize> = batch.iter().copied().filter(|&i| ds.is_present(i, v)).collect();
        let x = tape.constant(ds.view(v).select(ndarray::Axis(0), &rows));
        let xh = fwd.decode(v, fwd.encode(v, x)?)?;
        pairs.push((x, xh));
    }
    Ok(reconstruction_error(&pairs))
}

/// One-directional NT-Xent with anchors `a` and positives `b` (row `i` of
/// each forms the positive pair). The denominator runs over every row of `a`
/// and `b` except the anchor itself.
pub fn nt_xent<'t>(a: Var<'t>, b: Var<'t>, tau: f64) -> Result<Var<'t>> {
    if a.shape() != b.shape() {
        return Err(shape_err("nt_xent", format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    let p = a.rows();
    if p < 2 {
        return Err(DcgError::DegenerateBatch(format!("contrastive loss needs at least 2 rows, got {p}")));
    }
    let tape = a.tape();
    let an = a.row_normalize(NORM_EPS);
    let bn = b.row_normalize(NORM_EPS);
    let self_mask = tape.constant(Mat::from_shape_fn((p, p), |(i, j)| if i == j { f64::NEG_INFINITY } else { 0.0 }));
    let s_aa = an.matmul(an.t()).scale(1.0 / tau).add(self_mask);
    let s_ab = an.matmul(bn.t()).scale(1.0 / tau);
    let lse = Var::concat_cols(&[s_aa, s_ab]).logsumexp_rows();
    let pos = an.mul(bn).sum_rows().scale(1.0 / tau);
    Ok(lse.sub(pos).mean())
}

/// Contrast between the generated latents of view `m` and each real view
/// `n ≠ m`, with the half weight of the symmetric sum.
pub fn feature_contrastive<'t>(z_gen: Var<'t>, z_real: &[Var<'t>], m: usize, tau_f: f64) -> Result<Var<'t>> {
    let mut acc: Option<Var<'t>> = None;
    for (n, &z) in z_real.iter().enumerate() {
        if n == m {
            continue;
        }
        let l = nt_xent(z_gen, z, tau_f)?;
        acc = Some(acc.map_or(l, |a| a.add(l)));
    }
    acc.map(|a| a.scale(0.5)).ok_or_else(|| DcgError::Argument("feature contrast needs a second view".into()))
}

/// Cluster-column contrast over ordered view pairs (half-weighted) and the
/// cluster-size regulariser `Σ_v Σ_j s_j log s_j` with `s` the column means.
pub fn category_contrastive<'t>(qs: &[Var<'t>], tau_c: f64) -> Result<(Var<'t>, Var<'t>)> {
    if qs.len() < 2 {
        return Err(DcgError::Argument("category contrast needs at least 2 views".into()));
    }
    let cols: Vec<Var<'t>> = qs.iter().map(|q| q.t()).collect();
    let mut contrast: Option<Var<'t>> = None;
    for m in 0..qs.len() {
        for n in 0..qs.len() {
            if m != n {
                let l = nt_xent(cols[m], cols[n], tau_c)?;
                contrast = Some(contrast.map_or(l, |a| a.add(l)));
            }
        }
    }
    let contrast = contrast.expect("two views").scale(0.5);
    let ent = qs
        .iter()
        .map(|q| {
            let s = q.mean_cols();
            s.mul(s.ln_clamped(LN_EPS)).sum()
        })
        .reduce(|a, b| a.add(b))
        .expect("two views");
    Ok((contrast, ent))
}

fn check_stochastic(what: &str, q: &Mat) -> Result<()> {
    for (i, row) in q.rows().into_iter().enumerate() {
        let s: f64 = row.sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(DcgError::Precondition(format!("{what} row {i} is not a probability vector (sum {s})")));
        }
    }
    Ok(())
}

/// `−I(H; Z^v)` over the symmetrised cluster-level joint `P = Q_Hᵀ Q_v / N`.
pub fn mutual_info_loss<'t>(q_h: Var<'t>, q_v: Var<'t>) -> Result<Var<'t>> {
    if q_h.shape() != q_v.shape() {
        return Err(shape_err("mutual_info_loss", format!("{:?}", q_h.shape()), format!("{:?}", q_v.shape())));
    }
    check_stochastic("Q_H", &q_h.value())?;
    check_stochastic("Q_v", &q_v.value())?;
    let n = q_h.rows().max(1) as f64;
    let p = q_h.t().matmul(q_v).scale(1.0 / n);
    let p = p.add(p.t()).scale(0.5);
    let ln_pi = p.sum_rows().ln_clamped(LN_EPS);
    let ln_pj = p.sum_cols().ln_clamped(LN_EPS);
    let log_ratio = p.ln_clamped(LN_EPS).add_col(ln_pi.neg()).add_row(ln_pj.neg());
    Ok(p.mul(log_ratio).sum().neg())
}

/// Elementwise max followed by row-wise square-and-renormalise.
pub fn sharpen_targets(q_fused: &Mat, q_v: &Mat) -> Result<Mat> {
    sharpen_many(&[q_fused, q_v])
}

/// Elementwise max over every assignment matrix, then square-and-renormalise.
pub fn sharpen_many(qs: &[&Mat]) -> Result<Mat> {
    let first = qs.first().ok_or_else(|| DcgError::Argument("nothing to sharpen".into()))?;
    let mut q = (*first).clone();
    for other in &qs[1..] {
        if other.dim() != q.dim() {
            return Err(shape_err("sharpen_targets", format!("{:?}", q.dim()), format!("{:?}", other.dim())));
        }
        Zip::from(&mut q).and(*other).for_each(|a, &b| *a = a.max(b));
    }
    for (i, mut row) in q.rows_mut().into_iter().enumerate() {
        row.mapv_inplace(|x| x * x);
        let s = row.sum();
        if s <= 0.0 {
            return Err(DcgError::DegenerateRow(i));
        }
        row /= s;
    }
    Ok(q)
}

/// `Σ_i Σ_j p log(p/q)` with a fixed target `p` and `0 log 0 = 0`.
pub fn kl_self_training<'t>(p: &Mat, q: Var<'t>) -> Result<Var<'t>> {
    if p.dim() != q.shape() {
        return Err(shape_err("kl_self_training", format!("{:?}", p.dim()), format!("{:?}", q.shape())));
    }
    {
        let qv = q.value();
        for ((i, j), &pij) in p.indexed_iter() {
            if pij > 0.0 && qv[[i, j]] <= 0.0 {
                return Err(DcgError::InfiniteDivergence { row: i, col: j });
            }
        }
    }
    let entropy_term: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum();
    let tape = q.tape();
    let cross = tape.constant(p.clone()).mul(q.ln_clamped(LN_EPS)).sum();
    Ok(cross.neg().add_scalar(entropy_term))
}

/// Plain-value KL for checks outside the tape.
pub fn kl_divergence(p: &Mat, q: &Mat) -> Result<f64> {
    let tape = crate::tape::Tape::new();
    Ok(kl_self_training(p, tape.constant(q.clone()))?.item())
}

/// Shannon entropy of a nonnegative vector after normalisation.
pub fn entropy(row: &[f64]) -> f64 {
    let s: f64 = row.iter().sum();
    row.iter().filter(|&&x| x > 0.0).map(|&x| -(x / s) * (x / s).ln()).sum()
}
