//! Optimisation: autoencoder warm-up, the joint objective, first-order
//! optimisers, resumable training state and checkpoints.
//!
//! Every random draw of an epoch comes from streams keyed by `(seed, epoch)`,
//! so a run resumed from a checkpoint replays exactly what an uninterrupted
//! run would have done.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use ndarray::Axis;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{minibatches, paired_indices, MultiViewDataset};
use crate::diffusion::{diffusion_loss, estimate_x0, generate_one_step, make_schedule, sample_steps, DiffusionSchedule, NoisePredictor};
use crate::error::{DcgError, Result};
use crate::metrics::{argmax_rows, evaluate};
use crate::networks::{Forward, ModelParams, NetworkSpec};
use crate::objectives::{
    category_contrastive, feature_contrastive, kl_self_training, mutual_info_loss, recon_loss, reconstruction_error, sharpen_many,
    sharpen_targets, LossBreakdown, LossTerms, LossWeights,
};
use crate::rng::{stream_rng, TAG_STEP};
use crate::tape::{Mat, Tape, Var};

/// Storage precision of the parameters. Arithmetic is always carried out in
/// 64-bit; with `F32` the parameters are rounded to `f32` after
/// initialisation and after every update, so checkpoints are exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Precision {
    F32,
    F64,
}

impl TryFrom<u32> for Precision {
    type Error = String;

    fn try_from(bits: u32) -> std::result::Result<Self, String> {
        match bits {
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            other => Err(format!("precision must be 32 or 64, got {other}")),
        }
    }
}

impl From<Precision> for u32 {
    fn from(p: Precision) -> u32 {
        match p {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    /// Heavy-ball momentum with coefficient `beta1`.
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Optimizer steps over which the learning rate ramps linearly up from
    /// zero after every reset (the start of each stage). `0` disables it.
    pub warmup: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::Adam, beta1: 0.9, beta2: 0.999, eps: 1e-8, warmup: 30 }
    }
}

/// Which loss terms are switched on; `false` zeroes the term.
/// `ccl = false` removes both the column contrast and its size regulariser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub diff: bool,
    pub gcl: bool,
    pub mi: bool,
    pub ccl: bool,
    pub kl: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { diff: true, gcl: true, mi: true, ccl: true, kl: true }
    }
}

impl Ablation {
    pub const NAMES: [&'static str; 5] = ["diff", "gcl", "mi", "ccl", "kl"];

    /// Disables each comma-separated term, e.g. `"diff,gcl"`.
    pub fn disable(&mut self, list: &str) -> Result<()> {
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match name {
                "diff" => self.diff = false,
                "gcl" => self.gcl = false,
                "mi" => self.mi = false,
                "ccl" => self.ccl = false,
                "kl" => self.kl = false,
                other => return Err(DcgError::Config(format!("unknown ablation flag `{other}` (expected one of {:?})", Self::NAMES))),
            }
        }
        Ok(())
    }
}

/// How the shared classifier is set up before joint training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierInit {
    /// Keep the random initialisation.
    Random,
    /// Fit it to k-means pseudo-labels of the warmed-up latents.
    Kmeans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub weights: LossWeights,
    /// Training horizon `T` of the diffusion schedule.
    pub steps: usize,
    /// Reverse-sampling horizon used at inference.
    pub t_ext: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub precision: Precision,
    /// Global gradient-norm clip; off when absent.
    pub grad_clip: Option<f64>,
    /// Evaluate the training-time assignments every this many joint epochs
    /// (when labels exist); 0 disables.
    pub eval_every: usize,
    pub classifier_init: ClassifierInit,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            pretrain_epochs: 100,
            batch: 256,
            learning_rate: 1e-3,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            weights: LossWeights::default(),
            steps: 50,
            t_ext: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            precision: Precision::F32,
            grad_clip: None,
            eval_every: 10,
            classifier_init: ClassifierInit::Kmeans,
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DcgError::Config(m));
        if self.epochs < 1 {
            return bad("train.epochs must be >= 1".into());
        }
        if self.batch < 2 {
            return bad(format!("train.batch must be >= 2, got {}", self.batch));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("train.learning_rate must be > 0, got {}", self.learning_rate));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad("optimizer betas must lie in [0, 1) and eps must be > 0".into());
        }
        if self.steps < 1 || self.t_ext < 1 {
            return bad("train.steps and train.t_ext must be >= 1".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("train.grad_clip must be > 0, got {c}"));
            }
        }
        self.weights.validate()?;
        make_schedule(self.steps, self.beta_start, self.beta_end)?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// Adam or momentum SGD over the whole parameter store. Moments are kept in
/// 64-bit regardless of the parameter precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    lr: f64,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, lr: f64, params: &ModelParams) -> Self {
        let zeros = || params.params().iter().map(|p| Mat::zeros(p.value.dim())).collect::<Vec<_>>();
        let v = if cfg.kind == OptimizerKind::Adam { zeros() } else { Vec::new() };
        Self { cfg, lr, step: 0, m: zeros(), v }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Learning rate used by the next step.
    pub fn current_lr(&self) -> f64 {
        match self.cfg.warmup {
            0 => self.lr,
            w => self.lr * ((self.step + 1) as f64 / w as f64).min(1.0),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Mat]) {
        let lr = self.current_lr();
        self.step += 1;
        let OptimizerConfig { kind, beta1, beta2, eps, .. } = self.cfg;
        match kind {
            OptimizerKind::Adam => {
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                for (i, g) in grads.iter().enumerate() {
                    let m = &mut self.m[i];
                    let v = &mut self.v[i];
                    ndarray::Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                    });
                    ndarray::Zip::from(params.value_mut(i)).and(&*m).and(&*v).for_each(|p, &m, &v| {
                        *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                    });
                }
            }
            OptimizerKind::Sgd => {
                for (i, g) in grads.iter().enumerate() {
                    let m = &mut self.m[i];
                    m.zip_mut_with(g, |m, &g| *m = beta1 * *m + g);
                    params.value_mut(i).scaled_add(-lr, m);
                }
            }
        }
    }
}

/// Stage of the schedule an epoch belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    /// 1-based within the stage.
    pub epoch: usize,
    /// Batch means of every component.
    pub loss: LossBreakdown,
    pub acc: Option<f64>,
    pub nmi: Option<f64>,
    pub ari: Option<f64>,
    pub seconds: f64,
    /// Missing (sample, view) latents filled by one-step generation.
    pub imputed: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn imputed(&self) -> usize {
        self.history.iter().map(|r| r.imputed).sum()
    }

    pub fn seconds(&self) -> f64 {
        self.history.iter().map(|r| r.seconds).sum()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.history.last()
    }

    /// Column names of [`TrainReport::csv_rows`].
    pub fn csv_header() -> Vec<&'static str> {
        let mut header = vec!["stage", "epoch"];
        header.extend(LossBreakdown::COMPONENTS);
        header.extend(["total", "acc", "nmi", "ari", "seconds"]);
        header
    }

    /// One line per epoch: stage, epoch, every loss component, metrics
    /// (empty when not evaluated) and wall-clock seconds.
    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        self.history
            .iter()
            .map(|r| {
                let stage = match r.stage {
                    Stage::Pretrain => "pretrain",
                    Stage::Joint => "joint",
                };
                let mut row = vec![stage.to_string(), r.epoch.to_string()];
                row.extend(r.loss.components().iter().map(f64::to_string));
                row.push(r.loss.total.to_string());
                for m in [r.acc, r.nmi, r.ari] {
                    row.push(m.map(|x| x.to_string()).unwrap_or_default());
                }
                row.push(format!("{:.3}", r.seconds));
                row
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(Self::csv_header()).map_err(|e| csv_err(path, e))?;
        for row in self.csv_rows() {
            w.write_record(&row).map_err(|e| csv_err(path, e))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(path: &Path, e: csv::Error) -> DcgError {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => DcgError::Io(e),
        other => DcgError::Format { path: path.to_path_buf(), message: format!("{other:?}") },
    }
}

/// The per-batch objective and how many latents it had to impute.
pub struct BatchObjective<'t> {
    pub terms: LossTerms<'t>,
    pub imputed: usize,
}

fn sum_opt<'t>(acc: Option<Var<'t>>, x: Var<'t>) -> Option<Var<'t>> {
    Some(acc.map_or(x, |a| a.add(x)))
}

/// Builds every loss term for the rows `batch` of `ds` on the tape behind
/// `fwd`. Only present view entries are read. Missing latents are filled
/// with the one-step clean estimate from each available view at a random
/// step, averaged over the sources; the real and filled latents then feed
/// fusion and both clustering heads.
pub fn joint_objective<'t, R: Rng>(
    fwd: &Forward<'_, 't>,
    sched: &DiffusionSchedule,
    ds: &MultiViewDataset,
    batch: &[usize],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<BatchObjective<'t>> {
    let tape = fwd.tape();
    let nv = ds.n_views();
    let b = batch.len();
    let abl = cfg.ablation;
    let w = cfg.weights;

    // local positions (into `batch`) of the rows where each view is present
    let present: Vec<Vec<usize>> = (0..nv).map(|v| (0..b).filter(|&r| ds.is_present(batch[r], v)).collect()).collect();
    // slot[v][r] = index of local row r within present[v]
    let slot: Vec<Vec<Option<usize>>> = present
        .iter()
        .map(|p| {
            let mut s = vec![None; b];
            for (k, &r) in p.iter().enumerate() {
                s[r] = Some(k);
            }
            s
        })
        .collect();

    let mut zs: Vec<Option<Var<'t>>> = Vec::with_capacity(nv);
    let mut pairs = Vec::new();
    for v in 0..nv {
        if present[v].is_empty() {
            zs.push(None);
            continue;
        }
        let rows: Vec<usize> = present[v].iter().map(|&r| batch[r]).collect();
        let x = tape.constant(ds.view(v).select(Axis(0), &rows));
        let z = fwd.encode(v, x)?;
        pairs.push((x, fwd.decode(v, z)?));
        zs.push(Some(z));
    }
    let mut terms = LossTerms { recon: reconstruction_error(&pairs), ..LossTerms::default() };

    if abl.diff {
        // the encoder is not pulled by the noise-prediction target
        let z0s: Vec<(usize, Var<'t>)> = zs.iter().enumerate().filter_map(|(v, z)| z.map(|z| (v, z.detach()))).collect();
        terms.diff = diffusion_loss(fwd, sched, &z0s, rng)?;
    }

    let paired: Vec<usize> = (0..b).filter(|&r| (0..nv).all(|v| slot[v][r].is_some())).collect();
    if abl.gcl && nv >= 2 && paired.len() >= 2 {
        let real: Vec<Var<'t>> = (0..nv)
            .map(|v| {
                let idx: Vec<usize> = paired.iter().map(|&r| slot[v][r].expect("paired")).collect();
                zs[v].expect("paired rows exist").gather_rows(&idx)
            })
            .collect();
        let mut gcl = None;
        for m in 0..nv {
            let mut gen = None;
            for (j, &zj) in real.iter().enumerate() {
                if j != m {
                    let ts = sample_steps(sched, paired.len(), rng);
                    gen = sum_opt(gen, generate_one_step(fwd, sched, m, zj, &ts)?);
                }
            }
            let gen = gen.expect("two views").scale(1.0 / (nv - 1) as f64);
            gcl = sum_opt(gcl, feature_contrastive(gen, &real, m, w.tau_f)?);
        }
        terms.gcl = gcl;
    }

    let mut imputed = 0;
    let mut full = Vec::with_capacity(nv);
    for m in 0..nv {
        let missing: Vec<usize> = (0..b).filter(|&r| slot[m][r].is_none()).collect();
        let mut z_full = zs[m].map(|z| z.scatter_rows(&present[m], b));
        if !missing.is_empty() {
            imputed += missing.len();
            let mut count = vec![0usize; b];
            let mut fill = None;
            for j in (0..nv).filter(|&j| j != m) {
                let rows: Vec<usize> = missing.iter().copied().filter(|&r| slot[j][r].is_some()).collect();
                if rows.is_empty() {
                    continue;
                }
                let idx: Vec<usize> = rows.iter().map(|&r| slot[j][r].expect("present")).collect();
                let src = zs[j].expect("present rows").gather_rows(&idx);
                let ts = sample_steps(sched, rows.len(), rng);
                let gen = generate_one_step(fwd, sched, m, src, &ts)?;
                rows.iter().for_each(|&r| count[r] += 1);
                fill = sum_opt(fill, gen.scatter_rows(&rows, b));
            }
            if let Some(r) = missing.iter().find(|&&r| count[r] == 0) {
                return Err(DcgError::Invariant(format!("sample {} has no available view", batch[*r])));
            }
            let inv = Mat::from_shape_fn((b, 1), |(r, _)| if count[r] > 0 { 1.0 / count[r] as f64 } else { 0.0 });
            let fill = fill.expect("missing rows have sources").mul_col(tape.constant(inv));
            z_full = sum_opt(z_full, fill);
        }
        full.push(z_full.expect("every row has a latent"));
    }

    let (h, _) = fwd.fuse(&full)?;
    let q = fwd.classify(h)?;
    let qv = full.iter().map(|&z| fwd.classify(z)).collect::<Result<Vec<_>>>()?;

    if abl.mi {
        let mut mi = None;
        for &q_v in &qv {
            mi = sum_opt(mi, mutual_info_loss(q, q_v)?);
        }
        terms.mi = mi;
    }
    if abl.ccl && nv >= 2 {
        let (ccl, ent) = category_contrastive(&qv, w.tau_c)?;
        terms.ccl = Some(ccl);
        terms.ent = Some(ent);
    }
    if abl.kl {
        let q_val = q.to_mat();
        let qv_val: Vec<Mat> = qv.iter().map(Var::to_mat).collect();
        let mut kl = None;
        for (q_v, val) in qv.iter().zip(&qv_val) {
            kl = sum_opt(kl, kl_self_training(&sharpen_targets(&q_val, val)?, *q_v)?);
        }
        let mut all: Vec<&Mat> = qv_val.iter().collect();
        all.push(&q_val);
        kl = sum_opt(kl, kl_self_training(&sharpen_many(&all)?, q)?);
        terms.kl = kl.map(|k| k.scale(1.0 / b as f64));
    }
    Ok(BatchObjective { terms, imputed })
}

/// Progress of a (possibly resumed) run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub pretrain_done: usize,
    pub joint_done: usize,
    /// Stage whose optimiser state is currently held.
    pub optimizer_stage: Stage,
}

impl Default for Progress {
    fn default() -> Self {
        Self { pretrain_done: 0, joint_done: 0, optimizer_stage: Stage::Pretrain }
    }
}

/// Mutable training state: parameters, optimiser, progress and history.
#[derive(Debug, Clone)]
pub struct Trainer {
    params: ModelParams,
    cfg: TrainConfig,
    sched: DiffusionSchedule,
    opt: Optimizer,
    progress: Progress,
    history: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(mut params: ModelParams, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.precision == Precision::F32 {
            params.quantize_f32();
        }
        let sched = cfg.schedule()?;
        let opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &params);
        Ok(Self { params, cfg, sched, opt, progress: Progress::default(), history: Vec::new() })
    }

    /// Fresh parameters initialised from `cfg.seed`.
    pub fn from_spec(spec: &NetworkSpec, cfg: TrainConfig) -> Result<Self> {
        Self::new(ModelParams::init(spec, cfg.seed)?, cfg)
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.sched
    }

    pub fn progress(&self) -> Progress {
        self.progress
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.opt
    }

    /// Every epoch run so far, including those before a resume.
    pub fn report(&self) -> TrainReport {
        TrainReport { history: self.history.clone() }
    }

    fn check_dataset(&self, ds: &MultiViewDataset) -> Result<()> {
        let spec = self.params.spec();
        if ds.view_dims() != spec.view_dims {
            return Err(DcgError::Shape {
                context: "dataset views".into(),
                expected: format!("{:?}", spec.view_dims),
                actual: format!("{:?}", ds.view_dims()),
            });
        }
        Ok(())
    }

    fn enter(&mut self, stage: Stage, ds: &MultiViewDataset) -> Result<()> {
        if stage == Stage::Joint && self.progress.joint_done == 0 && self.cfg.classifier_init == ClassifierInit::Kmeans {
            init_classifier(&mut self.params, ds, self.cfg.seed)?;
            if self.cfg.precision == Precision::F32 {
                self.params.quantize_f32();
            }
        }
        self.enter_optimizer(stage);
        Ok(())
    }

    fn enter_optimizer(&mut self, stage: Stage) {
        if self.progress.optimizer_stage != stage {
            self.opt = Optimizer::new(self.cfg.optimizer, self.cfg.learning_rate, &self.params);
            self.progress.optimizer_stage = stage;
        }
    }

    /// Runs whatever remains of the configured warm-up and joint epochs.
    pub fn train(&mut self, ds: &MultiViewDataset) -> Result<TrainReport> {
        let mut report = self.pretrain(ds)?;
        report.history.extend(self.fit(ds)?.history);
        Ok(report)
    }

    /// Remaining warm-up epochs (reconstruction only).
    pub fn pretrain(&mut self, ds: &MultiViewDataset) -> Result<TrainReport> {
        let n = self.cfg.pretrain_epochs.saturating_sub(self.progress.pretrain_done);
        self.pretrain_epochs(ds, n)
    }

    pub fn pretrain_epochs(&mut self, ds: &MultiViewDataset, n: usize) -> Result<TrainReport> {
        self.check_dataset(ds)?;
        let mut report = TrainReport::default();
        if n == 0 {
            return Ok(report);
        }
        self.enter(Stage::Pretrain, ds)?;
        for _ in 0..n {
            let epoch = self.progress.pretrain_done;
            let record = self.run_epoch(ds, Stage::Pretrain, epoch)?;
            self.progress.pretrain_done += 1;
            self.history.push(record.clone());
            report.history.push(record);
        }
        Ok(report)
    }

    /// Remaining joint epochs.
    pub fn fit(&mut self, ds: &MultiViewDataset) -> Result<TrainReport> {
        let n = self.cfg.epochs.saturating_sub(self.progress.joint_done);
        self.fit_epochs(ds, n)
    }

    pub fn fit_epochs(&mut self, ds: &MultiViewDataset, n: usize) -> Result<TrainReport> {
        self.check_dataset(ds)?;
        if paired_indices(ds).is_empty() && ds.n_views() >= 2 {
            return Err(DcgError::Precondition("no fully observed sample to align views on".into()));
        }
        let mut report = TrainReport::default();
        if n == 0 {
            return Ok(report);
        }
        self.enter(Stage::Joint, ds)?;
        for _ in 0..n {
            let epoch = self.progress.joint_done;
            let mut record = self.run_epoch(ds, Stage::Joint, epoch)?;
            self.progress.joint_done += 1;
            if let Some(truth) = ds.labels() {
                let every = self.cfg.eval_every;
                if every > 0 && (self.progress.joint_done.is_multiple_of(every) || self.progress.joint_done == self.cfg.epochs) {
                    let q = quick_assignments(&self.params, &self.sched, ds)?;
                    let m = evaluate(&argmax_rows(&q), truth)?;
                    record.acc = Some(m.acc);
                    record.nmi = Some(m.nmi);
                    record.ari = Some(m.ari);
                }
            }
            self.history.push(record.clone());
            report.history.push(record);
        }
        Ok(report)
    }

    fn run_epoch(&mut self, ds: &MultiViewDataset, stage: Stage, epoch: usize) -> Result<EpochRecord> {
        let start = Instant::now();
        let stage_tag = match stage {
            Stage::Pretrain => 0,
            Stage::Joint => 1,
        };
        let batch = self.cfg.batch.min(ds.n());
        let batch_seed = crate::rng::derive_seed(self.cfg.seed, &[stage_tag]);
        let batches = minibatches(ds, batch, batch_seed, epoch as u64)?;
        let mut rng = stream_rng(self.cfg.seed, &[TAG_STEP, stage_tag, epoch as u64]);
        let mut sum = [0.0; 8];
        let mut imputed = 0;
        for (bi, rows) in batches.iter().enumerate() {
            let tape = Tape::new();
            let fwd = self.params.bind(&tape);
            let terms = match stage {
                Stage::Pretrain => LossTerms { recon: recon_loss(&fwd, ds, rows)?, ..LossTerms::default() },
                Stage::Joint => {
                    let obj = joint_objective(&fwd, &self.sched, ds, rows, &self.cfg, &mut rng)?;
                    imputed += obj.imputed;
                    obj.terms
                }
            };
            let breakdown = terms.breakdown(&self.cfg.weights);
            let context = || format!(" (stage {stage:?}, epoch {}, batch {bi})", epoch + 1);
            if let Some(component) = breakdown.first_non_finite() {
                return Err(DcgError::NonFinite { component: component.into(), detail: context() });
            }
            let Some(total) = terms.total(&self.cfg.weights) else {
                continue;
            };
            let differentiated = total.item();
            if !differentiated.is_finite() {
                return Err(DcgError::NonFinite { component: "total".into(), detail: context() });
            }
            if (differentiated - breakdown.total).abs() > 1e-9 * (1.0 + breakdown.total.abs()) {
                return Err(DcgError::Invariant(format!("differentiated loss {differentiated} != reported {}", breakdown.total)));
            }
            let grads = tape.backward(total);
            let mut grads = fwd.gradients(&grads);
            drop(fwd);
            if let Some(c) = self.cfg.grad_clip {
                let norm = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
                if norm > c {
                    grads.iter_mut().for_each(|g| *g *= c / norm);
                }
            }
            self.opt.step(&mut self.params, &grads);
            if self.cfg.precision == Precision::F32 {
                self.params.quantize_f32();
            }
            if !self.params.all_finite() {
                return Err(DcgError::NonFinite { component: "parameters".into(), detail: context() });
            }
            for (s, x) in sum.iter_mut().zip(breakdown.components().iter().chain([breakdown.total].iter())) {
                *s += x;
            }
        }
        let nb = batches.len() as f64;
        let [recon, diff, gcl, mi, ccl, ent, kl, total] = sum.map(|s| s / nb);
        Ok(EpochRecord {
            stage,
            epoch: epoch + 1,
            loss: LossBreakdown { recon, diff, gcl, mi, ccl, ent, kl, total },
            acc: None,
            nmi: None,
            ari: None,
            seconds: start.elapsed().as_secs_f64(),
            imputed,
        })
    }

    /// Checkpoint including optimiser state, progress and history.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut extra = Vec::new();
        for (i, p) in self.params.params().iter().enumerate() {
            extra.push((format!("optimizer.m.{}", p.name), &self.opt.m[i]));
            if let Some(v) = self.opt.v.get(i) {
                extra.push((format!("optimizer.v.{}", p.name), v));
            }
        }
        let state = TrainState { progress: self.progress, optimizer_steps: self.opt.step, history: self.history.clone() };
        write_checkpoint(&self.params, &self.cfg, Some(state), &extra, path)
    }

    /// Restores a trainer written by [`Trainer::save`].
    pub fn resume(path: &Path) -> Result<Self> {
        let ck = read_checkpoint(path)?;
        let state = ck.state.ok_or_else(|| DcgError::Checkpoint("checkpoint holds no training state".into()))?;
        let mut trainer = Self::new(ck.params, ck.cfg)?;
        let take = |name: &str| {
            ck.extra
                .iter()
                .position(|(n, _)| n == name)
                .map(|i| ck.extra[i].1.clone())
                .ok_or_else(|| DcgError::Checkpoint(format!("missing tensor `{name}`")))
        };
        let names: Vec<String> = trainer.params.params().iter().map(|p| p.name.clone()).collect();
        let m = names.iter().map(|n| take(&format!("optimizer.m.{n}"))).collect::<Result<Vec<_>>>()?;
        let v = if trainer.cfg.optimizer.kind == OptimizerKind::Adam {
            names.iter().map(|n| take(&format!("optimizer.v.{n}"))).collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        for (a, p) in m.iter().zip(trainer.params.params()) {
            if a.dim() != p.value.dim() {
                return Err(DcgError::Checkpoint(format!("optimizer state for `{}` has the wrong shape", p.name)));
            }
        }
        trainer.opt.m = m;
        trainer.opt.v = v;
        trainer.opt.step = state.optimizer_steps;
        trainer.progress = state.progress;
        trainer.history = state.history;
        Ok(trainer)
    }
}

/// Per-view centring and scalar scaling so that views with different latent
/// scales weigh equally in k-means.
struct Standardizer {
    mean: Mat,
    scale: f64,
}

impl Standardizer {
    fn fit_present(ds: &MultiViewDataset, v: usize, z: &Mat) -> Self {
        let rows: Vec<usize> = (0..ds.n()).filter(|&i| ds.is_present(i, v)).collect();
        let z = z.select(Axis(0), &rows);
        let mean = z.mean_axis(Axis(0)).map_or_else(|| Mat::zeros((1, z.ncols())), |m| m.insert_axis(Axis(0)));
        let centred = &z - &mean;
        let rms = (centred.iter().map(|x| x * x).sum::<f64>() / centred.len().max(1) as f64).sqrt();
        Self { mean, scale: if rms > 1e-12 && rms.is_finite() { rms } else { 1.0 } }
    }

    fn apply(&self, z: &Mat) -> Mat {
        (z - &self.mean) / self.scale
    }
}

/// Logit margin of the fitted classifier: pseudo-labelled rows start with
/// roughly 0.9 confidence for three clusters.
const INIT_MARGIN: f64 = 3.0;
const RIDGE: f64 = 1e-3;

/// Fits the shared classifier by ridge regression onto k-means pseudo-labels.
/// k-means runs on the paired rows' per-view standardised latents side by
/// side (all rows of the only view for a single-view dataset); the regression
/// uses every present latent of every view, so one linear head separates
/// the clusters in each view's own coordinates.
pub fn init_classifier(params: &mut ModelParams, ds: &MultiViewDataset, seed: u64) -> Result<()> {
    let k = params.spec().k;
    let nv = ds.n_views();
    let zs = (0..nv).map(|v| params.encode(v, ds.view(v))).collect::<Result<Vec<_>>>()?;
    let scalers: Vec<Standardizer> = zs.iter().enumerate().map(|(v, z)| Standardizer::fit_present(ds, v, z)).collect();
    let rows: Vec<usize> = if nv == 1 { (0..ds.n()).collect() } else { paired_indices(ds).indices };
    if rows.len() < k {
        return Err(DcgError::Precondition(format!("{} fully observed samples cannot seed {k} clusters", rows.len())));
    }
    let parts: Vec<Mat> = zs.iter().zip(&scalers).map(|(z, s)| s.apply(&z.select(Axis(0), &rows))).collect();
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let x = ndarray::concatenate(Axis(1), &views).map_err(|e| DcgError::Invariant(e.to_string()))?;
    let km = crate::kmeans::kmeans(&x, k, 10, 100, crate::rng::derive_seed(seed, &[0x1417]))?;

    let d = params.spec().latent_dim;
    // normal equations of [Z 1] W = Y over every view's paired latents
    let mut gram = Mat::zeros((d + 1, d + 1));
    let mut rhs = Mat::zeros((d + 1, k));
    for z in &zs {
        let a = ndarray::concatenate![Axis(1), z.select(Axis(0), &rows), Mat::ones((rows.len(), 1))];
        let mut y = Mat::zeros((rows.len(), k));
        for (r, &l) in km.labels.iter().enumerate() {
            y[[r, l]] = INIT_MARGIN;
        }
        gram += &a.t().dot(&a);
        rhs += &a.t().dot(&y);
    }
    let ridge = RIDGE * (gram.diag().sum() / (d + 1) as f64).max(1e-12);
    for i in 0..d {
        gram[[i, i]] += ridge;
    }
    let sol = solve_spd(gram, rhs)?;
    params.set_classifier(sol.slice(ndarray::s![..d, ..]).to_owned(), sol.slice(ndarray::s![d.., ..]).to_owned())
}

/// Solves `A X = B` for symmetric positive definite `A` by Cholesky.
fn solve_spd(mut a: Mat, mut b: Mat) -> Result<Mat> {
    let n = a.nrows();
    for j in 0..n {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= a[[j, k]] * a[[j, k]];
        }
        if !(diag > 0.0) {
            return Err(DcgError::Invariant("classifier initialisation system is singular".into()));
        }
        let l = diag.sqrt();
        a[[j, j]] = l;
        for i in j + 1..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= a[[i, k]] * a[[j, k]];
            }
            a[[i, j]] = s / l;
        }
    }
    for c in 0..b.ncols() {
        for i in 0..n {
            let mut s = b[[i, c]];
            for k in 0..i {
                s -= a[[i, k]] * b[[k, c]];
            }
            b[[i, c]] = s / a[[i, i]];
        }
        for i in (0..n).rev() {
            let mut s = b[[i, c]];
            for k in i + 1..n {
                s -= a[[k, i]] * b[[k, c]];
            }
            b[[i, c]] = s / a[[i, i]];
        }
    }
    Ok(b)
}

/// Fused soft assignments over the whole dataset with the training-time
/// fill-in, made deterministic by using step `T` for every generation.
pub fn quick_assignments(params: &ModelParams, sched: &DiffusionSchedule, ds: &MultiViewDataset) -> Result<Mat> {
    let n = ds.n();
    let nv = ds.n_views();
    let t = sched.len();
    let zs = (0..nv).map(|v| params.encode(v, ds.view(v))).collect::<Result<Vec<_>>>()?;
    let mut full = zs.clone();
    for m in 0..nv {
        let missing: Vec<usize> = (0..n).filter(|&i| !ds.is_present(i, m)).collect();
        if missing.is_empty() {
            continue;
        }
        let mut sum = Mat::zeros((missing.len(), params.spec().latent_dim));
        let mut count = vec![0usize; missing.len()];
        for j in (0..nv).filter(|&j| j != m) {
            let local: Vec<usize> = (0..missing.len()).filter(|&r| ds.is_present(missing[r], j)).collect();
            if local.is_empty() {
                continue;
            }
            let rows: Vec<usize> = local.iter().map(|&r| missing[r]).collect();
            let src = zs[j].select(Axis(0), &rows);
            let gen = estimate_x0(sched, &src, t, &params.predict_noise(m, &src, t)?)?;
            for (k, &r) in local.iter().enumerate() {
                let mut dst = sum.row_mut(r);
                dst += &gen.row(k);
                count[r] += 1;
            }
        }
        for (r, &i) in missing.iter().enumerate() {
            if count[r] == 0 {
                return Err(DcgError::Invariant(format!("sample {i} has no available view")));
            }
            let row = sum.row(r).mapv(|x| x / count[r] as f64);
            full[m].row_mut(i).assign(&row);
        }
    }
    let (h, _) = params.fuse(&full)?;
    params.classify(&h)
}

/// Warm-up of the autoencoders alone for `cfg.pretrain_epochs`.
pub fn pretrain_autoencoders(params: &mut ModelParams, ds: &MultiViewDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    let mut trainer = Trainer::new(params.clone(), cfg.clone())?;
    let report = trainer.pretrain(ds)?;
    *params = trainer.into_params();
    Ok(report)
}

/// Joint optimisation of the full objective for `cfg.epochs`.
pub fn fit(params: &mut ModelParams, ds: &MultiViewDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    let mut trainer = Trainer::new(params.clone(), cfg.clone())?;
    let report = trainer.fit(ds)?;
    *params = trainer.into_params();
    Ok(report)
}

// ---------------------------------------------------------------------------
// checkpoints
//
// layout: MAGIC | u32 version | u64 header length | JSON header | tensor
// payload (little-endian) | SHA-256 of everything before it

const MAGIC: &[u8; 8] = b"DCGCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainState {
    progress: Progress,
    optimizer_steps: u64,
    history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum DType {
    F32,
    F64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    dtype: DType,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    config: TrainConfig,
    state: Option<TrainState>,
    tensors: Vec<TensorEntry>,
}

struct Checkpoint {
    params: ModelParams,
    cfg: TrainConfig,
    state: Option<TrainState>,
    extra: Vec<(String, Mat)>,
}

fn write_checkpoint(params: &ModelParams, cfg: &TrainConfig, state: Option<TrainState>, extra: &[(String, &Mat)], path: &Path) -> Result<()> {
    let param_dtype = match cfg.precision {
        Precision::F32 => DType::F32,
        Precision::F64 => DType::F64,
    };
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    let all = params.params().iter().map(|p| (p.name.clone(), &p.value, param_dtype)).chain(extra.iter().map(|(n, m)| (n.clone(), *m, DType::F64)));
    for (name, value, dtype) in all {
        tensors.push(TensorEntry { name, shape: [value.nrows(), value.ncols()], dtype, offset: payload.len() as u64 });
        for &x in value.iter() {
            match dtype {
                DType::F32 => payload.extend_from_slice(&(x as f32).to_le_bytes()),
                DType::F64 => payload.extend_from_slice(&x.to_le_bytes()),
            }
        }
    }
    let header = Header { spec: params.spec().clone(), config: cfg.clone(), state, tensors };
    let header = serde_json::to_vec(&header).map_err(|e| DcgError::Checkpoint(e.to_string()))?;
    let mut bytes = Vec::with_capacity(payload.len() + header.len() + 52);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&payload);
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let fail = |m: &str| DcgError::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < MAGIC.len() + 12 + 32 {
        return Err(fail("file is truncated"));
    }
    if &bytes[..8] != MAGIC {
        return Err(fail("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(fail(&format!("unsupported version {version} (expected {CHECKPOINT_VERSION})")));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(fail("checksum mismatch (file is corrupted or truncated)"));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize.checked_add(header_len).filter(|&e| e <= body.len()).ok_or_else(|| fail("header overruns file"))?;
    let header: Header = serde_json::from_slice(&body[20..header_end]).map_err(|e| fail(&format!("bad header: {e}")))?;
    let payload = &body[header_end..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let width = match t.dtype {
            DType::F32 => 4,
            DType::F64 => 8,
        };
        let len = t.shape[0] * t.shape[1];
        let start = t.offset as usize;
        let end = start.checked_add(len * width).filter(|&e| e <= payload.len()).ok_or_else(|| fail(&format!("tensor `{}` overruns payload", t.name)))?;
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(width)
            .map(|c| match t.dtype {
                DType::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
                DType::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
            })
            .collect();
        let m = Mat::from_shape_vec((t.shape[0], t.shape[1]), data).map_err(|e| fail(&e.to_string()))?;
        tensors.push((t.name.clone(), m));
    }
    let mut params = ModelParams::init(&header.spec, 0).map_err(|e| fail(&format!("bad network spec: {e}")))?;
    let mut values = Vec::with_capacity(params.len());
    for p in params.params() {
        let i = tensors.iter().position(|(n, _)| *n == p.name).ok_or_else(|| fail(&format!("missing tensor `{}`", p.name)))?;
        values.push(tensors[i].1.clone());
    }
    params.set_values(values).map_err(|e| fail(&e.to_string()))?;
    let names: Vec<&str> = params.params().iter().map(|p| p.name.as_str()).collect();
    let extra = tensors.into_iter().filter(|(n, _)| !names.contains(&n.as_str())).collect();
    Ok(Checkpoint { params, cfg: header.config, state: header.state, extra })
}

/// Writes parameters, their architecture and the training configuration.
pub fn save_checkpoint(params: &ModelParams, cfg: &TrainConfig, path: &Path) -> Result<()> {
    write_checkpoint(params, cfg, None, &[], path)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, TrainConfig)> {
    let ck = read_checkpoint(path)?;
    Ok((ck.params, ck.cfg))
}
