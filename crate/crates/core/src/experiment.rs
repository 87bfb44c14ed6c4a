//! Experiment harness: a TOML configuration, repeated seeded runs, missing
//! rate × horizon sweeps and the result files they write.
//!
//! Layout of an output directory after `run`:
//!
//! ```text
//! config.resolved.toml   the configuration actually used
//! results.csv            one row per run plus a summary row
//! train_log.csv          every epoch of every run
//! run_<r>/labels.csv     predicted labels
//! run_<r>/embeddings.csv fused embedding with predicted/true labels
//! run_<r>/model.ckpt     final trainer state (also used to resume)
//! ```
//!
//! A sweep writes one such block per `(rate, T_ext)` under
//! `rate_<rate>/text_<T_ext>/` plus `sweep_summary.csv` at the top.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{apply_missingness, generate_synthetic, load_dataset, MissingnessSpec, MultiViewDataset};
use crate::error::{DcgError, Result};
use crate::inference::{export_embeddings, export_labels, impute_and_cluster};
use crate::metrics::{evaluate, MetricReport};
use crate::networks::{Activation, NetworkSpec};
use crate::training::{Ablation, TrainConfig, TrainReport, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_per_cluster: usize,
    pub k: usize,
    pub dims: Vec<usize>,
    pub sep: f64,
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Exactly one of `path` (a dataset directory) or `synthetic`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

impl DataConfig {
    pub fn load(&self) -> Result<MultiViewDataset> {
        match (&self.path, &self.synthetic) {
            (Some(p), None) => load_dataset(p),
            (None, Some(s)) => generate_synthetic(s.n_per_cluster, s.k, &s.dims, s.sep, s.noise, s.seed),
            _ => Err(DcgError::Config("set exactly one of data.path and data.synthetic".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MissingConfig {
    pub rate: f64,
    /// Mask seed; each run uses its own seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for MissingConfig {
    fn default() -> Self {
        Self { rate: 0.3, seed: None }
    }
}

/// Architecture overrides; view widths come from the data and `k` from its
/// labels unless given.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latent_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden_sizes_ae: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden_sizes_denoiser: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_embed_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fusion_hidden: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub activation: Option<Activation>,
}

impl NetworkConfig {
    pub fn build(&self, ds: &MultiViewDataset) -> Result<NetworkSpec> {
        let k = match (self.k, ds.n_classes()) {
            (Some(k), _) => k,
            (None, Some(k)) => k,
            (None, None) => return Err(DcgError::Config("network.k is required for unlabelled data".into())),
        };
        let mut spec = NetworkSpec::new(ds.view_dims(), k);
        if let Some(x) = self.latent_dim {
            spec.latent_dim = x;
        }
        if let Some(x) = &self.hidden_sizes_ae {
            spec.hidden_sizes_ae = x.clone();
        }
        if let Some(x) = &self.hidden_sizes_denoiser {
            spec.hidden_sizes_denoiser = x.clone();
        }
        if let Some(x) = self.time_embed_dim {
            spec.time_embed_dim = x;
        }
        if let Some(x) = &self.fusion_hidden {
            spec.fusion_hidden = x.clone();
        }
        if let Some(x) = self.delta {
            spec.delta = x;
        }
        if let Some(x) = self.activation {
            spec.activation = x;
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Every field filled in from `spec`, for the frozen config copy.
    fn resolved(spec: &NetworkSpec) -> Self {
        Self {
            k: Some(spec.k),
            latent_dim: Some(spec.latent_dim),
            hidden_sizes_ae: Some(spec.hidden_sizes_ae.clone()),
            hidden_sizes_denoiser: Some(spec.hidden_sizes_denoiser.clone()),
            time_embed_dim: Some(spec.time_embed_dim),
            fusion_hidden: Some(spec.fusion_hidden.clone()),
            delta: Some(spec.delta),
            activation: Some(spec.activation),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    /// Relative to the config file's directory.
    pub out_dir: PathBuf,
    pub repeats: usize,
    /// Run `r` uses seed `seed + r` for initialisation, batching, masking
    /// and recovery.
    pub seed: u64,
    /// Also checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self { out_dir: PathBuf::from("results"), repeats: 1, seed: 0, checkpoint_every: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub experiment: ExperimentSection,
    pub data: DataConfig,
    #[serde(default)]
    pub missing: MissingConfig,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| DcgError::Config(e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config; a relative `out_dir` or `data.path` is resolved
    /// against the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            DcgError::Config(m) => DcgError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.experiment.out_dir = base.join(&cfg.experiment.out_dir);
        if let Some(p) = &cfg.data.path {
            cfg.data.path = Some(base.join(p));
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment.repeats < 1 {
            return Err(DcgError::Config("experiment.repeats must be >= 1".into()));
        }
        if self.train.ablation != Ablation::default() {
            return Err(DcgError::Config("set loss-term switches under [ablation], not train.ablation".into()));
        }
        if self.train.seed != 0 {
            return Err(DcgError::Config("seeds are set by experiment.seed, not train.seed".into()));
        }
        if self.data.path.is_some() == self.data.synthetic.is_some() {
            return Err(DcgError::Config("set exactly one of data.path and data.synthetic".into()));
        }
        if !(0.0..1.0).contains(&self.missing.rate) {
            return Err(DcgError::Config(format!("missing.rate must lie in [0, 1), got {}", self.missing.rate)));
        }
        self.train.validate()
    }

    /// The training configuration of run `r`.
    pub fn train_config(&self, run: usize) -> TrainConfig {
        let mut cfg = self.train.clone();
        cfg.seed = self.run_seed(run);
        cfg.ablation = self.ablation;
        cfg
    }

    pub fn run_seed(&self, run: usize) -> u64 {
        self.experiment.seed.wrapping_add(run as u64)
    }
}

/// Options that do not belong in the config file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Continue from `run_<r>/model.ckpt` where one exists instead of
    /// starting over.
    pub resume: bool,
}

/// Metrics of one seeded run at one recovery horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub run: usize,
    pub seed: u64,
    pub rate: f64,
    pub t_ext: usize,
    pub metrics: Option<MetricReport>,
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub acc: (f64, f64),
    pub nmi: (f64, f64),
    pub ari: (f64, f64),
}

fn summarize(outcomes: &[RunOutcome]) -> Option<Summary> {
    let ms: Vec<&MetricReport> = outcomes.iter().map(|o| o.metrics.as_ref()).collect::<Option<_>>()?;
    let col = |f: fn(&MetricReport) -> f64| mean_std(&ms.iter().map(|m| f(m)).collect::<Vec<_>>());
    Some(Summary { acc: col(|m| m.acc), nmi: col(|m| m.nmi), ari: col(|m| m.ari) })
}

fn csv_err(path: &Path, e: csv::Error) -> DcgError {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => DcgError::Io(e),
        other => DcgError::Format { path: path.to_path_buf(), message: format!("{other:?}") },
    }
}

fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

fn opt(x: Option<f64>) -> String {
    x.map(|x| x.to_string()).unwrap_or_default()
}

/// `results.csv`: one row per run, then a `summary` row holding the means
/// and population standard deviations; the summary's seed is the base seed.
pub fn write_results(path: &Path, outcomes: &[RunOutcome], base_seed: u64) -> Result<Option<Summary>> {
    let header = ["run", "seed", "rate", "t_ext", "acc", "nmi", "ari", "acc_std", "nmi_std", "ari_std"];
    let mut rows = Vec::new();
    for o in outcomes {
        let m = o.metrics.as_ref();
        rows.push(vec![
            o.run.to_string(),
            o.seed.to_string(),
            o.rate.to_string(),
            o.t_ext.to_string(),
            opt(m.map(|m| m.acc)),
            opt(m.map(|m| m.nmi)),
            opt(m.map(|m| m.ari)),
            String::new(),
            String::new(),
            String::new(),
        ]);
    }
    let summary = summarize(outcomes);
    let first = outcomes.first();
    let s = summary.as_ref();
    rows.push(vec![
        "summary".into(),
        base_seed.to_string(),
        first.map(|o| o.rate.to_string()).unwrap_or_default(),
        first.map(|o| o.t_ext.to_string()).unwrap_or_default(),
        opt(s.map(|s| s.acc.0)),
        opt(s.map(|s| s.nmi.0)),
        opt(s.map(|s| s.ari.0)),
        opt(s.map(|s| s.acc.1)),
        opt(s.map(|s| s.nmi.1)),
        opt(s.map(|s| s.ari.1)),
    ]);
    write_table(path, &header, &rows)?;
    Ok(summary)
}

/// Trains run `r` on `ds` into `dir`, resuming from `dir/model.ckpt` when
/// asked and possible.
fn train_run(cfg: &ExperimentConfig, spec: &NetworkSpec, ds: &MultiViewDataset, run: usize, dir: &Path, opts: RunOptions, log: &mut dyn FnMut(&str)) -> Result<Trainer> {
    fs::create_dir_all(dir)?;
    let ckpt = dir.join("model.ckpt");
    let tcfg = cfg.train_config(run);
    let mut trainer = if opts.resume && ckpt.exists() {
        let t = Trainer::resume(&ckpt)?;
        if t.config() != &tcfg || t.params().spec() != spec {
            return Err(DcgError::Config(format!("{} was written with a different configuration; rerun without --resume", ckpt.display())));
        }
        let p = t.progress();
        log(&format!("run {run}: resuming after {} warm-up and {} joint epochs", p.pretrain_done, p.joint_done));
        t
    } else {
        Trainer::from_spec(spec, tcfg.clone())?
    };
    let chunk = match cfg.experiment.checkpoint_every {
        0 => usize::MAX,
        c => c,
    };
    loop {
        let p = trainer.progress();
        let pre_left = tcfg.pretrain_epochs.saturating_sub(p.pretrain_done);
        let joint_left = tcfg.epochs.saturating_sub(p.joint_done);
        if pre_left > 0 {
            trainer.pretrain_epochs(ds, pre_left.min(chunk))?;
        } else if joint_left > 0 {
            trainer.fit_epochs(ds, joint_left.min(chunk))?;
        } else {
            break;
        }
        trainer.save(&ckpt)?;
    }
    if !ckpt.exists() {
        trainer.save(&ckpt)?;
    }
    Ok(trainer)
}

fn prepare(cfg: &ExperimentConfig, rate: f64, run: usize) -> Result<(MultiViewDataset, NetworkSpec)> {
    let full = cfg.data.load()?;
    let ds = if rate == 0.0 {
        full
    } else {
        if !full.is_complete() {
            return Err(DcgError::Config("data already has missing views; set missing.rate = 0".into()));
        }
        let seed = cfg.missing.seed.unwrap_or_else(|| cfg.run_seed(run));
        apply_missingness(&full, &MissingnessSpec { rate, seed })?
    };
    let spec = cfg.network.build(&ds)?;
    Ok((ds, spec))
}

fn infer(trainer: &Trainer, ds: &MultiViewDataset, t_ext: usize, seed: u64, dir: &Path) -> Result<Option<MetricReport>> {
    fs::create_dir_all(dir)?;
    let result = impute_and_cluster(trainer.params(), trainer.schedule(), ds, t_ext, seed)?;
    export_labels(&result, &dir.join("labels.csv"))?;
    export_embeddings(&result, ds.labels(), &dir.join("embeddings.csv"))?;
    ds.labels().map(|truth| evaluate(&result.labels, truth)).transpose()
}

fn write_train_log(path: &Path, logs: &[(usize, u64, TrainReport)]) -> Result<()> {
    let mut header = vec!["run", "seed"];
    header.extend(TrainReport::csv_header());
    let mut rows = Vec::new();
    for (run, seed, report) in logs {
        for row in report.csv_rows() {
            let mut r = vec![run.to_string(), seed.to_string()];
            r.extend(row);
            rows.push(r);
        }
    }
    write_table(path, &header, &rows)
}

/// The config as actually run, with the network fully spelled out.
pub fn resolved_toml(cfg: &ExperimentConfig, spec: &NetworkSpec) -> Result<String> {
    let mut frozen = cfg.clone();
    frozen.network = NetworkConfig::resolved(spec);
    toml::to_string(&frozen).map_err(|e| DcgError::Config(format!("cannot serialise config: {e}")))
}

/// Trains and evaluates `repeats` seeded runs at `missing.rate` and
/// `train.t_ext`, writing everything under `experiment.out_dir`.
pub fn run(cfg: &ExperimentConfig, opts: RunOptions, log: &mut dyn FnMut(&str)) -> Result<Vec<RunOutcome>> {
    cfg.validate()?;
    let out = &cfg.experiment.out_dir;
    fs::create_dir_all(out)?;
    let mut outcomes = Vec::new();
    let mut logs = Vec::new();
    for r in 0..cfg.experiment.repeats {
        let seed = cfg.run_seed(r);
        let (ds, spec) = prepare(cfg, cfg.missing.rate, r)?;
        if r == 0 {
            fs::write(out.join("config.resolved.toml"), resolved_toml(cfg, &spec)?)?;
        }
        let dir = out.join(format!("run_{r}"));
        let trainer = train_run(cfg, &spec, &ds, r, &dir, opts, log)?;
        let metrics = infer(&trainer, &ds, cfg.train.t_ext, seed, &dir)?;
        if let Some(m) = &metrics {
            log(&format!("run {r} (seed {seed}): ACC {:.4} NMI {:.4} ARI {:.4}", m.acc, m.nmi, m.ari));
        } else {
            log(&format!("run {r} (seed {seed}): done (no labels, no metrics)"));
        }
        logs.push((r, seed, trainer.report()));
        outcomes.push(RunOutcome { run: r, seed, rate: cfg.missing.rate, t_ext: cfg.train.t_ext, metrics });
    }
    write_train_log(&out.join("train_log.csv"), &logs)?;
    write_results(&out.join("results.csv"), &outcomes, cfg.experiment.seed)?;
    Ok(outcomes)
}

/// One row of `sweep_summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub rate: f64,
    pub t_ext: usize,
    pub summary: Option<Summary>,
}

/// Cross product of missing rates and recovery horizons. Each rate gets
/// its own masks and freshly trained models; the horizons of one rate share
/// those models and differ only at inference.
pub fn sweep(cfg: &ExperimentConfig, rates: &[f64], t_exts: &[usize], opts: RunOptions, log: &mut dyn FnMut(&str)) -> Result<Vec<SweepRow>> {
    if rates.is_empty() {
        return Err(DcgError::Argument("sweep needs at least one missing rate".into()));
    }
    if t_exts.is_empty() {
        return Err(DcgError::Argument("sweep needs at least one T_ext".into()));
    }
    if let Some(&t) = t_exts.iter().find(|&&t| t == 0) {
        return Err(DcgError::Argument(format!("T_ext must be >= 1, got {t}")));
    }
    cfg.validate()?;
    if let Some(&rate) = rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(DcgError::Argument(format!("missing rate {rate} not in [0, 1)")));
    }
    let out = &cfg.experiment.out_dir;
    fs::create_dir_all(out)?;
    let mut table = Vec::new();
    for (ri, &rate) in rates.iter().enumerate() {
        let rate_dir = out.join(format!("rate_{rate}"));
        fs::create_dir_all(&rate_dir)?;
        let mut per_t: Vec<Vec<RunOutcome>> = vec![Vec::new(); t_exts.len()];
        let mut logs = Vec::new();
        for r in 0..cfg.experiment.repeats {
            let seed = cfg.run_seed(r);
            let (ds, spec) = prepare(cfg, rate, r)?;
            if ri == 0 && r == 0 {
                fs::write(out.join("config.resolved.toml"), resolved_toml(cfg, &spec)?)?;
            }
            let trainer = train_run(cfg, &spec, &ds, r, &rate_dir.join(format!("run_{r}")), opts, log)?;
            for (ti, &t_ext) in t_exts.iter().enumerate() {
                let dir = rate_dir.join(format!("text_{t_ext}")).join(format!("run_{r}"));
                let metrics = infer(&trainer, &ds, t_ext, seed, &dir)?;
                if let Some(m) = &metrics {
                    log(&format!("rate {rate} T_ext {t_ext} run {r}: ACC {:.4} NMI {:.4} ARI {:.4}", m.acc, m.nmi, m.ari));
                }
                per_t[ti].push(RunOutcome { run: r, seed, rate, t_ext, metrics });
            }
            logs.push((r, seed, trainer.report()));
        }
        write_train_log(&rate_dir.join("train_log.csv"), &logs)?;
        for (ti, &t_ext) in t_exts.iter().enumerate() {
            let summary = write_results(&rate_dir.join(format!("text_{t_ext}")).join("results.csv"), &per_t[ti], cfg.experiment.seed)?;
            table.push(SweepRow { rate, t_ext, summary });
        }
    }
    let header = ["rate", "T_ext", "acc_mean", "acc_std", "nmi_mean", "nmi_std", "ari_mean", "ari_std"];
    let rows: Vec<Vec<String>> = table
        .iter()
        .map(|row| {
            let s = row.summary.as_ref();
            vec![
                row.rate.to_string(),
                row.t_ext.to_string(),
                opt(s.map(|s| s.acc.0)),
                opt(s.map(|s| s.acc.1)),
                opt(s.map(|s| s.nmi.0)),
                opt(s.map(|s| s.nmi.1)),
                opt(s.map(|s| s.ari.0)),
                opt(s.map(|s| s.ari.1)),
            ]
        })
        .collect();
    write_table(&out.join("sweep_summary.csv"), &header, &rows)?;
    Ok(table)
}
