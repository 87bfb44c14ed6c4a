//! Acceptance runner: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the lines come out in order
//! and unbuffered. The process exits nonzero when a gating criterion fails;
//! the extrapolation and real-data checks are reported but do not gate (see
//! the README).

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::{Command, ExitCode};
use std::time::Instant;

use dcg::data::{apply_missingness, generate_synthetic, load_dataset, MissingnessSpec, MultiViewDataset};
use dcg::inference::impute_and_cluster;
use dcg::metrics::{compactness, evaluate};
use dcg::networks::NetworkSpec;
use dcg::training::{TrainConfig, Trainer};

use common::{gradients, oracles};

const SEEDS: [u64; 3] = [0, 1, 2];
const MISSING_RATE: f64 = 0.3;
/// Autoencoder widths of the desk-scale configuration; everything else is
/// the library default.
const DESK_AE: [usize; 3] = [64, 64, 128];

struct Outcome {
    gating: bool,
    failed: bool,
}

fn line(id: &str, gating: bool, pass: Option<bool>, detail: String) -> Outcome {
    let tag = match pass {
        Some(true) => "PASS",
        Some(false) => "FAIL",
        None => "SKIP",
    };
    let note = if gating { "" } else { " (non-gating)" };
    println!("[{tag}] {id}{note}: {detail}");
    Outcome { gating, failed: pass == Some(false) }
}

fn desk_data(seed: u64) -> MultiViewDataset {
    let ds = generate_synthetic(200, 3, &[5, 5], 6.0, 0.5, seed).unwrap();
    apply_missingness(&ds, &MissingnessSpec { rate: MISSING_RATE, seed }).unwrap()
}

fn desk_spec(ds: &MultiViewDataset) -> NetworkSpec {
    let mut spec = NetworkSpec::new(ds.view_dims(), 3);
    spec.hidden_sizes_ae = DESK_AE.to_vec();
    spec
}

fn train(ds: &MultiViewDataset, spec: &NetworkSpec, seed: u64, ablate: &str) -> Trainer {
    let mut cfg = TrainConfig { seed, eval_every: 0, ..TrainConfig::default() };
    cfg.ablation.disable(ablate).unwrap();
    let mut t = Trainer::from_spec(spec, cfg).unwrap();
    t.train(ds).unwrap();
    t
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn fmt(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", ")
}

fn oracle_suites() -> Outcome {
    let checks: &[(&str, fn())] = &[
        ("round trip", oracles::forward_and_inverse_round_trip),
        ("oracle denoiser", oracles::oracle_denoiser_walks_back_to_the_clean_latent),
        ("recovery average", oracles::recovery_averages_over_available_sources),
        ("metrics", oracles::metrics_match_brute_force_and_formulas),
        ("contrast", oracles::nt_xent_and_feature_contrast_match_loops),
        ("category contrast", oracles::category_contrast_matches_loops),
        ("mutual info", oracles::mutual_info_matches_loops),
        ("sharpen/kl", oracles::sharpening_and_kl_match_loops),
        ("reconstruction", oracles::reconstruction_matches_loops),
        ("divergence bounds", oracles::divergence_bounds_on_random_rows),
        ("sharpening entropy", oracles::sharpening_never_raises_row_entropy),
        ("grad: contrast", gradients::contrastive_losses),
        ("grad: mi/self-training", gradients::mutual_information_and_self_training),
        ("grad: reconstruction", gradients::reconstruction),
        ("grad: networks", gradients::every_network_passes_finite_differences),
        ("grad: diffusion", gradients::diffusion_terms_pass_finite_differences),
    ];
    let t0 = Instant::now();
    let failed: Vec<&str> = checks.iter().filter(|(_, f)| catch_unwind(AssertUnwindSafe(f)).is_err()).map(|(n, _)| *n).collect();
    let secs = t0.elapsed().as_secs_f64();
    let pass = failed.is_empty() && secs < 60.0;
    let detail = if failed.is_empty() {
        format!("{} checks in {secs:.1}s (limit 60s)", checks.len())
    } else {
        format!("failed: {} ({secs:.1}s)", failed.join(", "))
    };
    line("1 oracle suites", true, Some(pass), detail)
}

fn kmeans_oracle() -> Outcome {
    let ok = catch_unwind(oracles::kmeans_on_complete_synthetic_data).is_ok();
    line("2a k-means on complete data", true, Some(ok), "ACC >= 0.95 for seeds 0-2".into())
}

/// Trains the full model per seed; returns per-seed ACC and the seed-0
/// trainer for the extrapolation check.
fn end_to_end(out: &mut Vec<Outcome>) -> (Vec<f64>, Trainer, MultiViewDataset) {
    let t0 = Instant::now();
    let (mut accs, mut nmis) = (Vec::new(), Vec::new());
    let mut first = None;
    for &seed in &SEEDS {
        let ds = desk_data(seed);
        let t = train(&ds, &desk_spec(&ds), seed, "");
        let r = impute_and_cluster(t.params(), t.schedule(), &ds, t.config().t_ext, seed).unwrap();
        let m = evaluate(&r.labels, ds.labels().unwrap()).unwrap();
        accs.push(m.acc);
        nmis.push(m.nmi);
        if first.is_none() {
            first = Some((t, ds));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let (acc, nmi) = (mean(&accs), mean(&nmis));
    let pass = acc >= 0.90 && nmi >= 0.75 && secs < 300.0;
    out.push(line(
        "2 end-to-end synthetic",
        true,
        Some(pass),
        format!("mean ACC {acc:.4} [{}] (>= 0.90), mean NMI {nmi:.4} [{}] (>= 0.75), {secs:.0}s (limit 300s)", fmt(&accs), fmt(&nmis)),
    ));
    let (t, ds) = first.unwrap();
    (accs, t, ds)
}

fn ablation(full: &[f64]) -> Outcome {
    let accs: Vec<f64> = SEEDS
        .iter()
        .map(|&seed| {
            let ds = desk_data(seed);
            let t = train(&ds, &desk_spec(&ds), seed, "diff,gcl");
            let r = impute_and_cluster(t.params(), t.schedule(), &ds, t.config().t_ext, seed).unwrap();
            evaluate(&r.labels, ds.labels().unwrap()).unwrap().acc
        })
        .collect();
    let drop = mean(full) - mean(&accs);
    line(
        "3 ablation without diff+gcl",
        true,
        Some(drop >= 0.03),
        format!("full {:.4} -> ablated {:.4} [{}], drop {drop:.4} (>= 0.03)", mean(full), mean(&accs), fmt(&accs)),
    )
}

fn extrapolation(t: &Trainer, ds: &MultiViewDataset) -> Outcome {
    let truth = ds.labels().unwrap();
    let at = |t_ext: usize| {
        let r = impute_and_cluster(t.params(), t.schedule(), ds, t_ext, SEEDS[0]).unwrap();
        (evaluate(&r.labels, truth).unwrap().acc, compactness(&r.fused_embedding, truth).unwrap())
    };
    let (acc50, c50) = at(50);
    let (acc100, c100) = at(100);
    let pass = acc100 >= acc50 - 0.01 && c100 <= 1.05 * c50;
    line(
        "4 extrapolated recovery",
        false,
        Some(pass),
        format!("ACC {acc50:.4} -> {acc100:.4} (>= -0.01), compactness {c50:.4} -> {c100:.4} (<= x1.05)"),
    )
}

fn real_data() -> Outcome {
    let Some(dir) = std::env::var_os("DCG_HANDWRITTEN").map(PathBuf::from) else {
        return line("5 HandWritten stretch", false, None, "set DCG_HANDWRITTEN to a dataset directory to run".into());
    };
    let t0 = Instant::now();
    let ds = load_dataset(&dir).unwrap();
    let ds = if ds.is_complete() { apply_missingness(&ds, &MissingnessSpec { rate: MISSING_RATE, seed: 0 }).unwrap() } else { ds };
    let k = ds.labels().unwrap().iter().max().unwrap() + 1;
    let spec = NetworkSpec::new(ds.view_dims(), k);
    let t = train(&ds, &spec, 0, "");
    let r = impute_and_cluster(t.params(), t.schedule(), &ds, t.config().t_ext, 0).unwrap();
    let acc = evaluate(&r.labels, ds.labels().unwrap()).unwrap().acc;
    let secs = t0.elapsed().as_secs_f64();
    line("5 HandWritten stretch", false, Some(acc >= 0.70 && secs <= 900.0), format!("ACC {acc:.4} (>= 0.70) in {secs:.0}s (limit 900s)"))
}

const RUN_CONFIG: &str = r#"
data.synthetic = { n_per_cluster = 200, k = 3, dims = [5, 5], sep = 6.0, noise = 0.5 }
missing.rate = 0.3
experiment.repeats = 2
network.hidden_sizes_ae = [64, 64, 128]
train.epochs = 10
train.pretrain_epochs = 10
"#;

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), RUN_CONFIG).unwrap();
    let run = |out: &str| -> Option<Vec<u8>> {
        let o = Command::new(env!("CARGO_BIN_EXE_dcg")).args(["run", "exp.toml", "--out", out]).current_dir(dir.path()).output().ok()?;
        o.status.success().then(|| std::fs::read(dir.path().join(out).join("results.csv")).ok())?
    };
    let (a, b) = (run("a"), run("b"));
    let detail = match (&a, &b) {
        (Some(a), Some(b)) if a == b => format!("two runs wrote identical results.csv ({} bytes)", a.len()),
        (Some(_), Some(_)) => "results.csv differs between runs".into(),
        _ => "run failed".into(),
    };
    line("6 determinism", true, Some(a.is_some() && a == b), detail)
}

fn main() -> ExitCode {
    // panics inside a check are reported by its line, not as a trace
    std::panic::set_hook(Box::new(|info| eprintln!("  check panicked: {info}")));
    let mut out = vec![oracle_suites(), kmeans_oracle()];
    let (full, model, ds) = end_to_end(&mut out);
    out.push(ablation(&full));
    out.push(extrapolation(&model, &ds));
    out.push(real_data());
    out.push(determinism());
    let gating_failures = out.iter().filter(|o| o.gating && o.failed).count();
    println!("acceptance: {} gating failure(s)", gating_failures);
    if gating_failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
