//! Batched implementations against slow, obviously-correct reference loops.

use dcg::diffusion::{estimate_x0, forward_sample, make_schedule, recover_missing, reverse_step, DiffusionSchedule, NoisePredictor};
use dcg::data::{MultiViewDataset, generate_synthetic};
use dcg::metrics::{ari, clustering_accuracy, compactness, nmi};
use dcg::objectives::{category_contrastive, entropy, feature_contrastive, kl_divergence, mutual_info_loss, nt_xent, reconstruction_error, sharpen_many, sharpen_targets};
use dcg::tape::{softmax_rows, Mat, Tape};
use dcg::kmeans::kmeans;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const TOL: f64 = 1e-9;

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_shape_fn((r, c), |_| rng.sample(StandardNormal))
}

fn rand_probs(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    softmax_rows(&(randn(rng, r, c) * 2.0))
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL * (1.0 + b.abs())
}

// ---------------------------------------------------------------- losses

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(row: ndarray::ArrayView1<'_, f64>) -> Vec<f64> {
    let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
    row.iter().map(|x| x / n).collect()
}

/// Row-by-row NT-Xent: the anchor's positive over every other row of both
/// sides.
fn nt_xent_naive(a: &Mat, b: &Mat, tau: f64) -> f64 {
    let p = a.nrows();
    let an: Vec<Vec<f64>> = a.rows().into_iter().map(unit).collect();
    let bn: Vec<Vec<f64>> = b.rows().into_iter().map(unit).collect();
    let mut total = 0.0;
    for i in 0..p {
        let pos = (dot(&an[i], &bn[i]) / tau).exp();
        let mut denom = 0.0;
        for j in 0..p {
            if j != i {
                denom += (dot(&an[i], &an[j]) / tau).exp();
            }
            denom += (dot(&an[i], &bn[j]) / tau).exp();
        }
        total += -(pos / denom).ln();
    }
    total / p as f64
}

pub fn nt_xent_and_feature_contrast_match_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..20 {
        let p = 2 + trial % 7;
        let d = 1 + trial % 4;
        let tau = [0.5, 1.0, 0.2][trial % 3];
        let a = randn(&mut rng, p, d);
        let b = randn(&mut rng, p, d);
        let c = randn(&mut rng, p, d);
        let tape = Tape::new();
        let (va, vb, vc) = (tape.constant(a.clone()), tape.constant(b.clone()), tape.constant(c.clone()));
        assert!(close(nt_xent(va, vb, tau).unwrap().item(), nt_xent_naive(&a, &b, tau)));
        // generated view 0 against real views 1 and 2; the real view 0 is skipped
        let fc = feature_contrastive(va, &[vc, vb, vc], 0, tau).unwrap().item();
        let want = 0.5 * (nt_xent_naive(&a, &b, tau) + nt_xent_naive(&a, &c, tau));
        assert!(close(fc, want), "{fc} vs {want}");
    }
}

pub fn category_contrast_matches_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..20 {
        let n = 2 + trial % 7;
        let k = 2 + trial % 2;
        let nv = 2 + trial % 2;
        let tau = [1.0, 0.5][trial % 2];
        let qs: Vec<Mat> = (0..nv).map(|_| rand_probs(&mut rng, n, k)).collect();
        let tape = Tape::new();
        let vars: Vec<_> = qs.iter().map(|q| tape.constant(q.clone())).collect();
        let (ccl, ent) = category_contrastive(&vars, tau).unwrap();
        let mut want = 0.0;
        for m in 0..nv {
            for o in 0..nv {
                if m != o {
                    want += nt_xent_naive(&qs[m].t().to_owned(), &qs[o].t().to_owned(), tau);
                }
            }
        }
        assert!(close(ccl.item(), 0.5 * want));
        let mut want_ent = 0.0;
        for q in &qs {
            for j in 0..k {
                let s: f64 = (0..n).map(|i| q[[i, j]]).sum::<f64>() / n as f64;
                want_ent += s * s.ln();
            }
        }
        assert!(close(ent.item(), want_ent));
    }
}

fn mi_naive(qh: &Mat, qv: &Mat) -> f64 {
    let (n, k) = qh.dim();
    let mut p = Array2::<f64>::zeros((k, k));
    for i in 0..n {
        for a in 0..k {
            for b in 0..k {
                p[[a, b]] += qh[[i, a]] * qv[[i, b]] / n as f64;
            }
        }
    }
    let p = (&p + &p.t()) / 2.0;
    let mut mi = 0.0;
    for a in 0..k {
        for b in 0..k {
            let pa: f64 = (0..k).map(|j| p[[a, j]]).sum();
            let pb: f64 = (0..k).map(|j| p[[j, b]]).sum();
            if p[[a, b]] > 0.0 {
                mi += p[[a, b]] * (p[[a, b]] / (pa * pb)).ln();
            }
        }
    }
    -mi
}

pub fn mutual_info_matches_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..30 {
        let n = 1 + trial % 8;
        let k = 1 + trial % 3;
        let qh = rand_probs(&mut rng, n, k);
        let qv = rand_probs(&mut rng, n, k);
        let tape = Tape::new();
        let got = mutual_info_loss(tape.constant(qh.clone()), tape.constant(qv.clone())).unwrap().item();
        assert!(close(got, mi_naive(&qh, &qv)), "{got} vs {}", mi_naive(&qh, &qv));
    }
}

pub fn sharpening_and_kl_match_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..30 {
        let n = 1 + trial % 8;
        let k = 1 + trial % 3;
        let a = rand_probs(&mut rng, n, k);
        let b = rand_probs(&mut rng, n, k);
        let c = rand_probs(&mut rng, n, k);
        let p = sharpen_many(&[&a, &b, &c]).unwrap();
        let mut kl = 0.0;
        for i in 0..n {
            let m: Vec<f64> = (0..k).map(|j| a[[i, j]].max(b[[i, j]]).max(c[[i, j]])).collect();
            let s: f64 = m.iter().map(|x| x * x).sum();
            for j in 0..k {
                let want = m[j] * m[j] / s;
                assert!(close(p[[i, j]], want));
                kl += want * (want / a[[i, j]]).ln();
            }
        }
        assert!(close(kl_divergence(&p, &a).unwrap(), kl));
        assert_eq!(sharpen_targets(&a, &b).unwrap(), sharpen_many(&[&a, &b]).unwrap());
    }
}

pub fn reconstruction_matches_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xs = [randn(&mut rng, 3, 4), randn(&mut rng, 0, 2), randn(&mut rng, 5, 2)];
    let xh = [randn(&mut rng, 3, 4), randn(&mut rng, 0, 2), randn(&mut rng, 5, 2)];
    let tape = Tape::new();
    let pairs: Vec<_> = xs.iter().zip(&xh).map(|(x, h)| (tape.constant(x.clone()), tape.constant(h.clone()))).collect();
    let got = reconstruction_error(&pairs).unwrap().item();
    let mut sum = 0.0;
    for (x, h) in xs.iter().zip(&xh) {
        for (a, b) in x.iter().zip(h) {
            sum += (a - b) * (a - b);
        }
    }
    assert!(close(got, sum / 8.0));
}

/// KL ≥ 0 and −log K ≤ MI-loss ≤ 0 over 10⁴ random assignment rows.
pub fn divergence_bounds_on_random_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..1250 {
        let k = 1 + trial % 4;
        let p = rand_probs(&mut rng, 8, k);
        let q = rand_probs(&mut rng, 8, k);
        assert!(kl_divergence(&p, &q).unwrap() >= -1e-12);
        let tape = Tape::new();
        let l = mutual_info_loss(tape.constant(p), tape.constant(q)).unwrap().item();
        assert!(l <= 1e-12 && l >= -(k as f64).ln() - 1e-12, "{l}");
    }
}

pub fn sharpening_never_raises_row_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut checked = 0;
    for k in 2..=5 {
        let q = rand_probs(&mut rng, 2500, k);
        let p = sharpen_many(&[&q]).unwrap();
        for (a, b) in q.rows().into_iter().zip(p.rows()) {
            assert!(entropy(b.as_slice().unwrap()) <= entropy(a.as_slice().unwrap()) + 1e-12);
            checked += 1;
        }
    }
    assert_eq!(checked, 10_000);
}

// ---------------------------------------------------------------- metrics

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

fn acc_brute(pred: &[usize], truth: &[usize]) -> f64 {
    let k = pred.iter().chain(truth).max().map_or(0, |m| m + 1);
    permutations(k)
        .iter()
        .map(|perm| pred.iter().zip(truth).filter(|(p, t)| perm[**p] == **t).count())
        .max()
        .unwrap() as f64
        / pred.len() as f64
}

fn counts(pred: &[usize], truth: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let kp = pred.iter().max().unwrap() + 1;
    let kt = truth.iter().max().unwrap() + 1;
    let mut c = vec![vec![0.0; kt]; kp];
    for (&p, &t) in pred.iter().zip(truth) {
        c[p][t] += 1.0;
    }
    let a: Vec<f64> = c.iter().map(|r| r.iter().sum()).collect();
    let b: Vec<f64> = (0..kt).map(|j| c.iter().map(|r| r[j]).sum()).collect();
    (c, a, b)
}

fn nmi_formula(pred: &[usize], truth: &[usize]) -> f64 {
    let n = pred.len() as f64;
    let (c, a, b) = counts(pred, truth);
    let h = |v: &[f64]| -> f64 { v.iter().filter(|&&x| x > 0.0).map(|&x| -(x / n) * (x / n).ln()).sum() };
    let (hp, ht) = (h(&a), h(&b));
    let mut i = 0.0;
    for (r, row) in c.iter().enumerate() {
        for (s, &nij) in row.iter().enumerate() {
            if nij > 0.0 {
                i += nij / n * (n * nij / (a[r] * b[s])).ln();
            }
        }
    }
    if hp == 0.0 && ht == 0.0 {
        1.0
    } else if hp == 0.0 || ht == 0.0 {
        0.0
    } else {
        i / (hp * ht).sqrt()
    }
}

fn ari_formula(pred: &[usize], truth: &[usize]) -> f64 {
    let comb = |x: f64| x * (x - 1.0) / 2.0;
    let n = pred.len() as f64;
    let (c, a, b) = counts(pred, truth);
    let index: f64 = c.iter().flatten().map(|&x| comb(x)).sum();
    let sa: f64 = a.iter().map(|&x| comb(x)).sum();
    let sb: f64 = b.iter().map(|&x| comb(x)).sum();
    let expected = sa * sb / comb(n);
    let max = (sa + sb) / 2.0;
    if max == expected {
        if index == max { 1.0 } else { 0.0 }
    } else {
        (index - expected) / (max - expected)
    }
}

pub fn metrics_match_brute_force_and_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..200 {
        let kp = 1 + trial % 6;
        let kt = 1 + (trial / 6) % 6;
        let n = rng.random_range(2..40);
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..kp)).collect();
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..kt)).collect();
        let acc = clustering_accuracy(&pred, &truth).unwrap();
        assert!((acc - acc_brute(&pred, &truth)).abs() < 1e-12, "trial {trial}");
        // the library densifies labels; do the same for the formula oracles
        let dense = |l: &[usize]| {
            let mut u: Vec<usize> = l.to_vec();
            u.sort();
            u.dedup();
            l.iter().map(|x| u.binary_search(x).unwrap()).collect::<Vec<_>>()
        };
        let (dp, dt) = (dense(&pred), dense(&truth));
        assert!((nmi(&pred, &truth).unwrap() - nmi_formula(&dp, &dt).clamp(0.0, 1.0)).abs() < TOL, "trial {trial}");
        assert!((ari(&pred, &truth).unwrap() - ari_formula(&dp, &dt)).abs() < TOL, "trial {trial}");
    }
}

pub fn compactness_of_gaussian_clusters() {
    // isotropic 2-d clusters: E‖x − μ‖ = σ√(π/2)
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (sigma, n) = (0.7, 20_000);
    let centres = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
    let mut z = Mat::zeros((3 * n, 2));
    let mut labels = Vec::new();
    for (c, mu) in centres.iter().enumerate() {
        for i in 0..n {
            let r = c * n + i;
            z[[r, 0]] = mu[0] + sigma * rng.sample::<f64, _>(StandardNormal);
            z[[r, 1]] = mu[1] + sigma * rng.sample::<f64, _>(StandardNormal);
            labels.push(c);
        }
    }
    let between = (10.0 + 10.0 + 200f64.sqrt()) / 3.0;
    let want = sigma * (std::f64::consts::PI / 2.0).sqrt() / between;
    let got = compactness(&z, &labels).unwrap();
    assert!((got / want - 1.0).abs() < 0.02, "{got} vs {want}");
}

pub fn kmeans_on_complete_synthetic_data() {
    // the end-to-end target assumes this data is separable by construction
    for seed in 0..3 {
        let ds = generate_synthetic(200, 3, &[5, 5], 6.0, 0.5, seed).unwrap();
        let x = ndarray::concatenate(ndarray::Axis(1), &[ds.view(0).view(), ds.view(1).view()]).unwrap();
        let km = kmeans(&x, 3, 10, 100, seed).unwrap();
        let acc = clustering_accuracy(&km.labels, ds.labels().unwrap()).unwrap();
        assert!(acc >= 0.95, "seed {seed}: {acc}");
    }
}

// ---------------------------------------------------------------- diffusion

pub fn forward_and_inverse_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let sched = make_schedule(100, 1e-4, 0.02).unwrap();
    for t in [1, 2, 37, 100] {
        let z0 = randn(&mut rng, 6, 5) * 3.0;
        let eps = randn(&mut rng, 6, 5);
        let zt = forward_sample(&sched, &z0, t, &eps).unwrap();
        let back = estimate_x0(&sched, &zt, t, &eps).unwrap();
        assert!((&back - &z0).iter().all(|d| d.abs() < 1e-10));
    }
}

/// Predicts the exact noise that separates `z_t` from the known clean rows.
struct Oracle<'a> {
    z0: &'a Mat,
    sched: &'a DiffusionSchedule,
}

impl NoisePredictor for Oracle<'_> {
    fn predict_noise(&self, _v: usize, z_t: &Mat, t: usize) -> dcg::Result<Mat> {
        let ab = self.sched.alpha_bar(t);
        Ok((z_t - &(self.z0 * ab.sqrt())) / (1.0 - ab).sqrt())
    }
}

pub fn oracle_denoiser_walks_back_to_the_clean_latent() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let sched = make_schedule(50, 1e-4, 0.02).unwrap();
    let z0 = randn(&mut rng, 4, 3);
    let mut z = forward_sample(&sched, &z0, 50, &randn(&mut rng, 4, 3)).unwrap();
    let oracle = Oracle { z0: &z0, sched: &sched };
    let zero = Mat::zeros(z.dim());
    for t in (1..=50).rev() {
        z = reverse_step(&oracle, &sched, 0, &z, t, &zero).unwrap();
    }
    assert!((&z - &z0).iter().all(|d| d.abs() < 1e-6));
}

pub fn recovery_averages_over_available_sources() {
    // with zero predicted noise and σ_1 = 0, one reverse step is z/√α_1
    struct Zero;
    impl NoisePredictor for Zero {
        fn predict_noise(&self, _v: usize, z_t: &Mat, _t: usize) -> dcg::Result<Mat> {
            Ok(Mat::zeros(z_t.dim()))
        }
    }
    let sched = make_schedule(10, 1e-4, 0.02).unwrap();
    let zs = vec![ndarray::array![[1.0, 2.0]], ndarray::array![[3.0, 4.0]], ndarray::array![[9.0, 9.0]]];
    let mask = ndarray::array![[true, true, false]];
    let views = vec![Mat::zeros((1, 2)), Mat::zeros((1, 2)), Mat::zeros((1, 2))];
    let ds = MultiViewDataset::new(views, None, mask, "t").unwrap();
    let out = recover_missing(&Zero, &sched, &ds, &zs, 1, 0).unwrap();
    let s = 1.0 / sched.alpha(1).sqrt();
    assert!((out[2][[0, 0]] - 2.0 * s).abs() < 1e-12 && (out[2][[0, 1]] - 3.0 * s).abs() < 1e-12);
    assert_eq!(out[0], zs[0]);
}
