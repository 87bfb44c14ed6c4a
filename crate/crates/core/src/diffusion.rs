//! Latent diffusion: noise schedule, closed-form forward noising, the
//! noise-prediction loss, one-step clean estimates and the reverse chain used
//! to recover missing views.
//!
//! Steps are 1-based. Reverse steps past the schedule horizon `T` reuse the
//! coefficients of step `T` while the denoiser still sees the true step in its
//! time embedding.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::MultiViewDataset;
use crate::error::{shape_err, DcgError, Result};
use crate::networks::{Forward, ModelParams};
use crate::rng::{stream_rng, TAG_RECOVER};
use crate::tape::{Mat, Var};

/// Linear-β DDPM schedule with derived coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

/// Linearly spaced β from `beta_start` to `beta_end` over `t_max` steps.
pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if t_max < 1 {
        return Err(DcgError::Argument("schedule needs T >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DcgError::Argument(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}")));
    }
    let betas: Vec<f64> = (0..t_max)
        .map(|i| {
            if t_max == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_max);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    let sigmas = (0..t_max)
        .map(|i| {
            let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
            ((1.0 - prev) / (1.0 - alpha_bars[i]) * betas[i]).sqrt()
        })
        .collect();
    Ok(DiffusionSchedule { betas, alphas, alpha_bars, sigmas })
}

impl DiffusionSchedule {
    /// Horizon `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn idx(&self, t: usize) -> usize {
        t.clamp(1, self.len()) - 1
    }

    fn check(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.len() {
            return Err(DcgError::Argument(format!("step {t} outside 1..={}", self.len())));
        }
        Ok(())
    }

    /// Coefficients use `min(t, T)`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[self.idx(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[self.idx(t)]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[self.idx(t)]
    }

    /// Posterior standard deviation; zero at `t = 1`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[self.idx(t)]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }
}

fn same_shape(what: &str, a: &Mat, b: &Mat) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(shape_err(what, format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    Ok(())
}

/// `√ᾱ_t·z0 + √(1−ᾱ_t)·eps`.
pub fn forward_sample(sched: &DiffusionSchedule, z0: &Mat, t: usize, eps: &Mat) -> Result<Mat> {
    sched.check(t)?;
    same_shape("forward_sample noise", z0, eps)?;
    let ab = sched.alpha_bar(t);
    Ok(z0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

/// `(z_t − √(1−ᾱ_t)·eps_hat)/√ᾱ_t`.
pub fn estimate_x0(sched: &DiffusionSchedule, z_t: &Mat, t: usize, eps_hat: &Mat) -> Result<Mat> {
    sched.check(t)?;
    same_shape("estimate_x0 noise", z_t, eps_hat)?;
    let ab = sched.alpha_bar(t);
    Ok((z_t - &(eps_hat * (1.0 - ab).sqrt())) / ab.sqrt())
}

/// Anything that predicts the noise in `z_t` for view `v` at step `t`.
pub trait NoisePredictor {
    fn predict_noise(&self, v: usize, z_t: &Mat, t: usize) -> Result<Mat>;
}

impl NoisePredictor for ModelParams {
    fn predict_noise(&self, v: usize, z_t: &Mat, t: usize) -> Result<Mat> {
        self.denoise(v, z_t, t)
    }
}

/// One reverse step with the denoiser of view `v`:
/// `(z_t − (1−α_t)/√(1−ᾱ_t)·ε̂)/√α_t + σ_t·xi`.
pub fn reverse_step<P: NoisePredictor + ?Sized>(
    predictor: &P,
    sched: &DiffusionSchedule,
    v: usize,
    z_t: &Mat,
    t: usize,
    xi: &Mat,
) -> Result<Mat> {
    if t < 1 {
        return Err(DcgError::Argument("reverse step needs t >= 1".into()));
    }
    same_shape("reverse_step noise", z_t, xi)?;
    let eps_hat = predictor.predict_noise(v, z_t, t)?;
    same_shape("reverse_step prediction", z_t, &eps_hat)?;
    let a = sched.alpha(t);
    let ab = sched.alpha_bar(t);
    let mut out = (z_t - &(eps_hat * ((1.0 - a) / (1.0 - ab).sqrt()))) / a.sqrt();
    let sigma = sched.sigma(t);
    if sigma != 0.0 {
        out.scaled_add(sigma, xi);
    }
    Ok(out)
}

/// On-tape noise prediction used by the training losses.
pub trait TapePredictor<'t> {
    fn predict(&self, v: usize, z_t: Var<'t>, ts: &[usize]) -> Result<Var<'t>>;
}

impl<'t> TapePredictor<'t> for Forward<'_, 't> {
    fn predict(&self, v: usize, z_t: Var<'t>, ts: &[usize]) -> Result<Var<'t>> {
        self.denoise(v, z_t, ts)
    }
}

fn coeff_col<'t>(z: Var<'t>, ts: &[usize], f: impl Fn(usize) -> f64) -> Var<'t> {
    let col = Mat::from_shape_fn((ts.len(), 1), |(i, _)| f(ts[i]));
    z.tape().constant(col)
}

/// Uniform steps in `1..=T`, one per row.
pub fn sample_steps<R: Rng>(sched: &DiffusionSchedule, n: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(1..=sched.len())).collect()
}

pub fn standard_normal<R: Rng>(shape: (usize, usize), rng: &mut R) -> Mat {
    Mat::from_shape_fn(shape, |_| StandardNormal.sample(rng))
}

/// Noise-prediction loss summed over views. For each row of `z0s[v]` a step
/// and a Gaussian draw are sampled; the view's term is the batch mean of
/// `‖ε − ε̂_v(z_t, t)‖²`. Views with no rows contribute nothing.
pub fn diffusion_loss<'t, P: TapePredictor<'t>, R: Rng>(
    predictor: &P,
    sched: &DiffusionSchedule,
    z0s: &[(usize, Var<'t>)],
    rng: &mut R,
) -> Result<Option<Var<'t>>> {
    let mut total: Option<Var<'t>> = None;
    for &(v, z0) in z0s {
        let b = z0.rows();
        if b == 0 {
            continue;
        }
        let ts = sample_steps(sched, b, rng);
        let tape = z0.tape();
        let eps = tape.constant(standard_normal(z0.shape(), rng));
        let z_t = z0
            .mul_col(coeff_col(z0, &ts, |t| sched.alpha_bar(t).sqrt()))
            .add(eps.mul_col(coeff_col(z0, &ts, |t| (1.0 - sched.alpha_bar(t)).sqrt())));
        let pred = predictor.predict(v, z_t, &ts)?;
        let term = pred.sub(eps).square().sum().scale(1.0 / b as f64);
        total = Some(match total {
            Some(acc) => acc.add(term),
            None => term,
        });
    }
    Ok(total)
}

/// One-step clean estimate on the tape, treating `z` as the state at step
/// `ts[i]` and predicting with the denoiser of `target`.
pub fn generate_one_step<'t, P: TapePredictor<'t>>(
    predictor: &P,
    sched: &DiffusionSchedule,
    target: usize,
    z: Var<'t>,
    ts: &[usize],
) -> Result<Var<'t>> {
    let eps_hat = predictor.predict(target, z, ts)?;
    Ok(z.mul_col(coeff_col(z, ts, |t| 1.0 / sched.alpha_bar(t).sqrt()))
        .sub(eps_hat.mul_col(coeff_col(z, ts, |t| ((1.0 - sched.alpha_bar(t)) / sched.alpha_bar(t)).sqrt()))))
}

/// Fills every missing `(sample, view)` latent. For a sample missing view
/// `m`, each available view `j` seeds a reverse chain `Z_{T_ext} := Z^j_i`,
/// run with the denoiser of `m` down to step 1; the chain ends are averaged
/// over the available views. Present entries pass through untouched.
///
/// The noise of each chain is drawn from a stream keyed by
/// `(seed, sample, target view, source view)`.
pub fn recover_missing<P: NoisePredictor + ?Sized>(
    predictor: &P,
    sched: &DiffusionSchedule,
    ds: &MultiViewDataset,
    zs: &[Mat],
    t_ext: usize,
    seed: u64,
) -> Result<Vec<Mat>> {
    if t_ext < 1 {
        return Err(DcgError::Argument("T_ext must be >= 1".into()));
    }
    let n_views = ds.n_views();
    if zs.len() != n_views {
        return Err(shape_err("recover_missing latents", n_views, zs.len()));
    }
    let n = ds.n();
    for z in zs {
        if z.nrows() != n || z.ncols() != zs[0].ncols() {
            return Err(shape_err("recover_missing latent", format!("{n}x{}", zs[0].ncols()), format!("{}x{}", z.nrows(), z.ncols())));
        }
    }
    if let Some(i) = (0..n).find(|&i| (0..n_views).all(|v| !ds.is_present(i, v))) {
        return Err(DcgError::Invariant(format!("sample {i} has no available view")));
    }
    let d = zs[0].ncols();
    let mut out = zs.to_vec();
    for m in 0..n_views {
        let missing: Vec<usize> = (0..n).filter(|&i| !ds.is_present(i, m)).collect();
        if missing.is_empty() {
            continue;
        }
        let mut sum = Mat::zeros((missing.len(), d));
        let mut count = vec![0usize; missing.len()];
        for j in (0..n_views).filter(|&j| j != m) {
            let local: Vec<usize> = (0..missing.len()).filter(|&r| ds.is_present(missing[r], j)).collect();
            if local.is_empty() {
                continue;
            }
            let rows: Vec<usize> = local.iter().map(|&r| missing[r]).collect();
            let mut z = zs[j].select(ndarray::Axis(0), &rows);
            let mut rngs: Vec<ChaCha8Rng> = rows.iter().map(|&i| stream_rng(seed, &[TAG_RECOVER, i as u64, m as u64, j as u64])).collect();
            for t in (1..=t_ext).rev() {
                let xi = if sched.sigma(t) == 0.0 {
                    Mat::zeros(z.dim())
                } else {
                    let mut xi = Mat::zeros(z.dim());
                    for (mut row, rng) in xi.rows_mut().into_iter().zip(rngs.iter_mut()) {
                        row.iter_mut().for_each(|x| *x = StandardNormal.sample(rng));
                    }
                    xi
                };
                z = reverse_step(predictor, sched, m, &z, t, &xi)?;
            }
            for (k, &r) in local.iter().enumerate() {
                let mut dst = sum.row_mut(r);
                dst += &z.row(k);
                count[r] += 1;
            }
        }
        for (r, &i) in missing.iter().enumerate() {
            debug_assert!(count[r] > 0);
            let mut dst = out[m].row_mut(i);
            dst.assign(&(&sum.row(r) / count[r] as f64));
        }
    }
    Ok(out)
}
