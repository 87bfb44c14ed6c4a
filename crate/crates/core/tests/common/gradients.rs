//! Central finite differences against the tape's reverse-mode gradients, for
//! every loss (w.r.t. its inputs) and every network (w.r.t. its parameters).

use dcg::diffusion::{diffusion_loss, generate_one_step, make_schedule};
use dcg::networks::{Activation, ModelParams, NetworkSpec};
use dcg::objectives::{category_contrastive, feature_contrastive, kl_self_training, mutual_info_loss, nt_xent, reconstruction_error, sharpen_targets};
use dcg::tape::{softmax_rows, Mat, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const H: f64 = 1e-6;
const MAX_REL: f64 = 1e-4;

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_shape_fn((r, c), |_| rng.sample(StandardNormal))
}

/// ‖a − n‖ / (‖a‖ + ‖n‖) over one tensor; exact zeros on both sides pass.
fn rel_err(analytic: &Mat, numeric: &Mat) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt() + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Checks `f` (a scalar of its inputs) at `inputs`.
fn check_inputs(name: &str, inputs: &[Mat], f: &dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>) {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.var(x.clone())).collect();
    let out = f(&tape, &vars);
    let grads = tape.backward(out);
    let eval = |xs: &[Mat]| {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        f(&tape, &vars).item()
    };
    for (k, x) in inputs.iter().enumerate() {
        let mut numeric = Mat::zeros(x.dim());
        for idx in 0..x.len() {
            let (i, j) = (idx / x.ncols(), idx % x.ncols());
            let mut xs = inputs.to_vec();
            xs[k][[i, j]] += H;
            let up = eval(&xs);
            xs[k][[i, j]] -= 2.0 * H;
            let down = eval(&xs);
            numeric[[i, j]] = (up - down) / (2.0 * H);
        }
        let e = rel_err(&grads.get_or_zeros(vars[k]), &numeric);
        assert!(e < MAX_REL, "{name}: input {k} relative error {e:e}");
    }
}

/// Checks a scalar function of the parameters, tensor by tensor.
fn check_params(name: &str, params: &ModelParams, f: &dyn for<'a, 't> Fn(&dcg::networks::Forward<'a, 't>) -> Var<'t>) {
    assert!(params.n_scalars() <= 10_000);
    let tape = Tape::new();
    let fwd = params.bind(&tape);
    let out = f(&fwd);
    let grads = fwd.gradients(&tape.backward(out));
    let eval = |p: &ModelParams| {
        let tape = Tape::new();
        let fwd = p.bind(&tape);
        f(&fwd).item()
    };
    let mut p = params.clone();
    for (k, g) in grads.iter().enumerate() {
        let mut numeric = Mat::zeros(g.dim());
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                let orig = p.value_mut(k)[[i, j]];
                p.value_mut(k)[[i, j]] = orig + H;
                let up = eval(&p);
                p.value_mut(k)[[i, j]] = orig - H;
                let down = eval(&p);
                p.value_mut(k)[[i, j]] = orig;
                numeric[[i, j]] = (up - down) / (2.0 * H);
            }
        }
        let e = rel_err(g, &numeric);
        assert!(e < MAX_REL, "{name}: tensor {} relative error {e:e}", params.params()[k].name);
    }
}

pub fn contrastive_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xs = [randn(&mut rng, 5, 3), randn(&mut rng, 5, 3), randn(&mut rng, 5, 3)];
    check_inputs("nt_xent", &xs[..2], &|_, v| nt_xent(v[0], v[1], 0.5).unwrap());
    check_inputs("feature_contrastive", &xs, &|_, v| feature_contrastive(v[0], &[v[0], v[1], v[2]], 0, 0.7).unwrap());
    check_inputs("category_contrastive", &xs, &|_, v| {
        let qs: Vec<_> = v.iter().map(|x| x.softmax_rows()).collect();
        let (c, e) = category_contrastive(&qs, 1.0).unwrap();
        c.add(e.scale(0.3))
    });
}

pub fn mutual_information_and_self_training() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xs = [randn(&mut rng, 6, 3), randn(&mut rng, 6, 3)];
    check_inputs("mutual_info_loss", &xs, &|_, v| mutual_info_loss(v[0].softmax_rows(), v[1].softmax_rows()).unwrap());
    let target = sharpen_targets(&softmax_rows(&xs[0]), &softmax_rows(&xs[1])).unwrap();
    check_inputs("kl_self_training", &xs[1..], &|_, v| kl_self_training(&target, v[0].softmax_rows()).unwrap());
}

pub fn reconstruction() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xs = [randn(&mut rng, 4, 3), randn(&mut rng, 4, 3), randn(&mut rng, 2, 5), randn(&mut rng, 2, 5)];
    check_inputs("reconstruction_error", &xs, &|_, v| reconstruction_error(&[(v[0], v[1]), (v[2], v[3])]).unwrap());
}

/// Initial biases are zero, which puts ReLU pre-activations exactly on the
/// kink whenever a row's upstream units are all dead; jitter every tensor.
fn jittered(spec: &NetworkSpec, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..p.len() {
        let (r, c) = p.params()[k].value.dim();
        *p.value_mut(k) += &(randn(&mut rng, r, c) * 0.1);
    }
    p
}

fn small_spec(activation: Activation) -> NetworkSpec {
    let mut spec = NetworkSpec::new(vec![4, 3], 3);
    spec.latent_dim = 3;
    spec.hidden_sizes_ae = vec![6, 5];
    spec.hidden_sizes_denoiser = vec![6, 4];
    spec.time_embed_dim = 4;
    spec.fusion_hidden = vec![5];
    spec.delta = 2.0;
    spec.activation = activation;
    spec
}

/// Sums the output against fixed random weights so every entry matters.
fn project<'t>(x: Var<'t>, seed: u64) -> Var<'t> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = randn(&mut rng, x.rows(), x.cols());
    x.mul(x.tape().constant(w)).sum()
}

pub fn every_network_passes_finite_differences() {
    for activation in [Activation::Sigmoid, Activation::Relu] {
        let spec = small_spec(activation);
        let params = jittered(&spec, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = randn(&mut rng, 5, 4);
        let x1 = randn(&mut rng, 5, 3);
        let z = randn(&mut rng, 5, 3);
        let ts = [1, 7, 20, 50, 100];
        let name = format!("{activation:?}");
        check_params(&format!("{name} autoencoder"), &params, &|f| {
            let t = f.tape();
            let a = f.decode(0, f.encode(0, t.constant(x0.clone())).unwrap()).unwrap();
            let b = f.decode(1, f.encode(1, t.constant(x1.clone())).unwrap()).unwrap();
            project(a, 1).add(project(b, 2))
        });
        check_params(&format!("{name} denoiser"), &params, &|f| project(f.denoise(1, f.tape().constant(z.clone()), &ts).unwrap(), 3));
        check_params(&format!("{name} fusion and classifier"), &params, &|f| {
            let t = f.tape();
            let z0 = f.encode(0, t.constant(x0.clone())).unwrap();
            let z1 = f.encode(1, t.constant(x1.clone())).unwrap();
            let (h, w) = f.fuse(&[z0, z1]).unwrap();
            project(f.classify(h).unwrap(), 4).add(project(w, 5))
        });
    }
}

pub fn diffusion_terms_pass_finite_differences() {
    let spec = small_spec(Activation::Sigmoid);
    let params = jittered(&spec, 12);
    let sched = make_schedule(50, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = [randn(&mut rng, 4, 3), randn(&mut rng, 3, 3)];
    check_params("diffusion_loss", &params, &|f| {
        // same noise and steps on every evaluation
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let t = f.tape();
        let z0s = [(0, t.constant(z[0].clone())), (1, t.constant(z[1].clone()))];
        diffusion_loss(f, &sched, &z0s, &mut rng).unwrap().unwrap()
    });
    check_params("one-step generation", &params, &|f| {
        let z = f.encode(0, f.tape().constant(randn(&mut ChaCha8Rng::seed_from_u64(7), 4, 4))).unwrap();
        project(generate_one_step(f, &sched, 1, z, &[1, 10, 30, 50]).unwrap(), 6)
    });
}
