//! Trainable networks: per-view autoencoders, time-conditioned per-view
//! denoisers, the shared classifier and the attention-fusion MLP.
//!
//! Parameters live in a flat, named store ([`ModelParams`]). A forward pass
//! binds the store onto a [`Tape`] through [`Forward`], either as
//! differentiable leaves (training) or as constants (inference).

use std::cell::RefCell;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, DcgError, Result};
use crate::rng::{stream_rng, TAG_INIT};
use crate::tape::{Grads, Mat, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Sigmoid => x.sigmoid(),
        }
    }
}

/// Architecture description; every parameter shape follows from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub view_dims: Vec<usize>,
    pub latent_dim: usize,
    pub k: usize,
    pub hidden_sizes_ae: Vec<usize>,
    /// Down-path widths of the denoiser; the up path mirrors them.
    pub hidden_sizes_denoiser: Vec<usize>,
    pub time_embed_dim: usize,
    /// Hidden widths of the fusion MLP; its last layer always emits V scores.
    pub fusion_hidden: Vec<usize>,
    pub delta: f64,
    pub activation: Activation,
}

impl NetworkSpec {
    pub fn new(view_dims: Vec<usize>, k: usize) -> Self {
        Self {
            view_dims,
            latent_dim: 10,
            k,
            hidden_sizes_ae: vec![500, 500, 2000],
            hidden_sizes_denoiser: vec![256, 128],
            time_embed_dim: 16,
            fusion_hidden: vec![64, 32],
            delta: 10.0,
            activation: Activation::Relu,
        }
    }

    pub fn n_views(&self) -> usize {
        self.view_dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.view_dims.is_empty() || self.view_dims.contains(&0) {
            return Err(DcgError::Argument(format!("invalid view dims {:?}", self.view_dims)));
        }
        if self.latent_dim < 2 {
            return Err(DcgError::Argument(format!("latent_dim must be >= 2, got {}", self.latent_dim)));
        }
        if self.k < 2 {
            return Err(DcgError::Argument(format!("k must be >= 2, got {}", self.k)));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(DcgError::Argument(format!("time_embed_dim must be even and positive, got {}", self.time_embed_dim)));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(DcgError::Argument(format!("delta must be positive, got {}", self.delta)));
        }
        if self.hidden_sizes_denoiser.is_empty() {
            return Err(DcgError::Argument("denoiser needs at least one hidden width".into()));
        }
        if [&self.hidden_sizes_ae, &self.hidden_sizes_denoiser, &self.fusion_hidden].iter().any(|h| h.contains(&0)) {
            return Err(DcgError::Argument("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// Role of a parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Encoder(usize),
    Decoder(usize),
    Denoiser(usize),
    Classifier,
    Fusion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub role: Role,
    pub value: Mat,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Mlp {
    layers: Vec<Linear>,
}

#[derive(Debug, Clone, PartialEq)]
struct Denoiser {
    down: Vec<Linear>,
    up: Vec<Linear>,
    out: Linear,
}

/// All trainable tensors, grouped by role.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    spec: NetworkSpec,
    params: Vec<Param>,
    encoders: Vec<Mlp>,
    decoders: Vec<Mlp>,
    denoisers: Vec<Denoiser>,
    classifier: Linear,
    fusion: Mlp,
}

struct Builder<'a, R: Rng> {
    params: Vec<Param>,
    rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn linear(&mut self, name: &str, role: Role, fan_in: usize, fan_out: usize, gain: f64) -> Linear {
        let bound = (gain / fan_in as f64).sqrt();
        let w = Mat::from_shape_fn((fan_in, fan_out), |_| self.rng.random_range(-bound..bound));
        self.params.push(Param { name: format!("{name}.weight"), role, value: w });
        self.params.push(Param { name: format!("{name}.bias"), role, value: Mat::zeros((1, fan_out)) });
        Linear { w: self.params.len() - 2, b: self.params.len() - 1 }
    }

    fn mlp(&mut self, name: &str, role: Role, widths: &[usize]) -> Mlp {
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let gain = if i == last { 3.0 } else { 6.0 };
                self.linear(&format!("{name}.{i}"), role, w[0], w[1], gain)
            })
            .collect();
        Mlp { layers }
    }
}

impl ModelParams {
    /// Seeded uniform fan-in initialisation.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = stream_rng(seed, &[TAG_INIT]);
        let mut b = Builder { params: Vec::new(), rng: &mut rng };
        let d = spec.latent_dim;
        let pe = spec.time_embed_dim;
        let mut encoders = Vec::new();
        let mut decoders = Vec::new();
        for (v, &dv) in spec.view_dims.iter().enumerate() {
            let mut widths = vec![dv];
            widths.extend(&spec.hidden_sizes_ae);
            widths.push(d);
            encoders.push(b.mlp(&format!("encoder.{v}"), Role::Encoder(v), &widths));
            widths.reverse();
            decoders.push(b.mlp(&format!("decoder.{v}"), Role::Decoder(v), &widths));
        }
        let mut denoisers = Vec::new();
        let h = &spec.hidden_sizes_denoiser;
        for v in 0..spec.n_views() {
            let role = Role::Denoiser(v);
            let mut down = Vec::new();
            let mut prev = d;
            for (i, &w) in h.iter().enumerate() {
                down.push(b.linear(&format!("denoiser.{v}.down.{i}"), role, prev + pe, w, 6.0));
                prev = w;
            }
            let mut up = Vec::new();
            for i in (0..h.len() - 1).rev() {
                up.push(b.linear(&format!("denoiser.{v}.up.{i}"), role, prev + pe, h[i], 6.0));
                prev = h[i];
            }
            let out = b.linear(&format!("denoiser.{v}.out"), role, prev + pe, d, 3.0);
            denoisers.push(Denoiser { down, up, out });
        }
        let classifier = b.linear("classifier", Role::Classifier, d, spec.k, 3.0);
        let mut widths = vec![d * spec.n_views()];
        widths.extend(&spec.fusion_hidden);
        widths.push(spec.n_views());
        let fusion = b.mlp("fusion", Role::Fusion, &widths);
        let params = b.params;
        Ok(Self { spec: spec.clone(), params, encoders, decoders, denoisers, classifier, fusion })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar parameter count.
    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Mat {
        &mut self.params[i].value
    }

    /// Replaces every value; shapes must match.
    pub fn set_values(&mut self, values: Vec<Mat>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(shape_err("parameter count", self.params.len(), values.len()));
        }
        for (p, v) in self.params.iter().zip(&values) {
            if p.value.dim() != v.dim() {
                return Err(shape_err(&p.name, format!("{:?}", p.value.dim()), format!("{:?}", v.dim())));
            }
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v;
        }
        Ok(())
    }

    /// Overwrites the shared classifier's weight (`d×K`) and bias (`1×K`).
    pub fn set_classifier(&mut self, weight: Mat, bias: Mat) -> Result<()> {
        let Linear { w, b } = self.classifier;
        for (i, value) in [(w, weight), (b, bias)] {
            if self.params[i].value.dim() != value.dim() {
                return Err(shape_err(&self.params[i].name, format!("{:?}", self.params[i].value.dim()), format!("{:?}", value.dim())));
            }
            self.params[i].value = value;
        }
        Ok(())
    }

    /// Rounds every value to the nearest `f32`.
    pub fn quantize_f32(&mut self) {
        for p in &mut self.params {
            p.value.mapv_inplace(|x| x as f32 as f64);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|x| x.is_finite()))
    }

    /// Binds the store with every tensor as a differentiable leaf. Tensors
    /// are copied onto the tape on first use.
    pub fn bind<'a, 't>(&'a self, tape: &'t Tape) -> Forward<'a, 't> {
        Forward { params: self, tape, frozen: false, vars: RefCell::new(vec![None; self.params.len()]) }
    }

    /// Binds the store with every tensor as a constant.
    pub fn bind_frozen<'a, 't>(&'a self, tape: &'t Tape) -> Forward<'a, 't> {
        Forward { params: self, tape, frozen: true, vars: RefCell::new(vec![None; self.params.len()]) }
    }

    fn check_view(&self, v: usize) -> Result<()> {
        if v >= self.spec.n_views() {
            return Err(DcgError::Argument(format!("view {v} out of range for {} views", self.spec.n_views())));
        }
        Ok(())
    }

    pub fn encode(&self, v: usize, x: &Mat) -> Result<Mat> {
        let tape = Tape::new();
        let f = self.bind_frozen(&tape);
        Ok(f.encode(v, tape.constant(x.clone()))?.to_mat())
    }

    pub fn decode(&self, v: usize, z: &Mat) -> Result<Mat> {
        let tape = Tape::new();
        let f = self.bind_frozen(&tape);
        Ok(f.decode(v, tape.constant(z.clone()))?.to_mat())
    }

    /// Noise prediction at a single step `t` for every row.
    pub fn denoise(&self, v: usize, z_t: &Mat, t: usize) -> Result<Mat> {
        let tape = Tape::new();
        let f = self.bind_frozen(&tape);
        Ok(f.denoise(v, tape.constant(z_t.clone()), &vec![t; z_t.nrows()])?.to_mat())
    }

    pub fn classify(&self, z: &Mat) -> Result<Mat> {
        let tape = Tape::new();
        let f = self.bind_frozen(&tape);
        Ok(f.classify(tape.constant(z.clone()))?.to_mat())
    }

    /// Fused representation and the view weights.
    pub fn fuse(&self, zs: &[Mat]) -> Result<(Mat, Vec<f64>)> {
        let tape = Tape::new();
        let f = self.bind_frozen(&tape);
        let vars: Vec<Var<'_>> = zs.iter().map(|z| tape.constant(z.clone())).collect();
        let (h, w) = f.fuse(&vars)?;
        let w = w.value().iter().copied().collect();
        Ok((h.to_mat(), w))
    }
}

/// Sinusoidal step encoding: position `2i` holds `sin(t / 10000^(2i/d))` and
/// position `2i+1` holds `cos(t / 10000^((2i+1)/d))`. Defined for any `t`,
/// including steps past the training horizon.
pub fn time_embedding(t: usize, d_pe: usize) -> Result<Vec<f64>> {
    if d_pe == 0 || !d_pe.is_multiple_of(2) {
        return Err(DcgError::Argument(format!("time embedding dimension must be even, got {d_pe}")));
    }
    let d = d_pe as f64;
    let t = t as f64;
    let mut out = Vec::with_capacity(d_pe);
    for i in 0..d_pe / 2 {
        let i = i as f64;
        out.push((t / 10000f64.powf(2.0 * i / d)).sin());
        out.push((t / 10000f64.powf((2.0 * i + 1.0) / d)).cos());
    }
    Ok(out)
}

/// One embedding row per step.
pub fn time_embedding_matrix(ts: &[usize], d_pe: usize) -> Result<Mat> {
    let mut m = Mat::zeros((ts.len(), d_pe));
    for (mut row, &t) in m.rows_mut().into_iter().zip(ts) {
        for (dst, x) in row.iter_mut().zip(time_embedding(t, d_pe)?) {
            *dst = x;
        }
    }
    Ok(m)
}

/// Parameters bound onto a tape.
pub struct Forward<'a, 't> {
    params: &'a ModelParams,
    tape: &'t Tape,
    frozen: bool,
    vars: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'a, 't> Forward<'a, 't> {
    pub fn params(&self) -> &'a ModelParams {
        self.params
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn param(&self, i: usize) -> Var<'t> {
        let mut vars = self.vars.borrow_mut();
        *vars[i].get_or_insert_with(|| {
            let value = self.params.params[i].value.clone();
            if self.frozen {
                self.tape.constant(value)
            } else {
                self.tape.var(value)
            }
        })
    }

    /// Gradient for every tensor, in store order; zeros for tensors the
    /// differentiated graph never touched.
    pub fn gradients(&self, grads: &Grads) -> Vec<Mat> {
        let vars = self.vars.borrow();
        vars.iter()
            .zip(&self.params.params)
            .map(|(v, p)| match v {
                Some(v) => grads.get_or_zeros(*v),
                None => Mat::zeros(p.value.dim()),
            })
            .collect()
    }

    fn linear(&self, l: Linear, x: Var<'t>) -> Var<'t> {
        x.matmul(self.param(l.w)).add_row(self.param(l.b))
    }

    fn mlp(&self, m: &Mlp, mut x: Var<'t>) -> Var<'t> {
        let act = self.params.spec.activation;
        let last = m.layers.len() - 1;
        for (i, &l) in m.layers.iter().enumerate() {
            x = self.linear(l, x);
            if i < last {
                x = act.apply(x);
            }
        }
        x
    }

    fn check_cols(&self, what: &str, x: Var<'t>, expected: usize) -> Result<()> {
        if x.cols() != expected {
            return Err(shape_err(what, format!("{expected} columns"), format!("{} columns", x.cols())));
        }
        Ok(())
    }

    pub fn encode(&self, v: usize, x: Var<'t>) -> Result<Var<'t>> {
        self.params.check_view(v)?;
        self.check_cols(&format!("encode view {v}"), x, self.params.spec.view_dims[v])?;
        Ok(self.mlp(&self.params.encoders[v], x))
    }

    pub fn decode(&self, v: usize, z: Var<'t>) -> Result<Var<'t>> {
        self.params.check_view(v)?;
        self.check_cols(&format!("decode view {v}"), z, self.params.spec.latent_dim)?;
        Ok(self.mlp(&self.params.decoders[v], z))
    }

    /// Predicted noise for row `i` at step `ts[i]`. The step embedding is
    /// concatenated onto the input of every block; mirrored blocks of the
    /// down and up paths are joined by additive skips.
    pub fn denoise(&self, v: usize, z_t: Var<'t>, ts: &[usize]) -> Result<Var<'t>> {
        self.params.check_view(v)?;
        let spec = &self.params.spec;
        self.check_cols(&format!("denoise view {v}"), z_t, spec.latent_dim)?;
        if ts.len() != z_t.rows() {
            return Err(shape_err("denoise steps", z_t.rows(), ts.len()));
        }
        if let Some(&t) = ts.iter().find(|&&t| t < 1) {
            return Err(DcgError::Argument(format!("diffusion step must be >= 1, got {t}")));
        }
        let net = &self.params.denoisers[v];
        let act = spec.activation;
        let pe = self.tape().constant(time_embedding_matrix(ts, spec.time_embed_dim)?);
        let mut h = z_t;
        let mut skips = Vec::with_capacity(net.down.len());
        for &l in &net.down {
            h = act.apply(self.linear(l, Var::concat_cols(&[h, pe])));
            skips.push(h);
        }
        skips.pop();
        for &l in &net.up {
            let skip = skips.pop().expect("mirrored depth");
            h = act.apply(self.linear(l, Var::concat_cols(&[h, pe]))).add(skip);
        }
        Ok(self.linear(net.out, Var::concat_cols(&[h, pe])))
    }

    /// Soft cluster assignments, one softmax row per sample.
    pub fn classify(&self, z: Var<'t>) -> Result<Var<'t>> {
        self.check_cols("classify", z, self.params.spec.latent_dim)?;
        Ok(self.linear(self.params.classifier, z).softmax_rows())
    }

    /// Attention fusion. Returns `H = Σ_v w_v Z^v` and the `1×V` weights
    /// `w = softmax(mean_rows(sigmoid(MLP([Z^1..Z^V]))) / δ)`.
    pub fn fuse(&self, zs: &[Var<'t>]) -> Result<(Var<'t>, Var<'t>)> {
        let spec = &self.params.spec;
        if zs.len() != spec.n_views() {
            return Err(shape_err("fuse view count", spec.n_views(), zs.len()));
        }
        let b = zs[0].rows();
        for z in zs {
            if z.shape() != (b, spec.latent_dim) {
                return Err(shape_err("fuse input", format!("{b}x{}", spec.latent_dim), format!("{}x{}", z.rows(), z.cols())));
            }
        }
        let scores = self.mlp(&self.params.fusion, Var::concat_cols(zs)).sigmoid();
        let w = scores.mean_cols().scale(1.0 / spec.delta).softmax_rows();
        let mut h = zs[0].scale_by(w.slice_cols(0, 1));
        for (v, &z) in zs.iter().enumerate().skip(1) {
            h = h.add(z.scale_by(w.slice_cols(v, v + 1)));
        }
        Ok((h, w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;

    pub(crate) fn small_spec() -> NetworkSpec {
        NetworkSpec {
            view_dims: vec![4, 3],
            latent_dim: 3,
            k: 3,
            hidden_sizes_ae: vec![6, 5],
            hidden_sizes_denoiser: vec![6, 4],
            time_embed_dim: 4,
            fusion_hidden: vec![5, 4],
            delta: 2.0,
            activation: Activation::Relu,
        }
    }

    fn rand_mat(r: usize, c: usize, seed: u64) -> Mat {
        let mut rng = stream_rng(seed, &[99]);
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn param_shapes() {
        let p = ModelParams::init(&small_spec(), 0).unwrap();
        let names: Vec<&str> = p.params().iter().map(|p| p.name.as_str()).collect();
        assert!(names.contains(&"encoder.0.0.weight"));
        assert!(names.contains(&"denoiser.1.up.0.bias"));
        assert_eq!(p.params().iter().find(|p| p.name == "classifier.weight").unwrap().value.dim(), (3, 3));
        assert_eq!(p.params().iter().find(|p| p.name == "fusion.2.weight").unwrap().value.dim(), (4, 2));
        // down 0: (3+4)->6, down 1: (6+4)->4, up 0: (4+4)->6, out: (6+4)->3
        let den: Vec<_> = p.params().iter().filter(|q| q.role == Role::Denoiser(0) && q.name.ends_with("weight")).map(|q| q.value.dim()).collect();
        assert_eq!(den, vec![(7, 6), (10, 4), (8, 6), (10, 3)]);
        assert_eq!(p, ModelParams::init(&small_spec(), 0).unwrap());
        assert_ne!(p, ModelParams::init(&small_spec(), 1).unwrap());
    }

    #[test]
    fn spec_validation() {
        let mut s = small_spec();
        s.time_embed_dim = 5;
        assert!(ModelParams::init(&s, 0).is_err());
        let mut s = small_spec();
        s.latent_dim = 1;
        assert!(ModelParams::init(&s, 0).is_err());
        let mut s = small_spec();
        s.delta = 0.0;
        assert!(ModelParams::init(&s, 0).is_err());
    }

    #[test]
    fn empty_batches() {
        let p = ModelParams::init(&small_spec(), 0).unwrap();
        assert_eq!(p.encode(0, &Mat::zeros((0, 4))).unwrap().dim(), (0, 3));
        assert_eq!(p.decode(1, &Mat::zeros((0, 3))).unwrap().dim(), (0, 3));
        assert_eq!(p.classify(&Mat::zeros((0, 3))).unwrap().dim(), (0, 3));
    }

    #[test]
    fn shape_errors_name_sizes() {
        let p = ModelParams::init(&small_spec(), 0).unwrap();
        let err = p.encode(0, &Mat::zeros((2, 3))).unwrap_err().to_string();
        assert!(err.contains("expected 4 columns") && err.contains("got 3 columns"), "{err}");
        assert!(p.fuse(&[Mat::zeros((2, 3)), Mat::zeros((3, 3))]).is_err());
        assert!(p.denoise(0, &Mat::zeros((2, 3)), 0).is_err());
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let p = ModelParams::init(&small_spec(), 3).unwrap();
        let x = rand_mat(5, 4, 1);
        let mut x2 = x.clone();
        x2.row_mut(4).assign(&x.row(0));
        let z = p.encode(0, &x2).unwrap();
        assert_eq!(z.row(0), z.row(4));
        assert_eq!(p.decode(0, &z).unwrap().ncols(), 4);
        assert_eq!(p.decode(1, &z).unwrap().ncols(), 3);
        let e = p.denoise(1, &z, 7).unwrap();
        assert_eq!(e.dim(), z.dim());
        assert_eq!(e, p.denoise(1, &z, 7).unwrap());
    }

    #[test]
    fn classify_uniform_on_equal_logits() {
        let mut p = ModelParams::init(&small_spec(), 3).unwrap();
        let wi = p.params().iter().position(|q| q.name == "classifier.weight").unwrap();
        p.value_mut(wi).fill(0.0);
        let q = p.classify(&rand_mat(4, 3, 2)).unwrap();
        assert!(q.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn fuse_identical_views_is_identity() {
        let p = ModelParams::init(&small_spec(), 3).unwrap();
        let z = rand_mat(6, 3, 5);
        let (h, w) = p.fuse(&[z.clone(), z.clone()]).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(h.iter().zip(z.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn fuse_large_delta_is_uniform() {
        let mut s = small_spec();
        s.delta = 1e6;
        let p = ModelParams::init(&s, 3).unwrap();
        let (_, w) = p.fuse(&[rand_mat(6, 3, 5), rand_mat(6, 3, 6)]).unwrap();
        assert!(w.iter().all(|&x| (x - 0.5).abs() < 1e-3), "{w:?}");
    }

    #[test]
    fn time_embedding_values() {
        let e0 = time_embedding(0, 8).unwrap();
        for i in 0..4 {
            assert_eq!(e0[2 * i], 0.0);
            assert_eq!(e0[2 * i + 1], 1.0);
        }
        assert!(time_embedding(3, 7).is_err());
        let a = time_embedding(50, 16).unwrap();
        let b = time_embedding(100, 16).unwrap();
        let dist: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        // closed form evaluated independently: component 0 alone differs by |sin 50 - sin 100|
        assert!((a[0] - 50f64.sin()).abs() < 1e-15 && (b[0] - 100f64.sin()).abs() < 1e-15);
        assert!(dist > (50f64.sin() - 100f64.sin()).abs() - 1e-12 && dist > 0.0);
        let big = time_embedding(1_000_000_007, 32).unwrap();
        assert!(big.iter().all(|x| x.is_finite() && x.abs() <= 1.0));
    }

    #[test]
    fn embedding_matrix_matches_rows() {
        let m = time_embedding_matrix(&[1, 9], 6).unwrap();
        assert_eq!(m.index_axis(Axis(0), 1).to_vec(), time_embedding(9, 6).unwrap());
    }
}
