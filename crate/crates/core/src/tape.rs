//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a `1×1` result walks the record in reverse and
//! accumulates gradients for every node that depends on a differentiable leaf.
//! Everything is two-dimensional; scalars are `1×1` matrices, row vectors are
//! `1×n` and column vectors are `n×1`.

use std::cell::{Ref, RefCell};

use ndarray::{concatenate, s, Array2, Axis, Zip};

/// Dense row-major matrix used throughout the crate.
pub type Mat = Array2<f64>;

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    AddCol(usize, usize),
    MulCol(usize, usize),
    ScaleBy(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize, f64),
    Square(usize),
    SoftmaxRows(usize),
    LogSumExpRows(usize),
    RowNormalize(usize, f64),
    SumAll(usize),
    SumRows(usize),
    SumCols(usize),
    Transpose(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    GatherRows(usize, Vec<usize>),
    ScatterRows(usize, Vec<usize>),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Operation record. Not thread-safe; one tape per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var#{}({}x{})", self.id, r, c)
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    /// Gradient of the differentiated scalar with respect to `var`, if any
    /// path connects them.
    pub fn get(&self, var: Var<'_>) -> Option<&Mat> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Like [`Grads::get`] but returns zeros of the right shape when `var` is
    /// disconnected from the output.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Mat {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Mat::zeros(var.shape()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Mat, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Differentiable leaf.
    pub fn var(&self, value: Mat) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, value: Mat) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Mat::from_elem((1, 1), value))
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn unary(&self, a: usize, f: impl FnOnce(&Mat) -> Mat, op: Op) -> Var<'_> {
        let value = f(&self.nodes.borrow()[a].value);
        let ng = self.needs(&[a]);
        self.push(value, op, ng)
    }

    fn binary(&self, a: usize, b: usize, f: impl FnOnce(&Mat, &Mat) -> Mat, op: Op) -> Var<'_> {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a].value, &nodes[b].value)
        };
        let ng = self.needs(&[a, b]);
        self.push(value, op, ng)
    }

    /// Reverse pass from a `1×1` output.
    pub fn backward(&self, output: Var<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.id].value.dim(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(Mat::ones((1, 1)));

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |i: usize| &nodes[i].value;
            let mut acc = |i: usize, d: Mat| {
                if !nodes[i].needs_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(existing) => *existing += &d,
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if nodes[*a].needs_grad {
                        acc(*a, g.dot(&val(*b).t()));
                    }
                    if nodes[*b].needs_grad {
                        acc(*b, val(*a).t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, -g);
                }
                Op::Mul(a, b) => {
                    acc(*a, &g * val(*b));
                    acc(*b, &g * val(*a));
                }
                Op::AddRow(a, r) => {
                    acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, g);
                }
                Op::AddCol(a, c) => {
                    acc(*c, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                    acc(*a, g);
                }
                Op::MulCol(a, c) => {
                    let dc = (&g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(*c, dc);
                    acc(*a, &g * val(*c));
                }
                Op::ScaleBy(a, sc) => {
                    let s = val(*sc)[[0, 0]];
                    let ds = (&g * val(*a)).sum();
                    acc(*sc, Mat::from_elem((1, 1), ds));
                    acc(*a, g * s);
                }
                Op::Scale(a, c) => acc(*a, g * *c),
                Op::AddScalar(a) => acc(*a, g),
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    acc(*a, d);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    acc(*a, &g * &y.mapv(|y| y * (1.0 - y)));
                }
                Op::Exp(a) => acc(*a, &g * &node.value),
                Op::Ln(a, eps) => {
                    let mut d = g;
                    Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                        *d = if x > *eps { *d / x } else { 0.0 };
                    });
                    acc(*a, d);
                }
                Op::Square(a) => acc(*a, &g * &val(*a).mapv(|x| 2.0 * x)),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(*a, y * &(&g - &dot));
                }
                Op::LogSumExpRows(a) => {
                    let x = val(*a);
                    let out = &node.value;
                    let mut d = x.clone();
                    for ((mut row, &o), &gi) in d.rows_mut().into_iter().zip(out.iter()).zip(g.iter()) {
                        row.mapv_inplace(|v| if v == f64::NEG_INFINITY { 0.0 } else { gi * (v - o).exp() });
                    }
                    acc(*a, d);
                }
                Op::RowNormalize(a, eps) => {
                    let x = val(*a);
                    let y = &node.value;
                    let norms = x.map_axis(Axis(1), |r| (r.dot(&r) + eps).sqrt()).insert_axis(Axis(1));
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(*a, (&g - &(y * &dot)) / &norms);
                }
                Op::SumAll(a) => {
                    let s = g[[0, 0]];
                    acc(*a, Mat::from_elem(val(*a).dim(), s));
                }
                Op::SumRows(a) => {
                    let shape = val(*a).dim();
                    acc(*a, g.broadcast(shape).expect("broadcast").to_owned());
                }
                Op::SumCols(a) => {
                    let shape = val(*a).dim();
                    acc(*a, g.broadcast(shape).expect("broadcast").to_owned());
                }
                Op::Transpose(a) => acc(*a, g.t().to_owned()),
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = val(p).ncols();
                        acc(p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut d = Mat::zeros(val(*a).dim());
                    let w = g.ncols();
                    d.slice_mut(s![.., *start..*start + w]).assign(&g);
                    acc(*a, d);
                }
                Op::GatherRows(a, idx) => {
                    let mut d = Mat::zeros(val(*a).dim());
                    for (r, &i) in idx.iter().enumerate() {
                        let mut row = d.row_mut(i);
                        row += &g.row(r);
                    }
                    acc(*a, d);
                }
                Op::ScatterRows(a, idx) => {
                    acc(*a, g.select(Axis(0), idx));
                }
            }
        }
        Grads { grads }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Borrow the forward value.
    pub fn value(&self) -> Ref<'t, Mat> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_mat(&self) -> Mat {
        self.value().clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().dim()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    /// Scalar value of a `1×1` node.
    pub fn item(&self) -> f64 {
        let v = self.value();
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    /// Detached copy: same value, no gradient path.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.to_mat())
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        assert_eq!(self.cols(), rhs.rows(), "matmul inner dimensions");
        self.tape.binary(self.id, rhs.id, |a, b| a.dot(b), Op::MatMul(self.id, rhs.id))
    }

    pub fn add(self, rhs: Var<'t>) -> Var<'t> {
        assert_eq!(self.shape(), rhs.shape(), "add shapes");
        self.tape.binary(self.id, rhs.id, |a, b| a + b, Op::Add(self.id, rhs.id))
    }

    pub fn sub(self, rhs: Var<'t>) -> Var<'t> {
        assert_eq!(self.shape(), rhs.shape(), "sub shapes");
        self.tape.binary(self.id, rhs.id, |a, b| a - b, Op::Sub(self.id, rhs.id))
    }

    /// Elementwise product.
    pub fn mul(self, rhs: Var<'t>) -> Var<'t> {
        assert_eq!(self.shape(), rhs.shape(), "mul shapes");
        self.tape.binary(self.id, rhs.id, |a, b| a * b, Op::Mul(self.id, rhs.id))
    }

    /// Adds a `1×n` row to every row.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        assert_eq!(row.shape(), (1, self.cols()), "add_row shapes");
        self.tape.binary(self.id, row.id, |a, r| a + r, Op::AddRow(self.id, row.id))
    }

    /// Adds an `n×1` column to every column.
    pub fn add_col(self, col: Var<'t>) -> Var<'t> {
        assert_eq!(col.shape(), (self.rows(), 1), "add_col shapes");
        self.tape.binary(self.id, col.id, |a, c| a + c, Op::AddCol(self.id, col.id))
    }

    /// Multiplies row `i` by `col[i]`.
    pub fn mul_col(self, col: Var<'t>) -> Var<'t> {
        assert_eq!(col.shape(), (self.rows(), 1), "mul_col shapes");
        self.tape.binary(self.id, col.id, |a, c| a * c, Op::MulCol(self.id, col.id))
    }

    /// Multiplies by a `1×1` node.
    pub fn scale_by(self, s: Var<'t>) -> Var<'t> {
        assert_eq!(s.shape(), (1, 1), "scale_by needs a scalar");
        self.tape.binary(self.id, s.id, |a, s| a * s[[0, 0]], Op::ScaleBy(self.id, s.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, |a| a * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, |a| a + c, Op::AddScalar(self.id))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn relu(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.mapv(|x| x.max(0.0)), Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.mapv(sigmoid), Op::Sigmoid(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.mapv(f64::exp), Op::Exp(self.id))
    }

    /// `ln(max(x, eps))`; the clamped region has zero gradient.
    pub fn ln_clamped(self, eps: f64) -> Var<'t> {
        self.tape.unary(self.id, |a| a.mapv(|x| x.max(eps).ln()), Op::Ln(self.id, eps))
    }

    pub fn square(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.mapv(|x| x * x), Op::Square(self.id))
    }

    pub fn softmax_rows(self) -> Var<'t> {
        self.tape.unary(self.id, softmax_rows, Op::SoftmaxRows(self.id))
    }

    /// Row-wise `log Σ exp`, giving an `n×1` column. `-inf` entries are
    /// treated as absent terms.
    pub fn logsumexp_rows(self) -> Var<'t> {
        self.tape.unary(self.id, logsumexp_rows, Op::LogSumExpRows(self.id))
    }

    /// Divides each row by `sqrt(‖row‖² + eps)`.
    pub fn row_normalize(self, eps: f64) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| {
                let mut out = a.clone();
                for mut r in out.rows_mut() {
                    let n = (r.dot(&r) + eps).sqrt();
                    r /= n;
                }
                out
            },
            Op::RowNormalize(self.id, eps),
        )
    }

    pub fn sum(self) -> Var<'t> {
        self.tape.unary(self.id, |a| Mat::from_elem((1, 1), a.sum()), Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = (self.rows() * self.cols()).max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum across columns, giving `n×1`.
    pub fn sum_rows(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.sum_axis(Axis(1)).insert_axis(Axis(1)), Op::SumRows(self.id))
    }

    /// Sum down rows, giving `1×m`.
    pub fn sum_cols(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.sum_axis(Axis(0)).insert_axis(Axis(0)), Op::SumCols(self.id))
    }

    /// Column means, giving `1×m`.
    pub fn mean_cols(self) -> Var<'t> {
        let n = self.rows().max(1) as f64;
        self.sum_cols().scale(1.0 / n)
    }

    pub fn t(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.t().to_owned(), Op::Transpose(self.id))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = {
            let nodes = tape.nodes.borrow();
            let views: Vec<_> = ids.iter().map(|&i| nodes[i].value.view()).collect();
            concatenate(Axis(1), &views).expect("concat_cols row counts")
        };
        let ng = tape.needs(&ids);
        tape.push(value, Op::ConcatCols(ids), ng)
    }

    /// Columns `start..end`.
    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        assert!(start <= end && end <= self.cols(), "slice_cols range");
        self.tape.unary(self.id, |a| a.slice(s![.., start..end]).to_owned(), Op::SliceCols(self.id, start))
    }

    /// Rows at `idx` (repeats allowed).
    pub fn gather_rows(self, idx: &[usize]) -> Var<'t> {
        self.tape.unary(self.id, |a| a.select(Axis(0), idx), Op::GatherRows(self.id, idx.to_vec()))
    }

    /// Places row `r` of `self` at output row `idx[r]` of an `n`-row zero
    /// matrix; rows mapped to the same index are summed.
    pub fn scatter_rows(self, idx: &[usize], n: usize) -> Var<'t> {
        assert_eq!(idx.len(), self.rows(), "scatter_rows index count");
        self.tape.unary(
            self.id,
            |a| {
                let mut out = Mat::zeros((n, a.ncols()));
                for (r, &i) in idx.iter().enumerate() {
                    let mut row = out.row_mut(i);
                    row += &a.row(r);
                }
                out
            },
            Op::ScatterRows(self.id, idx.to_vec()),
        )
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(a: &Mat) -> Mat {
    let mut out = a.clone();
    for mut r in out.rows_mut() {
        let m = r.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        r.mapv_inplace(|x| (x - m).exp());
        let z = r.sum();
        r /= z;
    }
    out
}

fn logsumexp_rows(a: &Mat) -> Mat {
    let vals: Vec<f64> = a
        .rows()
        .into_iter()
        .map(|r| {
            let m = r.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            if m == f64::NEG_INFINITY {
                return m;
            }
            m + r.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
        })
        .collect();
    Mat::from_shape_vec((a.nrows(), 1), vals).expect("column shape")
}
