//! A small reverse-mode automatic differentiation tape over 2-D arrays.
//!
//! Every value on the tape is a matrix whose rows are sequence positions.
//! Leaves are either trainable or constant; gradients are only propagated
//! into nodes that (transitively) depend on a trainable leaf, so a frozen
//! network costs a single input-gradient pass and no weight gradients.
//!
//! The tape is generic over [`Real`] so that the same model code runs in
//! `f32` for training and in `f64` for finite-difference gradient checks.

use std::borrow::Cow;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// Floating point element type usable on the tape.
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn lit(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn lit(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Row-wise layer normalisation; returns (output, normalised input, reciprocal std).
pub fn layer_norm<T: Real>(
    x: ArrayView2<T>,
    gamma: ArrayView2<T>,
    beta: ArrayView2<T>,
    eps: f64,
) -> (Array2<T>, Array2<T>, Array1<T>) {
    let (rows, cols) = x.dim();
    let n = T::lit(cols as f64);
    let mut xhat = Array2::zeros((rows, cols));
    let mut rstd = Array1::zeros(rows);
    for (r, row) in x.outer_iter().enumerate() {
        let mean = row.sum() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + T::lit(eps)).sqrt();
        rstd[r] = inv;
        for (c, &v) in row.iter().enumerate() {
            xhat[[r, c]] = (v - mean) * inv;
        }
    }
    let mut out = xhat.clone();
    for mut row in out.outer_iter_mut() {
        Zip::from(&mut row)
            .and(gamma.row(0))
            .and(beta.row(0))
            .for_each(|o, &g, &b| *o = *o * g + b);
    }
    (out, xhat, rstd)
}

/// Multi-head scaled dot-product attention over row-major q/k/v.
///
/// `q` holds `t` query rows that sit at absolute offsets `offset..offset+t`
/// of a key sequence of length `k.nrows()`. With `causal`, query `i` sees
/// keys `0..=offset+i`. Returns the output and the per-head probabilities.
pub fn attention<T: Real>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    heads: usize,
    causal: bool,
    offset: usize,
) -> (Array2<T>, Vec<Array2<T>>) {
    let (t, d) = q.dim();
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut out = Array2::zeros((t, d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut scores = qh.dot(&kh.t());
        for (i, mut row) in scores.outer_iter_mut().enumerate() {
            let visible = if causal { offset + i + 1 } else { row.len() };
            let mut max = T::neg_infinity();
            for &x in row.iter().take(visible) {
                max = max.max(x * scale);
            }
            let mut total = T::zero();
            for (j, x) in row.iter_mut().enumerate() {
                if j < visible {
                    *x = (*x * scale - max).exp();
                    total += *x;
                } else {
                    *x = T::zero();
                }
            }
            row.mapv_inplace(|x| x / total);
        }
        out.slice_mut(cols).assign(&scores.dot(&vh));
        probs.push(scores);
    }
    (out, probs)
}

/// Samples a `rows x cols` matrix from N(0, std^2). Sampling happens in f64
/// so that f32 and f64 models built from the same seed agree.
pub fn normal_init<T: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || T::lit(dist.sample(rng)))
}

pub fn uniform_init<T: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Array2<T> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    Array2::from_shape_simple_fn((rows, cols), || T::lit(dist.sample(rng)))
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulConst(Var, Array2<T>),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        xhat: Array2<T>,
        rstd: Array1<T>,
        beta: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<Array2<T>>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Array2<T>,
    },
    Sum(Vec<Var>),
}

struct Node<'a, T: Real> {
    value: Cow<'a, Array2<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a computation so that it can be differentiated in reverse.
pub struct Tape<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Array2<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Array2<T>, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    /// Leaf that borrows its value; used to bind parameters without copying.
    pub fn borrowed(&mut self, value: &'a Array2<T>, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Cow::Owned(out), Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(Cow::Owned(out), Op::Add(a, b), ng)
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        let ng = self.needs(a) || self.needs(row);
        self.push(Cow::Owned(out), Op::AddRow(a, row), ng)
    }

    /// `x W + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(Cow::Owned(out), Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a) * s;
        let ng = self.needs(a);
        self.push(Cow::Owned(out), Op::Scale(a, s), ng)
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mul_const(&mut self, a: Var, mask: Array2<T>) -> Var {
        let out = self.value(a) * &mask;
        let ng = self.needs(a);
        self.push(Cow::Owned(out), Op::MulConst(a, mask), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        let ng = self.needs(a);
        self.push(Cow::Owned(out), Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.tanh());
        let ng = self.needs(a);
        self.push(Cow::Owned(out), Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(T::zero()));
        let ng = self.needs(a);
        self.push(Cow::Owned(out), Op::Relu(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        let ng = self.needs(a);
        self.push(Cow::Owned(out), Op::Gelu(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (out, xhat, rstd) = layer_norm(
            self.value(x).view(),
            self.value(gamma).view(),
            self.value(beta).view(),
            eps,
        );
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gamma,
                xhat,
                rstd,
                beta,
            },
            ng,
        )
    }

    /// Self-attention over equal-length q/k/v (no cache offset).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (out, probs) = attention(
            self.value(q).view(),
            self.value(k).view(),
            self.value(v).view(),
            heads,
            causal,
            0,
        );
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(Cow::Owned(out), Op::Attention { q, k, v, probs }, ng)
    }

    /// Selects rows of `table` by index.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Array2::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&t.row(id));
        }
        let ng = self.needs(table);
        self.push(
            Cow::Owned(out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(0), &views).expect("column counts agree");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Cow::Owned(out), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(1), &views).expect("row counts agree");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Cow::Owned(out), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![start..start + len, ..]).to_owned();
        let ng = self.needs(x);
        self.push(Cow::Owned(out), Op::SliceRows { x, start }, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![.., start..start + len]).to_owned();
        let ng = self.needs(x);
        self.push(Cow::Owned(out), Op::SliceCols { x, start }, ng)
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Rows whose target is `None` contribute nothing. Output is 1x1.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let l = self.value(logits);
        assert_eq!(l.nrows(), targets.len(), "one target slot per logits row");
        let mut probs = Array2::zeros(l.dim());
        let mut total = T::zero();
        for (r, row) in l.outer_iter().enumerate() {
            let Some(t) = targets[r] else { continue };
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut z = T::zero();
            for (c, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                probs[[r, c]] = e;
                z += e;
            }
            probs.row_mut(r).mapv_inplace(|p| p / z);
            total += -(row[t] - max - z.ln());
        }
        let ng = self.needs(logits);
        self.push(
            Cow::Owned(Array2::from_elem((1, 1), total)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Sum of same-shaped nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let mut out = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            out += self.value(p);
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Cow::Owned(out), Op::Sum(parts.to_vec()), ng)
    }

    /// Reverse pass from a scalar node. Gradients are kept for leaves only.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let root_shape = self.value(root).dim();
        grads[root.0] = Some(Array2::ones(root_shape));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let d = g.dot(&self.value(*b).t());
                        accumulate(&mut grads, *a, d);
                    }
                    if self.needs(*b) {
                        let d = self.value(*a).t().dot(&g);
                        accumulate(&mut grads, *b, d);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.needs(*row) {
                        let d = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *row, d);
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g * *s),
                Op::MulConst(a, mask) => accumulate(&mut grads, *a, g * mask),
                Op::Sigmoid(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(&*node.value)
                        .for_each(|d, &y| *d *= y * (T::one() - y));
                    accumulate(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(&*node.value)
                        .for_each(|d, &y| *d *= T::one() - y * y);
                    accumulate(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                        if x <= T::zero() {
                            *d = T::zero();
                        }
                    });
                    accumulate(&mut grads, *a, d);
                }
                Op::Gelu(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| *d *= gelu_grad(x));
                    accumulate(&mut grads, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    xhat,
                    rstd,
                    beta,
                } => {
                    if self.needs(*beta) {
                        accumulate(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.needs(*gamma) {
                        let d = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *gamma, d);
                    }
                    if self.needs(*x) {
                        let gam = self.value(*gamma);
                        let dxhat = &g * gam;
                        let n = T::lit(xhat.ncols() as f64);
                        let mut dx = Array2::zeros(xhat.dim());
                        for r in 0..xhat.nrows() {
                            let dh = dxhat.row(r);
                            let xh = xhat.row(r);
                            let sum_d = dh.sum();
                            let sum_dx = dh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>();
                            let k = rstd[r] / n;
                            for c in 0..xhat.ncols() {
                                dx[[r, c]] = k * (n * dh[c] - sum_d - xh[c] * sum_dx);
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Attention { q, k, v, probs } => {
                    let qv = self.value(*q);
                    let kv = self.value(*k);
                    let vv = self.value(*v);
                    let d = qv.ncols();
                    let heads = probs.len();
                    let dh = d / heads;
                    let scale = T::one() / T::lit(dh as f64).sqrt();
                    let mut gq = Array2::zeros(qv.dim());
                    let mut gk = Array2::zeros(kv.dim());
                    let mut gv = Array2::zeros(vv.dim());
                    for (h, p) in probs.iter().enumerate() {
                        let cols = s![.., h * dh..(h + 1) * dh];
                        let go = g.slice(cols);
                        gv.slice_mut(cols).assign(&p.t().dot(&go));
                        let dp = go.dot(&vv.slice(cols).t());
                        let mut ds = &dp * p;
                        let row_dot = ds.sum_axis(Axis(1));
                        for (r, mut row) in ds.outer_iter_mut().enumerate() {
                            let pr = p.row(r);
                            Zip::from(&mut row)
                                .and(&pr)
                                .for_each(|x, &pp| *x = (*x - pp * row_dot[r]) * scale);
                        }
                        gq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                        gk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                    }
                    if self.needs(*q) {
                        accumulate(&mut grads, *q, gq);
                    }
                    if self.needs(*k) {
                        accumulate(&mut grads, *k, gk);
                    }
                    if self.needs(*v) {
                        accumulate(&mut grads, *v, gv);
                    }
                }
                Op::Gather { table, ids } => {
                    let mut d = Array2::zeros(self.value(*table).dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = d.row_mut(id);
                        row += &g.row(r);
                    }
                    accumulate(&mut grads, *table, d);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).nrows();
                        if self.needs(p) {
                            accumulate(&mut grads, p, g.slice(s![start..start + n, ..]).to_owned());
                        }
                        start += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).ncols();
                        if self.needs(p) {
                            accumulate(&mut grads, p, g.slice(s![.., start..start + n]).to_owned());
                        }
                        start += n;
                    }
                }
                Op::SliceRows { x, start } => {
                    let mut d = Array2::zeros(self.value(*x).dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    accumulate(&mut grads, *x, d);
                }
                Op::SliceCols { x, start } => {
                    let mut d = Array2::zeros(self.value(*x).dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *x, d);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = g[[0, 0]];
                    let mut d = Array2::zeros(probs.dim());
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let mut row = d.row_mut(r);
                        row.assign(&probs.row(r));
                        row[t] -= T::one();
                        row.mapv_inplace(|x| x * scale);
                    }
                    accumulate(&mut grads, *logits, d);
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        if self.needs(p) {
                            accumulate(&mut grads, p, g.clone());
                        }
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Array2<T>>], v: Var, delta: Array2<T>) {
    match &mut grads[v.0] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
