//! Layers shared by the language model and the prompt encoders. Each layer
//! has a tape forward (for training) and a plain forward (for inference).

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;

use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{self, normal_init, uniform_init, Real, Tape, Var};

pub const LN_EPS: f64 = 1e-5;

/// `x W + b` without a tape.
pub fn affine<T: Real>(x: ArrayView2<T>, w: &Array2<T>, b: &Array2<T>) -> Array2<T> {
    let mut out = x.dot(w);
    out += b;
    out
}

/// Per-layer key/value cache for incremental decoding.
#[derive(Clone, Debug)]
pub struct LayerCache<T> {
    pub(crate) k: Array2<T>,
    pub(crate) v: Array2<T>,
}

impl<T: Real> LayerCache<T> {
    pub fn new(capacity: usize, d_model: usize) -> Self {
        LayerCache {
            k: Array2::zeros((capacity, d_model)),
            v: Array2::zeros((capacity, d_model)),
        }
    }
}

/// Applies inverted dropout on the tape when enabled.
pub struct Dropout<'r, R: Rng> {
    pub rate: f64,
    pub rng: &'r mut R,
}

impl<R: Rng> Dropout<'_, R> {
    pub fn apply<T: Real>(&mut self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        if self.rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.rate;
        let (r, c) = tape.value(x).dim();
        let mask = Array2::from_shape_simple_fn((r, c), || {
            if self.rng.random::<f64>() < keep {
                T::lit(1.0 / keep)
            } else {
                T::zero()
            }
        });
        tape.mul_const(x, mask)
    }
}

/// Pre-norm transformer block: attention then GELU feed-forward, each
/// wrapped in a residual connection.
#[derive(Clone, Debug)]
pub struct Block {
    pub d_model: usize,
    pub heads: usize,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w_qkv: ParamId,
    b_qkv: ParamId,
    w_o: ParamId,
    b_o: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w_fc1: ParamId,
    b_fc1: ParamId,
    w_fc2: ParamId,
    b_fc2: ParamId,
}

impl Block {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Self {
        let std = 0.02;
        let d = d_model;
        Block {
            d_model,
            heads,
            ln1_g: store.add(format!("{prefix}.ln1.gamma"), Array2::ones((1, d))),
            ln1_b: store.add(format!("{prefix}.ln1.beta"), Array2::zeros((1, d))),
            w_qkv: store.add(format!("{prefix}.attn.w_qkv"), normal_init(rng, d, 3 * d, std)),
            b_qkv: store.add(format!("{prefix}.attn.b_qkv"), Array2::zeros((1, 3 * d))),
            w_o: store.add(format!("{prefix}.attn.w_o"), normal_init(rng, d, d, std)),
            b_o: store.add(format!("{prefix}.attn.b_o"), Array2::zeros((1, d))),
            ln2_g: store.add(format!("{prefix}.ln2.gamma"), Array2::ones((1, d))),
            ln2_b: store.add(format!("{prefix}.ln2.beta"), Array2::zeros((1, d))),
            w_fc1: store.add(format!("{prefix}.mlp.w_fc1"), normal_init(rng, d, d_ff, std)),
            b_fc1: store.add(format!("{prefix}.mlp.b_fc1"), Array2::zeros((1, d_ff))),
            w_fc2: store.add(format!("{prefix}.mlp.w_fc2"), normal_init(rng, d_ff, d, std)),
            b_fc2: store.add(format!("{prefix}.mlp.b_fc2"), Array2::zeros((1, d))),
        }
    }

    pub fn forward_tape<T: Real, R: Rng>(
        &self,
        tape: &mut Tape<'_, T>,
        p: &Bound,
        x: Var,
        causal: bool,
        dropout: &mut Option<Dropout<'_, R>>,
    ) -> Var {
        let d = self.d_model;
        let h = tape.layer_norm(x, p[self.ln1_g], p[self.ln1_b], LN_EPS);
        let qkv = tape.affine(h, p[self.w_qkv], p[self.b_qkv]);
        let q = tape.slice_cols(qkv, 0, d);
        let k = tape.slice_cols(qkv, d, d);
        let v = tape.slice_cols(qkv, 2 * d, d);
        let a = tape.attention(q, k, v, self.heads, causal);
        let mut o = tape.affine(a, p[self.w_o], p[self.b_o]);
        if let Some(drop) = dropout {
            o = drop.apply(tape, o);
        }
        let x = tape.add(x, o);
        let h = tape.layer_norm(x, p[self.ln2_g], p[self.ln2_b], LN_EPS);
        let f = tape.affine(h, p[self.w_fc1], p[self.b_fc1]);
        let f = tape.gelu(f);
        let mut f = tape.affine(f, p[self.w_fc2], p[self.b_fc2]);
        if let Some(drop) = dropout {
            f = drop.apply(tape, f);
        }
        tape.add(x, f)
    }

    /// Plain forward. With a cache, `x` holds the rows at positions
    /// `offset..offset + x.nrows()` and keys/values are appended to it.
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: ArrayView2<T>,
        causal: bool,
        cache: Option<(&mut LayerCache<T>, usize)>,
    ) -> Array2<T> {
        let d = self.d_model;
        let t = x.nrows();
        let (h, _, _) = tensor::layer_norm(x, store.get(self.ln1_g).view(), store.get(self.ln1_b).view(), LN_EPS);
        let qkv = affine(h.view(), store.get(self.w_qkv), store.get(self.b_qkv));
        let q = qkv.slice(s![.., ..d]);
        let a = match cache {
            Some((cache, offset)) => {
                cache.k.slice_mut(s![offset..offset + t, ..]).assign(&qkv.slice(s![.., d..2 * d]));
                cache.v.slice_mut(s![offset..offset + t, ..]).assign(&qkv.slice(s![.., 2 * d..]));
                let k = cache.k.slice(s![..offset + t, ..]);
                let v = cache.v.slice(s![..offset + t, ..]);
                tensor::attention(q, k, v, self.heads, causal, offset).0
            }
            None => {
                let k = qkv.slice(s![.., d..2 * d]);
                let v = qkv.slice(s![.., 2 * d..]);
                tensor::attention(q, k, v, self.heads, causal, 0).0
            }
        };
        let mut x = x.to_owned();
        x += &affine(a.view(), store.get(self.w_o), store.get(self.b_o));
        let (h, _, _) = tensor::layer_norm(x.view(), store.get(self.ln2_g).view(), store.get(self.ln2_b).view(), LN_EPS);
        let f = affine(h.view(), store.get(self.w_fc1), store.get(self.b_fc1)).mapv(tensor::gelu);
        x += &affine(f.view(), store.get(self.w_fc2), store.get(self.b_fc2));
        x
    }
}

/// Single-direction LSTM with gate order input, forget, cell, output and a
/// single combined bias.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub hidden: usize,
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

impl Lstm {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, prefix: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Lstm {
            hidden,
            w_ih: store.add(format!("{prefix}.w_ih"), uniform_init(rng, input, 4 * hidden, bound)),
            w_hh: store.add(format!("{prefix}.w_hh"), uniform_init(rng, hidden, 4 * hidden, bound)),
            bias: store.add(format!("{prefix}.bias"), uniform_init(rng, 1, 4 * hidden, bound)),
        }
    }

    /// Runs over the rows of `x`; returns hidden states in position order.
    pub fn forward_tape<T: Real>(&self, tape: &mut Tape<'_, T>, p: &Bound, x: Var, reverse: bool) -> Var {
        let hd = self.hidden;
        let n = tape.value(x).nrows();
        let pre = tape.affine(x, p[self.w_ih], p[self.bias]);
        let mut h = tape.constant(Array2::zeros((1, hd)));
        let mut c = tape.constant(Array2::zeros((1, hd)));
        let mut outputs = vec![h; n];
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for t in order {
            let xt = tape.slice_rows(pre, t, 1);
            let hh = tape.matmul(h, p[self.w_hh]);
            let z = tape.add(xt, hh);
            let zi = tape.slice_cols(z, 0, hd);
            let zf = tape.slice_cols(z, hd, hd);
            let zg = tape.slice_cols(z, 2 * hd, hd);
            let zo = tape.slice_cols(z, 3 * hd, hd);
            let i = tape.sigmoid(zi);
            let f = tape.sigmoid(zf);
            let g = tape.tanh(zg);
            let o = tape.sigmoid(zo);
            let keep = tape.mul(f, c);
            let write = tape.mul(i, g);
            c = tape.add(keep, write);
            let tc = tape.tanh(c);
            h = tape.mul(o, tc);
            outputs[t] = h;
        }
        tape.concat_rows(&outputs)
    }
}

/// Two linear layers with a ReLU in between and none at the output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let b_in = 1.0 / (input as f64).sqrt();
        let b_hid = 1.0 / (hidden as f64).sqrt();
        Mlp {
            w1: store.add(format!("{prefix}.w1"), uniform_init(rng, input, hidden, b_in)),
            b1: store.add(format!("{prefix}.b1"), uniform_init(rng, 1, hidden, b_in)),
            w2: store.add(format!("{prefix}.w2"), uniform_init(rng, hidden, output, b_hid)),
            b2: store.add(format!("{prefix}.b2"), uniform_init(rng, 1, output, b_hid)),
        }
    }

    pub fn forward_tape<T: Real>(&self, tape: &mut Tape<'_, T>, p: &Bound, x: Var) -> Var {
        let h = tape.affine(x, p[self.w1], p[self.b1]);
        let h = tape.relu(h);
        tape.affine(h, p[self.w2], p[self.b2])
    }
}
