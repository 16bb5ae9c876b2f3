//! Tape-based reverse-mode differentiation over 2-D `f64` arrays.
//!
//! Every array is laid out channels × time. A [`Graph`] records one forward
//! pass; [`Graph::backward`] walks the tape in reverse and returns gradients
//! for every node and every parameter leaf. Parameters live in a
//! [`ParamStore`] that outlives individual graphs.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};
use crate::objective::{self, LossConfig};
use crate::slowfast::{self, PoolingMode};

pub type Mat = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        dilation: usize,
        cols: Option<Mat>,
    },
    Add(Var, Var),
    ScaleBy {
        x: Var,
        s: Var,
    },
    ScaleConst(Var, f64),
    Mask(Var, Mat),
    Relu(Var),
    Softmax(Var),
    InstanceNorm {
        x: Var,
        normalized: Mat,
        inv_std: Vec<f64>,
    },
    Pool {
        x: Var,
        len: usize,
        mode: PoolingMode,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
        len: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        block: usize,
        weights: Vec<Vec<f64>>,
    },
    StageLoss {
        logits: Var,
        grad: Mat,
    },
    Sum(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
}

/// One recorded forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    params: BTreeMap<ParamId, Mat>,
}

impl Gradients {
    pub fn var(&self, v: Var) -> Option<&Mat> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Mat> {
        self.params
    }
}

fn check_same_shape(a: &Mat, b: &Mat, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Key range `[lo, hi)` visible to query `t` under block-local attention with
/// block length `block`: the query's block widened by half a block on each
/// side, clipped to the sequence.
pub fn attention_window(t: usize, len: usize, block: usize) -> (usize, usize) {
    let start = (t / block) * block;
    let lo = start.saturating_sub(block / 2);
    let hi = (start + block + block.div_ceil(2)).min(len);
    (lo, hi)
}

fn im2col(x: &Mat, kernel: usize, dilation: usize) -> Mat {
    let (cin, len) = x.dim();
    let centre = (kernel / 2) as isize;
    let mut cols = Mat::zeros((cin * kernel, len));
    for i in 0..cin {
        for j in 0..kernel {
            let shift = (j as isize - centre) * dilation as isize;
            let row = i * kernel + j;
            let (dst_lo, src_lo, n) = shifted_span(len, shift);
            if n > 0 {
                cols.slice_mut(s![row, dst_lo..dst_lo + n])
                    .assign(&x.slice(s![i, src_lo..src_lo + n]));
            }
        }
    }
    cols
}

fn col2im(cols: &Mat, cin: usize, kernel: usize, dilation: usize) -> Mat {
    let len = cols.ncols();
    let centre = (kernel / 2) as isize;
    let mut x = Mat::zeros((cin, len));
    for i in 0..cin {
        for j in 0..kernel {
            let shift = (j as isize - centre) * dilation as isize;
            let row = i * kernel + j;
            let (dst_lo, src_lo, n) = shifted_span(len, shift);
            if n > 0 {
                let mut target = x.slice_mut(s![i, src_lo..src_lo + n]);
                target += &cols.slice(s![row, dst_lo..dst_lo + n]);
            }
        }
    }
    x
}

/// For output positions `t` reading input `t + shift`, returns
/// `(first output, first input, count)` of the in-bounds span.
fn shifted_span(len: usize, shift: isize) -> (usize, usize, usize) {
    if shift >= 0 {
        let s = shift as usize;
        (0, s.min(len), len.saturating_sub(s))
    } else {
        let s = (-shift) as usize;
        (s.min(len), 0, len.saturating_sub(s))
    }
}

fn softmax_columns(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut col in out.columns_mut() {
        let max = col.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        col.mapv_inplace(|v| (v - max).exp());
        let sum = col.sum();
        col.mapv_inplace(|v| v / sum);
    }
    out
}

/// Column-wise softmax of a class-score array.
pub fn softmax(x: &Mat) -> Mat {
    softmax_columns(x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; receives a gradient but has no parameter.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    /// Dilated 1-D convolution with zero padding and odd `kernel`.
    /// `w` is `out × (in · kernel)` with the kernel index fastest, `b` is `out × 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, kernel: usize, dilation: usize) -> Result<Var> {
        if kernel % 2 == 0 || kernel == 0 {
            return Err(Error::config(format!("kernel size must be odd, got {kernel}")));
        }
        if dilation == 0 {
            return Err(Error::config("dilation must be at least 1"));
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let cin = xv.nrows();
        if wv.ncols() != cin * kernel {
            return Err(Error::shape(format!(
                "conv weight has {} columns, input has {} channels × kernel {}",
                wv.ncols(),
                cin,
                kernel
            )));
        }
        if bv.dim() != (wv.nrows(), 1) {
            return Err(Error::shape(format!(
                "conv bias {:?} does not match {} output channels",
                bv.dim(),
                wv.nrows()
            )));
        }
        let (out, cols) = if kernel == 1 {
            (wv.dot(xv), None)
        } else {
            let cols = im2col(xv, kernel, dilation);
            (wv.dot(&cols), Some(cols))
        };
        let out = out + bv;
        Ok(self.push(
            out,
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                dilation,
                cols,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape(self.value(a), self.value(b), "add")?;
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Multiplies `x` by the single entry of the 1 × 1 node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).dim() != (1, 1) {
            return Err(Error::shape("scale_by expects a 1 × 1 scalar"));
        }
        let out = self.value(x) * self.value(s)[[0, 0]];
        Ok(self.push(out, Op::ScaleBy { x, s }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x) * c;
        self.push(out, Op::ScaleConst(x, c))
    }

    /// Elementwise product with a constant mask (used for dropout).
    pub fn mask(&mut self, x: Var, mask: Mat) -> Result<Var> {
        check_same_shape(self.value(x), &mask, "mask")?;
        let out = self.value(x) * &mask;
        Ok(self.push(out, Op::Mask(x, mask)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = softmax_columns(self.value(x));
        self.push(out, Op::Softmax(x))
    }

    /// Per-channel normalisation over time, no affine parameters.
    pub fn instance_norm(&mut self, x: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let len = xv.ncols() as f64;
        let mut normalized = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in normalized.rows_mut() {
            let mean = row.sum() / len;
            let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / len;
            let is = 1.0 / (var + EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        self.push(
            normalized.clone(),
            Op::InstanceNorm {
                x,
                normalized,
                inv_std,
            },
        )
    }

    pub fn segment_pool(&mut self, x: Var, len: usize, mode: PoolingMode) -> Result<Var> {
        let (out, argmax) = slowfast::segment_pool_with_argmax(self.value(x), len, mode)?;
        Ok(self.push(out, Op::Pool { x, len, mode, argmax }))
    }

    pub fn upsample(&mut self, x: Var, len: usize, frames: usize) -> Result<Var> {
        let out = slowfast::upsample_repeat(self.value(x), len, frames)?;
        Ok(self.push(out, Op::Upsample { x, len }))
    }

    /// Single-head block-local attention. Queries/keys are `d × T`, values
    /// `dv × T`; see [`attention_window`] for the visible key range.
    pub fn local_attention(&mut self, q: Var, k: Var, v: Var, block: usize) -> Result<Var> {
        if block == 0 {
            return Err(Error::config("attention block length must be at least 1"));
        }
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        check_same_shape(qv, kv, "attention query/key")?;
        if vv.ncols() != qv.ncols() {
            return Err(Error::shape(format!(
                "attention values span {} frames, queries {}",
                vv.ncols(),
                qv.ncols()
            )));
        }
        let len = qv.ncols();
        let scale = 1.0 / (qv.nrows() as f64).sqrt();
        let mut out = Mat::zeros((vv.nrows(), len));
        let mut weights = Vec::with_capacity(len);
        for t in 0..len {
            let (lo, hi) = attention_window(t, len, block);
            let qt = qv.column(t);
            let mut w: Vec<f64> = (lo..hi).map(|s| qt.dot(&kv.column(s)) * scale).collect();
            let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            w.iter_mut().for_each(|x| *x = (*x - max).exp());
            let sum: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= sum);
            let mut col = out.column_mut(t);
            for (a, s) in w.iter().zip(lo..hi) {
                col.scaled_add(*a, &vv.column(s));
            }
            weights.push(w);
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                block,
                weights,
            },
        ))
    }

    /// Attention weights recorded by a [`Graph::local_attention`] node, one
    /// vector per query over its visible key range.
    pub fn attention_weights(&self, v: Var) -> Option<&[Vec<f64>]> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Cross-entropy plus weighted truncated smoothing for one stage; 1 × 1 output.
    pub fn stage_loss(&mut self, logits: Var, labels: &[usize], config: &LossConfig) -> Result<Var> {
        let (value, grad) = objective::stage_loss_with_grad(self.value(logits), labels, config)?;
        Ok(self.push(Mat::from_elem((1, 1), value), Op::StageLoss { logits, grad }))
    }

    pub fn sum(&mut self, terms: &[Var]) -> Result<Var> {
        let first = terms
            .first()
            .ok_or_else(|| Error::validation("sum of zero terms"))?;
        let mut out = self.value(*first).clone();
        for t in &terms[1..] {
            check_same_shape(&out, self.value(*t), "sum")?;
            out += self.value(*t);
        }
        Ok(self.push(out, Op::Sum(terms.to_vec())))
    }

    /// Reverse pass seeded with ones at `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let seed = Mat::ones(self.value(root).dim());
        self.backward_with(root, seed)
    }

    pub fn backward_with(&self, root: Var, seed: Mat) -> Gradients {
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        let mut params: BTreeMap<ParamId, Mat> = BTreeMap::new();
        grads[root.0] = Some(seed);

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => match params.get_mut(id) {
                    Some(p) => *p += &g,
                    None => {
                        params.insert(*id, g.clone());
                    }
                },
                Op::Conv1d {
                    x,
                    w,
                    b,
                    kernel,
                    dilation,
                    cols,
                } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let dw = match cols {
                        Some(c) => g.dot(&c.t()),
                        None => g.dot(&xv.t()),
                    };
                    let db = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let dcols = wv.t().dot(&g);
                    let dx = if *kernel == 1 {
                        dcols
                    } else {
                        col2im(&dcols, xv.nrows(), *kernel, *dilation)
                    };
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::ScaleBy { x, s } => {
                    let sv = self.value(*s)[[0, 0]];
                    let ds = (&g * self.value(*x)).sum();
                    acc(&mut grads, *x, &g * sv);
                    acc(&mut grads, *s, Mat::from_elem((1, 1), ds));
                }
                Op::ScaleConst(x, c) => acc(&mut grads, *x, &g * *c),
                Op::Mask(x, m) => acc(&mut grads, *x, &g * m),
                Op::Relu(x) => {
                    let mut dx = g.clone();
                    ndarray::Zip::from(&mut dx)
                        .and(self.value(*x))
                        .for_each(|d, &v| {
                            if v <= 0.0 {
                                *d = 0.0
                            }
                        });
                    acc(&mut grads, *x, dx);
                }
                Op::Softmax(x) => {
                    let p = &node.value;
                    let mut dx = &g * p;
                    for (mut col, pc) in dx.columns_mut().into_iter().zip(p.columns()) {
                        let dot = col.sum();
                        col.scaled_add(-dot, &pc);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::InstanceNorm {
                    x,
                    normalized,
                    inv_std,
                } => {
                    let n = normalized.ncols() as f64;
                    let mut dx = Mat::zeros(normalized.dim());
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = g.row(r);
                        let xr = normalized.row(r);
                        let sum_g = gr.sum();
                        let sum_gx = gr.dot(&xr);
                        let mut dr = dx.row_mut(r);
                        for t in 0..gr.len() {
                            dr[t] = is / n * (n * gr[t] - sum_g - xr[t] * sum_gx);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Pool {
                    x,
                    len,
                    mode,
                    argmax,
                } => {
                    let dx = slowfast::segment_pool_backward(
                        self.value(*x),
                        &node.value,
                        &g,
                        *len,
                        *mode,
                        argmax,
                    );
                    acc(&mut grads, *x, dx);
                }
                Op::Upsample { x, len } => {
                    let (rows, segs) = self.value(*x).dim();
                    let mut dx = Mat::zeros((rows, segs));
                    for (t, col) in g.columns().into_iter().enumerate() {
                        let mut dcol = dx.column_mut(t / len);
                        dcol += &col;
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    block,
                    weights,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let len = qv.ncols();
                    let scale = 1.0 / (qv.nrows() as f64).sqrt();
                    let mut dq = Mat::zeros(qv.dim());
                    let mut dk = Mat::zeros(kv.dim());
                    let mut dv = Mat::zeros(vv.dim());
                    for t in 0..len {
                        let (lo, hi) = attention_window(t, len, *block);
                        let w = &weights[t];
                        let go = g.column(t);
                        let da: Vec<f64> = (lo..hi).map(|s| go.dot(&vv.column(s))).collect();
                        let mean: f64 = w.iter().zip(&da).map(|(a, d)| a * d).sum();
                        for (i, s) in (lo..hi).enumerate() {
                            dv.column_mut(s).scaled_add(w[i], &go);
                            let dscore = w[i] * (da[i] - mean) * scale;
                            dq.column_mut(t).scaled_add(dscore, &kv.column(s));
                            dk.column_mut(s).scaled_add(dscore, &qv.column(t));
                        }
                    }
                    acc(&mut grads, *q, dq);
                    acc(&mut grads, *k, dk);
                    acc(&mut grads, *v, dv);
                }
                Op::StageLoss { logits, grad } => {
                    acc(&mut grads, *logits, grad * g[[0, 0]]);
                }
                Op::Sum(terms) => {
                    for t in terms {
                        acc(&mut grads, *t, g.clone());
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Gradients {
            nodes: grads,
            params,
        }
    }
}
