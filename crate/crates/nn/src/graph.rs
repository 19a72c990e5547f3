//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to it. Parameters enter the
//! tape by name from a [`ParamStore`], so after [`Graph::backward`] the
//! gradients come back keyed by the same names the optimizer uses.

use std::collections::BTreeMap;

use crate::conv::{col2im, gemm, im2col, planes_per_chunk, ConvCfg};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(String),
    Conv { x: Var, w: Var, b: Option<Var>, cfg: ConvCfg },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Reshape(Var),
    Upsample { x: Var, factors: [usize; 3] },
    ConcatChannels(Vec<Var>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    GlobalAvgPool(Var),
    GlobalMaxPool { x: Var, argmax: Vec<usize> },
    Sum(Var),
    Mean(Var),
    SqDist(Var, Var),
    BceWithLogits { logits: Var, targets: Vec<f32>, pos_weight: f32 },
    SoftmaxCe { logits: Var, labels: Vec<u8> },
    SoftDice { logits: Var, labels: Vec<u8> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    per_node: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient with respect to a tape node, if it required one.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.per_node[var.0].as_ref()
    }

    /// Parameter gradients summed over every use of the parameter.
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

const DICE_EPS: f32 = 1e-5;

fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

// log(1 + e^z) without overflow.
fn softplus(z: f32) -> f32 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Softmax over the channel axis of `[N, C, S...]` logits.
fn channel_softmax(logits: &Tensor) -> Vec<f32> {
    let shape = logits.shape();
    let (n, c) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    let x = logits.data();
    let mut p = vec![0.0f32; x.len()];
    for b in 0..n {
        let base = b * c * s;
        for v in 0..s {
            let mut max = f32::NEG_INFINITY;
            for ch in 0..c {
                max = max.max(x[base + ch * s + v]);
            }
            let mut total = 0.0;
            for ch in 0..c {
                let e = (x[base + ch * s + v] - max).exp();
                p[base + ch * s + v] = e;
                total += e;
            }
            for ch in 0..c {
                p[base + ch * s + v] /= total;
            }
        }
    }
    p
}

fn spatial(shape: &[usize]) -> usize {
    shape[2..].iter().product()
}

fn dims3(shape: &[usize]) -> [usize; 3] {
    assert_eq!(shape.len(), 5, "expected [N, C, D, H, W], got {shape:?}");
    [shape[2], shape[3], shape[4]]
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Trainable leaf copied from `store`.
    ///
    /// Panics when the name is not registered: parameter names are fixed by
    /// model code, so a miss is a programming error.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        let value = store
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not in store"))
            .clone();
        self.push(value, Op::Param(name.to_string()), true)
    }

    /// Convolution of `[N, Cin, D, H, W]` with weights `[Cout, Cin, kd, kh, kw]`.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, cfg: ConvCfg) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let [n, cin] = [xs[0], xs[1]];
        let dims = dims3(&xs);
        assert_eq!(ws.len(), 5, "conv weight must be 5-D, got {ws:?}");
        assert_eq!(ws[1], cin, "conv input channels {cin} != weight {ws:?}");
        assert_eq!(&ws[2..], &cfg.kernel, "weight kernel {ws:?} != cfg {cfg:?}");
        let cout = ws[0];
        if let Some(b) = b {
            assert_eq!(self.shape(b), &[cout], "conv bias shape");
        }
        let out = cfg.out_dims(dims);
        let p = out.iter().product::<usize>();
        let k = cin * cfg.kernel_volume();
        let in_len = cin * dims.iter().product::<usize>();
        let plane = out[1] * out[2];
        let chunk = planes_per_chunk(k, plane);
        let mut y = vec![0.0f32; n * cout * p];
        let mut col = vec![0.0f32; k * chunk.min(out[0]) * plane];
        {
            let xv = self.nodes[x.0].value.data();
            let wv = self.nodes[w.0].value.data();
            for bi in 0..n {
                let xb = &xv[bi * in_len..(bi + 1) * in_len];
                let yb = &mut y[bi * cout * p..(bi + 1) * cout * p];
                let mut z0 = 0;
                while z0 < out[0] {
                    let z1 = (z0 + chunk).min(out[0]);
                    let pc = (z1 - z0) * plane;
                    im2col(xb, cin, dims, &cfg, out, z0, z1, &mut col[..k * pc]);
                    gemm(cout, k, pc, wv, (k, 1), &col, (pc, 1), 0.0, &mut yb[z0 * plane..], (p, 1));
                    z0 = z1;
                }
                if let Some(b) = b {
                    let bv = self.nodes[b.0].value.data();
                    for (co, bias) in bv.iter().enumerate() {
                        for v in &mut yb[co * p..(co + 1) * p] {
                            *v += bias;
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::new(vec![n, cout, out[0], out[1], out[2]], y),
            Op::Conv { x, w, b, cfg },
            rg,
        )
    }

    /// `x·wᵀ + b` for `x: [N, In]`, `w: [Out, In]`, `b: [Out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(xs.len() == 2 && ws.len() == 2 && xs[1] == ws[1], "linear shapes {xs:?} x {ws:?}");
        let (n, inp, out) = (xs[0], xs[1], ws[0]);
        let mut y = vec![0.0f32; n * out];
        gemm(
            n,
            inp,
            out,
            self.value(x).data(),
            (inp, 1),
            self.value(w).data(),
            (1, inp),
            0.0,
            &mut y,
            (out, 1),
        );
        if let Some(b) = b {
            assert_eq!(self.shape(b), &[out], "linear bias shape");
            let bv = self.value(b).data();
            for row in y.chunks_mut(out) {
                for (v, bias) in row.iter_mut().zip(bv) {
                    *v += bias;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(vec![n, out], y), Op::Linear { x, w, b }, rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, data), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data), op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f32::tanh, Op::Tanh(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshape(shape.to_vec());
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Nearest-neighbour upsampling of `[N, C, D, H, W]` by integer factors.
    pub fn upsample(&mut self, x: Var, factors: [usize; 3]) -> Var {
        let xs = self.shape(x).to_vec();
        let [d, h, w] = dims3(&xs);
        let [fd, fh, fw] = factors;
        let (od, oh, ow) = (d * fd, h * fh, w * fw);
        let nc = xs[0] * xs[1];
        let xv = self.value(x).data();
        let mut y = vec![0.0f32; nc * od * oh * ow];
        for c in 0..nc {
            for z in 0..od {
                for yy in 0..oh {
                    let src = ((c * d + z / fd) * h + yy / fh) * w;
                    let dst = ((c * od + z) * oh + yy) * ow;
                    for xx in 0..ow {
                        y[dst + xx] = xv[src + xx / fw];
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(vec![xs[0], xs[1], od, oh, ow], y),
            Op::Upsample { x, factors },
            rg,
        )
    }

    /// Concatenation along axis 1 of `[N, C_i, ...]` tensors with equal trailing dims.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        let first = self.shape(xs[0]).to_vec();
        let n = first[0];
        let s = spatial(&first);
        let mut c_total = 0;
        for &v in xs {
            let sh = self.shape(v);
            assert!(sh[0] == n && sh[2..] == first[2..], "concat shape mismatch {sh:?} vs {first:?}");
            c_total += sh[1];
        }
        let mut y = vec![0.0f32; n * c_total * s];
        for b in 0..n {
            let mut off = 0;
            for &v in xs {
                let c = self.shape(v)[1];
                let src = &self.value(v).data()[b * c * s..(b + 1) * c * s];
                let dst = (b * c_total + off) * s;
                y[dst..dst + c * s].copy_from_slice(src);
                off += c;
            }
        }
        let mut shape = first.clone();
        shape[1] = c_total;
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push(Tensor::new(shape, y), Op::ConcatChannels(xs.to_vec()), rg)
    }

    /// Concatenation of `[N, F_i]` matrices along columns.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let n = self.shape(xs[0])[0];
        let widths: Vec<usize> = xs.iter().map(|&v| self.shape(v)[1]).collect();
        let total: usize = widths.iter().sum();
        let mut y = vec![0.0f32; n * total];
        let mut off = 0;
        for (&v, &f) in xs.iter().zip(&widths) {
            assert_eq!(self.shape(v), &[n, f], "concat_cols expects [N, F]");
            let src = self.value(v).data();
            for r in 0..n {
                y[r * total + off..r * total + off + f].copy_from_slice(&src[r * f..(r + 1) * f]);
            }
            off += f;
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push(Tensor::new(vec![n, total], y), Op::ConcatCols(xs.to_vec()), rg)
    }

    /// Concatenation of `[N_i, F]` matrices along rows.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        let f = self.shape(xs[0])[1];
        let mut data = Vec::new();
        let mut rows = 0;
        for &v in xs {
            let sh = self.shape(v);
            assert!(sh.len() == 2 && sh[1] == f, "concat_rows expects [N, {f}], got {sh:?}");
            rows += sh[0];
            data.extend_from_slice(self.value(v).data());
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push(Tensor::new(vec![rows, f], data), Op::ConcatRows(xs.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let sh = self.shape(x).to_vec();
        assert!(sh.len() == 2 && start + len <= sh[1], "slice_cols out of range");
        let src = self.value(x).data();
        let mut y = Vec::with_capacity(sh[0] * len);
        for r in 0..sh[0] {
            y.extend_from_slice(&src[r * sh[1] + start..r * sh[1] + start + len]);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![sh[0], len], y), Op::SliceCols { x, start }, rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let sh = self.shape(x).to_vec();
        assert!(sh.len() == 2 && start + len <= sh[0], "slice_rows out of range");
        let f = sh[1];
        let y = self.value(x).data()[start * f..(start + len) * f].to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(vec![len, f], y), Op::SliceRows { x, start }, rg)
    }

    /// `[N, C, ...] -> [N, C]` mean over all trailing axes.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let sh = self.shape(x).to_vec();
        let (n, c, s) = (sh[0], sh[1], spatial(&sh));
        let y = self
            .value(x)
            .data()
            .chunks(s)
            .map(|ch| ch.iter().sum::<f32>() / s as f32)
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, c], y), Op::GlobalAvgPool(x), rg)
    }

    /// `[N, C, ...] -> [N, C]` max over all trailing axes.
    pub fn global_max_pool(&mut self, x: Var) -> Var {
        let sh = self.shape(x).to_vec();
        let (n, c, s) = (sh[0], sh[1], spatial(&sh));
        let mut y = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for (i, ch) in self.value(x).data().chunks(s).enumerate() {
            let (mut best, mut at) = (f32::NEG_INFINITY, 0);
            for (j, &v) in ch.iter().enumerate() {
                if v > best {
                    best = v;
                    at = j;
                }
            }
            y.push(best);
            argmax.push(i * s + at);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, c], y), Op::GlobalMaxPool { x, argmax }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f32>() / v.numel() as f32;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Row-wise squared Euclidean distance of two `[N, D]` matrices -> `[N]`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Var {
        let sh = self.shape(a).to_vec();
        assert!(sh.len() == 2 && self.shape(b) == sh.as_slice(), "sq_dist expects equal [N, D]");
        let d = sh[1];
        let y = self
            .value(a)
            .data()
            .chunks(d)
            .zip(self.value(b).data().chunks(d))
            .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum())
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![sh[0]], y), Op::SqDist(a, b), rg)
    }

    /// Mean binary cross-entropy on logits; positive targets weighted by `pos_weight`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f32], pos_weight: f32) -> Var {
        let z = self.value(logits).data();
        assert_eq!(z.len(), targets.len(), "bce target count");
        let total: f32 = z
            .iter()
            .zip(targets)
            .map(|(&z, &t)| pos_weight * t * softplus(-z) + (1.0 - t) * softplus(z))
            .sum();
        let loss = total / z.len() as f32;
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
                pos_weight,
            },
            rg,
        )
    }

    /// Mean voxelwise softmax cross-entropy for `[N, C, ...]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Var {
        let sh = self.shape(logits).to_vec();
        let (n, c, s) = (sh[0], sh[1], spatial(&sh));
        assert_eq!(labels.len(), n * s, "label count");
        let p = channel_softmax(self.value(logits));
        let mut total = 0.0f64;
        for b in 0..n {
            for v in 0..s {
                let l = labels[b * s + v] as usize;
                assert!(l < c, "label {l} >= {c} classes");
                total -= (p[(b * c + l) * s + v].max(1e-12) as f64).ln();
            }
        }
        let loss = (total / (n * s) as f64) as f32;
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        )
    }

    /// `1 - mean_c soft Dice(c)` with softmax probabilities pooled over the batch.
    pub fn soft_dice_loss(&mut self, logits: Var, labels: &[u8]) -> Var {
        let sh = self.shape(logits).to_vec();
        let (n, c, s) = (sh[0], sh[1], spatial(&sh));
        assert_eq!(labels.len(), n * s, "label count");
        let p = channel_softmax(self.value(logits));
        let (inter, union) = dice_terms(&p, labels, n, c, s);
        let mean_dice: f32 = (0..c)
            .map(|ch| (2.0 * inter[ch] + DICE_EPS) / (union[ch] + DICE_EPS))
            .sum::<f32>()
            / c as f32;
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(1.0 - mean_dice),
            Op::SoftDice {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Op::Param(name), Some(g)) = (&node.op, g) {
                match params.get_mut(name) {
                    Some(acc) => acc.add_assign(g),
                    None => {
                        params.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        Gradients {
            per_node: grads,
            params,
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce() -> Tensor) {
        if self.rg(v) {
            let g = f();
            self.accumulate(grads, v, g);
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv { x, w, b, cfg } => self.conv_backward(*x, *w, *b, cfg, g, grads),
            Op::Linear { x, w, b } => {
                let (n, inp) = (self.shape(*x)[0], self.shape(*x)[1]);
                let out = self.shape(*w)[0];
                self.accumulate_with(grads, *x, || {
                    let mut dx = vec![0.0f32; n * inp];
                    gemm(n, out, inp, gd, (out, 1), self.value(*w).data(), (inp, 1), 0.0, &mut dx, (inp, 1));
                    Tensor::new(vec![n, inp], dx)
                });
                self.accumulate_with(grads, *w, || {
                    let mut dw = vec![0.0f32; out * inp];
                    gemm(out, n, inp, gd, (1, out), self.value(*x).data(), (inp, 1), 0.0, &mut dw, (inp, 1));
                    Tensor::new(vec![out, inp], dw)
                });
                if let Some(b) = b {
                    self.accumulate_with(grads, *b, || {
                        let mut db = vec![0.0f32; out];
                        for row in gd.chunks(out) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        Tensor::new(vec![out], db)
                    });
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate_with(grads, *b, || map(g, |v| -v));
            }
            Op::Mul(a, b) => {
                self.accumulate_with(grads, *a, || zip_map(g, self.value(*b), |gv, bv| gv * bv));
                self.accumulate_with(grads, *b, || zip_map(g, self.value(*a), |gv, av| gv * av));
            }
            Op::Scale(a, s) => self.accumulate_with(grads, *a, || map(g, |v| v * s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => self.accumulate_with(grads, *a, || {
                zip_map(g, self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })
            }),
            Op::Sigmoid(a) => {
                self.accumulate_with(grads, *a, || zip_map(g, &node.value, |gv, y| gv * y * (1.0 - y)))
            }
            Op::Tanh(a) => {
                self.accumulate_with(grads, *a, || zip_map(g, &node.value, |gv, y| gv * (1.0 - y * y)))
            }
            Op::Reshape(a) => self.accumulate_with(grads, *a, || {
                g.clone().reshape(self.shape(*a).to_vec())
            }),
            Op::Upsample { x, factors } => self.accumulate_with(grads, *x, || {
                let xs = self.shape(*x).to_vec();
                let [d, h, w] = dims3(&xs);
                let [fd, fh, fw] = *factors;
                let (od, oh, ow) = (d * fd, h * fh, w * fw);
                let mut dx = vec![0.0f32; xs.iter().product()];
                for c in 0..xs[0] * xs[1] {
                    for z in 0..od {
                        for yy in 0..oh {
                            let dst = ((c * d + z / fd) * h + yy / fh) * w;
                            let src = ((c * od + z) * oh + yy) * ow;
                            for xx in 0..ow {
                                dx[dst + xx / fw] += gd[src + xx];
                            }
                        }
                    }
                }
                Tensor::new(xs, dx)
            }),
            Op::ConcatChannels(xs) => {
                let c_total = g.shape()[1];
                let n = g.shape()[0];
                let s = spatial(g.shape());
                let mut off = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    self.accumulate_with(grads, v, || {
                        let mut dv = Vec::with_capacity(n * c * s);
                        for b in 0..n {
                            let start = (b * c_total + off) * s;
                            dv.extend_from_slice(&gd[start..start + c * s]);
                        }
                        Tensor::new(self.shape(v).to_vec(), dv)
                    });
                    off += c;
                }
            }
            Op::ConcatCols(xs) => {
                let (n, total) = (g.shape()[0], g.shape()[1]);
                let mut off = 0;
                for &v in xs {
                    let f = self.shape(v)[1];
                    self.accumulate_with(grads, v, || {
                        let mut dv = Vec::with_capacity(n * f);
                        for r in 0..n {
                            dv.extend_from_slice(&gd[r * total + off..r * total + off + f]);
                        }
                        Tensor::new(vec![n, f], dv)
                    });
                    off += f;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &v in xs {
                    let len = self.value(v).numel();
                    self.accumulate_with(grads, v, || {
                        Tensor::new(self.shape(v).to_vec(), gd[off..off + len].to_vec())
                    });
                    off += len;
                }
            }
            Op::SliceCols { x, start } => self.accumulate_with(grads, *x, || {
                let sh = self.shape(*x).to_vec();
                let len = g.shape()[1];
                let mut dx = vec![0.0f32; sh[0] * sh[1]];
                for r in 0..sh[0] {
                    dx[r * sh[1] + start..r * sh[1] + start + len]
                        .copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                Tensor::new(sh, dx)
            }),
            Op::SliceRows { x, start } => self.accumulate_with(grads, *x, || {
                let sh = self.shape(*x).to_vec();
                let mut dx = vec![0.0f32; sh[0] * sh[1]];
                let off = start * sh[1];
                dx[off..off + gd.len()].copy_from_slice(gd);
                Tensor::new(sh, dx)
            }),
            Op::GlobalAvgPool(x) => self.accumulate_with(grads, *x, || {
                let sh = self.shape(*x).to_vec();
                let s = spatial(&sh);
                let mut dx = Vec::with_capacity(sh.iter().product());
                for &gv in gd {
                    dx.extend(std::iter::repeat_n(gv / s as f32, s));
                }
                Tensor::new(sh, dx)
            }),
            Op::GlobalMaxPool { x, argmax } => self.accumulate_with(grads, *x, || {
                let sh = self.shape(*x).to_vec();
                let mut dx = vec![0.0f32; sh.iter().product()];
                for (&at, &gv) in argmax.iter().zip(gd) {
                    dx[at] += gv;
                }
                Tensor::new(sh, dx)
            }),
            Op::Sum(x) => self.accumulate_with(grads, *x, || {
                Tensor::full(self.shape(*x), gd[0])
            }),
            Op::Mean(x) => self.accumulate_with(grads, *x, || {
                let n = self.value(*x).numel() as f32;
                Tensor::full(self.shape(*x), gd[0] / n)
            }),
            Op::SqDist(a, b) => {
                let d = self.shape(*a)[1];
                let diff: Vec<f32> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .enumerate()
                    .map(|(j, (x, y))| 2.0 * (x - y) * gd[j / d])
                    .collect();
                let sh = self.shape(*a).to_vec();
                self.accumulate_with(grads, *b, || Tensor::new(sh.clone(), diff.iter().map(|v| -v).collect()));
                self.accumulate(grads, *a, Tensor::new(sh, diff));
            }
            Op::BceWithLogits {
                logits,
                targets,
                pos_weight,
            } => self.accumulate_with(grads, *logits, || {
                let z = self.value(*logits);
                let n = z.numel() as f32;
                let dz = z
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &t)| {
                        let s = sigmoid(z);
                        gd[0] * (pos_weight * t * (s - 1.0) + (1.0 - t) * s) / n
                    })
                    .collect();
                Tensor::new(z.shape().to_vec(), dz)
            }),
            Op::SoftmaxCe { logits, labels } => self.accumulate_with(grads, *logits, || {
                let z = self.value(*logits);
                let sh = z.shape();
                let (n, c, s) = (sh[0], sh[1], spatial(sh));
                let mut p = channel_softmax(z);
                let norm = gd[0] / (n * s) as f32;
                for b in 0..n {
                    for v in 0..s {
                        let l = labels[b * s + v] as usize;
                        p[(b * c + l) * s + v] -= 1.0;
                    }
                }
                p.iter_mut().for_each(|v| *v *= norm);
                Tensor::new(sh.to_vec(), p)
            }),
            Op::SoftDice { logits, labels } => self.accumulate_with(grads, *logits, || {
                let z = self.value(*logits);
                let sh = z.shape();
                let (n, c, s) = (sh[0], sh[1], spatial(sh));
                let p = channel_softmax(z);
                let (inter, union) = dice_terms(&p, labels, n, c, s);
                // dL/dp for each class, then through the softmax Jacobian.
                let mut dp = vec![0.0f32; p.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let u = union[ch] + DICE_EPS;
                        let num = 2.0 * inter[ch] + DICE_EPS;
                        for v in 0..s {
                            let gt = (labels[b * s + v] as usize == ch) as u8 as f32;
                            let dd = (2.0 * gt * u - num) / (u * u);
                            dp[(b * c + ch) * s + v] = -gd[0] * dd / c as f32;
                        }
                    }
                }
                let mut dz = vec![0.0f32; p.len()];
                for b in 0..n {
                    for v in 0..s {
                        let dot: f32 = (0..c)
                            .map(|ch| p[(b * c + ch) * s + v] * dp[(b * c + ch) * s + v])
                            .sum();
                        for ch in 0..c {
                            let idx = (b * c + ch) * s + v;
                            dz[idx] = p[idx] * (dp[idx] - dot);
                        }
                    }
                }
                Tensor::new(sh.to_vec(), dz)
            }),
        }
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        cfg: &ConvCfg,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, cin, cout) = (xs[0], xs[1], ws[0]);
        let dims = dims3(&xs);
        let out = cfg.out_dims(dims);
        let p = out.iter().product::<usize>();
        let k = cin * cfg.kernel_volume();
        let plane = out[1] * out[2];
        let in_len = cin * dims.iter().product::<usize>();
        let chunk = planes_per_chunk(k, plane);
        let gd = g.data();
        let (need_x, need_w) = (self.rg(x), self.rg(w));

        if let Some(b) = b {
            self.accumulate_with(grads, b, || {
                let mut db = vec![0.0f32; cout];
                for bi in 0..n {
                    for (co, d) in db.iter_mut().enumerate() {
                        let start = (bi * cout + co) * p;
                        *d += gd[start..start + p].iter().sum::<f32>();
                    }
                }
                Tensor::new(vec![cout], db)
            });
        }
        if !need_x && !need_w {
            return;
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut dw = vec![0.0f32; if need_w { cout * k } else { 0 }];
        let mut dx = vec![0.0f32; if need_x { xv.len() } else { 0 }];
        let buf = k * chunk.min(out[0]) * plane;
        let mut col = vec![0.0f32; buf];
        let mut dcol = vec![0.0f32; if need_x { buf } else { 0 }];
        for bi in 0..n {
            let xb = &xv[bi * in_len..(bi + 1) * in_len];
            let gb = &gd[bi * cout * p..(bi + 1) * cout * p];
            let mut z0 = 0;
            while z0 < out[0] {
                let z1 = (z0 + chunk).min(out[0]);
                let pc = (z1 - z0) * plane;
                let go = &gb[z0 * plane..];
                if need_w {
                    im2col(xb, cin, dims, cfg, out, z0, z1, &mut col[..k * pc]);
                    // dW[Cout, K] += dY[Cout, pc] · colᵀ[pc, K]
                    gemm(cout, pc, k, go, (p, 1), &col, (1, pc), 1.0, &mut dw, (k, 1));
                }
                if need_x {
                    // dcol[K, pc] = Wᵀ[K, Cout] · dY[Cout, pc]
                    gemm(k, cout, pc, wv, (1, k), go, (p, 1), 0.0, &mut dcol[..k * pc], (pc, 1));
                    col2im(
                        &dcol[..k * pc],
                        cin,
                        dims,
                        cfg,
                        out,
                        z0,
                        z1,
                        &mut dx[bi * in_len..(bi + 1) * in_len],
                    );
                }
                z0 = z1;
            }
        }
        if need_w {
            self.accumulate(grads, w, Tensor::new(ws, dw));
        }
        if need_x {
            self.accumulate(grads, x, Tensor::new(xs, dx));
        }
    }
}

fn dice_terms(p: &[f32], labels: &[u8], n: usize, c: usize, s: usize) -> (Vec<f32>, Vec<f32>) {
    let mut inter = vec![0.0f32; c];
    let mut union = vec![0.0f32; c];
    for b in 0..n {
        for v in 0..s {
            let l = labels[b * s + v] as usize;
            for ch in 0..c {
                let pv = p[(b * c + ch) * s + v];
                union[ch] += pv;
                if ch == l {
                    inter[ch] += pv;
                    union[ch] += 1.0;
                }
            }
        }
    }
    (inter, union)
}

fn map(t: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}
