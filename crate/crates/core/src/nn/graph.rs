//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the tape order is already topological and
//! [`Graph::backward`] walks it in reverse.

use std::collections::HashMap;
use std::sync::Arc;

use super::conv::{col2im, conv_out_dim, im2col};
use super::scalar::{gemm, Layout};
use super::{Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifies a parameter tensor across graphs: `group` names the owning
/// network, `index` the tensor within it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub group: u16,
    pub index: u32,
}

/// Fixed linear map applied independently to every channel plane:
/// `out[o] = Σ weight · in[src]` over the entries of row `o`.
#[derive(Clone, Debug)]
pub struct SpatialMap<T> {
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    /// CSR row offsets, length `out_h * out_w + 1`.
    pub offsets: Vec<usize>,
    pub entries: Vec<(u32, T)>,
}

impl<T: Scalar> SpatialMap<T> {
    /// Build from a per-output-pixel list of `(source index, weight)`.
    pub fn from_rows(
        in_hw: (usize, usize),
        out_hw: (usize, usize),
        rows: Vec<Vec<(u32, T)>>,
    ) -> Self {
        assert_eq!(rows.len(), out_hw.0 * out_hw.1);
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut entries = Vec::new();
        offsets.push(0);
        for row in rows {
            for &(src, _) in &row {
                debug_assert!((src as usize) < in_hw.0 * in_hw.1);
            }
            entries.extend(row);
            offsets.push(entries.len());
        }
        Self {
            in_hw,
            out_hw,
            offsets,
            entries,
        }
    }

    fn apply_plane(&self, src: &[T], dst: &mut [T]) {
        for (o, d) in dst.iter_mut().enumerate() {
            let mut acc = T::zero();
            for &(s, w) in &self.entries[self.offsets[o]..self.offsets[o + 1]] {
                acc += w * src[s as usize];
            }
            *d = acc;
        }
    }

    fn transpose_plane(&self, dout: &[T], dsrc: &mut [T]) {
        for (o, &g) in dout.iter().enumerate() {
            for &(s, w) in &self.entries[self.offsets[o]..self.offsets[o + 1]] {
                dsrc[s as usize] += w * g;
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Clamp(Var, T, T),
    Concat(Var, Var),
    Upsample2x(Var),
    Reshape(Var),
    Spatial(Var, Arc<SpatialMap<T>>),
    ChannelAffine(Var, Arc<Vec<T>>),
    ChannelNormalize(Var, T),
    GlobalAvgPool(Var),
    Mse(Var, Var),
    ItemSumSq(Var),
    BceLogits {
        logits: Var,
        targets: Arc<Vec<T>>,
        mask: Option<Arc<Vec<T>>>,
    },
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Computation tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamKey, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input leaf whose gradient is wanted.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Bind a parameter tensor. Binding the same key twice returns the same
    /// node so gradients accumulate.
    pub fn param(&mut self, key: ParamKey, value: &Tensor<T>, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, trainable);
        self.params.insert(key, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let [n, ci, h, wd] = self.shape(x);
        let [co, wci, k, k2] = self.shape(w);
        assert_eq!(
            ci, wci,
            "conv2d: input has {ci} channels, kernel expects {wci}"
        );
        assert_eq!(k, k2, "conv2d: square kernels only");
        let oh = conv_out_dim(h, k, stride, pad);
        let ow = conv_out_dim(wd, k, stride, pad);
        let kk = ci * k * k;
        let p = oh * ow;
        let mut out = Tensor::zeros([n, co, oh, ow]);
        let mut col = vec![T::zero(); kk * p];
        {
            let xv = &self.nodes[x.0].value;
            let wv = self.nodes[w.0].value.data();
            let bias = b.map(|b| self.nodes[b.0].value.data());
            let od = out.data_mut();
            for i in 0..n {
                im2col(xv.item(i), ci, h, wd, k, stride, pad, oh, ow, &mut col);
                let dst = &mut od[i * co * p..(i + 1) * co * p];
                if let Some(bias) = bias {
                    for (c, row) in dst.chunks_mut(p).enumerate() {
                        row.fill(bias[c]);
                    }
                }
                let beta = if bias.is_some() { T::one() } else { T::zero() };
                gemm(
                    co,
                    kk,
                    p,
                    T::one(),
                    wv,
                    Layout::Normal,
                    &col,
                    Layout::Normal,
                    beta,
                    dst,
                );
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            ng,
        )
    }

    /// `y = x · Wᵀ + b` with `x: [n, in, 1, 1]`, `W: [out, in, 1, 1]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let [n, fin, h, wd] = self.shape(x);
        let fin = fin * h * wd;
        let [fout, wfin, _, _] = self.shape(w);
        assert_eq!(
            fin, wfin,
            "linear: input width {fin}, weight expects {wfin}"
        );
        let mut out = Tensor::zeros([n, fout, 1, 1]);
        {
            let od = out.data_mut();
            if let Some(b) = b {
                let bd = self.nodes[b.0].value.data();
                for row in od.chunks_mut(fout) {
                    row.copy_from_slice(bd);
                }
            }
            let beta = if b.is_some() { T::one() } else { T::zero() };
            gemm(
                n,
                fin,
                fout,
                T::one(),
                self.nodes[x.0].value.data(),
                Layout::Normal,
                self.nodes[w.0].value.data(),
                Layout::Transposed,
                beta,
                od,
            );
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    fn zip_op(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape(), "elementwise op: shape mismatch");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::from_vec(av.shape(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.nodes[a.0].value.map(f);
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(
            a,
            |x| if x > T::zero() { x } else { x * slope },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    /// Elementwise clamp; gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let [n, ca, h, w] = self.shape(a);
        let [nb, cb, hb, wb] = self.shape(b);
        assert_eq!((n, h, w), (nb, hb, wb), "concat: batch/spatial mismatch");
        let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
        for i in 0..n {
            data.extend_from_slice(self.nodes[a.0].value.item(i));
            data.extend_from_slice(self.nodes[b.0].value.item(i));
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(
            Tensor::from_vec([n, ca + cb, h, w], data),
            Op::Concat(a, b),
            ng,
        )
    }

    pub fn upsample2x(&mut self, a: Var) -> Var {
        let [n, c, h, w] = self.shape(a);
        let src = self.nodes[a.0].value.data();
        let mut out = vec![T::zero(); n * c * 4 * h * w];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
            for y in 0..2 * h {
                for x in 0..2 * w {
                    d[y * 2 * w + x] = s[(y / 2) * w + x / 2];
                }
            }
        }
        let ng = self.ng(a);
        self.push(
            Tensor::from_vec([n, c, 2 * h, 2 * w], out),
            Op::Upsample2x(a),
            ng,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: [usize; 4]) -> Var {
        let out = self.nodes[a.0].value.clone().reshaped(shape);
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    pub fn spatial(&mut self, a: Var, map: Arc<SpatialMap<T>>) -> Var {
        let [n, c, h, w] = self.shape(a);
        assert_eq!((h, w), map.in_hw, "spatial map: input size mismatch");
        let (oh, ow) = map.out_hw;
        let src = self.nodes[a.0].value.data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            map.apply_plane(
                &src[plane * h * w..(plane + 1) * h * w],
                &mut out[plane * oh * ow..(plane + 1) * oh * ow],
            );
        }
        let ng = self.ng(a);
        self.push(
            Tensor::from_vec([n, c, oh, ow], out),
            Op::Spatial(a, map),
            ng,
        )
    }

    /// `y[c] = x[c] · scale[c] + shift[c]` per channel.
    pub fn channel_affine(&mut self, a: Var, scale: Vec<T>, shift: Vec<T>) -> Var {
        let [n, c, h, w] = self.shape(a);
        assert_eq!(scale.len(), c);
        assert_eq!(shift.len(), c);
        let mut out = self.nodes[a.0].value.clone();
        for (pi, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            let ch = pi % c;
            for x in plane {
                *x = *x * scale[ch] + shift[ch];
            }
        }
        debug_assert_eq!(out.len(), n * c * h * w);
        let ng = self.ng(a);
        self.push(out, Op::ChannelAffine(a, Arc::new(scale)), ng)
    }

    /// Unit-normalize each pixel's channel vector: `x / sqrt(Σ_c x² + eps)`.
    pub fn channel_normalize(&mut self, a: Var, eps: T) -> Var {
        let [n, c, h, w] = self.shape(a);
        let hw = h * w;
        let mut out = self.nodes[a.0].value.clone();
        let d = out.data_mut();
        for i in 0..n {
            let item = &mut d[i * c * hw..(i + 1) * c * hw];
            for p in 0..hw {
                let mut ss = eps;
                for ch in 0..c {
                    ss += item[ch * hw + p] * item[ch * hw + p];
                }
                let inv = T::one() / ss.sqrt();
                for ch in 0..c {
                    item[ch * hw + p] *= inv;
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::ChannelNormalize(a, eps), ng)
    }

    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let [n, c, h, w] = self.shape(a);
        let inv = T::one() / T::from_usize(h * w).unwrap();
        let data = self
            .value(a)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let ng = self.ng(a);
        self.push(
            Tensor::from_vec([n, c, 1, 1], data),
            Op::GlobalAvgPool(a),
            ng,
        )
    }

    /// Mean squared difference over every element.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mse: shape mismatch");
        let s: T = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let v = s / T::from_usize(av.len()).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::scalar(v), Op::Mse(a, b), ng)
    }

    /// Batch mean of each item's squared L2 norm.
    pub fn item_sum_sq(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = T::from_usize(av.shape()[0]).unwrap();
        let s: T = av.data().iter().map(|&x| x * x).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s / n), Op::ItemSumSq(a), ng)
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `targets`,
    /// restricted to elements whose mask entry is non-zero.
    pub fn bce_logits(&mut self, logits: Var, targets: Vec<T>, mask: Option<Vec<T>>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.len(), targets.len(), "bce: target length mismatch");
        if let Some(m) = &mask {
            assert_eq!(m.len(), targets.len());
        }
        let mut s = T::zero();
        let mut count = T::zero();
        for (i, (&x, &t)) in lv.data().iter().zip(&targets).enumerate() {
            let m = mask.as_ref().map_or(T::one(), |m| m[i]);
            if m == T::zero() {
                continue;
            }
            s += m * (x.max(T::zero()) - x * t + (-x.abs()).exp().ln_1p());
            count += m;
        }
        let v = if count > T::zero() {
            s / count
        } else {
            T::zero()
        };
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(v),
            Op::BceLogits {
                logits,
                targets: Arc::new(targets),
                mask: mask.map(Arc::new),
            },
            ng,
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let v = av.data().iter().copied().sum::<T>() / T::from_usize(av.len()).unwrap();
        let ng = self.ng(a);
        self.push(Tensor::scalar(v), Op::Mean(a), ng)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward: loss must be a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let [n, ci, h, wd] = self.shape(x);
                let [co, _, k, _] = self.shape(w);
                let [_, _, oh, ow] = node.value.shape();
                let kk = ci * k * k;
                let p = oh * ow;
                let xv = self.value(x);
                let wv = self.value(w).data();
                let want_x = self.ng(x);
                let want_w = self.ng(w);
                let mut dx = want_x.then(|| Tensor::zeros([n, ci, h, wd]));
                let mut dw = want_w.then(|| Tensor::zeros([co, ci, k, k]));
                let mut col = vec![T::zero(); kk * p];
                let mut dcol = vec![T::zero(); kk * p];
                for i in 0..n {
                    let gi = &g.data()[i * co * p..(i + 1) * co * p];
                    if let Some(dw) = dw.as_mut() {
                        im2col(xv.item(i), ci, h, wd, k, stride, pad, oh, ow, &mut col);
                        gemm(
                            co,
                            p,
                            kk,
                            T::one(),
                            gi,
                            Layout::Normal,
                            &col,
                            Layout::Transposed,
                            T::one(),
                            dw.data_mut(),
                        );
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(
                            kk,
                            co,
                            p,
                            T::one(),
                            wv,
                            Layout::Transposed,
                            gi,
                            Layout::Normal,
                            T::zero(),
                            &mut dcol,
                        );
                        let l = ci * h * wd;
                        col2im(
                            &dcol,
                            ci,
                            h,
                            wd,
                            k,
                            stride,
                            pad,
                            oh,
                            ow,
                            &mut dx.data_mut()[i * l..(i + 1) * l],
                        );
                    }
                }
                if let Some(b) = b.filter(|&b| self.ng(b)) {
                    let mut db = Tensor::zeros(self.shape(b));
                    for (pi, plane) in g.data().chunks(p).enumerate() {
                        db.data_mut()[pi % co] += plane.iter().copied().sum::<T>();
                    }
                    self.accumulate(grads, b, db);
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, w, dw);
                }
            }
            &Op::Linear { x, w, b } => {
                let xs = self.shape(x);
                let n = xs[0];
                let fin = xs[1] * xs[2] * xs[3];
                let fout = self.shape(w)[0];
                if self.ng(x) {
                    let mut dx = Tensor::zeros(xs);
                    gemm(
                        n,
                        fout,
                        fin,
                        T::one(),
                        g.data(),
                        Layout::Normal,
                        self.value(w).data(),
                        Layout::Normal,
                        T::zero(),
                        dx.data_mut(),
                    );
                    self.accumulate(grads, x, dx);
                }
                if self.ng(w) {
                    let mut dw = Tensor::zeros(self.shape(w));
                    gemm(
                        fout,
                        n,
                        fin,
                        T::one(),
                        g.data(),
                        Layout::Transposed,
                        self.value(x).data(),
                        Layout::Normal,
                        T::zero(),
                        dw.data_mut(),
                    );
                    self.accumulate(grads, w, dw);
                }
                if let Some(b) = b.filter(|&b| self.ng(b)) {
                    let mut db = Tensor::zeros(self.shape(b));
                    for row in g.data().chunks(fout) {
                        for (d, &r) in db.data_mut().iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|x| -x));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.ng(a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(&g, &y)| g * y)
                        .collect();
                    self.accumulate(grads, a, Tensor::from_vec(g.shape(), d));
                }
                if self.ng(b) {
                    let d = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(&g, &x)| g * x)
                        .collect();
                    self.accumulate(grads, b, Tensor::from_vec(g.shape(), d));
                }
            }
            &Op::Scale(a, s) => self.accumulate(grads, a, g.map(|x| x * s)),
            &Op::LeakyRelu(a, slope) => {
                let d = g
                    .data()
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(&g, &x)| if x > T::zero() { g } else { g * slope })
                    .collect();
                self.accumulate(grads, a, Tensor::from_vec(g.shape(), d));
            }
            &Op::Sigmoid(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &y)| g * y * (T::one() - y))
                    .collect();
                self.accumulate(grads, a, Tensor::from_vec(g.shape(), d));
            }
            &Op::Tanh(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &y)| g * (T::one() - y * y))
                    .collect();
                self.accumulate(grads, a, Tensor::from_vec(g.shape(), d));
            }
            &Op::Clamp(a, lo, hi) => {
                let d = g
                    .data()
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(&g, &x)| if x >= lo && x <= hi { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, a, Tensor::from_vec(g.shape(), d));
            }
            &Op::Concat(a, b) => {
                let sa = self.shape(a);
                let sb = self.shape(b);
                let (la, lb) = (sa[1] * sa[2] * sa[3], sb[1] * sb[2] * sb[3]);
                let mut da = Vec::with_capacity(sa[0] * la);
                let mut db = Vec::with_capacity(sb[0] * lb);
                for chunk in g.data().chunks(la + lb) {
                    da.extend_from_slice(&chunk[..la]);
                    db.extend_from_slice(&chunk[la..]);
                }
                self.accumulate(grads, a, Tensor::from_vec(sa, da));
                self.accumulate(grads, b, Tensor::from_vec(sb, db));
            }
            &Op::Upsample2x(a) => {
                let [n, c, h, w] = self.shape(a);
                let mut d = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    let gs = &g.data()[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                    let dd = &mut d[plane * h * w..(plane + 1) * h * w];
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            dd[(y / 2) * w + x / 2] += gs[y * 2 * w + x];
                        }
                    }
                }
                self.accumulate(grads, a, Tensor::from_vec([n, c, h, w], d));
            }
            &Op::Reshape(a) => {
                let s = self.shape(a);
                self.accumulate(grads, a, g.clone().reshaped(s));
            }
            Op::Spatial(a, map) => {
                let s = self.shape(*a);
                let (h, w) = map.in_hw;
                let (oh, ow) = map.out_hw;
                let mut d = vec![T::zero(); s.iter().product()];
                for plane in 0..s[0] * s[1] {
                    map.transpose_plane(
                        &g.data()[plane * oh * ow..(plane + 1) * oh * ow],
                        &mut d[plane * h * w..(plane + 1) * h * w],
                    );
                }
                self.accumulate(grads, *a, Tensor::from_vec(s, d));
            }
            Op::ChannelAffine(a, scale) => {
                let [_, c, h, w] = self.shape(*a);
                let mut d = g.clone();
                for (pi, plane) in d.data_mut().chunks_mut(h * w).enumerate() {
                    let s = scale[pi % c];
                    for x in plane {
                        *x *= s;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            &Op::ChannelNormalize(a, eps) => {
                let [n, c, h, w] = self.shape(a);
                let hw = h * w;
                let xv = self.value(a).data();
                let y = node.value.data();
                let mut d = vec![T::zero(); n * c * hw];
                for i in 0..n {
                    let base = i * c * hw;
                    for p in 0..hw {
                        let mut ss = eps;
                        let mut dot = T::zero();
                        for ch in 0..c {
                            let j = base + ch * hw + p;
                            ss += xv[j] * xv[j];
                            dot += g.data()[j] * y[j];
                        }
                        let inv = T::one() / ss.sqrt();
                        for ch in 0..c {
                            let j = base + ch * hw + p;
                            d[j] = (g.data()[j] - y[j] * dot) * inv;
                        }
                    }
                }
                self.accumulate(grads, a, Tensor::from_vec([n, c, h, w], d));
            }
            &Op::GlobalAvgPool(a) => {
                let [n, c, h, w] = self.shape(a);
                let inv = T::one() / T::from_usize(h * w).unwrap();
                let mut d = Vec::with_capacity(n * c * h * w);
                for &gv in g.data() {
                    d.extend(std::iter::repeat_n(gv * inv, h * w));
                }
                self.accumulate(grads, a, Tensor::from_vec([n, c, h, w], d));
            }
            &Op::Mse(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let k = g.value() * T::from_f64_lossy(2.0) / T::from_usize(av.len()).unwrap();
                let diff: Vec<T> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&x, &y)| (x - y) * k)
                    .collect();
                if self.ng(b) {
                    let neg = diff.iter().map(|&x| -x).collect();
                    self.accumulate(grads, b, Tensor::from_vec(bv.shape(), neg));
                }
                self.accumulate(grads, a, Tensor::from_vec(av.shape(), diff));
            }
            &Op::ItemSumSq(a) => {
                let av = self.value(a);
                let k = g.value() * T::from_f64_lossy(2.0) / T::from_usize(av.shape()[0]).unwrap();
                self.accumulate(grads, a, av.map(|x| x * k));
            }
            Op::BceLogits {
                logits,
                targets,
                mask,
            } => {
                let lv = self.value(*logits);
                let count: T = match mask {
                    Some(m) => m.iter().copied().sum(),
                    None => T::from_usize(lv.len()).unwrap(),
                };
                if count == T::zero() {
                    return;
                }
                let k = g.value() / count;
                let d = lv
                    .data()
                    .iter()
                    .zip(targets.iter())
                    .enumerate()
                    .map(|(i, (&x, &t))| {
                        let m = mask.as_ref().map_or(T::one(), |m| m[i]);
                        (sigmoid(x) - t) * m * k
                    })
                    .collect();
                self.accumulate(grads, *logits, Tensor::from_vec(lv.shape(), d));
            }
            &Op::Mean(a) => {
                let s = self.shape(a);
                let k = g.value() / T::from_usize(s.iter().product()).unwrap();
                self.accumulate(grads, a, Tensor::full(s, k));
            }
        }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamKey, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, key: ParamKey) -> Option<&Tensor<T>> {
        self.params.get(&key).and_then(|&v| self.get(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of `d loss / d input` for a graph builder.
    fn check(shape: [usize; 4], seed: u64, build: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = rand_tensor(&mut rng, shape);
        let mut g = Graph::new();
        let x = g.input(x0.clone());
        let loss = build(&mut g, x);
        let grads = g.backward(loss);
        let analytic = grads.get(x).expect("input gradient").clone();
        let h = 1e-5;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.input(xp);
                let l = build(&mut g, x);
                g.value(l).value()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
            assert!(err < 1e-5, "element {i}: analytic {a} vs fd {fd}");
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = rand_tensor(&mut rng, [3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, [1, 3, 1, 1]);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let (w, b) = (w.clone(), b.clone());
            check([2, 2, 5, 6], 1, move |g, x| {
                let wv = g.param(ParamKey { group: 0, index: 0 }, &w, true);
                let bv = g.param(ParamKey { group: 0, index: 1 }, &b, true);
                let y = g.conv2d(x, wv, Some(bv), stride, pad);
                let y = g.tanh(y);
                g.mean(y)
            });
        }
    }

    #[test]
    fn conv_weight_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, [2, 2, 4, 4]);
        check([3, 2, 3, 3], 5, move |g, w| {
            let xv = g.constant(x.clone());
            let y = g.conv2d(xv, w, None, 2, 1);
            let t = g.constant(Tensor::zeros(g.shape(y)));
            g.mse(y, t)
        });
    }

    #[test]
    fn linear_and_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = rand_tensor(&mut rng, [5, 6, 1, 1]);
        let b = rand_tensor(&mut rng, [1, 5, 1, 1]);
        check([3, 6, 1, 1], 2, move |g, x| {
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            let y = g.linear(x, wv, Some(bv));
            let y = g.leaky_relu(y, 0.2);
            let s = g.sigmoid(y);
            g.bce_logits(s, [1.0, 0.0, 1.0, 0.0, 1.0].repeat(3), None)
        });
    }

    #[test]
    fn structural_ops() {
        check([2, 3, 4, 4], 7, |g, x| {
            let up = g.upsample2x(x);
            let k = x_kernel(g);
            let y = g.conv2d(up, k, None, 2, 1);
            let cat = g.concat_channels(y, x);
            let n = g.channel_normalize(cat, 1e-3);
            let p = g.global_avg_pool(n);
            let r = g.reshape(p, [1, 12, 1, 1]);
            let sq = g.mul(r, r);
            let s = g.item_sum_sq(sq);
            let aff = g.channel_affine(x, vec![0.5, -1.0, 2.0], vec![0.1, 0.2, 0.3]);
            let m = g.mean(aff);
            let m = g.mul(m, m);
            g.add(s, m)
        });
    }

    fn x_kernel(g: &mut Graph<f64>) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = rand_tensor(&mut rng, [3, 3, 3, 3]);
        g.constant(w)
    }

    #[test]
    fn spatial_map_and_masked_bce() {
        let rows = (0..6)
            .map(|o| vec![((o % 4) as u32, 0.5), (((o + 1) % 4) as u32, -0.25)])
            .collect();
        let map = Arc::new(SpatialMap::from_rows((2, 2), (2, 3), rows));
        check([2, 2, 2, 2], 8, move |g, x| {
            let y = g.spatial(x, map.clone());
            let y = g.reshape(y, [2, 12, 1, 1]);
            let mut mask = vec![1.0; 24];
            mask[3] = 0.0;
            mask[17] = 0.0;
            g.bce_logits(y, (0..24).map(|i| (i % 2) as f64).collect(), Some(mask))
        });
    }

    #[test]
    fn clamp_and_sub() {
        check([1, 1, 3, 3], 12, |g, x| {
            let c = g.clamp(x, -0.5, 0.5);
            let k = g.constant(Tensor::full([1, 1, 3, 3], 0.2));
            let d = g.sub(k, c);
            let s = g.scale(d, 3.0);
            g.mse(s, k)
        });
    }

    #[test]
    fn repeated_param_binding_accumulates() {
        let w = Tensor::from_vec([1, 1, 1, 1], vec![2.0f64]);
        let mut g = Graph::new();
        let key = ParamKey { group: 1, index: 0 };
        let a = g.param(key, &w, true);
        let b = g.param(key, &w, true);
        assert_eq!(a, b);
        let y = g.mul(a, b);
        let l = g.mean(y);
        let grads = g.backward(l);
        assert_eq!(grads.param(key).unwrap().data(), &[4.0]);
    }
}
