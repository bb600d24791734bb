//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied during a forward pass. Parameters are
//! borrowed from their [`ParamStore`] for the lifetime of the graph, so a
//! forward/backward pass never copies weights; gradients come back as owned
//! tensors that an optimizer applies once the graph is dropped.

use rand::Rng;

use crate::conv::{cm_to_nchw, col2im, im2col, nchw_to_cm, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value<'p, T> {
    Owned(Tensor<T>),
    Borrowed(&'p Tensor<T>),
}

impl<T> Value<'_, T> {
    fn get(&self) -> &Tensor<T> {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Reshape { x: Var },
    Concat { a: Var, b: Var },
    Add { a: Var, b: Var },
    Gate { x: Var, gate: Var },
    LeakyRelu { x: Var, slope: T },
    Relu { x: Var },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Dropout { x: Var, mask: Vec<T> },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    AvgPool2 { x: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool, mean: Vec<T>, var: Vec<T> },
}

struct Node<'p, T> {
    value: Value<'p, T>,
    op: Op<T>,
    needs_grad: bool,
    binding: Option<(u64, ParamId)>,
}

/// Forward tape. See the module docs.
pub struct Graph<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
            binding: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input that does not receive gradients.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input leaf whose gradient is retained (see [`Gradients::wrt`]).
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a parameter. When `trainable` is false the parameter acts as a
    /// constant and no weight gradient is computed for it.
    pub fn param(&mut self, store: &'p ParamStore<T>, id: ParamId, trainable: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(store.get(id)),
            op: Op::Leaf,
            needs_grad: trainable,
            binding: Some((store.tag(), id)),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `x [n, in] * w[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 2, "linear expects [n, in] input");
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        assert_eq!(ws[1], fin, "linear weight/input mismatch");
        let mut y = vec![T::zero(); n * fout];
        gemm(n, fin, fout, self.value(x).data(), false, self.value(w).data(), true, T::zero(), &mut y);
        let bias = self.value(b).data();
        for row in y.chunks_mut(fout) {
            for (v, &bb) in row.iter_mut().zip(bias) {
                *v += bb;
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(Tensor::new(&[n, fout], y), Op::Linear { x, w, b }, ng)
    }

    /// Square-kernel convolution, `w [cout, cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (n, cin, h, wd) = self.value(x).dims4();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws[1], cin, "conv2d channel mismatch");
        let (cout, k) = (ws[0], ws[2]);
        let geom = ConvGeom::new(cin, h, wd, k, stride, pad);
        let sp = geom.out_spatial();
        let col = im2col(self.value(x).data(), n, &geom);
        let mut y = vec![T::zero(); cout * n * sp];
        gemm(cout, geom.rows(), n * sp, self.value(w).data(), false, &col, false, T::zero(), &mut y);
        add_row_bias(&mut y, self.value(b).data(), n * sp);
        let out = cm_to_nchw(&y, n, cout, sp);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(
            Tensor::new(&[n, cout, geom.out_h, geom.out_w], out),
            Op::Conv2d { x, w, b, geom },
            ng,
        )
    }

    /// Transposed convolution, `w [cin, cout, k, k]`. Output extent is
    /// `(h - 1) * stride - 2 * pad + k + out_pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Var {
        let (n, cin, h, wd) = self.value(x).dims4();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws[0], cin, "conv_transpose2d channel mismatch");
        let (cout, k) = (ws[1], ws[2]);
        let oh = (h - 1) * stride + k + out_pad - 2 * pad;
        let ow = (wd - 1) * stride + k + out_pad - 2 * pad;
        let geom = ConvGeom {
            channels: cout,
            in_h: oh,
            in_w: ow,
            kernel: k,
            stride,
            pad,
            out_h: h,
            out_w: wd,
        };
        debug_assert_eq!(ConvGeom::conv_out(oh, k, stride, pad), h);
        let hw = h * wd;
        let x_cm = nchw_to_cm(self.value(x).data(), n, cin, hw);
        let mut col = vec![T::zero(); geom.rows() * n * hw];
        gemm(geom.rows(), cin, n * hw, self.value(w).data(), true, &x_cm, false, T::zero(), &mut col);
        let mut out = vec![T::zero(); n * cout * oh * ow];
        col2im(&col, n, &geom, &mut out);
        let bias = self.value(b).data();
        for (i, plane) in out.chunks_mut(oh * ow).enumerate() {
            let bb = bias[i % cout];
            for v in plane {
                *v += bb;
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(
            Tensor::new(&[n, cout, oh, ow], out),
            Op::ConvTranspose2d { x, w, b, geom },
            ng,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape);
        let ng = self.ng(x);
        self.push(t, Op::Reshape { x }, ng)
    }

    /// Concatenates two NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat spatial mismatch");
        let hw = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            out.extend_from_slice(&self.value(a).data()[s * ca * hw..(s + 1) * ca * hw]);
            out.extend_from_slice(&self.value(b).data()[s * cb * hw..(s + 1) * cb * hw]);
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&[n, ca + cb, h, w], out), Op::Concat { a, b }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut t = self.value(a).clone();
        t.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add { a, b }, ng)
    }

    /// Multiplies every channel of `x [n,c,h,w]` by `gate [n,1,h,w]`.
    pub fn gate(&mut self, x: Var, gate: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(gate).dims4(), (n, 1, h, w), "gate shape");
        let hw = h * w;
        let g = self.value(gate).data();
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for s in 0..n {
            for ci in 0..c {
                let base = (s * c + ci) * hw;
                for p in 0..hw {
                    out[base + p] = xd[base + p] * g[s * hw + p];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gate);
        self.push(Tensor::new(&[n, c, h, w], out), Op::Gate { x, gate }, ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        let t = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        let ng = self.ng(x);
        self.push(t, Op::LeakyRelu { x, slope: s }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(T::zero()));
        let ng = self.ng(x);
        self.push(t, Op::Relu { x }, ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.tanh());
        let ng = self.ng(x);
        self.push(t, Op::Tanh { x }, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(t, Op::Sigmoid { x }, ng)
    }

    /// Inverted dropout with drop probability `p`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let mut t = self.value(x).clone();
        for (v, &m) in t.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        let ng = self.ng(x);
        self.push(t, Op::Dropout { x, mask }, ng)
    }

    /// 2x2 max pooling with stride 2 (odd trailing rows/cols are dropped).
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for plane in 0..n * c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = plane * h * w + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = plane * h * w + (2 * i + di) * w + 2 * j + dj;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    let o = plane * oh * ow + i * ow + j;
                    out[o] = xd[best];
                    argmax[o] = best;
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[n, c, oh, ow], out), Op::MaxPool2 { x, argmax }, ng)
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let t = avg_pool2(self.value(x));
        let ng = self.ng(x);
        self.push(t, Op::AvgPool2 { x }, ng)
    }

    /// Reverse pass seeded with `d root`. Only leaves keep their gradient.
    /// Per-channel batch normalization of `x [n,c,h,w]` or `x [n,c]`.
    /// With `running = None` the batch statistics are used (training);
    /// otherwise the given mean and variance are applied as a fixed affine map.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64, running: Option<(&[T], &[T])>) -> Var {
        let shape = self.shape(x).to_vec();
        let (n, c) = (shape[0], shape[1]);
        let hw: usize = shape[2..].iter().product();
        assert_eq!(self.shape(gamma), [c], "batch_norm gamma shape");
        assert_eq!(self.shape(beta), [c], "batch_norm beta shape");
        let xd = self.value(x).data();
        let count = T::lit((n * hw) as f64);
        let (mean, var): (Vec<T>, Vec<T>) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => (0..c)
                .map(|ci| {
                    let vals = || (0..n).flat_map(move |s| xd[(s * c + ci) * hw..(s * c + ci + 1) * hw].iter().copied());
                    let mu = vals().sum::<T>() / count;
                    let var = vals().map(|v| (v - mu) * (v - mu)).sum::<T>() / count;
                    (mu, var)
                })
                .unzip(),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::lit(eps)).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for s in 0..n {
            for ci in 0..c {
                for i in (s * c + ci) * hw..(s * c + ci + 1) * hw {
                    xhat[i] = (xd[i] - mean[ci]) * inv_std[ci];
                    out[i] = xhat[i] * g[ci] + b[ci];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats: running.is_none(), mean, var };
        self.push(Tensor::new(&shape, out), op, ng)
    }

    /// Mean and (biased) variance used by a [`Graph::batch_norm`] node.
    pub fn batch_norm_stats(&self, v: Var) -> Option<(&[T], &[T])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    pub fn backward(&self, root: Var, seed: Tensor<T>) -> Gradients<T> {
        self.backward_multi(vec![(root, seed)])
    }

    /// Reverse pass seeded at several outputs at once (e.g. auxiliary heads).
    pub fn backward_multi(&self, seeds: Vec<(Var, Tensor<T>)>) -> Gradients<T> {
        assert!(!seeds.is_empty(), "backward without seeds");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut top = 0;
        for (root, seed) in seeds {
            assert_eq!(seed.shape(), self.shape(root), "seed gradient shape");
            top = top.max(root.0);
            match grads[root.0].as_mut() {
                Some(g) => g.add_assign(&seed),
                None => grads[root.0] = Some(seed),
            }
        }
        for i in (0..=top).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(node, &dy, &mut grads);
        }
        Gradients {
            grads,
            bindings: self.nodes.iter().map(|n| n.binding).collect(),
        }
    }

    fn backward_node(&self, node: &Node<'p, T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = node.value.get();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, fin) = (xs[0], xs[1]);
                let fout = self.shape(*w)[0];
                if self.ng(*x) {
                    let mut dx = vec![T::zero(); n * fin];
                    gemm(n, fout, fin, dy.data(), false, self.value(*w).data(), false, T::zero(), &mut dx);
                    accumulate(grads, *x, Tensor::new(&[n, fin], dx));
                }
                if self.ng(*w) {
                    let mut dw = vec![T::zero(); fout * fin];
                    gemm(fout, n, fin, dy.data(), true, self.value(*x).data(), false, T::zero(), &mut dw);
                    accumulate(grads, *w, Tensor::new(&[fout, fin], dw));
                }
                if self.ng(*b) {
                    let mut db = vec![T::zero(); fout];
                    for row in dy.data().chunks(fout) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *b, Tensor::new(&[fout], db));
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (n, cout, _, _) = dy.dims4();
                let sp = geom.out_spatial();
                let dy_cm = nchw_to_cm(dy.data(), n, cout, sp);
                if self.ng(*b) {
                    accumulate(grads, *b, row_sums(&dy_cm, cout));
                }
                if self.ng(*w) {
                    let col = im2col(self.value(*x).data(), n, geom);
                    let mut dw = vec![T::zero(); cout * geom.rows()];
                    gemm(cout, n * sp, geom.rows(), &dy_cm, false, &col, true, T::zero(), &mut dw);
                    accumulate(grads, *w, Tensor::new(self.shape(*w), dw));
                }
                if self.ng(*x) {
                    let mut dcol = vec![T::zero(); geom.rows() * n * sp];
                    gemm(geom.rows(), cout, n * sp, self.value(*w).data(), true, &dy_cm, false, T::zero(), &mut dcol);
                    let mut dx = vec![T::zero(); self.value(*x).len()];
                    col2im(&dcol, n, geom, &mut dx);
                    accumulate(grads, *x, Tensor::new(self.shape(*x), dx));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (n, cin, h, wd) = self.value(*x).dims4();
                let cout = geom.channels;
                let hw = h * wd;
                if self.ng(*b) {
                    let mut db = vec![T::zero(); cout];
                    for (i, plane) in dy.data().chunks(geom.in_h * geom.in_w).enumerate() {
                        db[i % cout] += plane.iter().copied().sum();
                    }
                    accumulate(grads, *b, Tensor::new(&[cout], db));
                }
                let dcol = im2col(dy.data(), n, geom);
                if self.ng(*w) {
                    let x_cm = nchw_to_cm(self.value(*x).data(), n, cin, hw);
                    let mut dw = vec![T::zero(); cin * geom.rows()];
                    gemm(cin, n * hw, geom.rows(), &x_cm, false, &dcol, true, T::zero(), &mut dw);
                    accumulate(grads, *w, Tensor::new(self.shape(*w), dw));
                }
                if self.ng(*x) {
                    let mut dx_cm = vec![T::zero(); cin * n * hw];
                    gemm(cin, geom.rows(), n * hw, self.value(*w).data(), false, &dcol, false, T::zero(), &mut dx_cm);
                    let dx = cm_to_nchw(&dx_cm, n, cin, hw);
                    accumulate(grads, *x, Tensor::new(self.shape(*x), dx));
                }
            }
            Op::Reshape { x } => {
                let shape = self.shape(*x).to_vec();
                accumulate(grads, *x, dy.clone().reshape(&shape));
            }
            Op::Concat { a, b } => {
                let (n, ca, h, w) = self.value(*a).dims4();
                let cb = self.value(*b).dims4().1;
                let hw = h * w;
                let d = dy.data();
                if self.ng(*a) {
                    let mut da = Vec::with_capacity(n * ca * hw);
                    for s in 0..n {
                        let base = s * (ca + cb) * hw;
                        da.extend_from_slice(&d[base..base + ca * hw]);
                    }
                    accumulate(grads, *a, Tensor::new(&[n, ca, h, w], da));
                }
                if self.ng(*b) {
                    let mut db = Vec::with_capacity(n * cb * hw);
                    for s in 0..n {
                        let base = s * (ca + cb) * hw + ca * hw;
                        db.extend_from_slice(&d[base..base + cb * hw]);
                    }
                    accumulate(grads, *b, Tensor::new(&[n, cb, h, w], db));
                }
            }
            Op::Add { a, b } => {
                if self.ng(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, dy.clone());
                }
            }
            Op::Gate { x, gate } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let g = self.value(*gate).data();
                let xd = self.value(*x).data();
                let d = dy.data();
                if self.ng(*x) {
                    let mut dx = vec![T::zero(); d.len()];
                    for s in 0..n {
                        for ci in 0..c {
                            let base = (s * c + ci) * hw;
                            for p in 0..hw {
                                dx[base + p] = d[base + p] * g[s * hw + p];
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::new(&[n, c, h, w], dx));
                }
                if self.ng(*gate) {
                    let mut dg = vec![T::zero(); n * hw];
                    for s in 0..n {
                        for ci in 0..c {
                            let base = (s * c + ci) * hw;
                            for p in 0..hw {
                                dg[s * hw + p] += d[base + p] * xd[base + p];
                            }
                        }
                    }
                    accumulate(grads, *gate, Tensor::new(&[n, 1, h, w], dg));
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let dx = zip_map(dy, xv, |d, v| if v > T::zero() { d } else { d * *slope });
                accumulate(grads, *x, dx);
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let dx = zip_map(dy, xv, |d, v| if v > T::zero() { d } else { T::zero() });
                accumulate(grads, *x, dx);
            }
            Op::Tanh { x } => {
                let dx = zip_map(dy, y.data(), |d, t| d * (T::one() - t * t));
                accumulate(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let dx = zip_map(dy, y.data(), |d, s| d * s * (T::one() - s));
                accumulate(grads, *x, dx);
            }
            Op::Dropout { x, mask } => {
                let dx = zip_map(dy, mask, |d, m| d * m);
                accumulate(grads, *x, dx);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let dd = dx.data_mut();
                for (o, &src) in argmax.iter().enumerate() {
                    dd[src] += dy.data()[o];
                }
                accumulate(grads, *x, dx);
            }
            Op::AvgPool2 { x } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::lit(0.25);
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                let dd = dx.data_mut();
                for plane in 0..n * c {
                    for i in 0..oh {
                        for j in 0..ow {
                            let g = dy.data()[plane * oh * ow + i * ow + j] * quarter;
                            for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                dd[plane * h * w + (2 * i + di) * w + 2 * j + dj] += g;
                            }
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats, .. } => {
                let shape = self.shape(*x);
                let (n, c) = (shape[0], shape[1]);
                let hw: usize = shape[2..].iter().product();
                let g = self.value(*gamma).data();
                let d = dy.data();
                let idx = |ci: usize| (0..n).flat_map(move |s| (s * c + ci) * hw..(s * c + ci + 1) * hw);
                let sum_dy: Vec<T> = (0..c).map(|ci| idx(ci).map(|i| d[i]).sum()).collect();
                let sum_dy_xhat: Vec<T> = (0..c).map(|ci| idx(ci).map(|i| d[i] * xhat[i]).sum()).collect();
                if self.ng(*gamma) {
                    accumulate(grads, *gamma, Tensor::new(&[c], sum_dy_xhat.clone()));
                }
                if self.ng(*beta) {
                    accumulate(grads, *beta, Tensor::new(&[c], sum_dy.clone()));
                }
                if self.ng(*x) {
                    let m = T::lit((n * hw) as f64);
                    let mut dx = vec![T::zero(); d.len()];
                    for ci in 0..c {
                        let k = g[ci] * inv_std[ci];
                        for i in idx(ci) {
                            dx[i] = if *batch_stats {
                                k * (d[i] - sum_dy[ci] / m - xhat[i] * sum_dy_xhat[ci] / m)
                            } else {
                                k * d[i]
                            };
                        }
                    }
                    accumulate(grads, *x, Tensor::new(shape, dx));
                }
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    bindings: Vec<Option<(u64, ParamId)>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a leaf created by `input_with_grad` or `param`.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Per-parameter gradients for `store`, summed over every binding of the
    /// same parameter. Parameters not reached are `None`.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        let mut out: Vec<Option<Tensor<T>>> = (0..store.len()).map(|_| None).collect();
        for (g, b) in self.grads.iter().zip(&self.bindings) {
            if let (Some(g), Some((tag, id))) = (g, b) {
                if *tag != store.tag() {
                    continue;
                }
                match &mut out[id.0] {
                    Some(acc) => acc.add_assign(g),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// 2x2 average pooling on a plain tensor (no tape).
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let xd = x.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        for i in 0..oh {
            for j in 0..ow {
                let b = plane * h * w + 2 * i * w + 2 * j;
                out[plane * oh * ow + i * ow + j] = (xd[b] + xd[b + 1] + xd[b + w] + xd[b + w + 1]) * quarter;
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn zip_map<T: Scalar>(dy: &Tensor<T>, other: &[T], f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::new(
        dy.shape(),
        dy.data().iter().zip(other).map(|(&d, &o)| f(d, o)).collect(),
    )
}

fn add_row_bias<T: Scalar>(y: &mut [T], bias: &[T], cols: usize) {
    for (row, &b) in y.chunks_mut(cols).zip(bias) {
        for v in row {
            *v += b;
        }
    }
}

fn row_sums<T: Scalar>(m: &[T], rows: usize) -> Tensor<T> {
    let cols = m.len() / rows;
    Tensor::new(&[rows], m.chunks(cols).map(|r| r.iter().copied().sum()).collect())
}
