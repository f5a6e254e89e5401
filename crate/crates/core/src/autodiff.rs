//! A small reverse-mode tape covering the operator set of the toy UNet.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the node
//! list is a valid topological order for backpropagation. Parameters are
//! borrowed from the owning model rather than copied into the tape.

use crate::tensor::{gemm, Float, Tensor, View};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Input,
    Param(usize),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Add(NodeId, NodeId),
    AddChannel {
        x: NodeId,
        v: NodeId,
    },
    Silu(NodeId),
    Scale(NodeId, f64),
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        // (mean, rstd) per (batch, group)
        stats: Vec<(f64, f64)>,
    },
    ToTokens(NodeId),
    FromTokens {
        x: NodeId,
        h: usize,
        w: usize,
    },
    Upsample2x(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        injected: bool,
    },
}

struct Node<T> {
    value: Option<Tensor<T>>,
    // Softmax output for attention nodes (possibly an injected map).
    aux: Option<Tensor<T>>,
    op: Op,
    grad: bool,
}

pub struct Graph<'p, T: Float> {
    params: &'p [Tensor<T>],
    params_grad: bool,
    nodes: Vec<Node<T>>,
}

pub struct Gradients<T> {
    node_grads: Vec<Option<Tensor<T>>>,
    param_grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.node_grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.node_grads[id.0].take()
    }

    pub fn into_param_grads(self) -> Vec<Option<Tensor<T>>> {
        self.param_grads
    }
}

fn silu<T: Float>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

fn silu_grad<T: Float>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Float>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let n = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let out = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *o = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Float>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let n = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<'p, T: Float> Graph<'p, T> {
    /// `params_grad` controls whether parameter leaves participate in
    /// backpropagation (training) or are treated as constants (inference and
    /// embedding gradients).
    pub fn new(params: &'p [Tensor<T>], params_grad: bool) -> Self {
        Graph {
            params,
            params_grad,
            nodes: Vec::with_capacity(128),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op, grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Some(value),
            aux: None,
            op,
            grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn g(&self, id: NodeId) -> bool {
        self.nodes[id.0].grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        let node = &self.nodes[id.0];
        match node.op {
            Op::Param(i) => &self.params[i],
            _ => node.value.as_ref().expect("node value"),
        }
    }

    /// Softmax probabilities `[batch, heads, queries, keys]` of an attention node.
    pub fn attention_probs(&self, id: NodeId) -> &Tensor<T> {
        self.nodes[id.0]
            .aux
            .as_ref()
            .expect("attention_probs called on a non-attention node")
    }

    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Input, requires_grad)
    }

    pub fn param(&mut self, index: usize) -> NodeId {
        self.nodes.push(Node {
            value: None,
            aux: None,
            op: Op::Param(index),
            grad: self.params_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let (bs, ci, h, wd) = dims4(xv.shape());
        let (co, ci2, k, k2) = dims4(wv.shape());
        assert_eq!(ci, ci2, "conv input channels");
        assert_eq!(k, k2, "square kernels only");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let kk = ci * k * k;
        let n = ho * wo;
        let mut out = vec![T::zero(); bs * co * n];
        let mut cols = vec![T::zero(); kk * n];
        for bi in 0..bs {
            im2col(
                &xv.data()[bi * ci * h * wd..(bi + 1) * ci * h * wd],
                ci,
                h,
                wd,
                k,
                stride,
                pad,
                ho,
                wo,
                &mut cols,
            );
            let ob = &mut out[bi * co * n..(bi + 1) * co * n];
            for (c, row) in ob.chunks_mut(n).enumerate() {
                row.fill(bv.data()[c]);
            }
            gemm(
                T::one(),
                wv.data(),
                View::dense(0, co, kk),
                &cols,
                View::dense(0, kk, n),
                T::one(),
                ob,
                View::dense(0, co, n),
            );
        }
        let grad = self.g(x) || self.g(w) || self.g(b);
        self.push(
            Tensor::from_vec(&[bs, co, ho, wo], out),
            Op::Conv2d { x, w, b, stride, pad },
            grad,
        )
    }

    /// `y = x @ w^T + b` over the last axis; `w` is `[out, in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let xv = self.value(x);
        let wv = self.value(w);
        let (dout, din) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(*xv.shape().last().unwrap(), din, "linear input width");
        let m = xv.len() / din;
        let mut out = vec![T::zero(); m * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(
            T::one(),
            xv.data(),
            View::dense(0, m, din),
            wv.data(),
            View::dense(0, dout, din).t(),
            T::one(),
            &mut out,
            View::dense(0, m, dout),
        );
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let grad = self.g(x) || self.g(w) || b.is_some_and(|b| self.g(b));
        self.push(Tensor::from_vec(&shape, out), Op::Linear { x, w, b }, grad)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "add shapes");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let shape = av.shape().to_vec();
        let grad = self.g(a) || self.g(b);
        self.push(Tensor::from_vec(&shape, data), Op::Add(a, b), grad)
    }

    /// `x[b, c, :, :] + v[b, c]`.
    pub fn add_channel(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let xv = self.value(x);
        let vv = self.value(v);
        let (bs, c, h, w) = dims4(xv.shape());
        assert_eq!(vv.shape(), &[bs, c], "channel bias shape");
        let hw = h * w;
        let mut data = xv.data().to_vec();
        for (i, plane) in data.chunks_mut(hw).enumerate() {
            let add = vv.data()[i];
            plane.iter_mut().for_each(|p| *p += add);
        }
        let shape = xv.shape().to_vec();
        let grad = self.g(x) || self.g(v);
        self.push(Tensor::from_vec(&shape, data), Op::AddChannel { x, v }, grad)
    }

    /// `c * x` for a constant `c`.
    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let xv = self.value(x);
        let k = T::from(c).expect("finite scale");
        let data = xv.data().iter().map(|&v| v * k).collect();
        let shape = xv.shape().to_vec();
        let grad = self.g(x);
        self.push(Tensor::from_vec(&shape, data), Op::Scale(x, c), grad)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| silu(v)).collect();
        let shape = xv.shape().to_vec();
        let grad = self.g(x);
        self.push(Tensor::from_vec(&shape, data), Op::Silu(x), grad)
    }

    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f64,
    ) -> NodeId {
        let xv = self.value(x);
        let (bs, c, h, w) = dims4(xv.shape());
        assert_eq!(c % groups, 0, "channels divisible by groups");
        let gs = c / groups * h * w;
        let hw = h * w;
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut stats = Vec::with_capacity(bs * groups);
        for (gi, (src, dst)) in xv.data().chunks(gs).zip(out.chunks_mut(gs)).enumerate() {
            let mean = src.iter().map(|v| v.as_f64()).sum::<f64>() / gs as f64;
            let var = src
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / gs as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            stats.push((mean, rstd));
            let (m, r) = (T::of(mean), T::of(rstd));
            let c0 = (gi % groups) * (c / groups);
            for (j, (s, d)) in src.iter().zip(dst.iter_mut()).enumerate() {
                let ch = c0 + j / hw;
                *d = (*s - m) * r * gm[ch] + bt[ch];
            }
        }
        let shape = xv.shape().to_vec();
        let grad = self.g(x) || self.g(gamma) || self.g(beta);
        self.push(
            Tensor::from_vec(&shape, out),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            grad,
        )
    }

    /// `[B, C, H, W] -> [B, H*W, C]`.
    pub fn to_tokens(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (bs, c, h, w) = dims4(xv.shape());
        let out = permute_chw_to_hwc(xv.data(), bs, c, h * w);
        let grad = self.g(x);
        self.push(Tensor::from_vec(&[bs, h * w, c], out), Op::ToTokens(x), grad)
    }

    /// `[B, H*W, C] -> [B, C, H, W]`.
    pub fn from_tokens(&mut self, x: NodeId, h: usize, w: usize) -> NodeId {
        let xv = self.value(x);
        let (bs, n, c) = dims3(xv.shape());
        assert_eq!(n, h * w, "token count");
        let out = permute_chw_to_hwc(xv.data(), bs, n, c);
        let grad = self.g(x);
        self.push(
            Tensor::from_vec(&[bs, c, h, w], out),
            Op::FromTokens { x, h, w },
            grad,
        )
    }

    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (bs, c, h, w) = dims4(xv.shape());
        let mut out = vec![T::zero(); bs * c * 4 * h * w];
        for (plane, dst) in xv.data().chunks(h * w).zip(out.chunks_mut(4 * h * w)) {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = plane[(y / 2) * w + xx / 2];
                }
            }
        }
        let grad = self.g(x);
        self.push(
            Tensor::from_vec(&[bs, c, 2 * h, 2 * w], out),
            Op::Upsample2x(x),
            grad,
        )
    }

    /// Multi-head scaled dot-product attention over `[B, N, C]` inputs.
    ///
    /// When `replacement` is given (`[heads, Nq, Nk]`, applied to every batch
    /// element) it stands in for the softmax output; the value path still
    /// uses `v` and no gradient flows into `q` or `k`.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        replacement: Option<&Tensor<T>>,
    ) -> NodeId {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let (bs, nq, c) = dims3(qv.shape());
        let (_, nk, _) = dims3(kv.shape());
        assert_eq!(kv.shape(), vv.shape(), "key/value shapes");
        assert_eq!(c % heads, 0, "channels divisible by heads");
        let dh = c / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); bs * heads * nq * nk];
        let mut out = vec![T::zero(); bs * nq * c];
        for b in 0..bs {
            for hh in 0..heads {
                let p_off = ((b * heads) + hh) * nq * nk;
                let pmap = &mut probs[p_off..p_off + nq * nk];
                if let Some(rep) = replacement {
                    pmap.copy_from_slice(&rep.data()[hh * nq * nk..(hh + 1) * nq * nk]);
                } else {
                    let qview = View {
                        offset: b * nq * c + hh * dh,
                        rows: nq,
                        cols: dh,
                        rs: c,
                        cs: 1,
                    };
                    let kview = View {
                        offset: b * nk * c + hh * dh,
                        rows: nk,
                        cols: dh,
                        rs: c,
                        cs: 1,
                    };
                    gemm(
                        scale,
                        qv.data(),
                        qview,
                        kv.data(),
                        kview.t(),
                        T::zero(),
                        pmap,
                        View::dense(0, nq, nk),
                    );
                    for row in pmap.chunks_mut(nk) {
                        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                        let mut sum = T::zero();
                        for r in row.iter_mut() {
                            *r = (*r - max).exp();
                            sum += *r;
                        }
                        let inv = T::one() / sum;
                        row.iter_mut().for_each(|r| *r *= inv);
                    }
                }
                let vview = View {
                    offset: b * nk * c + hh * dh,
                    rows: nk,
                    cols: dh,
                    rs: c,
                    cs: 1,
                };
                let oview = View {
                    offset: b * nq * c + hh * dh,
                    rows: nq,
                    cols: dh,
                    rs: c,
                    cs: 1,
                };
                gemm(
                    T::one(),
                    pmap,
                    View::dense(0, nq, nk),
                    vv.data(),
                    vview,
                    T::zero(),
                    &mut out,
                    oview,
                );
            }
        }
        let injected = replacement.is_some();
        let grad = self.g(v) || (!injected && (self.g(q) || self.g(k)));
        let id = self.push(
            Tensor::from_vec(&[bs, nq, c], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                injected,
            },
            grad,
        );
        self.nodes[id.0].aux = Some(Tensor::from_vec(&[bs, heads, nq, nk], probs));
        id
    }

    /// Vector-Jacobian product of `root` against `seed` (same shape as root).
    pub fn backward(&self, root: NodeId, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(self.value(root).shape(), seed.shape(), "seed shape");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<Tensor<T>>> = (0..self.params.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Input => {
                    grads[idx] = Some(gy);
                }
                Op::Param(i) => {
                    accumulate(&mut param_grads[*i], gy);
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    self.conv2d_backward(&gy, *x, *w, *b, *stride, *pad, &mut grads);
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (dout, din) = (wv.shape()[0], wv.shape()[1]);
                    let m = xv.len() / din;
                    if self.g(*x) {
                        let mut dx = vec![T::zero(); m * din];
                        gemm(
                            T::one(),
                            gy.data(),
                            View::dense(0, m, dout),
                            wv.data(),
                            View::dense(0, dout, din),
                            T::zero(),
                            &mut dx,
                            View::dense(0, m, din),
                        );
                        self.acc(&mut grads, *x, Tensor::from_vec(xv.shape(), dx));
                    }
                    if self.g(*w) {
                        let mut dw = vec![T::zero(); dout * din];
                        gemm(
                            T::one(),
                            gy.data(),
                            View::dense(0, m, dout).t(),
                            xv.data(),
                            View::dense(0, m, din),
                            T::zero(),
                            &mut dw,
                            View::dense(0, dout, din),
                        );
                        self.acc(&mut grads, *w, Tensor::from_vec(&[dout, din], dw));
                    }
                    if let Some(b) = b {
                        if self.g(*b) {
                            let mut db = vec![T::zero(); dout];
                            for row in gy.data().chunks(dout) {
                                for (d, &r) in db.iter_mut().zip(row) {
                                    *d += r;
                                }
                            }
                            self.acc(&mut grads, *b, Tensor::from_vec(&[dout], db));
                        }
                    }
                }
                Op::Add(a, b) => {
                    if self.g(*b) {
                        self.acc(&mut grads, *b, gy.clone());
                    }
                    if self.g(*a) {
                        self.acc(&mut grads, *a, gy);
                    }
                }
                Op::AddChannel { x, v } => {
                    if self.g(*v) {
                        let (bs, c, h, w) = dims4(gy.shape());
                        let dv = gy
                            .data()
                            .chunks(h * w)
                            .map(|p| p.iter().copied().sum::<T>())
                            .collect();
                        self.acc(&mut grads, *v, Tensor::from_vec(&[bs, c], dv));
                    }
                    if self.g(*x) {
                        self.acc(&mut grads, *x, gy);
                    }
                }
                Op::Scale(x, c) => {
                    let k = T::from(*c).expect("finite scale");
                    let dx = gy.data().iter().map(|&g| g * k).collect();
                    self.acc(&mut grads, *x, Tensor::from_vec(gy.shape(), dx));
                }
                Op::Silu(x) => {
                    let xv = self.value(*x);
                    let dx = xv
                        .data()
                        .iter()
                        .zip(gy.data())
                        .map(|(&xi, &g)| g * silu_grad(xi))
                        .collect();
                    self.acc(&mut grads, *x, Tensor::from_vec(xv.shape(), dx));
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    stats,
                } => {
                    self.group_norm_backward(&gy, *x, *gamma, *beta, *groups, stats, &mut grads);
                }
                Op::ToTokens(x) => {
                    let (bs, n, c) = dims3(gy.shape());
                    let dx = permute_chw_to_hwc(gy.data(), bs, n, c);
                    let shape = self.value(*x).shape().to_vec();
                    self.acc(&mut grads, *x, Tensor::from_vec(&shape, dx));
                }
                Op::FromTokens { x, h, w } => {
                    let (bs, c, _, _) = dims4(gy.shape());
                    let dx = permute_chw_to_hwc(gy.data(), bs, c, h * w);
                    self.acc(&mut grads, *x, Tensor::from_vec(&[bs, h * w, c], dx));
                }
                Op::Upsample2x(x) => {
                    let xv = self.value(*x);
                    let (_, _, h, w) = dims4(xv.shape());
                    let mut dx = vec![T::zero(); xv.len()];
                    for (src, dst) in gy.data().chunks(4 * h * w).zip(dx.chunks_mut(h * w)) {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                            }
                        }
                    }
                    self.acc(&mut grads, *x, Tensor::from_vec(xv.shape(), dx));
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    injected,
                } => {
                    let probs = node.aux.as_ref().expect("attention probs");
                    self.attention_backward(&gy, probs, *q, *k, *v, *heads, *injected, &mut grads);
                }
            }
        }
        Gradients {
            node_grads: grads,
            param_grads,
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
        if self.g(id) {
            accumulate(&mut grads[id.0], g);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        gy: &Tensor<T>,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let (bs, ci, h, wd) = dims4(xv.shape());
        let (co, _, k, _) = dims4(wv.shape());
        let (_, _, ho, wo) = dims4(gy.shape());
        let kk = ci * k * k;
        let n = ho * wo;
        let need_x = self.g(x);
        let need_w = self.g(w);
        let mut dw = vec![T::zero(); if need_w { co * kk } else { 0 }];
        let mut dx = vec![T::zero(); if need_x { xv.len() } else { 0 }];
        let mut cols = vec![T::zero(); kk * n];
        for bi in 0..bs {
            let gb = &gy.data()[bi * co * n..(bi + 1) * co * n];
            if need_w {
                im2col(
                    &xv.data()[bi * ci * h * wd..(bi + 1) * ci * h * wd],
                    ci,
                    h,
                    wd,
                    k,
                    stride,
                    pad,
                    ho,
                    wo,
                    &mut cols,
                );
                gemm(
                    T::one(),
                    gb,
                    View::dense(0, co, n),
                    &cols,
                    View::dense(0, kk, n).t(),
                    T::one(),
                    &mut dw,
                    View::dense(0, co, kk),
                );
            }
            if need_x {
                gemm(
                    T::one(),
                    wv.data(),
                    View::dense(0, co, kk).t(),
                    gb,
                    View::dense(0, co, n),
                    T::zero(),
                    &mut cols,
                    View::dense(0, kk, n),
                );
                col2im_add(
                    &cols,
                    ci,
                    h,
                    wd,
                    k,
                    stride,
                    pad,
                    ho,
                    wo,
                    &mut dx[bi * ci * h * wd..(bi + 1) * ci * h * wd],
                );
            }
        }
        if need_w {
            self.acc(grads, w, Tensor::from_vec(wv.shape(), dw));
        }
        if self.g(b) {
            let mut db = vec![T::zero(); co];
            for (i, plane) in gy.data().chunks(n).enumerate() {
                db[i % co] += plane.iter().copied().sum::<T>();
            }
            self.acc(grads, b, Tensor::from_vec(&[co], db));
        }
        if need_x {
            self.acc(grads, x, Tensor::from_vec(xv.shape(), dx));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn group_norm_backward(
        &self,
        gy: &Tensor<T>,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        stats: &[(f64, f64)],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xv = self.value(x);
        let (_, c, h, w) = dims4(xv.shape());
        let hw = h * w;
        let cg = c / groups;
        let gs = cg * hw;
        let gm = self.value(gamma).data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx = vec![T::zero(); xv.len()];
        for (gi, ((src, g), dst)) in xv
            .data()
            .chunks(gs)
            .zip(gy.data().chunks(gs))
            .zip(dx.chunks_mut(gs))
            .enumerate()
        {
            let (mean, rstd) = stats[gi];
            let (m, r) = (T::of(mean), T::of(rstd));
            let c0 = (gi % groups) * cg;
            let mut sum_dxh = T::zero();
            let mut sum_dxh_xh = T::zero();
            for j in 0..gs {
                let ch = c0 + j / hw;
                let xh = (src[j] - m) * r;
                dgamma[ch] += g[j] * xh;
                dbeta[ch] += g[j];
                let dxh = g[j] * gm[ch];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh;
            }
            let inv_n = T::one() / T::of(gs as f64);
            let mean_dxh = sum_dxh * inv_n;
            let mean_dxh_xh = sum_dxh_xh * inv_n;
            for j in 0..gs {
                let ch = c0 + j / hw;
                let xh = (src[j] - m) * r;
                let dxh = g[j] * gm[ch];
                dst[j] = r * (dxh - mean_dxh - xh * mean_dxh_xh);
            }
        }
        self.acc(grads, gamma, Tensor::from_vec(&[c], dgamma));
        self.acc(grads, beta, Tensor::from_vec(&[c], dbeta));
        self.acc(grads, x, Tensor::from_vec(xv.shape(), dx));
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        gy: &Tensor<T>,
        probs: &Tensor<T>,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        injected: bool,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let (bs, nq, c) = dims3(qv.shape());
        let (_, nk, _) = dims3(kv.shape());
        let dh = c / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let need_qk = !injected && (self.g(q) || self.g(k));
        let mut dq = vec![T::zero(); if need_qk { qv.len() } else { 0 }];
        let mut dk = vec![T::zero(); if need_qk { kv.len() } else { 0 }];
        let mut dv = vec![T::zero(); if self.g(v) { vv.len() } else { 0 }];
        let mut dp = vec![T::zero(); nq * nk];
        for b in 0..bs {
            for hh in 0..heads {
                let p_off = ((b * heads) + hh) * nq * nk;
                let pmap = &probs.data()[p_off..p_off + nq * nk];
                let head = |n: usize| View {
                    offset: b * n * c + hh * dh,
                    rows: n,
                    cols: dh,
                    rs: c,
                    cs: 1,
                };
                let (qview, kview, oview) = (head(nq), head(nk), head(nq));
                if self.g(v) {
                    gemm(
                        T::one(),
                        pmap,
                        View::dense(0, nq, nk).t(),
                        gy.data(),
                        oview,
                        T::one(),
                        &mut dv,
                        kview,
                    );
                }
                if !need_qk {
                    continue;
                }
                gemm(
                    T::one(),
                    gy.data(),
                    oview,
                    vv.data(),
                    kview.t(),
                    T::zero(),
                    &mut dp,
                    View::dense(0, nq, nk),
                );
                for (drow, prow) in dp.chunks_mut(nk).zip(pmap.chunks(nk)) {
                    let dot: T = drow.iter().zip(prow).map(|(&d, &p)| d * p).sum();
                    for (d, &p) in drow.iter_mut().zip(prow) {
                        *d = p * (*d - dot);
                    }
                }
                gemm(
                    scale,
                    &dp,
                    View::dense(0, nq, nk),
                    kv.data(),
                    kview,
                    T::one(),
                    &mut dq,
                    qview,
                );
                gemm(
                    scale,
                    &dp,
                    View::dense(0, nq, nk).t(),
                    qv.data(),
                    qview,
                    T::one(),
                    &mut dk,
                    kview,
                );
            }
        }
        if need_qk {
            self.acc(grads, q, Tensor::from_vec(qv.shape(), dq));
            self.acc(grads, k, Tensor::from_vec(kv.shape(), dk));
        }
        if self.g(v) {
            self.acc(grads, v, Tensor::from_vec(vv.shape(), dv));
        }
    }
}

fn accumulate<T: Float>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Transposes the trailing `[a, b]` block of each batch element into `[b, a]`.
fn permute_chw_to_hwc<T: Float>(data: &[T], bs: usize, a: usize, b: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for bi in 0..bs {
        let src = &data[bi * a * b..(bi + 1) * a * b];
        let dst = &mut out[bi * a * b..(bi + 1) * a * b];
        for i in 0..a {
            for j in 0..b {
                dst[j * a + i] = src[i * b + j];
            }
        }
    }
    out
}

fn dims4(s: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(s.len(), 4, "expected a rank-4 tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn dims3(s: &[usize]) -> (usize, usize, usize) {
    assert_eq!(s.len(), 3, "expected a rank-3 tensor, got {s:?}");
    (s[0], s[1], s[2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks the VJP of `build` against central differences for every
    /// differentiable input, using a random linear functional as the loss.
    fn check_grad<F>(inputs: Vec<Tensor<f64>>, build: F)
    where
        F: Fn(&mut Graph<'_, f64>, &[NodeId]) -> NodeId,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let eval = |inputs: &[Tensor<f64>]| -> (Tensor<f64>, Vec<Tensor<f64>>, Tensor<f64>) {
            let mut g = Graph::new(&[], false);
            let ids: Vec<_> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
            let root = build(&mut g, &ids);
            let out = g.value(root).clone();
            let probe = Tensor::from_vec(out.shape(), vec![0.0; out.len()]);
            (out, ids.iter().map(|_| probe.clone()).collect(), probe)
        };
        let (out, _, _) = eval(&inputs);
        let probe = rand_tensor(&mut rng, out.shape());
        let loss = |inputs: &[Tensor<f64>]| -> f64 {
            let (o, _, _) = eval(inputs);
            o.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let mut g = Graph::new(&[], false);
        let ids: Vec<_> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
        let root = build(&mut g, &ids);
        let grads = g.backward(root, probe.clone());
        let h = 1e-6;
        for (i, id) in ids.iter().enumerate() {
            let analytic = grads.get(*id).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
            for j in (0..inputs[i].len()).step_by(1 + inputs[i].len() / 23) {
                let mut plus = inputs.clone();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[i].data_mut()[j] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = analytic.data()[j];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {i} entry {j}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for stride in [1, 2] {
            let inputs = vec![
                rand_tensor(&mut rng, &[2, 3, 6, 6]),
                rand_tensor(&mut rng, &[4, 3, 3, 3]),
                rand_tensor(&mut rng, &[4]),
            ];
            check_grad(inputs, |g, ids| g.conv2d(ids[0], ids[1], ids[2], stride, 1));
        }
    }

    #[test]
    fn linear_and_silu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![
            rand_tensor(&mut rng, &[2, 5, 4]),
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[3]),
        ];
        check_grad(inputs, |g, ids| {
            let y = g.linear(ids[0], ids[1], Some(ids[2]));
            g.silu(y)
        });
    }

    #[test]
    fn group_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = vec![
            rand_tensor(&mut rng, &[2, 4, 3, 3]),
            rand_tensor(&mut rng, &[4]),
            rand_tensor(&mut rng, &[4]),
        ];
        check_grad(inputs, |g, ids| g.group_norm(ids[0], ids[1], ids[2], 2, 1e-5));
    }

    #[test]
    fn token_permutes_upsample_and_channel_add_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = vec![rand_tensor(&mut rng, &[2, 3, 2, 2]), rand_tensor(&mut rng, &[2, 3])];
        check_grad(inputs, |g, ids| {
            let x = g.add_channel(ids[0], ids[1]);
            let t = g.to_tokens(x);
            let back = g.from_tokens(t, 2, 2);
            let s = g.add(back, x);
            g.upsample2x(s)
        });
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = vec![
            rand_tensor(&mut rng, &[2, 5, 4]),
            rand_tensor(&mut rng, &[2, 3, 4]),
            rand_tensor(&mut rng, &[2, 3, 4]),
        ];
        check_grad(inputs, |g, ids| g.attention(ids[0], ids[1], ids[2], 2, None));
    }

    #[test]
    fn injected_attention_blocks_query_key_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = rand_tensor(&mut rng, &[1, 3, 4]);
        let k = rand_tensor(&mut rng, &[1, 2, 4]);
        let v = rand_tensor(&mut rng, &[1, 2, 4]);
        let rep = Tensor::from_vec(&[2, 3, 2], vec![0.5; 12]);
        let mut g = Graph::new(&[], false);
        let (qi, ki, vi) = (g.input(q, true), g.input(k, true), g.input(v.clone(), true));
        let out = g.attention(qi, ki, vi, 2, Some(&rep));
        // Uniform maps average the two value rows.
        for i in 0..3 {
            for c in 0..4 {
                let want = 0.5 * (v.data()[c] + v.data()[4 + c]);
                assert!((g.value(out).data()[i * 4 + c] - want).abs() < 1e-12);
            }
        }
        let grads = g.backward(out, Tensor::from_vec(&[1, 3, 4], vec![1.0; 12]));
        assert!(grads.get(qi).is_none());
        assert!(grads.get(ki).is_none());
        assert!(grads.get(vi).is_some());
    }

    #[test]
    fn softmax_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = rand_tensor(&mut rng, &[1, 6, 4]).cast::<f32>();
        let k = rand_tensor(&mut rng, &[1, 5, 4]).cast::<f32>();
        let mut g = Graph::new(&[], false);
        let (qi, ki) = (g.input(q, false), g.input(k.clone(), false));
        let vi = g.input(k, false);
        let a = g.attention(qi, ki, vi, 2, None);
        for row in g.attention_probs(a).data().chunks(5) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }
}
