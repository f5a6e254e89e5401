//! Two-level convolutional UNet with one self- and one cross-attention block
//! per level and a sinusoidal timestep embedding.
//!
//! ```text
//! x ─ conv_in ─ res1 ─ enc.self ─ enc.cross ─┬─ down ─ res2 ─ mid.self ─ mid.cross ─ up ─┐
//!                                            └──────────────── skip ───────────────────(+)─ res3 ─ out
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ToyBackboneConfig;
use crate::autodiff::{Graph, NodeId};
use crate::backbone::{AttentionKind, AttentionLayer};
use crate::tensor::{Float, Tensor};

const NORM_EPS: f64 = 1e-5;
const TIME_FEATURES: usize = 32;

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy, Debug)]
struct Lin {
    w: usize,
    b: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Copy, Debug)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    time: Lin,
    norm2: Norm,
    conv2: Conv,
}

#[derive(Clone, Copy, Debug)]
struct AttnBlock {
    norm: Norm,
    q: Lin,
    k: Lin,
    v: Lin,
    out: Lin,
    kind: AttentionKind,
}

#[derive(Clone, Debug)]
struct Arch {
    time1: Lin,
    time2: Lin,
    conv_in: Conv,
    res1: ResBlock,
    enc_self: AttnBlock,
    enc_cross: AttnBlock,
    down: Conv,
    res2: ResBlock,
    mid_self: AttnBlock,
    mid_cross: AttnBlock,
    up: Conv,
    res3: ResBlock,
    out_norm: Norm,
    conv_out: Conv,
}

/// Attention layer ids in forward order.
pub const LAYER_IDS: [&str; 4] = ["enc.self", "enc.cross", "mid.self", "mid.cross"];

#[derive(Clone, Debug)]
pub struct ToyUnet<T> {
    config: ToyBackboneConfig,
    params: Vec<Tensor<T>>,
    names: Vec<String>,
    arch: Arch,
}

pub(crate) struct ForwardOut {
    pub eps: NodeId,
    pub ctx: NodeId,
    pub attention: [NodeId; 4],
}

struct Builder {
    params: Vec<Tensor<f32>>,
    names: Vec<String>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn tensor(&mut self, name: &str, shape: &[usize], std: f64) -> usize {
        let n = shape.iter().product();
        let data = if std == 0.0 {
            vec![0.0; n]
        } else {
            let dist = Normal::new(0.0, std).expect("valid std");
            (0..n).map(|_| dist.sample(&mut self.rng) as f32).collect()
        };
        self.params.push(Tensor::from_vec(shape, data));
        self.names.push(name.to_string());
        self.params.len() - 1
    }

    fn filled(&mut self, name: &str, shape: &[usize], value: f32) -> usize {
        let n = shape.iter().product();
        self.params.push(Tensor::from_vec(shape, vec![value; n]));
        self.names.push(name.to_string());
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, stride: usize, gain: f64) -> Conv {
        let std = gain / ((cin * 9) as f64).sqrt();
        Conv {
            w: self.tensor(&format!("{name}.weight"), &[cout, cin, 3, 3], std),
            b: self.tensor(&format!("{name}.bias"), &[cout], 0.0),
            stride,
            pad: 1,
        }
    }

    fn lin(&mut self, name: &str, din: usize, dout: usize, bias: bool, gain: f64) -> Lin {
        let std = gain / (din as f64).sqrt();
        Lin {
            w: self.tensor(&format!("{name}.weight"), &[dout, din], std),
            b: bias.then(|| self.tensor(&format!("{name}.bias"), &[dout], 0.0)),
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            gamma: self.filled(&format!("{name}.gamma"), &[c], 1.0),
            beta: self.filled(&format!("{name}.beta"), &[c], 0.0),
        }
    }

    fn res(&mut self, name: &str, c: usize, time_dim: usize) -> ResBlock {
        ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), c),
            conv1: self.conv(&format!("{name}.conv1"), c, c, 1, 1.4),
            time: self.lin(&format!("{name}.time"), time_dim, c, true, 1.0),
            norm2: self.norm(&format!("{name}.norm2"), c),
            conv2: self.conv(&format!("{name}.conv2"), c, c, 1, 0.3),
        }
    }

    fn attn(&mut self, name: &str, c: usize, ctx_dim: usize, kind: AttentionKind) -> AttnBlock {
        let kv_in = match kind {
            AttentionKind::SelfAttention => c,
            AttentionKind::CrossAttention => ctx_dim,
        };
        AttnBlock {
            norm: self.norm(&format!("{name}.norm"), c),
            q: self.lin(&format!("{name}.q"), c, c, false, 1.0),
            k: self.lin(&format!("{name}.k"), kv_in, c, false, 1.0),
            v: self.lin(&format!("{name}.v"), kv_in, c, false, 1.0),
            out: self.lin(&format!("{name}.out"), c, c, true, 0.3),
            kind,
        }
    }
}

fn build_arch(config: &ToyBackboneConfig) -> (Arch, Vec<Tensor<f32>>, Vec<String>) {
    let mut b = Builder {
        params: Vec::new(),
        names: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    };
    let (c1, c2, td, d) = (
        config.base_channels,
        config.inner_channels,
        config.time_dim,
        config.embed_dim,
    );
    let lc = config.latent_channels;
    let arch = Arch {
        time1: b.lin("time.fc1", TIME_FEATURES, td, true, 1.0),
        time2: b.lin("time.fc2", td, td, true, 1.0),
        conv_in: b.conv("conv_in", lc, c1, 1, 1.0),
        res1: b.res("enc.res", c1, td),
        enc_self: b.attn("enc.self", c1, d, AttentionKind::SelfAttention),
        enc_cross: b.attn("enc.cross", c1, d, AttentionKind::CrossAttention),
        down: b.conv("down", c1, c2, 2, 1.0),
        res2: b.res("mid.res", c2, td),
        mid_self: b.attn("mid.self", c2, d, AttentionKind::SelfAttention),
        mid_cross: b.attn("mid.cross", c2, d, AttentionKind::CrossAttention),
        up: b.conv("up", c2, c1, 1, 1.0),
        res3: b.res("dec.res", c1, td),
        out_norm: b.norm("out.norm", c1),
        conv_out: b.conv("conv_out", c1, lc, 1, 0.5),
    };
    (arch, b.params, b.names)
}

/// Sinusoidal features of integer timesteps, `[batch, TIME_FEATURES]`.
pub(crate) fn timestep_features<T: Float>(timesteps: &[usize]) -> Tensor<T> {
    let half = TIME_FEATURES / 2;
    let mut data = Vec::with_capacity(timesteps.len() * TIME_FEATURES);
    for &t in timesteps {
        let sin_part = (0..half).map(|j| {
            let freq = (-(10000f64).ln() * j as f64 / half as f64).exp();
            t as f64 * freq
        });
        let args: Vec<f64> = sin_part.collect();
        data.extend(args.iter().map(|a| T::of(a.sin())));
        data.extend(args.iter().map(|a| T::of(a.cos())));
    }
    Tensor::from_vec(&[timesteps.len(), TIME_FEATURES], data)
}

impl ToyUnet<f32> {
    pub fn new(config: &ToyBackboneConfig) -> Self {
        let (arch, params, names) = build_arch(config);
        ToyUnet {
            config: config.clone(),
            params,
            names,
            arch,
        }
    }

    /// Rebuilds a network from named tensors. Every parameter must be present
    /// with its expected shape.
    pub fn from_named(
        config: &ToyBackboneConfig,
        tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
    ) -> crate::Result<Self> {
        let mut net = Self::new(config);
        let mut seen = vec![false; net.params.len()];
        for (name, shape, data) in tensors {
            let idx = net
                .names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| crate::Error::Config(format!("unexpected tensor `{name}`")))?;
            if net.params[idx].shape() != shape.as_slice() || data.len() != net.params[idx].len() {
                return Err(crate::Error::shape(net.params[idx].shape(), &shape));
            }
            net.params[idx] = Tensor::from_vec(&shape, data);
            seen[idx] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(crate::Error::Config(format!(
                "missing tensor `{}`",
                net.names[missing]
            )));
        }
        Ok(net)
    }
}

impl<T: Float> ToyUnet<T> {
    pub fn config(&self) -> &ToyBackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.params[i])
    }

    pub fn cast<U: Float>(&self) -> ToyUnet<U> {
        ToyUnet {
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            names: self.names.clone(),
            arch: self.arch.clone(),
        }
    }

    pub fn attention_layers(&self) -> Vec<AttentionLayer> {
        let c = &self.config;
        let hw = c.height * c.width;
        let q = [hw, hw, hw / 4, hw / 4];
        let kinds = [
            AttentionKind::SelfAttention,
            AttentionKind::CrossAttention,
            AttentionKind::SelfAttention,
            AttentionKind::CrossAttention,
        ];
        (0..4)
            .map(|i| AttentionLayer {
                id: LAYER_IDS[i].to_string(),
                kind: kinds[i],
                heads: c.heads,
                queries: q[i],
                keys: match kinds[i] {
                    AttentionKind::SelfAttention => q[i],
                    AttentionKind::CrossAttention => c.max_tokens,
                },
            })
            .collect()
    }

    fn lin(&self, g: &mut Graph<'_, T>, x: NodeId, l: Lin) -> NodeId {
        let w = g.param(l.w);
        let b = l.b.map(|b| g.param(b));
        g.linear(x, w, b)
    }

    fn conv(&self, g: &mut Graph<'_, T>, x: NodeId, c: Conv) -> NodeId {
        let w = g.param(c.w);
        let b = g.param(c.b);
        g.conv2d(x, w, b, c.stride, c.pad)
    }

    fn norm(&self, g: &mut Graph<'_, T>, x: NodeId, n: Norm) -> NodeId {
        let gamma = g.param(n.gamma);
        let beta = g.param(n.beta);
        g.group_norm(x, gamma, beta, self.config.norm_groups, NORM_EPS)
    }

    fn res(&self, g: &mut Graph<'_, T>, x: NodeId, temb: NodeId, r: ResBlock) -> NodeId {
        let h = self.norm(g, x, r.norm1);
        let h = g.silu(h);
        let h = self.conv(g, h, r.conv1);
        let tb = self.lin(g, temb, r.time);
        let h = g.add_channel(h, tb);
        let h = self.norm(g, h, r.norm2);
        let h = g.silu(h);
        let h = self.conv(g, h, r.conv2);
        g.add(x, h)
    }

    fn attn(
        &self,
        g: &mut Graph<'_, T>,
        x: NodeId,
        ctx: NodeId,
        a: AttnBlock,
        inject: Option<&Tensor<T>>,
    ) -> (NodeId, NodeId) {
        let shape = g.value(x).shape().to_vec();
        let (h, w) = (shape[2], shape[3]);
        let n = self.norm(g, x, a.norm);
        let tokens = g.to_tokens(n);
        let source = match a.kind {
            AttentionKind::SelfAttention => tokens,
            AttentionKind::CrossAttention => ctx,
        };
        let q = self.lin(g, tokens, a.q);
        let k = self.lin(g, source, a.k);
        let v = self.lin(g, source, a.v);
        let att = g.attention(q, k, v, self.config.heads, inject);
        let o = self.lin(g, att, a.out);
        let o = g.from_tokens(o, h, w);
        (g.add(x, o), att)
    }

    /// Builds the forward pass on `g`.
    ///
    /// `x` is `[B, C, H, W]`, `ctx` is `[B, L, D]`; `inject[i]` replaces the
    /// softmax output of attention layer `LAYER_IDS[i]`.
    pub(crate) fn forward(
        &self,
        g: &mut Graph<'_, T>,
        x: Tensor<T>,
        timesteps: &[usize],
        ctx: Tensor<T>,
        ctx_grad: bool,
        inject: &[Option<Tensor<T>>; 4],
    ) -> ForwardOut {
        let a = &self.arch;
        let x = g.input(x, false);
        let ctx_in = g.input(ctx, ctx_grad);
        let ctx = g.scale(ctx_in, self.config().context_gain);
        let tf = g.input(timestep_features(timesteps), false);
        let temb = self.lin(g, tf, a.time1);
        let temb = g.silu(temb);
        let temb = self.lin(g, temb, a.time2);
        let temb = g.silu(temb);

        let h = self.conv(g, x, a.conv_in);
        let h = self.res(g, h, temb, a.res1);
        let (h, a0) = self.attn(g, h, ctx, a.enc_self, inject[0].as_ref());
        let (skip, a1) = self.attn(g, h, ctx, a.enc_cross, inject[1].as_ref());
        let d = self.conv(g, skip, a.down);
        let d = self.res(g, d, temb, a.res2);
        let (d, a2) = self.attn(g, d, ctx, a.mid_self, inject[2].as_ref());
        let (d, a3) = self.attn(g, d, ctx, a.mid_cross, inject[3].as_ref());
        let u = g.upsample2x(d);
        let u = self.conv(g, u, a.up);
        let h = g.add(u, skip);
        let h = self.res(g, h, temb, a.res3);
        let h = self.norm(g, h, a.out_norm);
        let h = g.silu(h);
        let eps = self.conv(g, h, a.conv_out);
        ForwardOut {
            eps,
            ctx: ctx_in,
            attention: [a0, a1, a2, a3],
        }
    }
}
