//! The toy UNet checked against a loop-by-loop re-implementation in f64 that
//! shares nothing with the engine except the weights.

use std::collections::HashMap;

use baret_core::backbone::toy::{ToyBackbone, ToyBackboneConfig, ToyUnet};
use baret_core::backbone::Backbone;
use baret_core::latent::LatentTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Weights(HashMap<String, Vec<f64>>);

impl Weights {
    fn get(&self, name: &str) -> &[f64] {
        self.0.get(name).unwrap_or_else(|| panic!("missing {name}"))
    }
}

/// `[c][h][w]` planes.
type Map = Vec<Vec<Vec<f64>>>;

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn linear(x: &[f64], w: &[f64], b: Option<&[f64]>, dout: usize) -> Vec<f64> {
    let din = x.len();
    (0..dout)
        .map(|o| {
            let mut s = b.map_or(0.0, |b| b[o]);
            for i in 0..din {
                s += w[o * din + i] * x[i];
            }
            s
        })
        .collect()
}

#[allow(clippy::needless_range_loop)]
fn conv(x: &Map, w: &Weights, name: &str, cout: usize, stride: usize) -> Map {
    let (cin, h, wd) = (x.len(), x[0].len(), x[0][0].len());
    let kw = w.get(&format!("{name}.weight"));
    let kb = w.get(&format!("{name}.bias"));
    let (ho, wo) = ((h - 1) / stride + 1, (wd - 1) / stride + 1);
    let mut out = vec![vec![vec![0.0; wo]; ho]; cout];
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = kb[co];
                for ci in 0..cin {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * stride + ky) as isize - 1;
                            let ix = (ox * stride + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            s += kw[((co * cin + ci) * 3 + ky) * 3 + kx]
                                * x[ci][iy as usize][ix as usize];
                        }
                    }
                }
                out[co][oy][ox] = s;
            }
        }
    }
    out
}

fn group_norm(x: &Map, w: &Weights, name: &str, groups: usize) -> Map {
    let gamma = w.get(&format!("{name}.gamma"));
    let beta = w.get(&format!("{name}.beta"));
    let per = x.len() / groups;
    let mut out = x.clone();
    for g in 0..groups {
        let vals: Vec<f64> = (g * per..(g + 1) * per)
            .flat_map(|c| x[c].iter().flatten().copied())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        for c in g * per..(g + 1) * per {
            for row in out[c].iter_mut() {
                for v in row.iter_mut() {
                    *v = (*v - mean) / (var + 1e-5).sqrt() * gamma[c] + beta[c];
                }
            }
        }
    }
    out
}

fn map_silu(x: &Map) -> Map {
    x.iter()
        .map(|p| p.iter().map(|r| r.iter().map(|&v| silu(v)).collect()).collect())
        .collect()
}

fn add(a: &Map, b: &Map) -> Map {
    a.iter()
        .zip(b)
        .map(|(p, q)| {
            p.iter()
                .zip(q)
                .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
                .collect()
        })
        .collect()
}

fn res(x: &Map, temb: &[f64], w: &Weights, name: &str, groups: usize) -> Map {
    let c = x.len();
    let h = map_silu(&group_norm(x, w, &format!("{name}.norm1"), groups));
    let mut h = conv(&h, w, &format!("{name}.conv1"), c, 1);
    let tb = linear(
        temb,
        w.get(&format!("{name}.time.weight")),
        Some(w.get(&format!("{name}.time.bias"))),
        c,
    );
    for (ch, plane) in h.iter_mut().enumerate() {
        plane.iter_mut().flatten().for_each(|v| *v += tb[ch]);
    }
    let h = map_silu(&group_norm(&h, w, &format!("{name}.norm2"), groups));
    let h = conv(&h, w, &format!("{name}.conv2"), c, 1);
    add(x, &h)
}

fn attention(
    x: &Map,
    ctx: Option<&[Vec<f64>]>,
    w: &Weights,
    name: &str,
    groups: usize,
    heads: usize,
) -> Map {
    let (c, h, wd) = (x.len(), x[0].len(), x[0][0].len());
    let n = group_norm(x, w, &format!("{name}.norm"), groups);
    let tokens: Vec<Vec<f64>> = (0..h * wd)
        .map(|p| (0..c).map(|ch| n[ch][p / wd][p % wd]).collect())
        .collect();
    let source: &[Vec<f64>] = ctx.unwrap_or(&tokens);
    let proj = |rows: &[Vec<f64>], which: &str| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| linear(r, w.get(&format!("{name}.{which}.weight")), None, c))
            .collect()
    };
    let (q, k, v) = (proj(&tokens, "q"), proj(source, "k"), proj(source, "v"));
    let dh = c / heads;
    let mut att = vec![vec![0.0; c]; tokens.len()];
    for hd in 0..heads {
        let r = hd * dh..(hd + 1) * dh;
        for (i, qi) in q.iter().enumerate() {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| {
                    r.clone().map(|d| qi[d] * kj[d]).sum::<f64>() / (dh as f64).sqrt()
                })
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for d in r.clone() {
                att[i][d] = e.iter().zip(&v).map(|(p, vj)| p / z * vj[d]).sum();
            }
        }
    }
    let mut out = x.clone();
    for (p, a) in att.iter().enumerate() {
        let o = linear(
            a,
            w.get(&format!("{name}.out.weight")),
            Some(w.get(&format!("{name}.out.bias"))),
            c,
        );
        for ch in 0..c {
            out[ch][p / wd][p % wd] += o[ch];
        }
    }
    out
}

fn oracle(w: &Weights, cfg: &ToyBackboneConfig, z: &[f64], t: usize, emb: &[f64]) -> Vec<f64> {
    let (lc, h, wd) = (cfg.latent_channels, cfg.height, cfg.width);
    let x: Map = (0..lc)
        .map(|c| (0..h).map(|y| (0..wd).map(|xx| z[(c * h + y) * wd + xx]).collect()).collect())
        .collect();
    let ctx: Vec<Vec<f64>> = emb
        .chunks(cfg.embed_dim)
        .map(|tok| tok.iter().map(|v| v * cfg.context_gain).collect())
        .collect();
    let half = 16;
    let args: Vec<f64> = (0..half)
        .map(|j| t as f64 * (-(10000f64).ln() * j as f64 / half as f64).exp())
        .collect();
    let tf: Vec<f64> = args.iter().map(|a| a.sin()).chain(args.iter().map(|a| a.cos())).collect();
    let td = cfg.time_dim;
    let temb: Vec<f64> = linear(&tf, w.get("time.fc1.weight"), Some(w.get("time.fc1.bias")), td)
        .into_iter()
        .map(silu)
        .collect();
    let temb: Vec<f64> = linear(&temb, w.get("time.fc2.weight"), Some(w.get("time.fc2.bias")), td)
        .into_iter()
        .map(silu)
        .collect();
    let (g, heads) = (cfg.norm_groups, cfg.heads);
    let hh = conv(&x, w, "conv_in", cfg.base_channels, 1);
    let hh = res(&hh, &temb, w, "enc.res", g);
    let hh = attention(&hh, None, w, "enc.self", g, heads);
    let skip = attention(&hh, Some(&ctx), w, "enc.cross", g, heads);
    let d = conv(&skip, w, "down", cfg.inner_channels, 2);
    let d = res(&d, &temb, w, "mid.res", g);
    let d = attention(&d, None, w, "mid.self", g, heads);
    let d = attention(&d, Some(&ctx), w, "mid.cross", g, heads);
    let up: Map = d
        .iter()
        .map(|p| (0..2 * p.len()).map(|y| (0..2 * p[0].len()).map(|xx| p[y / 2][xx / 2]).collect()).collect())
        .collect();
    let u = conv(&up, w, "up", cfg.base_channels, 1);
    let hh = res(&add(&u, &skip), &temb, w, "dec.res", g);
    let hh = map_silu(&group_norm(&hh, w, "out.norm", g));
    conv(&hh, w, "conv_out", lc, 1).into_iter().flatten().flatten().collect()
}

/// A small network with every parameter (biases and norm affines included)
/// randomized, so no term of the forward pass hides behind a zero.
fn randomized(cfg: &ToyBackboneConfig, seed: u64) -> ToyBackbone {
    let base = ToyUnet::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = base
        .names()
        .iter()
        .zip(base.params())
        .map(|(name, p)| {
            let data = p
                .data()
                .iter()
                .map(|&v| v + rng.random_range(-0.1f32..0.1))
                .collect();
            (name.clone(), p.shape().to_vec(), data)
        })
        .collect();
    ToyBackbone::from_unet(ToyUnet::from_named(cfg, tensors).unwrap()).unwrap()
}

fn small_config() -> ToyBackboneConfig {
    ToyBackboneConfig {
        height: 8,
        width: 8,
        base_channels: 8,
        inner_channels: 8,
        embed_dim: 8,
        max_tokens: 3,
        time_dim: 16,
        norm_groups: 2,
        ..Default::default()
    }
}

#[test]
fn forward_matches_naive_oracle() {
    let cfg = small_config();
    let bb = randomized(&cfg, 5);
    let weights = Weights(
        bb.named_tensors()
            .map(|(n, _, d)| (n.to_string(), d.iter().map(|&v| v as f64).collect()))
            .collect(),
    );
    let z = LatentTensor::randn(cfg.latent_shape(), 11);
    let emb = bb.encode_text("red square lying").unwrap();
    for t in [1, 500, 999] {
        let got = bb.predict_noise(&z, t, &emb, false, None).unwrap().eps;
        let zf: Vec<f64> = z.data().iter().map(|&v| v as f64).collect();
        let ef: Vec<f64> = emb.tokens().iter().map(|&v| v as f64).collect();
        let want = oracle(&weights, &cfg, &zf, t, &ef);
        let scale = want.iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(scale > 0.1, "degenerate oracle output");
        for (g, w) in got.data().iter().zip(&want) {
            assert!(
                (*g as f64 - w).abs() <= 1e-4 * scale.max(1.0),
                "t={t}: engine {g} vs oracle {w}"
            );
        }
        // The f64 engine agrees to rounding.
        let (eps64, _) =
            ToyBackbone::embedding_vjp_f64(&bb.unet().cast::<f64>(), &zf, t, &ef, None);
        for (g, w) in eps64.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-10 * scale.max(1.0), "f64 engine {g} vs {w}");
        }
    }
}
