//! Independent `f64` re-evaluation of sequential graphs, written as plain
//! nested loops with no shared code paths from the engine.

#![allow(dead_code)]

use lesionscreen_core::engine::{
    BatchNorm, Conv2d, Dense, Layer, ModelGraph, Normalization, Tensor,
};
use lesionscreen_core::label::Label;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Act {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Act {
    pub fn from_tensor(t: &Tensor) -> Self {
        Act {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }
}

fn conv(c: &Conv2d, x: &Act) -> Act {
    let (cin, h, w) = (x.shape[1], x.shape[2], x.shape[3]);
    let oh = (h + 2 * c.pad - c.kernel) / c.stride + 1;
    let ow = (w + 2 * c.pad - c.kernel) / c.stride + 1;
    let mut out = vec![0.0; c.out_channels * oh * ow];
    for o in 0..c.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = c.bias[o] as f64;
                for i in 0..cin {
                    for ky in 0..c.kernel {
                        for kx in 0..c.kernel {
                            let iy = (oy * c.stride + ky) as i64 - c.pad as i64;
                            let ix = (ox * c.stride + kx) as i64 - c.pad as i64;
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                continue;
                            }
                            let wv =
                                c.weight[((o * cin + i) * c.kernel + ky) * c.kernel + kx] as f64;
                            s += wv * x.data[(i * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = s;
            }
        }
    }
    Act {
        shape: vec![1, c.out_channels, oh, ow],
        data: out,
    }
}

fn max_pool(k: usize, stride: usize, x: &Act) -> Act {
    let (ch, h, w) = (x.shape[1], x.shape[2], x.shape[3]);
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Vec::new();
    for c in 0..ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for ky in 0..k {
                    for kx in 0..k {
                        m = m.max(x.data[(c * h + oy * stride + ky) * w + ox * stride + kx]);
                    }
                }
                out.push(m);
            }
        }
    }
    Act {
        shape: vec![1, ch, oh, ow],
        data: out,
    }
}

fn batch_norm(b: &BatchNorm, x: &Act) -> Act {
    let ch = x.shape[1];
    let per = x.data.len() / ch;
    let data = x
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / per;
            (v - b.mean[c] as f64) / (b.var[c] as f64 + b.eps as f64).sqrt() * b.gamma[c] as f64
                + b.beta[c] as f64
        })
        .collect();
    Act {
        shape: x.shape.clone(),
        data,
    }
}

fn dense(d: &Dense, x: &Act) -> Act {
    let data = (0..d.out_features)
        .map(|o| {
            let mut s = d.bias[o] as f64;
            for i in 0..d.in_features {
                s += d.weight[o * d.in_features + i] as f64 * x.data[i];
            }
            s
        })
        .collect();
    Act {
        shape: vec![1, d.out_features],
        data,
    }
}

pub fn apply(layer: &Layer, x: &Act) -> Act {
    match layer {
        Layer::Conv2d(c) => conv(c, x),
        Layer::ReLU => Act {
            shape: x.shape.clone(),
            data: x
                .data
                .iter()
                .map(|&v| if v > 0.0 { v } else { 0.0 })
                .collect(),
        },
        Layer::MaxPool { kernel, stride } => max_pool(*kernel, *stride, x),
        Layer::BatchNorm(b) => batch_norm(b, x),
        Layer::GlobalAvgPool => {
            let ch = x.shape[1];
            let per = x.data.len() / ch;
            Act {
                shape: vec![1, ch],
                data: x
                    .data
                    .chunks(per)
                    .map(|p| p.iter().sum::<f64>() / per as f64)
                    .collect(),
            }
        }
        Layer::Flatten => Act {
            shape: vec![1, x.data.len()],
            data: x.data.clone(),
        },
        Layer::Dense(d) => dense(d, x),
        Layer::Dropout { .. } => x.clone(),
        Layer::Softmax => {
            let m = x.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = x.data.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            Act {
                shape: x.shape.clone(),
                data: e.iter().map(|v| v / s).collect(),
            }
        }
    }
}

/// Outputs of every non-Softmax layer, starting from `x`.
pub fn run(layers: &[Layer], x: &Act) -> Vec<Act> {
    let mut acts: Vec<Act> = Vec::new();
    for l in layers.iter().filter(|l| !matches!(l, Layer::Softmax)) {
        let next = apply(l, acts.last().unwrap_or(x));
        acts.push(next);
    }
    acts
}

/// Per-channel `(x / 255 - mean) / scale` of an RGB byte image in CHW order.
pub fn normalize(pixels: &[[u8; 3]], norm: Normalization) -> Vec<f64> {
    let n = pixels.len();
    let mut out = vec![0.0; 3 * n];
    for (i, p) in pixels.iter().enumerate() {
        for c in 0..3 {
            out[c * n + i] = (p[c] as f64 / 255.0 - norm.mean[c] as f64) / norm.scale[c] as f64;
        }
    }
    out
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y).abs())
        .fold(0.0, f64::max)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// A random small graph: one or two convolutions (channels <= 8, stride 1 or 2,
/// pad 0 or 1), optional pooling and batch norm, then a dense head to 6 logits.
pub fn random_graph(rng: &mut ChaCha8Rng) -> ModelGraph {
    let side = rng.random_range(4..=16usize);
    let mut layers = Vec::new();
    let (mut ch, mut h) = (3usize, side);
    let n_conv = rng.random_range(1..=2);
    for _ in 0..n_conv {
        let k = rng.random_range(1..=3usize).min(h);
        let stride = rng.random_range(1..=2usize);
        let pad = rng.random_range(0..=1usize);
        let out = rng.random_range(1..=8usize);
        layers.push(Layer::Conv2d(Conv2d {
            out_channels: out,
            in_channels: ch,
            kernel: k,
            stride,
            pad,
            weight: rand_vec(rng, out * ch * k * k, 0.6),
            bias: rand_vec(rng, out, 0.2),
        }));
        h = (h + 2 * pad - k) / stride + 1;
        ch = out;
        layers.push(Layer::ReLU);
        if h >= 2 && rng.random_bool(0.5) {
            let (pk, ps) = if rng.random_bool(0.5) { (2, 2) } else { (2, 1) };
            layers.push(Layer::MaxPool {
                kernel: pk,
                stride: ps,
            });
            h = (h - pk) / ps + 1;
        }
        if rng.random_bool(0.3) {
            layers.push(Layer::BatchNorm(BatchNorm {
                eps: 1e-5,
                gamma: rand_vec(rng, ch, 1.5),
                beta: rand_vec(rng, ch, 0.3),
                mean: rand_vec(rng, ch, 0.3),
                var: (0..ch).map(|_| rng.random_range(0.2f32..2.0)).collect(),
            }));
        }
    }
    let mut feat = if rng.random_bool(0.5) {
        layers.push(Layer::GlobalAvgPool);
        ch
    } else {
        layers.push(Layer::Flatten);
        ch * h * h
    };
    if rng.random_bool(0.5) {
        let hidden = rng.random_range(2..=12usize);
        layers.push(Layer::Dense(Dense {
            in_features: feat,
            out_features: hidden,
            weight: rand_vec(rng, feat * hidden, 0.5),
            bias: rand_vec(rng, hidden, 0.1),
        }));
        layers.push(Layer::ReLU);
        layers.push(Layer::Dropout { rate: 0.25 });
        feat = hidden;
    }
    layers.push(Layer::Dense(Dense {
        in_features: feat,
        out_features: 6,
        weight: rand_vec(rng, feat * 6, 0.5),
        bias: rand_vec(rng, 6, 0.1),
    }));
    if rng.random_bool(0.5) {
        layers.push(Layer::Softmax);
    }
    ModelGraph::new(layers, Label::names(), side, Normalization::default())
        .expect("generated graph is valid")
}

pub fn random_input(rng: &mut ChaCha8Rng, side: usize) -> Tensor {
    Tensor::new(vec![1, 3, side, side], rand_vec(rng, 3 * side * side, 1.0)).unwrap()
}

/// Max-abs difference over every layer output between the engine and the oracle.
pub fn engine_vs_oracle(m: &ModelGraph, input: &Tensor) -> f64 {
    let pass = lesionscreen_core::engine::forward(m, input).expect("forward");
    let acts = run(m.layers(), &Act::from_tensor(input));
    assert_eq!(pass.activations.len(), acts.len());
    pass.activations
        .iter()
        .zip(&acts)
        .map(|(e, o)| {
            assert_eq!(e.shape(), &o.shape[..]);
            max_abs_diff(e.data(), &o.data)
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct FdStats {
    pub checked: usize,
    pub kinks: usize,
    pub max_rel_err: f64,
}

/// Compares `analytic` (gradient of `logit[target]` w.r.t. the output `a` of
/// layer `at`) against central differences of the oracle, at `entries`.
/// Points where the one-sided slopes disagree are ReLU/max kinks and skipped.
pub fn finite_difference_check(
    m: &ModelGraph,
    at: usize,
    a: &Tensor,
    analytic: &[f32],
    target: usize,
    entries: &[usize],
) -> FdStats {
    const EPS: f64 = 1e-3;
    let tail = &m.layers()[at + 1..];
    let logit = |x: &Act| {
        run(tail, x)
            .last()
            .expect("dense head follows the map layer")
            .data[target]
    };
    let base = Act::from_tensor(a);
    let f0 = logit(&base);
    let mut stats = FdStats::default();
    for &j in entries {
        let mut plus = base.clone();
        plus.data[j] += EPS;
        let mut minus = base.clone();
        minus.data[j] -= EPS;
        let (fp, fm) = (logit(&plus), logit(&minus));
        let forward = (fp - f0) / EPS;
        let backward = (f0 - fm) / EPS;
        let scale = forward.abs().max(backward.abs()).max(1e-6);
        if (forward - backward).abs() > 1e-6 * scale.max(1.0) {
            stats.kinks += 1;
            continue;
        }
        let central = (fp - fm) / (2.0 * EPS);
        let g = analytic[j] as f64;
        let denom = g.abs().max(central.abs());
        let rel = if denom < 1e-9 {
            0.0
        } else {
            (g - central).abs() / denom
        };
        stats.checked += 1;
        stats.max_rel_err = stats.max_rel_err.max(rel);
    }
    stats
}

/// `count` entry indices in `0..n`, half drawn from `preferred` when it is non-empty.
pub fn sample_entries(
    rng: &mut ChaCha8Rng,
    n: usize,
    preferred: &[usize],
    count: usize,
) -> Vec<usize> {
    (0..count)
        .map(|i| {
            if i % 2 == 0 && !preferred.is_empty() {
                preferred[rng.random_range(0..preferred.len())]
            } else {
                rng.random_range(0..n)
            }
        })
        .collect()
}
