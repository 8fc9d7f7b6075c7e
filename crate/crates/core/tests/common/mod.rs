//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use regions::net::{AvgPool2d, Conv2d, Dense};
use regions::{Layer, Network};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Naive evaluation, one output element at a time. Returns the logits and
/// the on/off state of every ReLU unit in layer order.
pub fn naive_forward(net: &Network, x: &[f64]) -> (Vec<f64>, Vec<bool>) {
    let mut shape = net.input_shape().to_vec();
    let mut v = x.to_vec();
    let mut bits = Vec::new();
    let mut saved: HashMap<String, Vec<f64>> = HashMap::new();
    for layer in net.layers() {
        match layer {
            Layer::Dense(d) => {
                let mut out = Vec::new();
                for o in 0..d.out_features {
                    let mut acc = d.bias[o];
                    for i in 0..d.in_features {
                        acc += d.weight[o * d.in_features + i] * v[i];
                    }
                    out.push(acc);
                }
                v = out;
                shape = vec![d.out_features];
            }
            Layer::Conv2d(c) => {
                let (h, w) = (shape[1], shape[2]);
                let oh = (h + 2 * c.padding[0] - c.kernel[0]) / c.stride[0] + 1;
                let ow = (w + 2 * c.padding[1] - c.kernel[1]) / c.stride[1] + 1;
                let mut out = vec![0.0; c.out_channels * oh * ow];
                for o in 0..c.out_channels {
                    for r in 0..oh {
                        for s in 0..ow {
                            let mut acc = c.bias[o];
                            for i in 0..c.in_channels {
                                for p in 0..c.kernel[0] {
                                    for q in 0..c.kernel[1] {
                                        let y = (r * c.stride[0] + p) as isize - c.padding[0] as isize;
                                        let xx = (s * c.stride[1] + q) as isize - c.padding[1] as isize;
                                        if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                            continue;
                                        }
                                        let wi = ((o * c.in_channels + i) * c.kernel[0] + p) * c.kernel[1] + q;
                                        acc += c.weight[wi] * v[(i * h + y as usize) * w + xx as usize];
                                    }
                                }
                            }
                            out[(o * oh + r) * ow + s] = acc;
                        }
                    }
                }
                v = out;
                shape = vec![c.out_channels, oh, ow];
            }
            Layer::AvgPool2d(a) => {
                let (ch, h, w) = (shape[0], shape[1], shape[2]);
                let oh = (h + 2 * a.padding[0] - a.kernel[0]) / a.stride[0] + 1;
                let ow = (w + 2 * a.padding[1] - a.kernel[1]) / a.stride[1] + 1;
                let mut out = vec![0.0; ch * oh * ow];
                for k in 0..ch {
                    for r in 0..oh {
                        for s in 0..ow {
                            let mut acc = 0.0;
                            for p in 0..a.kernel[0] {
                                for q in 0..a.kernel[1] {
                                    let y = (r * a.stride[0] + p) as isize - a.padding[0] as isize;
                                    let xx = (s * a.stride[1] + q) as isize - a.padding[1] as isize;
                                    if y >= 0 && xx >= 0 && y < h as isize && xx < w as isize {
                                        acc += v[(k * h + y as usize) * w + xx as usize];
                                    }
                                }
                            }
                            out[(k * oh + r) * ow + s] = acc / (a.kernel[0] * a.kernel[1]) as f64;
                        }
                    }
                }
                v = out;
                shape = vec![ch, oh, ow];
            }
            Layer::Flatten => shape = vec![v.len()],
            Layer::Relu => {
                for z in &mut v {
                    bits.push(*z > 0.0);
                    if *z <= 0.0 {
                        *z = 0.0;
                    }
                }
            }
            Layer::Save(tag) => {
                saved.insert(tag.clone(), v.clone());
            }
            Layer::Add(tag) => {
                for (a, b) in v.iter_mut().zip(&saved[tag]) {
                    *a += b;
                }
            }
        }
    }
    (v, bits)
}

pub fn random_vec<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn normal_vec<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let d = Normal::new(0.0, std).unwrap();
    (0..n).map(|_| d.sample(rng)).collect()
}

pub fn conv<R: Rng>(rng: &mut R, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Layer {
    let fan_in = cin * k * k;
    Layer::Conv2d(Conv2d {
        in_channels: cin,
        out_channels: cout,
        kernel: [k, k],
        stride: [stride, stride],
        padding: [pad, pad],
        weight: normal_vec(rng, cout * fan_in, (2.0 / fan_in as f64).sqrt()),
        bias: normal_vec(rng, cout, 0.1),
    })
}

pub fn dense<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Layer {
    Layer::Dense(Dense {
        in_features: fan_in,
        out_features: fan_out,
        weight: normal_vec(rng, fan_in * fan_out, (2.0 / fan_in as f64).sqrt()),
        bias: normal_vec(rng, fan_out, 0.1),
    })
}

pub fn pool(k: usize, stride: usize, pad: usize) -> Layer {
    Layer::AvgPool2d(AvgPool2d {
        kernel: [k, k],
        stride: [stride, stride],
        padding: [pad, pad],
    })
}

/// Small VGG-style stack: conv blocks with average pooling, then dense head.
pub fn vgg_like(seed: u64) -> Network {
    let mut r = rng(seed);
    let layers = vec![
        conv(&mut r, 3, 4, 3, 1, 1),
        Layer::Relu,
        conv(&mut r, 4, 4, 3, 1, 1),
        Layer::Relu,
        pool(2, 2, 0),
        conv(&mut r, 4, 8, 3, 1, 1),
        Layer::Relu,
        conv(&mut r, 8, 8, 3, 1, 1),
        Layer::Relu,
        pool(3, 2, 1),
        Layer::Flatten,
        dense(&mut r, 8 * 2 * 2, 16),
        Layer::Relu,
        dense(&mut r, 16, 10),
    ];
    Network::new(vec![3, 8, 8], layers).unwrap()
}

/// Residual conv net with identity skips expressed as save/add pairs.
pub fn resnet_like(seed: u64) -> Network {
    let mut r = rng(seed);
    let layers = vec![
        conv(&mut r, 3, 4, 3, 1, 1),
        Layer::Relu,
        Layer::Save("b1".into()),
        conv(&mut r, 4, 4, 3, 1, 1),
        Layer::Relu,
        conv(&mut r, 4, 4, 3, 1, 1),
        Layer::Add("b1".into()),
        Layer::Relu,
        Layer::Save("b2".into()),
        conv(&mut r, 4, 4, 3, 2, 1),
        Layer::Relu,
        conv(&mut r, 4, 4, 3, 1, 1),
        Layer::Save("main".into()),
        pool(1, 1, 0),
        Layer::Add("main".into()),
        Layer::Relu,
        pool(2, 2, 0),
        Layer::Flatten,
        dense(&mut r, 4 * 2 * 2, 5),
    ];
    Network::new(vec![3, 8, 8], layers).unwrap()
}

/// Dense ReLU net with two hidden layers, evaluated only as far as needed to
/// read off activation patterns, for sampling many points quickly.
pub struct SamplingMlp {
    w1: Vec<[f64; 2]>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    h1: usize,
}

impl SamplingMlp {
    /// Accepts exactly `dense(2, h1), relu, dense(h1, h2), relu, dense(h2, k)`.
    pub fn new(net: &Network) -> Self {
        let l = net.layers();
        let (Layer::Dense(d1), Layer::Dense(d2)) = (&l[0], &l[2]) else {
            panic!("unexpected layout")
        };
        assert_eq!(d1.in_features, 2);
        SamplingMlp {
            w1: d1.weight.chunks(2).map(|c| [c[0], c[1]]).collect(),
            b1: d1.bias.clone(),
            w2: d2.weight.clone(),
            b2: d2.bias.clone(),
            h1: d1.out_features,
        }
    }

    /// Writes the pattern at `x` into `bits`.
    pub fn pattern_into(&self, x: [f64; 2], h: &mut Vec<f64>, bits: &mut Vec<bool>) {
        h.clear();
        bits.clear();
        for (w, b) in self.w1.iter().zip(&self.b1) {
            let z = w[0] * x[0] + w[1] * x[1] + b;
            bits.push(z > 0.0);
            h.push(z.max(0.0));
        }
        for (row, b) in self.w2.chunks_exact(self.h1).zip(&self.b2) {
            let z = row.iter().zip(h.iter()).map(|(a, v)| a * v).sum::<f64>() + b;
            bits.push(z > 0.0);
        }
    }

    /// Number of maximal runs of equal patterns over `steps + 1` evenly
    /// spaced samples of `[x0, x1]`.
    pub fn count_regions(&self, x0: [f64; 2], x1: [f64; 2], steps: usize) -> usize {
        let (mut h, mut prev, mut cur) = (Vec::new(), Vec::new(), Vec::new());
        self.pattern_into(x0, &mut h, &mut prev);
        let mut count = 1;
        for i in 1..=steps {
            let t = i as f64 / steps as f64;
            let x = [x0[0] + t * (x1[0] - x0[0]), x0[1] + t * (x1[1] - x0[1])];
            self.pattern_into(x, &mut h, &mut cur);
            if cur != prev {
                count += 1;
                std::mem::swap(&mut cur, &mut prev);
            }
        }
        count
    }
}

/// Trapezoid rule for `∫_0^1 |f_k(x0 + t (x1 − x0)) − a_k(t)| dt`, times span.
pub fn trapezoid_deviation(net: &Network, x0: &[f64], x1: &[f64], samples: usize) -> Vec<f64> {
    let f0 = net.logits(x0).unwrap();
    let f1 = net.logits(x1).unwrap();
    let span = x0.iter().zip(x1).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let mut acc = vec![0.0; f0.len()];
    let mut x = vec![0.0; x0.len()];
    for i in 0..=samples {
        let t = i as f64 / samples as f64;
        for (j, v) in x.iter_mut().enumerate() {
            *v = x0[j] + t * (x1[j] - x0[j]);
        }
        let f = net.logits(&x).unwrap();
        let w = if i == 0 || i == samples { 0.5 } else { 1.0 };
        for k in 0..acc.len() {
            acc[k] += w * (f[k] - (f0[k] + t * (f1[k] - f0[k]))).abs();
        }
    }
    acc.iter().map(|v| v / samples as f64 * span).collect()
}

/// Random 2-input MLP with two hidden layers of width `4..=16` and 3 outputs.
pub fn random_small_mlp(seed: u64) -> Network {
    let mut r = rng(seed);
    let h1 = r.random_range(4..=16);
    let h2 = r.random_range(4..=16);
    Network::random_mlp(&[2, h1, h2, 3], &mut r).unwrap()
}

pub fn random_segment<R: Rng>(r: &mut R) -> (Vec<f64>, Vec<f64>) {
    loop {
        let x0 = random_vec(r, 2, 3.0);
        let x1 = random_vec(r, 2, 3.0);
        if x0 != x1 {
            return (x0, x1);
        }
    }
}

/// Every structural property a finished trace must satisfy. Returns a
/// description of the first violation.
pub fn check_trace(net: &Network, task: &regions::discovery::SegmentTask, trace: &regions::discovery::RegionTrace) -> Result<(), String> {
    let b = &trace.boundaries;
    if b.first() != Some(&0.0) || b.last() != Some(&1.0) {
        return Err(format!("boundaries must span [0, 1]: {b:?}"));
    }
    if b.windows(2).any(|w| w[0] >= w[1]) {
        return Err(format!("boundaries not strictly increasing: {b:?}"));
    }
    if let Some(l) = trace.lambdas().iter().find(|&&l| !(l >= task.tau)) {
        return Err(format!("step {l} below tau"));
    }
    for (i, w) in b.windows(2).enumerate() {
        let x = task.point_at(0.5 * (w[0] + w[1]));
        let live = net.forward(&x).unwrap();
        if live.pattern != trace.patterns[i] {
            return Err(format!("region {i}: stored pattern differs from midpoint pattern"));
        }
        let frozen = net.forward_frozen(&trace.patterns[i], &x).unwrap();
        for (a, e) in frozen.iter().zip(&live.logits) {
            if (a - e).abs() > 1e-8 * e.abs().max(1.0) {
                return Err(format!("region {i}: frozen forward {a} vs live {e}"));
            }
        }
    }
    Ok(())
}

/// Interior boundaries of `fwd` and of `rev` (traced from `x1` to `x0`)
/// coincide within `tol` input-space distance.
pub fn reversal_mismatch(fwd: &regions::discovery::RegionTrace, rev: &regions::discovery::RegionTrace, tol: f64) -> Option<String> {
    let span = fwd.span;
    let a: Vec<f64> = fwd.boundaries[1..fwd.boundaries.len() - 1].iter().map(|t| t * span).collect();
    let b: Vec<f64> = rev.boundaries[1..rev.boundaries.len() - 1].iter().map(|t| (1.0 - t) * span).collect();
    for (name, from, to) in [("forward", &a, &b), ("reverse", &b, &a)] {
        for s in from.iter() {
            if !to.iter().any(|o| (o - s).abs() <= tol) {
                return Some(format!("{name} boundary at distance {s} has no partner"));
            }
        }
    }
    None
}

/// Largest relative gap between analytic gradients and central differences
/// over `per_layer` random weight and bias coordinates of every layer.
pub fn gradient_check(mlp: &regions::toy::Mlp, data: &regions::toy::ToyDataset, per_layer: usize, seed: u64) -> f64 {
    let inputs: Vec<&[f64]> = data.points.iter().map(|p| p.as_slice()).collect();
    let (_, grads) = mlp.loss_and_grad(&inputs, &data.labels);
    let loss_at = |m: &regions::toy::Mlp| m.loss_and_grad(&inputs, &data.labels).0;
    let h = 1e-6;
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for l in 0..mlp.weights.len() {
        for bias in [false, true] {
            let len = if bias { mlp.biases[l].len() } else { mlp.weights[l].len() };
            for _ in 0..per_layer {
                let i = r.random_range(0..len);
                let mut plus = mlp.clone();
                let mut minus = mlp.clone();
                let (analytic, p, m) = if bias {
                    (grads.biases[l][i], &mut plus.biases[l][i], &mut minus.biases[l][i])
                } else {
                    (grads.weights[l][i], &mut plus.weights[l][i], &mut minus.weights[l][i])
                };
                *p += h;
                *m -= h;
                let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
                worst = worst.max(rel);
            }
        }
    }
    worst
}
