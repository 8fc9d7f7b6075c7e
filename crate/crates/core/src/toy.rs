//! Desk-scale experiments: synthetic 2-D classification data with label
//! noise and a dense ReLU trainer (softmax cross-entropy, SGD with momentum).

use std::f64::consts::PI;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::net::{Dense, Layer, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    /// Interleaved spiral arms, one per class.
    Spirals,
    /// Isotropic blobs on a circle, one per class.
    Gaussians,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spirals" => Ok(DatasetKind::Spirals),
            "gaussians" => Ok(DatasetKind::Gaussians),
            other => Err(Error::input(format!("unknown dataset kind {other:?} (spirals|gaussians)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub points: Vec<[f64; 2]>,
    /// Training labels, after noise.
    pub labels: Vec<usize>,
    /// Labels given by the generating process.
    pub clean_labels: Vec<usize>,
    pub classes: usize,
    pub noise_fraction: f64,
    /// Indices whose label was resampled, ascending.
    pub noisy_indices: Vec<usize>,
    pub seed: u64,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn inputs(&self) -> Vec<Vec<f64>> {
        self.points.iter().map(|p| p.to_vec()).collect()
    }
}

/// Generates `n` points (classes assigned round-robin) and resamples the
/// labels of exactly `round(noise_fraction * n)` of them uniformly over all
/// classes. Points depend only on `(kind, n, classes, seed)`, so datasets
/// differing only in noise share inputs and clean labels.
pub fn make_dataset(kind: DatasetKind, n: usize, classes: usize, noise_fraction: f64, seed: u64) -> Result<ToyDataset> {
    if classes < 2 {
        return Err(Error::input("need at least two classes"));
    }
    if n < classes {
        return Err(Error::input(format!("n = {n} is smaller than classes = {classes}")));
    }
    if !(0.0..=1.0).contains(&noise_fraction) {
        return Err(Error::input(format!("noise fraction {noise_fraction} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, 1.0).expect("unit normal");
    let clean_labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let points = clean_labels
        .iter()
        .enumerate()
        .map(|(i, &k)| match kind {
            DatasetKind::Gaussians => {
                let angle = 2.0 * PI * k as f64 / classes as f64;
                [
                    3.0 * angle.cos() + 0.5 * jitter.sample(&mut rng),
                    3.0 * angle.sin() + 0.5 * jitter.sample(&mut rng),
                ]
            }
            DatasetKind::Spirals => {
                let along = (i / classes) as f64 / (n.div_ceil(classes)) as f64;
                let radius = 0.2 + 2.8 * along;
                let angle = 2.0 * PI * k as f64 / classes as f64 + 1.75 * PI * along;
                [
                    radius * angle.cos() + 0.05 * jitter.sample(&mut rng),
                    radius * angle.sin() + 0.05 * jitter.sample(&mut rng),
                ]
            }
        })
        .collect();

    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut noise_rng);
    let m = (noise_fraction * n as f64).round() as usize;
    let mut noisy_indices = order[..m].to_vec();
    noisy_indices.sort_unstable();
    let mut labels = clean_labels.clone();
    for &i in &noisy_indices {
        labels[i] = noise_rng.random_range(0..classes);
    }

    Ok(ToyDataset {
        points,
        labels,
        clean_labels,
        classes,
        noise_fraction,
        noisy_indices,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Stop once the epoch's training loss falls below this value.
    pub loss_threshold: Option<f64>,
    /// Stop at the first epoch reaching 100% training accuracy.
    pub stop_at_interpolation: bool,
    /// Biases start uniform in `±bias_scale / sqrt(fan_in)`; zero gives zero biases.
    pub bias_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: vec![32, 32],
            learning_rate: 0.05,
            momentum: 0.9,
            max_epochs: 2000,
            batch_size: 32,
            loss_threshold: None,
            stop_at_interpolation: true,
            bias_scale: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::input("hidden widths must be positive"));
        }
        if !(self.bias_scale >= 0.0 && self.bias_scale.is_finite()) {
            return Err(Error::input("bias scale must be finite and non-negative"));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.batch_size == 0 {
            return Err(Error::input("learning rate and batch size must be positive, momentum in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Dense ReLU network in trainable form.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    /// Widths from input to output.
    pub dims: Vec<usize>,
    /// Per layer, row-major `[out, in]`.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Gradients with the same layout as [`Mlp`] parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Mlp {
    /// He-normal weights, zero biases.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        Self::init_with_bias(dims, 0.0, rng)
    }

    /// He-normal weights, biases uniform in `±bias_scale / sqrt(fan_in)`.
    pub fn init_with_bias<R: Rng + ?Sized>(dims: &[usize], bias_scale: f64, rng: &mut R) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            let normal = Normal::new(0.0, (2.0 / w[0] as f64).sqrt()).expect("positive std");
            weights.push((0..w[0] * w[1]).map(|_| normal.sample(rng)).collect());
            let bound = bias_scale / (w[0] as f64).sqrt();
            biases.push(
                (0..w[1])
                    .map(|_| if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 })
                    .collect(),
            );
        }
        Mlp {
            dims: dims.to_vec(),
            weights,
            biases,
        }
    }

    fn zero_grads(&self) -> Gradients {
        Gradients {
            weights: self.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    /// Activations of every layer (post-ReLU for hidden layers, logits last).
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let last = self.weights.len() - 1;
        let mut acts = vec![x.to_vec()];
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let input = acts.last().expect("non-empty");
            let n_in = self.dims[l];
            let mut out: Vec<f64> = w
                .chunks_exact(n_in)
                .zip(b)
                .map(|(row, bias)| row.iter().zip(input).map(|(a, v)| a * v).sum::<f64>() + bias)
                .collect();
            if l < last {
                for v in &mut out {
                    *v = v.max(0.0);
                }
            }
            acts.push(out);
        }
        acts
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.activations(x).pop().expect("output layer")
    }

    /// Mean softmax cross-entropy over the given samples and its gradient.
    pub fn loss_and_grad(&self, inputs: &[&[f64]], labels: &[usize]) -> (f64, Gradients) {
        let mut grads = self.zero_grads();
        let mut loss = 0.0;
        let scale = 1.0 / inputs.len() as f64;
        for (x, &y) in inputs.iter().zip(labels) {
            let acts = self.activations(x);
            let logits = acts.last().expect("output");
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            loss += (total.ln() + max - logits[y]) * scale;

            let mut delta: Vec<f64> = exps.iter().map(|e| e / total * scale).collect();
            delta[y] -= scale;
            for l in (0..self.weights.len()).rev() {
                let input = &acts[l];
                let n_in = self.dims[l];
                for (j, &dj) in delta.iter().enumerate() {
                    grads.biases[l][j] += dj;
                    let row = &mut grads.weights[l][j * n_in..(j + 1) * n_in];
                    for (g, v) in row.iter_mut().zip(input) {
                        *g += dj * v;
                    }
                }
                if l == 0 {
                    break;
                }
                let mut back = vec![0.0; n_in];
                for (j, &dj) in delta.iter().enumerate() {
                    let row = &self.weights[l][j * n_in..(j + 1) * n_in];
                    for (b, w) in back.iter_mut().zip(row) {
                        *b += dj * w;
                    }
                }
                // ReLU derivative: zero where the unit was off.
                for (b, a) in back.iter_mut().zip(&acts[l]) {
                    if *a <= 0.0 {
                        *b = 0.0;
                    }
                }
                delta = back;
            }
        }
        (loss, grads)
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }

    pub fn to_network(&self) -> Network {
        let last = self.weights.len() - 1;
        let mut layers = Vec::new();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            layers.push(Layer::Dense(Dense {
                in_features: self.dims[l],
                out_features: self.dims[l + 1],
                weight: w.clone(),
                bias: b.clone(),
            }));
            if l < last {
                layers.push(Layer::Relu);
            }
        }
        Network::new(vec![self.dims[0]], layers).expect("MLP layers are consistent")
    }

    /// Inverse of [`Mlp::to_network`] for dense ReLU networks.
    pub fn from_network(net: &Network) -> Result<Self> {
        let mut dims = vec![net.input_len()];
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for layer in net.layers() {
            match layer {
                Layer::Dense(d) => {
                    dims.push(d.out_features);
                    weights.push(d.weight.clone());
                    biases.push(d.bias.clone());
                }
                Layer::Relu => {}
                other => return Err(Error::input(format!("not a dense MLP: found {}", other.kind()))),
            }
        }
        Ok(Mlp { dims, weights, biases })
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Fraction of misclassified points (0/1 loss).
pub fn zero_one_error(net: &Network, points: &[[f64; 2]], labels: &[usize]) -> Result<f64> {
    let mut wrong = 0;
    for (p, &y) in points.iter().zip(labels) {
        if argmax(&net.logits(p)?) != y {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / points.len().max(1) as f64)
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub network: Network,
    pub log: Vec<EpochLog>,
    /// Network before the first update.
    pub initial: Network,
}

impl Trained {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.log.last().map(|l| l.accuracy)
    }
}

fn evaluate(mlp: &Mlp, inputs: &[&[f64]], labels: &[usize]) -> (f64, f64) {
    let mut loss = 0.0;
    let mut correct = 0;
    for (x, &y) in inputs.iter().zip(labels) {
        let logits = mlp.logits(x);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logits.iter().map(|z| (z - max).exp()).sum();
        loss += total.ln() + max - logits[y];
        correct += usize::from(argmax(&logits) == y);
    }
    let n = inputs.len() as f64;
    (loss / n, correct as f64 / n)
}

/// Mini-batch SGD with momentum on softmax cross-entropy. Deterministic for a
/// fixed configuration.
pub fn train(data: &ToyDataset, config: &TrainConfig) -> Result<Trained> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::input("empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dims = vec![2];
    dims.extend(&config.hidden);
    dims.push(data.classes);
    let mut mlp = Mlp::init_with_bias(&dims, config.bias_scale, &mut rng);
    let initial = mlp.to_network();

    let inputs: Vec<&[f64]> = data.points.iter().map(|p| p.as_slice()).collect();
    let mut velocity = mlp.zero_grads();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::new();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| inputs[i]).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let (_, g) = mlp.loss_and_grad(&xs, &ys);
            step(&mut mlp, &mut velocity, &g, config);
        }
        let (loss, accuracy) = evaluate(&mlp, &inputs, &data.labels);
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        log::debug!("epoch {epoch}: loss {loss:.6} accuracy {accuracy:.4}");
        log.push(EpochLog { epoch, loss, accuracy });
        if (config.stop_at_interpolation && accuracy == 1.0)
            || config.loss_threshold.is_some_and(|t| loss < t)
        {
            break;
        }
    }

    Ok(Trained {
        network: mlp.to_network(),
        log,
        initial,
    })
}

fn step(mlp: &mut Mlp, velocity: &mut Gradients, g: &Gradients, config: &TrainConfig) {
    let update = |params: &mut Vec<f64>, vel: &mut Vec<f64>, grad: &Vec<f64>| {
        for ((p, v), d) in params.iter_mut().zip(vel.iter_mut()).zip(grad) {
            *v = config.momentum * *v + d;
            *p -= config.learning_rate * *v;
        }
    };
    for l in 0..mlp.weights.len() {
        update(&mut mlp.weights[l], &mut velocity.weights[l], &g.weights[l]);
        update(&mut mlp.biases[l], &mut velocity.biases[l], &g.biases[l]);
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub width: usize,
    pub trained: Trained,
    pub train_error: f64,
    pub test_error: f64,
}

/// Trains one model per width; every hidden layer of `config` takes the
/// swept width. Errors are measured on the (noisy) training labels and the
/// clean labels of `test`.
pub fn width_sweep(train_set: &ToyDataset, test_set: &ToyDataset, widths: &[usize], config: &TrainConfig) -> Result<Vec<SweepPoint>> {
    if test_set.is_empty() {
        return Err(Error::input("width sweep needs a held-out set"));
    }
    widths
        .iter()
        .map(|&width| {
            let cfg = TrainConfig {
                hidden: vec![width; config.hidden.len().max(1)],
                ..config.clone()
            };
            let trained = train(train_set, &cfg)?;
            let train_error = zero_one_error(&trained.network, &train_set.points, &train_set.labels)?;
            let test_error = zero_one_error(&trained.network, &test_set.points, &test_set.clean_labels)?;
            log::info!("width {width}: train error {train_error:.4}, test error {test_error:.4}");
            Ok(SweepPoint {
                width,
                trained,
                train_error,
                test_error,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_labels_follow_generator() {
        let d = make_dataset(DatasetKind::Spirals, 90, 3, 0.0, 5).unwrap();
        assert_eq!(d.labels, d.clean_labels);
        assert!(d.noisy_indices.is_empty());
        let counts: Vec<usize> = (0..3).map(|k| d.labels.iter().filter(|&&l| l == k).count()).collect();
        assert_eq!(counts, vec![30, 30, 30]);
    }

    #[test]
    fn noise_touches_exact_count() {
        let clean = make_dataset(DatasetKind::Gaussians, 101, 4, 0.0, 9).unwrap();
        let noisy = make_dataset(DatasetKind::Gaussians, 101, 4, 0.2, 9).unwrap();
        assert_eq!(clean.points, noisy.points);
        assert_eq!(noisy.noisy_indices.len(), 20);
        for i in 0..101 {
            if noisy.labels[i] != clean.labels[i] {
                assert!(noisy.noisy_indices.binary_search(&i).is_ok());
            }
        }
    }

    #[test]
    fn full_noise_is_near_chance() {
        let d = make_dataset(DatasetKind::Gaussians, 4000, 4, 1.0, 2).unwrap();
        let agree = d.labels.iter().zip(&d.clean_labels).filter(|(a, b)| a == b).count() as f64 / 4000.0;
        assert!((agree - 0.25).abs() < 0.03, "{agree}");
    }

    #[test]
    fn invalid_inputs() {
        assert!(make_dataset(DatasetKind::Spirals, 2, 3, 0.0, 0).is_err());
        assert!(make_dataset(DatasetKind::Spirals, 20, 3, 1.5, 0).is_err());
        assert!("moons".parse::<DatasetKind>().is_err());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let d = make_dataset(DatasetKind::Gaussians, 20, 2, 0.0, 1).unwrap();
        let cfg = TrainConfig {
            max_epochs: 0,
            hidden: vec![4],
            ..TrainConfig::default()
        };
        let t = train(&d, &cfg).unwrap();
        assert_eq!(t.network.layers(), t.initial.layers());
        assert!(t.log.is_empty());
    }

    #[test]
    fn mlp_network_round_trip() {
        let mlp = Mlp::init(&[2, 5, 3], &mut ChaCha8Rng::seed_from_u64(0));
        let back = Mlp::from_network(&mlp.to_network()).unwrap();
        assert_eq!(back, mlp);
        let x = [0.3, -0.7];
        assert_eq!(mlp.to_network().logits(&x).unwrap(), mlp.logits(&x));
    }

    #[test]
    fn divergence_reported() {
        let d = make_dataset(DatasetKind::Gaussians, 40, 2, 0.5, 1).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e6,
            hidden: vec![16],
            max_epochs: 50,
            stop_at_interpolation: false,
            ..TrainConfig::default()
        };
        match train(&d, &cfg) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
