//! Double-precision inference for piecewise-affine networks.
//!
//! A [`Network`] is a flat list of layers. Residual connections are expressed
//! with `Save(tag)` / `Add(tag)` pseudo-layers: `Save` snapshots the current
//! activation and a later `Add` with the same tag sums it back in.
//!
//! Every forward variant runs through one propagation routine that differs
//! only in how ReLU gates are decided:
//!
//! * live: unit is on iff its preactivation is strictly positive,
//! * frozen: gates are read from a supplied [`ActivationPattern`],
//! * ahead: gates describe the region entered when moving from `x` along a
//!   direction (used by region discovery).

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::pattern::{ActivationPattern, PatternBuilder};

/// Denominators below this magnitude mean the direction is parallel to the
/// unit's hyperplane.
pub const PARALLEL_TOLERANCE: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_features: usize,
    pub out_features: usize,
    /// Row-major `[out_features, in_features]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub padding: [usize; 2],
    /// Row-major `[out_channels, in_channels, kernel_h, kernel_w]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Average pooling; zero padding counts towards the divisor.
#[derive(Debug, Clone, PartialEq)]
pub struct AvgPool2d {
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub padding: [usize; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    AvgPool2d(AvgPool2d),
    Flatten,
    Relu,
    Save(String),
    Add(String),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::AvgPool2d(_) => "avgpool2d",
            Layer::Flatten => "flatten",
            Layer::Relu => "relu",
            Layer::Save(_) => "save",
            Layer::Add(_) => "add",
        }
    }

    pub fn dense(weight: Vec<Vec<f64>>, bias: Vec<f64>) -> Layer {
        let out_features = weight.len();
        let in_features = weight.first().map_or(0, Vec::len);
        Layer::Dense(Dense {
            in_features,
            out_features,
            weight: weight.into_iter().flatten().collect(),
            bias,
        })
    }
}

/// Result of a live forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Vec<f64>,
    pub pattern: ActivationPattern,
    /// Input of each ReLU layer, in ReLU order.
    pub preacts: Vec<Vec<f64>>,
}

/// Joint propagation of a point and a direction through the point's pattern.
#[derive(Debug, Clone)]
pub struct PairForward {
    pub pattern: ActivationPattern,
    /// Output of every layer for the point.
    pub outputs_x: Vec<Vec<f64>>,
    /// Output of every layer's linear part for the direction.
    pub outputs_d: Vec<Vec<f64>>,
    /// ReLU inputs for the point, in ReLU order.
    pub preacts_x: Vec<Vec<f64>>,
    /// ReLU inputs for the direction, in ReLU order.
    pub preacts_d: Vec<Vec<f64>>,
}

/// Nearest hyperplane crossing along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crossing {
    pub lambda: f64,
    /// ReLU layer ordinal.
    pub layer: usize,
    pub neuron: usize,
}

impl Crossing {
    pub const NONE: Crossing = Crossing {
        lambda: f64::INFINITY,
        layer: usize::MAX,
        neuron: usize::MAX,
    };

    pub fn is_finite(&self) -> bool {
        self.lambda.is_finite()
    }
}

#[derive(Clone, Copy)]
pub(crate) enum Gate<'a> {
    Live,
    Frozen(&'a ActivationPattern),
    Ahead { tau: f64 },
}

#[derive(Default, Clone, Copy)]
struct Record {
    layer_outputs: bool,
    relu_inputs: bool,
}

struct Propagation {
    out: Vec<f64>,
    out_dir: Option<Vec<f64>>,
    pattern: ActivationPattern,
    crossing: Crossing,
    layer_outputs: Vec<Vec<f64>>,
    layer_outputs_dir: Vec<Vec<f64>>,
    relu_inputs: Vec<Vec<f64>>,
    relu_inputs_dir: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    out_shapes: Vec<Vec<usize>>,
    relu_offsets: Vec<usize>,
    relu_widths: Vec<usize>,
    // Residual slot index for Save/Add layers.
    slots: Vec<Option<usize>>,
    slot_count: usize,
    neuron_count: usize,
}

impl Network {
    /// Validates shapes, parameters and residual taps.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::model("network has no layers"));
        }
        if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
            return Err(Error::model(format!("invalid input shape {input_shape:?}")));
        }
        if input_shape.len() != 1 && input_shape.len() != 3 {
            return Err(Error::model(format!(
                "input shape must be [d] or [c, h, w], got {input_shape:?}"
            )));
        }

        let mut shape = input_shape.clone();
        let mut out_shapes = Vec::with_capacity(layers.len());
        let mut relu_offsets = Vec::new();
        let mut relu_widths = Vec::new();
        let mut slots = Vec::with_capacity(layers.len());
        let mut saved: Vec<(String, Vec<usize>)> = Vec::new();
        let mut neuron_count = 0;

        for (i, layer) in layers.iter().enumerate() {
            let fail = |msg: String| Error::model(format!("layer {i} ({}): {msg}", layer.kind()));
            let mut slot = None;
            shape = match layer {
                Layer::Dense(d) => {
                    if shape != [d.in_features] {
                        return Err(fail(format!(
                            "expects input [{}], got {shape:?}",
                            d.in_features
                        )));
                    }
                    if d.out_features == 0 {
                        return Err(fail("zero output features".into()));
                    }
                    check_params(&d.weight, d.in_features * d.out_features, "weight").map_err(fail)?;
                    check_params(&d.bias, d.out_features, "bias").map_err(fail)?;
                    vec![d.out_features]
                }
                Layer::Conv2d(c) => {
                    let [ch, h, w] = spatial(&shape).map_err(fail)?;
                    if ch != c.in_channels {
                        return Err(fail(format!(
                            "expects {} input channels, got {ch}",
                            c.in_channels
                        )));
                    }
                    if c.out_channels == 0 {
                        return Err(fail("zero output channels".into()));
                    }
                    let (oh, ow) =
                        window_output(h, w, c.kernel, c.stride, c.padding).map_err(fail)?;
                    let n = c.out_channels * c.in_channels * c.kernel[0] * c.kernel[1];
                    check_params(&c.weight, n, "weight").map_err(fail)?;
                    check_params(&c.bias, c.out_channels, "bias").map_err(fail)?;
                    vec![c.out_channels, oh, ow]
                }
                Layer::AvgPool2d(p) => {
                    let [ch, h, w] = spatial(&shape).map_err(fail)?;
                    let (oh, ow) =
                        window_output(h, w, p.kernel, p.stride, p.padding).map_err(fail)?;
                    vec![ch, oh, ow]
                }
                Layer::Flatten => vec![shape.iter().product()],
                Layer::Relu => {
                    let width: usize = shape.iter().product();
                    relu_offsets.push(neuron_count);
                    relu_widths.push(width);
                    neuron_count += width;
                    shape
                }
                Layer::Save(tag) => {
                    let idx = match saved.iter().position(|(t, _)| t == tag) {
                        Some(idx) => {
                            saved[idx].1 = shape.clone();
                            idx
                        }
                        None => {
                            saved.push((tag.clone(), shape.clone()));
                            saved.len() - 1
                        }
                    };
                    slot = Some(idx);
                    shape
                }
                Layer::Add(tag) => {
                    let Some(idx) = saved.iter().position(|(t, _)| t == tag) else {
                        return Err(fail(format!("no earlier save with tag {tag:?}")));
                    };
                    if saved[idx].1 != shape {
                        return Err(fail(format!(
                            "tag {tag:?} saved with shape {:?}, adding to {shape:?}",
                            saved[idx].1
                        )));
                    }
                    slot = Some(idx);
                    shape
                }
            };
            slots.push(slot);
            out_shapes.push(shape.clone());
        }

        Ok(Network {
            layers,
            input_shape,
            out_shapes,
            relu_offsets,
            relu_widths,
            slots,
            slot_count: saved.len(),
            neuron_count,
        })
    }

    /// Dense ReLU network with He-normal weights and small random biases.
    ///
    /// `dims` lists the input width, the hidden widths and the output width.
    pub fn random_mlp<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::input("an MLP needs at least input and output widths"));
        }
        let mut layers = Vec::new();
        for (k, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let bias_noise = Normal::new(0.0, 0.1).expect("positive std");
            layers.push(Layer::Dense(Dense {
                in_features: fan_in,
                out_features: fan_out,
                weight: (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect(),
                bias: (0..fan_out).map(|_| bias_noise.sample(rng)).collect(),
            }));
            if k + 2 < dims.len() {
                layers.push(Layer::Relu);
            }
        }
        Network::new(vec![dims[0]], layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Number of logits K.
    pub fn output_dim(&self) -> usize {
        self.out_shapes.last().map_or(0, |s| s.iter().product())
    }

    /// Number of parametric (affine) layers.
    pub fn depth(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::Dense(_) | Layer::Conv2d(_)))
            .count()
    }

    /// Total number of ReLU units V; the length of every activation pattern.
    pub fn neuron_count(&self) -> usize {
        self.neuron_count
    }

    /// Units per ReLU layer, in order.
    pub fn relu_widths(&self) -> &[usize] {
        &self.relu_widths
    }

    /// Output shape of each layer.
    pub fn layer_shapes(&self) -> &[Vec<usize>] {
        &self.out_shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => d.weight.len() + d.bias.len(),
                Layer::Conv2d(c) => c.weight.len() + c.bias.len(),
                _ => 0,
            })
            .sum()
    }

    fn check_input(&self, x: &[f64], what: &str) -> Result<()> {
        if x.len() != self.input_len() {
            return Err(Error::input(format!(
                "{what} has {} values, network input shape {:?} needs {}",
                x.len(),
                self.input_shape,
                self.input_len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::input(format!("{what} contains non-finite values")));
        }
        Ok(())
    }

    /// Evaluates `f(x)` and records the activation pattern and ReLU inputs.
    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        self.check_input(x, "input")?;
        let p = self.propagate(
            x,
            None,
            Gate::Live,
            Record {
                relu_inputs: true,
                ..Record::default()
            },
        )?;
        Ok(Forward {
            logits: p.out,
            pattern: p.pattern,
            preacts: p.relu_inputs,
        })
    }

    /// Logits only.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x, "input")?;
        Ok(self.propagate(x, None, Gate::Live, Record::default())?.out)
    }

    pub fn pattern(&self, x: &[f64]) -> Result<ActivationPattern> {
        self.check_input(x, "input")?;
        Ok(self.propagate(x, None, Gate::Live, Record::default())?.pattern)
    }

    /// Evaluates the affine component selected by `pattern` at `x`.
    pub fn forward_frozen(&self, pattern: &ActivationPattern, x: &[f64]) -> Result<Vec<f64>> {
        self.check_pattern(pattern)?;
        self.check_input(x, "input")?;
        Ok(self
            .propagate(x, None, Gate::Frozen(pattern), Record::default())?
            .out)
    }

    /// Propagates `x` normally and `d` through the linear part of `x`'s region.
    pub fn forward_pair(&self, x: &[f64], d: &[f64]) -> Result<PairForward> {
        self.check_input(x, "point")?;
        self.check_input(d, "direction")?;
        if d.iter().all(|&v| v == 0.0) {
            return Err(Error::input("direction is all zeros"));
        }
        let p = self.propagate(
            x,
            Some(d),
            Gate::Live,
            Record {
                layer_outputs: true,
                relu_inputs: true,
            },
        )?;
        Ok(PairForward {
            pattern: p.pattern,
            outputs_x: p.layer_outputs,
            outputs_d: p.layer_outputs_dir,
            preacts_x: p.relu_inputs,
            preacts_d: p.relu_inputs_dir,
        })
    }

    /// Smallest displacement `lambda > tau` along `dir` that crosses a ReLU
    /// hyperplane, together with the pattern of the region being traversed.
    ///
    /// Units whose hyperplane lies within `[0, tau]` ahead are treated as
    /// already crossed; this pattern is what the caller is moving through.
    pub fn next_crossing(
        &self,
        x: &[f64],
        dir: &[f64],
        tau: f64,
    ) -> Result<(Crossing, ActivationPattern)> {
        self.check_input(x, "point")?;
        self.check_input(dir, "direction")?;
        if !(tau > 0.0) {
            return Err(Error::input(format!("tau must be positive, got {tau}")));
        }
        let p = self.propagate(x, Some(dir), Gate::Ahead { tau }, Record::default())?;
        Ok((p.crossing, p.pattern))
    }

    fn check_pattern(&self, pattern: &ActivationPattern) -> Result<()> {
        if pattern.len() != self.neuron_count {
            return Err(Error::input(format!(
                "pattern has {} bits, network has {} ReLU units",
                pattern.len(),
                self.neuron_count
            )));
        }
        Ok(())
    }

    fn propagate(
        &self,
        x: &[f64],
        dir: Option<&[f64]>,
        gate: Gate<'_>,
        record: Record,
    ) -> Result<Propagation> {
        let mut cur = x.to_vec();
        let mut cur_dir = dir.map(<[f64]>::to_vec);
        let mut shape: &[usize] = &self.input_shape;
        let mut saved: Vec<(Vec<f64>, Option<Vec<f64>>)> = vec![(Vec::new(), None); self.slot_count];
        let mut bits = PatternBuilder::new(self.neuron_count);
        let mut crossing = Crossing::NONE;
        let mut relu_ordinal = 0;

        let mut layer_outputs = Vec::new();
        let mut layer_outputs_dir = Vec::new();
        let mut relu_inputs = Vec::new();
        let mut relu_inputs_dir = Vec::new();

        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense(d) => {
                    cur = dense_apply(d, &cur, true);
                    if let Some(v) = cur_dir.as_mut() {
                        *v = dense_apply(d, v, false);
                    }
                }
                Layer::Conv2d(c) => {
                    cur = conv_apply(c, shape, &cur, true);
                    if let Some(v) = cur_dir.as_mut() {
                        *v = conv_apply(c, shape, v, false);
                    }
                }
                Layer::AvgPool2d(p) => {
                    cur = avgpool_apply(p, shape, &cur);
                    if let Some(v) = cur_dir.as_mut() {
                        *v = avgpool_apply(p, shape, v);
                    }
                }
                Layer::Flatten => {}
                Layer::Relu => {
                    if record.relu_inputs {
                        relu_inputs.push(cur.clone());
                        if let Some(v) = &cur_dir {
                            relu_inputs_dir.push(v.clone());
                        }
                    }
                    let offset = self.relu_offsets[relu_ordinal];
                    for j in 0..cur.len() {
                        let z = cur[j];
                        let on = match gate {
                            Gate::Live => z > 0.0,
                            Gate::Frozen(p) => p.get(offset + j),
                            Gate::Ahead { tau } => {
                                let dz = cur_dir.as_ref().map_or(0.0, |v| v[j]);
                                if dz.abs() < PARALLEL_TOLERANCE {
                                    z > 0.0
                                } else {
                                    let lambda = -z / dz;
                                    if lambda > tau {
                                        if lambda < crossing.lambda {
                                            crossing = Crossing {
                                                lambda,
                                                layer: relu_ordinal,
                                                neuron: j,
                                            };
                                        }
                                        z > 0.0
                                    } else if lambda >= 0.0 {
                                        // Hyperplane within tau ahead (or exactly here).
                                        dz > 0.0
                                    } else {
                                        z > 0.0
                                    }
                                }
                            }
                        };
                        bits.set(offset + j, on);
                        if !on {
                            cur[j] = 0.0;
                            if let Some(v) = cur_dir.as_mut() {
                                v[j] = 0.0;
                            }
                        }
                    }
                    relu_ordinal += 1;
                }
                Layer::Save(_) => {
                    let slot = self.slots[i].expect("save layer has a slot");
                    saved[slot] = (cur.clone(), cur_dir.clone());
                }
                Layer::Add(_) => {
                    let slot = self.slots[i].expect("add layer has a slot");
                    let (sx, sd) = &saved[slot];
                    for (a, b) in cur.iter_mut().zip(sx) {
                        *a += b;
                    }
                    if let (Some(v), Some(sd)) = (cur_dir.as_mut(), sd) {
                        for (a, b) in v.iter_mut().zip(sd) {
                            *a += b;
                        }
                    }
                }
            }
            if cur.iter().any(|v| !v.is_finite())
                || cur_dir
                    .as_ref()
                    .is_some_and(|v| v.iter().any(|e| !e.is_finite()))
            {
                return Err(Error::NonFinite { layer: i });
            }
            if record.layer_outputs {
                layer_outputs.push(cur.clone());
                if let Some(v) = &cur_dir {
                    layer_outputs_dir.push(v.clone());
                }
            }
            shape = &self.out_shapes[i];
        }

        Ok(Propagation {
            out: cur,
            out_dir: cur_dir,
            pattern: bits.finish(),
            crossing,
            layer_outputs,
            layer_outputs_dir,
            relu_inputs,
            relu_inputs_dir,
        })
    }

    /// Linear part of the affine map of `pattern`'s region applied to `d`.
    pub fn frozen_direction(&self, pattern: &ActivationPattern, d: &[f64]) -> Result<Vec<f64>> {
        self.check_pattern(pattern)?;
        self.check_input(d, "direction")?;
        let zero = vec![0.0; d.len()];
        let p = self.propagate(&zero, Some(d), Gate::Frozen(pattern), Record::default())?;
        Ok(p.out_dir.expect("direction propagated"))
    }
}

fn check_params(values: &[f64], expected: usize, what: &str) -> std::result::Result<(), String> {
    if values.len() != expected {
        return Err(format!("{what} has {} values, expected {expected}", values.len()));
    }
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(format!("{what}[{pos}] is not finite"));
    }
    Ok(())
}

fn spatial(shape: &[usize]) -> std::result::Result<[usize; 3], String> {
    match *shape {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(format!("expects a [c, h, w] input, got {shape:?}")),
    }
}

fn window_output(
    h: usize,
    w: usize,
    kernel: [usize; 2],
    stride: [usize; 2],
    padding: [usize; 2],
) -> std::result::Result<(usize, usize), String> {
    if kernel.contains(&0) || stride.contains(&0) {
        return Err(format!("kernel {kernel:?} and stride {stride:?} must be positive"));
    }
    let ph = h + 2 * padding[0];
    let pw = w + 2 * padding[1];
    if ph < kernel[0] || pw < kernel[1] {
        return Err(format!(
            "kernel {kernel:?} larger than padded input {ph}x{pw}"
        ));
    }
    Ok(((ph - kernel[0]) / stride[0] + 1, (pw - kernel[1]) / stride[1] + 1))
}

fn dense_apply(d: &Dense, x: &[f64], with_bias: bool) -> Vec<f64> {
    d.weight
        .chunks_exact(d.in_features)
        .zip(&d.bias)
        .map(|(row, &b)| {
            let dot: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum();
            if with_bias {
                dot + b
            } else {
                dot
            }
        })
        .collect()
}

fn conv_apply(c: &Conv2d, in_shape: &[usize], x: &[f64], with_bias: bool) -> Vec<f64> {
    let (ih, iw) = (in_shape[1], in_shape[2]);
    let [kh, kw] = c.kernel;
    let [sh, sw] = c.stride;
    let [ph, pw] = c.padding;
    let oh = (ih + 2 * ph - kh) / sh + 1;
    let ow = (iw + 2 * pw - kw) / sw + 1;
    let mut out = vec![0.0; c.out_channels * oh * ow];
    for o in 0..c.out_channels {
        let bias = if with_bias { c.bias[o] } else { 0.0 };
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ci in 0..c.in_channels {
                    let wbase = (o * c.in_channels + ci) * kh * kw;
                    let xbase = ci * ih * iw;
                    for ky in 0..kh {
                        let y = (oy * sh + ky) as isize - ph as isize;
                        if y < 0 || y >= ih as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let xx = (ox * sw + kx) as isize - pw as isize;
                            if xx < 0 || xx >= iw as isize {
                                continue;
                            }
                            acc += c.weight[wbase + ky * kw + kx]
                                * x[xbase + y as usize * iw + xx as usize];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc + bias;
            }
        }
    }
    out
}

fn avgpool_apply(p: &AvgPool2d, in_shape: &[usize], x: &[f64]) -> Vec<f64> {
    let (ch, ih, iw) = (in_shape[0], in_shape[1], in_shape[2]);
    let [kh, kw] = p.kernel;
    let [sh, sw] = p.stride;
    let [ph, pw] = p.padding;
    let oh = (ih + 2 * ph - kh) / sh + 1;
    let ow = (iw + 2 * pw - kw) / sw + 1;
    let area = (kh * kw) as f64;
    let mut out = vec![0.0; ch * oh * ow];
    for c in 0..ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..kh {
                    let y = (oy * sh + ky) as isize - ph as isize;
                    if y < 0 || y >= ih as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let xx = (ox * sw + kx) as isize - pw as isize;
                        if xx < 0 || xx >= iw as isize {
                            continue;
                        }
                        acc += x[(c * ih + y as usize) * iw + xx as usize];
                    }
                }
                out[(c * oh + oy) * ow + ox] = acc / area;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn relu_identity() -> Network {
        Network::new(vec![1], vec![Layer::dense(vec![vec![1.0]], vec![0.0]), Layer::Relu]).unwrap()
    }

    #[test]
    fn affine_single_layer() {
        let net = Network::new(vec![1], vec![Layer::dense(vec![vec![2.0]], vec![-1.0])]).unwrap();
        assert_eq!(net.forward(&[3.0]).unwrap().logits, vec![5.0]);
        assert_eq!(net.neuron_count(), 0);
    }

    #[test]
    fn relu_clamps_negative() {
        let net = relu_identity();
        let f = net.forward(&[-0.5]).unwrap();
        assert_eq!(f.logits, vec![0.0]);
        assert_eq!(f.pattern.to_bits(), vec![false]);
    }

    #[test]
    fn exact_zero_preactivation_is_off() {
        let f = relu_identity().forward(&[0.0]).unwrap();
        assert_eq!(f.pattern.to_bits(), vec![false]);
    }

    #[test]
    fn frozen_masks() {
        let net = Network::new(vec![1], vec![Layer::dense(vec![vec![2.0]], vec![0.0]), Layer::Relu]).unwrap();
        let ones = ActivationPattern::all_ones(1);
        assert_eq!(net.forward_frozen(&ones, &[-1.0]).unwrap(), vec![-2.0]);
        let zeros = ActivationPattern::all_zeros(1);
        assert_eq!(net.forward_frozen(&zeros, &[5.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn frozen_rejects_wrong_pattern_length() {
        let net = relu_identity();
        let err = net.forward_frozen(&ActivationPattern::all_ones(2), &[1.0]).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn pair_masks_direction() {
        let net = Network::new(
            vec![1],
            vec![Layer::dense(vec![vec![1.0], vec![-1.0]], vec![0.0, 0.0]), Layer::Relu],
        )
        .unwrap();
        let pair = net.forward_pair(&[1.0], &[1.0]).unwrap();
        assert_eq!(pair.pattern.to_bits(), vec![true, false]);
        assert_eq!(pair.outputs_d[1], vec![1.0, 0.0]);
        assert_eq!(pair.preacts_d[0], vec![1.0, -1.0]);
    }

    #[test]
    fn pair_rejects_zero_direction() {
        let err = relu_identity().forward_pair(&[1.0], &[0.0]).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn pair_on_affine_net_is_matrix_product() {
        let w1 = vec![vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.0, 1.0]];
        let w2 = vec![vec![2.0, -1.0, 4.0]];
        let net = Network::new(
            vec![2],
            vec![
                Layer::dense(w1.clone(), vec![0.3, -0.2, 0.1]),
                Layer::dense(w2.clone(), vec![7.0]),
            ],
        )
        .unwrap();
        let d = [0.25, -2.0];
        let pair = net.forward_pair(&[9.0, -4.0], &d).unwrap();
        let h: Vec<f64> = w1.iter().map(|r| r[0] * d[0] + r[1] * d[1]).collect();
        assert_eq!(pair.outputs_d[0], h);
        let out: f64 = w2[0].iter().zip(&h).map(|(a, b)| a * b).sum();
        assert_eq!(pair.outputs_d[1], vec![out]);
    }

    #[test]
    fn shape_mismatch_is_input_error() {
        let err = relu_identity().forward(&[1.0, 2.0]).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn overflow_reports_layer() {
        let net = Network::new(
            vec![1],
            vec![
                Layer::dense(vec![vec![1e200]], vec![0.0]),
                Layer::dense(vec![vec![1e200]], vec![0.0]),
            ],
        )
        .unwrap();
        match net.forward(&[1.0]).unwrap_err() {
            Error::NonFinite { layer } => assert_eq!(layer, 1),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn construction_validates() {
        assert!(Network::new(vec![2], vec![]).is_err());
        assert!(Network::new(vec![2], vec![Layer::dense(vec![vec![1.0]], vec![0.0])]).is_err());
        assert!(Network::new(vec![1], vec![Layer::dense(vec![vec![f64::NAN]], vec![0.0])]).is_err());
        assert!(Network::new(vec![1], vec![Layer::Add("a".into())]).is_err());
        let bad_tap = Network::new(
            vec![1],
            vec![
                Layer::Save("a".into()),
                Layer::dense(vec![vec![1.0], vec![1.0]], vec![0.0, 0.0]),
                Layer::Add("a".into()),
            ],
        );
        assert!(bad_tap.is_err());
        let pool = Network::new(
            vec![1, 2, 2],
            vec![Layer::AvgPool2d(AvgPool2d {
                kernel: [3, 3],
                stride: [1, 1],
                padding: [0, 0],
            })],
        );
        assert!(pool.is_err());
    }

    #[test]
    fn residual_sums_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let branch = Network::random_mlp(&[3, 5, 3], &mut rng).unwrap();
        let mut layers = vec![Layer::Save("skip".into())];
        layers.extend(branch.layers().iter().cloned());
        layers.push(Layer::Add("skip".into()));
        let net = Network::new(vec![3], layers).unwrap();
        let x = [0.3, -1.2, 0.8];
        let y = net.logits(&x).unwrap();
        let b = branch.logits(&x).unwrap();
        for k in 0..3 {
            assert!((y[k] - (b[k] + x[k])).abs() <= 1e-12);
        }
    }

    #[test]
    fn conv_and_pool_shapes() {
        let net = Network::new(
            vec![2, 5, 5],
            vec![
                Layer::Conv2d(Conv2d {
                    in_channels: 2,
                    out_channels: 3,
                    kernel: [3, 3],
                    stride: [1, 1],
                    padding: [1, 1],
                    weight: vec![0.1; 54],
                    bias: vec![0.0; 3],
                }),
                Layer::Relu,
                Layer::AvgPool2d(AvgPool2d {
                    kernel: [2, 2],
                    stride: [2, 2],
                    padding: [0, 0],
                }),
                Layer::Flatten,
                Layer::dense(vec![vec![1.0; 12]], vec![0.0]),
            ],
        )
        .unwrap();
        assert_eq!(net.layer_shapes()[0], vec![3, 5, 5]);
        assert_eq!(net.layer_shapes()[2], vec![3, 2, 2]);
        assert_eq!(net.neuron_count(), 75);
        assert_eq!(net.output_dim(), 1);
        assert_eq!(net.depth(), 2);
    }

    #[test]
    fn next_crossing_examples() {
        let net = relu_identity();
        let (c, _) = net.next_crossing(&[-1.0], &[1.0], 1e-6).unwrap();
        assert_eq!(c, Crossing { lambda: 1.0, layer: 0, neuron: 0 });

        let two = Network::new(
            vec![1],
            vec![Layer::dense(vec![vec![2.0], vec![-1.0]], vec![-1.0, 0.25]), Layer::Relu],
        )
        .unwrap();
        let (c, _) = two.next_crossing(&[0.0], &[1.0], 1e-6).unwrap();
        assert_eq!(c.lambda, 0.25);
        assert_eq!((c.layer, c.neuron), (0, 1));

        let parallel = Network::new(vec![2], vec![Layer::dense(vec![vec![1.0, 0.0]], vec![0.0]), Layer::Relu]).unwrap();
        let (c, _) = parallel.next_crossing(&[1.0, 0.0], &[0.0, 1.0], 1e-6).unwrap();
        assert!(!c.is_finite());
    }

    #[test]
    fn ahead_gate_treats_near_hyperplane_as_crossed() {
        let net = relu_identity();
        let (c, p) = net.next_crossing(&[-1e-8], &[1.0], 1e-6).unwrap();
        assert!(!c.is_finite());
        assert_eq!(p.to_bits(), vec![true]);
        assert_eq!(net.pattern(&[-1e-8]).unwrap().to_bits(), vec![false]);
    }

    #[test]
    fn tie_goes_to_lowest_index() {
        let net = Network::new(
            vec![1],
            vec![Layer::dense(vec![vec![1.0], vec![1.0]], vec![-0.5, -0.5]), Layer::Relu],
        )
        .unwrap();
        let (c, _) = net.next_crossing(&[0.0], &[1.0], 1e-6).unwrap();
        assert_eq!((c.lambda, c.layer, c.neuron), (0.5, 0, 0));
    }
}
