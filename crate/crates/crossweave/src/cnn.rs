//! Minimal per-domain CNN: convolution, max-pooling, ReLU, dropout and full
//! layers with explicit-loop forward/backward and plain SGD.
//!
//! Activations flow through an optional hook after designated layers: the
//! hook receives per-channel standardized activations and may replace them
//! (the collaborative trainer splices the secure weave unit in there; solo
//! training and evaluation pass them through unchanged, so an identity
//! degree matrix reproduces solo behavior up to the fixed-point boundary).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::transfer::ActivationTensor;
use crate::{Error, Result};

/// One layer of the architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    Dropout,
    Dense {
        units: usize,
    },
}

/// Ordered layer descriptors plus hook positions (a hook fires after the
/// layer at the given index).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub hooks: Vec<usize>,
}

impl NetworkSpec {
    /// Two conv/pool blocks and a 10-way full layer; hooks after both pools.
    pub fn network_i() -> NetworkSpec {
        NetworkSpec {
            input: [28, 28, 1],
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 6,
                    kernel: 5,
                    pad: 0,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Conv {
                    out_channels: 12,
                    kernel: 5,
                    pad: 0,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Dropout,
                LayerSpec::Dense { units: 10 },
            ],
            hooks: vec![2, 5],
        }
    }

    /// Single conv/pool block.
    pub fn network_ii() -> NetworkSpec {
        NetworkSpec {
            input: [28, 28, 1],
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 20,
                    kernel: 5,
                    pad: 0,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Dropout,
                LayerSpec::Dense { units: 10 },
            ],
            hooks: vec![2],
        }
    }

    /// Three conv stages and two full layers.
    pub fn network_iii() -> NetworkSpec {
        NetworkSpec {
            input: [28, 28, 1],
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 6,
                    kernel: 5,
                    pad: 2,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Conv {
                    out_channels: 16,
                    kernel: 5,
                    pad: 0,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Conv {
                    out_channels: 120,
                    kernel: 5,
                    pad: 0,
                },
                LayerSpec::Relu,
                LayerSpec::Dropout,
                LayerSpec::Dense { units: 84 },
                LayerSpec::Relu,
                LayerSpec::Dense { units: 10 },
            ],
            hooks: vec![2, 5],
        }
    }

    pub fn by_name(name: &str) -> Result<NetworkSpec> {
        match name.trim().to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(Self::network_i()),
            "II" | "2" => Ok(Self::network_ii()),
            "III" | "3" => Ok(Self::network_iii()),
            other => Err(Error::Config(format!("unknown network '{other}'"))),
        }
    }

    /// Output shape of every layer, checking the chain is consistent.
    pub fn infer_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut shape = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match *layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    pad,
                } => {
                    let h = shape[0] + 2 * pad;
                    let w = shape[1] + 2 * pad;
                    if h < kernel || w < kernel {
                        return Err(Error::Config(format!(
                            "layer {i}: kernel {kernel} larger than padded input {h}x{w}"
                        )));
                    }
                    [h - kernel + 1, w - kernel + 1, out_channels]
                }
                LayerSpec::Relu | LayerSpec::Dropout => shape,
                LayerSpec::MaxPool { size } => {
                    if shape[0] % size != 0 || shape[1] % size != 0 {
                        return Err(Error::Config(format!(
                            "layer {i}: pool {size} does not divide {}x{}",
                            shape[0], shape[1]
                        )));
                    }
                    [shape[0] / size, shape[1] / size, shape[2]]
                }
                LayerSpec::Dense { units } => [1, 1, units],
            };
            out.push(shape);
        }
        for &h in &self.hooks {
            if h >= self.layers.len() {
                return Err(Error::Config(format!("hook after nonexistent layer {h}")));
            }
        }
        Ok(out)
    }

    pub fn num_classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Dense { units }) => *units,
            _ => 0,
        }
    }

    /// Hook output shapes, in hook order.
    pub fn hook_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let shapes = self.infer_shapes()?;
        Ok(self.hooks.iter().map(|&h| shapes[h]).collect())
    }
}

/// A mini-batch of activations laid out `(batch, h, w, c)` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTensor {
    pub batch: usize,
    pub shape: [usize; 3],
    pub data: Vec<f64>,
}

impl BatchTensor {
    pub fn zeros(batch: usize, shape: [usize; 3]) -> BatchTensor {
        BatchTensor {
            batch,
            shape,
            data: vec![0.0; batch * shape[0] * shape[1] * shape[2]],
        }
    }

    pub fn per_sample(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    /// View the whole batch as one activation map with the batch dimension
    /// folded into the height: extra locations for the transfer unit.
    pub fn to_activation(&self) -> ActivationTensor {
        ActivationTensor::new(
            [self.batch * self.shape[0], self.shape[1], self.shape[2]],
            self.data.clone(),
        )
    }

    pub fn from_activation(t: ActivationTensor, batch: usize, shape: [usize; 3]) -> BatchTensor {
        assert_eq!(t.len(), batch * shape[0] * shape[1] * shape[2]);
        BatchTensor {
            batch,
            shape,
            data: t.data,
        }
    }
}

/// Per-layer weights; layers without parameters carry `None`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum LayerParams {
    None,
    Conv { w: Vec<f64>, b: Vec<f64> },
    Dense { w: Vec<f64>, b: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
}

impl ModelParams {
    /// He-uniform initialization: limit = sqrt(6 / fan_in), biases zero.
    pub fn init(net: &NetworkSpec, seed: u64) -> Result<ModelParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = net.infer_shapes()?;
        let mut layers = Vec::with_capacity(net.layers.len());
        let mut in_shape = net.input;
        for (i, layer) in net.layers.iter().enumerate() {
            let params = match *layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    ..
                } => {
                    let fan_in = kernel * kernel * in_shape[2];
                    let limit = (6.0 / fan_in as f64).sqrt();
                    let w = (0..fan_in * out_channels)
                        .map(|_| rng.random_range(-limit..limit))
                        .collect();
                    LayerParams::Conv {
                        w,
                        b: vec![0.0; out_channels],
                    }
                }
                LayerSpec::Dense { units } => {
                    let fan_in = in_shape[0] * in_shape[1] * in_shape[2];
                    let limit = (6.0 / fan_in as f64).sqrt();
                    let w = (0..fan_in * units)
                        .map(|_| rng.random_range(-limit..limit))
                        .collect();
                    LayerParams::Dense {
                        w,
                        b: vec![0.0; units],
                    }
                }
                _ => LayerParams::None,
            };
            layers.push(params);
            in_shape = shapes[i];
        }
        Ok(ModelParams { layers })
    }

    pub fn zeros_like(&self) -> ModelParams {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                LayerParams::None => LayerParams::None,
                LayerParams::Conv { w, b } => LayerParams::Conv {
                    w: vec![0.0; w.len()],
                    b: vec![0.0; b.len()],
                },
                LayerParams::Dense { w, b } => LayerParams::Dense {
                    w: vec![0.0; w.len()],
                    b: vec![0.0; b.len()],
                },
            })
            .collect();
        ModelParams { layers }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| match l {
            LayerParams::None => true,
            LayerParams::Conv { w, b } | LayerParams::Dense { w, b } => {
                w.iter().chain(b).all(|v| v.is_finite())
            }
        })
    }
}

/// Training-time knobs; defaults follow the experimental setup
/// (batch 128, learning rate 0.01, dropout keep 0.8). Plain SGD at this
/// learning rate cannot get near the reference accuracy inside the step
/// budget; classical momentum closes that gap and matches what the era's
/// Java training stacks applied by default at these settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub dropout_keep: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            learning_rate: 0.01,
            momentum: 0.9,
            dropout_keep: 0.8,
            epochs: 10,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::Config("dropout keep must be in (0, 1]".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Forward-pass context: training applies dropout, evaluation does not.
pub enum Phase<'r> {
    Train {
        dropout_keep: f64,
        rng: &'r mut ChaCha8Rng,
    },
    Eval,
}

/// Everything the backward pass needs from a forward pass.
pub struct ForwardCache {
    /// Input to layer i (index 0 is the batch itself).
    inputs: Vec<BatchTensor>,
    pub logits: BatchTensor,
    pool_argmax: Vec<Option<Vec<usize>>>,
    /// Dropout keep masks, already divided by the keep probability.
    dropout_masks: Vec<Option<Vec<f64>>>,
    /// 1/(σ_c + ε) per channel at each hook.
    hook_scales: Vec<Option<Vec<f64>>>,
}

const STANDARDIZE_EPS: f64 = 1e-5;

/// Per-channel standardization over batch and spatial dims; returns the
/// standardized tensor and the per-channel inverse scale. Statistics are
/// treated as constants in backward.
pub fn standardize_per_channel(x: &BatchTensor) -> (BatchTensor, Vec<f64>) {
    let c = x.shape[2].max(1);
    let per_channel = (x.data.len() / c).max(1) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for (i, v) in x.data.iter().enumerate() {
        mean[i % c] += v;
    }
    for m in &mut mean {
        *m /= per_channel;
    }
    for (i, v) in x.data.iter().enumerate() {
        let d = v - mean[i % c];
        var[i % c] += d * d;
    }
    let inv: Vec<f64> = var
        .iter()
        .map(|v| 1.0 / ((v / per_channel).sqrt() + STANDARDIZE_EPS))
        .collect();
    let mut out = x.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        *v = (*v - mean[i % c]) * inv[i % c];
    }
    (out, inv)
}

fn conv_forward(
    x: &BatchTensor,
    w: &[f64],
    b: &[f64],
    kernel: usize,
    pad: usize,
    out_shape: [usize; 3],
) -> BatchTensor {
    let [ih, iw, ic] = x.shape;
    let [oh, ow, oc] = out_shape;
    let mut out = BatchTensor::zeros(x.batch, out_shape);
    for bi in 0..x.batch {
        let in_base = bi * ih * iw * ic;
        let out_base = bi * oh * ow * oc;
        for oy in 0..oh {
            for ox in 0..ow {
                let o0 = out_base + (oy * ow + ox) * oc;
                out.data[o0..o0 + oc].copy_from_slice(b);
                for ky in 0..kernel {
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= ih {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = ox + kx;
                        if ix < pad || ix - pad >= iw {
                            continue;
                        }
                        let i0 = in_base + ((iy - pad) * iw + (ix - pad)) * ic;
                        let w0 = (ky * kernel + kx) * ic * oc;
                        for ci in 0..ic {
                            let xv = x.data[i0 + ci];
                            if xv == 0.0 {
                                continue;
                            }
                            let wrow = w0 + ci * oc;
                            for co in 0..oc {
                                out.data[o0 + co] += xv * w[wrow + co];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(
    x: &BatchTensor,
    dy: &BatchTensor,
    w: &[f64],
    kernel: usize,
    pad: usize,
    dw: &mut [f64],
    db: &mut [f64],
) -> BatchTensor {
    let [ih, iw, ic] = x.shape;
    let [oh, ow, oc] = dy.shape;
    let mut dx = BatchTensor::zeros(x.batch, x.shape);
    for bi in 0..x.batch {
        let in_base = bi * ih * iw * ic;
        let out_base = bi * oh * ow * oc;
        for oy in 0..oh {
            for ox in 0..ow {
                let o0 = out_base + (oy * ow + ox) * oc;
                for co in 0..oc {
                    db[co] += dy.data[o0 + co];
                }
                for ky in 0..kernel {
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= ih {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = ox + kx;
                        if ix < pad || ix - pad >= iw {
                            continue;
                        }
                        let i0 = in_base + ((iy - pad) * iw + (ix - pad)) * ic;
                        let w0 = (ky * kernel + kx) * ic * oc;
                        for ci in 0..ic {
                            let xv = x.data[i0 + ci];
                            let wrow = w0 + ci * oc;
                            let mut acc = 0.0;
                            for co in 0..oc {
                                let g = dy.data[o0 + co];
                                dw[wrow + co] += xv * g;
                                acc += w[wrow + co] * g;
                            }
                            dx.data[i0 + ci] += acc;
                        }
                    }
                }
            }
        }
    }
    dx
}

fn pool_forward(x: &BatchTensor, size: usize, out_shape: [usize; 3]) -> (BatchTensor, Vec<usize>) {
    let [ih, iw, c] = x.shape;
    let [oh, ow, _] = out_shape;
    let mut out = BatchTensor::zeros(x.batch, out_shape);
    let mut argmax = vec![0usize; out.data.len()];
    for bi in 0..x.batch {
        let in_base = bi * ih * iw * c;
        let out_base = bi * oh * ow * c;
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for ky in 0..size {
                        for kx in 0..size {
                            let idx =
                                in_base + ((oy * size + ky) * iw + (ox * size + kx)) * c + ch;
                            if x.data[idx] > best {
                                best = x.data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = out_base + (oy * ow + ox) * c + ch;
                    out.data[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
    }
    (out, argmax)
}

fn dense_forward(x: &BatchTensor, w: &[f64], b: &[f64], units: usize) -> BatchTensor {
    let fan_in = x.per_sample();
    let mut out = BatchTensor::zeros(x.batch, [1, 1, units]);
    for bi in 0..x.batch {
        let x0 = bi * fan_in;
        let o0 = bi * units;
        out.data[o0..o0 + units].copy_from_slice(b);
        for i in 0..fan_in {
            let xv = x.data[x0 + i];
            if xv == 0.0 {
                continue;
            }
            let wrow = i * units;
            for u in 0..units {
                out.data[o0 + u] += xv * w[wrow + u];
            }
        }
    }
    out
}

/// Run the network forward, invoking `hook` after each hooked layer with the
/// standardized activations. The hook may return replacement activations
/// (the secure mix); identity is a passthrough.
pub fn forward_with<F>(
    net: &NetworkSpec,
    params: &ModelParams,
    batch: &BatchTensor,
    phase: &mut Phase,
    mut hook: F,
) -> Result<ForwardCache>
where
    F: FnMut(usize, BatchTensor) -> Result<BatchTensor>,
{
    if batch.shape != net.input {
        return Err(Error::ShapeMismatch {
            expected: net.input,
            got: batch.shape,
            context: "network input".into(),
        });
    }
    let shapes = net.infer_shapes()?;
    let n_layers = net.layers.len();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut pool_argmax = vec![None; n_layers];
    let mut dropout_masks = vec![None; n_layers];
    let mut hook_scales = vec![None; n_layers];
    let mut x = batch.clone();

    for (i, layer) in net.layers.iter().enumerate() {
        inputs.push(x.clone());
        x = match (*layer, &params.layers[i]) {
            (LayerSpec::Conv { kernel, pad, .. }, LayerParams::Conv { w, b }) => {
                conv_forward(&x, w, b, kernel, pad, shapes[i])
            }
            (LayerSpec::Relu, _) => {
                let mut y = x.clone();
                for v in &mut y.data {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                y
            }
            (LayerSpec::MaxPool { size }, _) => {
                let (y, argmax) = pool_forward(&x, size, shapes[i]);
                pool_argmax[i] = Some(argmax);
                y
            }
            (LayerSpec::Dropout, _) => match phase {
                Phase::Train { dropout_keep, rng } if *dropout_keep < 1.0 => {
                    let keep = *dropout_keep;
                    let mask: Vec<f64> = (0..x.data.len())
                        .map(|_| {
                            if rng.random::<f64>() < keep {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    let mut y = x.clone();
                    for (v, m) in y.data.iter_mut().zip(&mask) {
                        *v *= m;
                    }
                    dropout_masks[i] = Some(mask);
                    y
                }
                _ => x.clone(),
            },
            (LayerSpec::Dense { units }, LayerParams::Dense { w, b }) => {
                dense_forward(&x, w, b, units)
            }
            _ => {
                return Err(Error::Config(format!(
                    "layer {i}: parameters do not match the spec"
                )))
            }
        };
        if net.hooks.contains(&i) {
            let (standardized, inv) = standardize_per_channel(&x);
            hook_scales[i] = Some(inv);
            x = hook(i, standardized)?;
        }
    }

    Ok(ForwardCache {
        inputs,
        logits: x,
        pool_argmax,
        dropout_masks,
        hook_scales,
    })
}

/// Mean softmax cross-entropy over the batch, with the gradient w.r.t.
/// logits.
pub fn softmax_cross_entropy(logits: &BatchTensor, labels: &[u8]) -> (f64, BatchTensor) {
    let classes = logits.per_sample();
    assert_eq!(labels.len(), logits.batch);
    let mut dlogits = BatchTensor::zeros(logits.batch, logits.shape);
    let mut loss = 0.0;
    let scale = 1.0 / logits.batch as f64;
    for bi in 0..logits.batch {
        let row = &logits.data[bi * classes..(bi + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln() + max;
        let y = labels[bi] as usize;
        loss += (log_denom - row[y]) * scale;
        for k in 0..classes {
            let p = (row[k] - max).exp() / denom;
            dlogits.data[bi * classes + k] = (p - if k == y { 1.0 } else { 0.0 }) * scale;
        }
    }
    (loss, dlogits)
}

/// Output of a backward pass.
pub struct BackwardResult {
    pub grads: ModelParams,
    /// Gradient w.r.t. the network input.
    pub input_grad: BatchTensor,
    /// Gradient w.r.t. each hook output, in hook order (what the transfer
    /// unit's backward consumes).
    pub hook_grads: Vec<BatchTensor>,
}

/// Backpropagate from `dlogits`. At every hooked layer, `hook_grad` receives
/// the gradient w.r.t. the hook's output and may transform it (the
/// collaborative trainer applies its degree weighting there); the result is
/// then carried backward through the standardization scale.
pub fn backward_with<G>(
    net: &NetworkSpec,
    params: &ModelParams,
    cache: &ForwardCache,
    dlogits: BatchTensor,
    mut hook_grad: G,
) -> Result<BackwardResult>
where
    G: FnMut(usize, BatchTensor) -> Result<BatchTensor>,
{
    let mut grads = params.zeros_like();
    let mut hook_grads = Vec::new();
    let mut dy = dlogits;
    for (i, layer) in net.layers.iter().enumerate().rev() {
        if net.hooks.contains(&i) {
            hook_grads.push(dy.clone());
            let mut transformed = hook_grad(i, dy)?;
            let inv = cache.hook_scales[i]
                .as_ref()
                .expect("hook scale recorded in forward");
            let c = transformed.shape[2];
            for (k, v) in transformed.data.iter_mut().enumerate() {
                *v *= inv[k % c];
            }
            dy = transformed;
        }
        let x = &cache.inputs[i];
        dy = match (*layer, &params.layers[i], &mut grads.layers[i]) {
            (
                LayerSpec::Conv { kernel, pad, .. },
                LayerParams::Conv { w, .. },
                LayerParams::Conv { w: dw, b: db },
            ) => conv_backward(x, &dy, w, kernel, pad, dw, db),
            (LayerSpec::Relu, _, _) => {
                let mut dx = dy;
                for (g, &v) in dx.data.iter_mut().zip(&x.data) {
                    if v <= 0.0 {
                        *g = 0.0;
                    }
                }
                dx
            }
            (LayerSpec::MaxPool { .. }, _, _) => {
                let argmax = cache.pool_argmax[i].as_ref().expect("pool argmax cached");
                let mut dx = BatchTensor::zeros(x.batch, x.shape);
                for (o, &src) in argmax.iter().enumerate() {
                    dx.data[src] += dy.data[o];
                }
                dx
            }
            (LayerSpec::Dropout, _, _) => match &cache.dropout_masks[i] {
                Some(mask) => {
                    let mut dx = dy;
                    for (g, m) in dx.data.iter_mut().zip(mask) {
                        *g *= m;
                    }
                    dx
                }
                None => dy,
            },
            (
                LayerSpec::Dense { units },
                LayerParams::Dense { w, .. },
                LayerParams::Dense { w: dw, b: db },
            ) => {
                let fan_in = x.per_sample();
                let mut dx = BatchTensor::zeros(x.batch, x.shape);
                for bi in 0..x.batch {
                    let x0 = bi * fan_in;
                    let o0 = bi * units;
                    for u in 0..units {
                        db[u] += dy.data[o0 + u];
                    }
                    for k in 0..fan_in {
                        let xv = x.data[x0 + k];
                        let wrow = k * units;
                        let mut acc = 0.0;
                        for u in 0..units {
                            let g = dy.data[o0 + u];
                            dw[wrow + u] += xv * g;
                            acc += w[wrow + u] * g;
                        }
                        dx.data[x0 + k] = acc;
                    }
                }
                dx
            }
            _ => {
                return Err(Error::Config(format!(
                    "layer {i}: parameters do not match the spec"
                )))
            }
        };
    }
    hook_grads.reverse();
    Ok(BackwardResult {
        grads,
        input_grad: dy,
        hook_grads,
    })
}

/// SGD step with classical momentum: v <- mu*v + g, w <- w - lr*v.
/// `velocity` must have the same layout as `params` (start from
/// `zeros_like`); mu = 0 degrades to plain SGD.
pub fn sgd_step(
    params: &mut ModelParams,
    velocity: &mut ModelParams,
    grads: &ModelParams,
    lr: f64,
    mu: f64,
) {
    for ((p, v), g) in params
        .layers
        .iter_mut()
        .zip(&mut velocity.layers)
        .zip(&grads.layers)
    {
        match (p, v, g) {
            (
                LayerParams::Conv { w, b },
                LayerParams::Conv { w: vw, b: vb },
                LayerParams::Conv { w: gw, b: gb },
            )
            | (
                LayerParams::Dense { w, b },
                LayerParams::Dense { w: vw, b: vb },
                LayerParams::Dense { w: gw, b: gb },
            ) => {
                for ((x, vel), d) in w.iter_mut().zip(vw.iter_mut()).zip(gw) {
                    *vel = mu * *vel + d;
                    *x -= lr * *vel;
                }
                for ((x, vel), d) in b.iter_mut().zip(vb.iter_mut()).zip(gb) {
                    *vel = mu * *vel + d;
                    *x -= lr * *vel;
                }
            }
            _ => {}
        }
    }
    debug_assert!(params.is_finite(), "parameters went non-finite");
}

/// Fraction of argmax-correct predictions, evaluated with hooks
/// standardizing but not mixing, and no dropout.
pub fn evaluate(
    net: &NetworkSpec,
    params: &ModelParams,
    images: &[Vec<f64>],
    labels: &[u8],
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    assert_eq!(images.len(), labels.len());
    let classes = net.num_classes();
    let per_sample: usize = net.input.iter().product();
    let mut correct = 0usize;
    let mut start = 0;
    while start < images.len() {
        let end = (start + 256).min(images.len());
        let imgs = &images[start..end];
        let mut batch = BatchTensor::zeros(imgs.len(), net.input);
        for (bi, img) in imgs.iter().enumerate() {
            assert_eq!(img.len(), per_sample);
            batch.data[bi * per_sample..(bi + 1) * per_sample].copy_from_slice(img);
        }
        let cache = forward_with(net, params, &batch, &mut Phase::Eval, |_, t| Ok(t))?;
        for (bi, &label) in labels[start..end].iter().enumerate() {
            let row = &cache.logits.data[bi * classes..(bi + 1) * classes];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(k, _)| k)
                .unwrap();
            if pred == label as usize {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / images.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_net() -> NetworkSpec {
        NetworkSpec {
            input: [6, 6, 1],
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 2,
                    kernel: 3,
                    pad: 0,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Dense { units: 3 },
            ],
            hooks: vec![],
        }
    }

    fn batch_from(net: &NetworkSpec, rng: &mut ChaCha8Rng, batch: usize) -> BatchTensor {
        let mut b = BatchTensor::zeros(batch, net.input);
        for v in &mut b.data {
            *v = rng.random_range(-1.0..1.0);
        }
        b
    }

    #[test]
    fn network_i_shape_chain() {
        let shapes = NetworkSpec::network_i().infer_shapes().unwrap();
        assert_eq!(shapes[0], [24, 24, 6]);
        assert_eq!(shapes[2], [12, 12, 6]);
        assert_eq!(shapes[3], [8, 8, 12]);
        assert_eq!(shapes[5], [4, 4, 12]);
        assert_eq!(*shapes.last().unwrap(), [1, 1, 10]);
        assert_eq!(
            NetworkSpec::network_i().hook_shapes().unwrap(),
            vec![[12, 12, 6], [4, 4, 12]]
        );
    }

    #[test]
    fn network_ii_and_iii_shapes() {
        let ii = NetworkSpec::network_ii().infer_shapes().unwrap();
        assert_eq!(ii[0], [24, 24, 20]);
        assert_eq!(ii[2], [12, 12, 20]);
        assert_eq!(*ii.last().unwrap(), [1, 1, 10]);

        let iii = NetworkSpec::network_iii().infer_shapes().unwrap();
        assert_eq!(iii[0], [28, 28, 6]);
        assert_eq!(iii[2], [14, 14, 6]);
        assert_eq!(iii[3], [10, 10, 16]);
        assert_eq!(iii[5], [5, 5, 16]);
        assert_eq!(iii[6], [1, 1, 120]);
        assert_eq!(*iii.last().unwrap(), [1, 1, 10]);
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let net = toy_net();
        let params = ModelParams::init(&net, 1).unwrap().zeros_like();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = batch_from(&net, &mut rng, 3);
        let cache = forward_with(&net, &params, &batch, &mut Phase::Eval, |_, t| Ok(t)).unwrap();
        assert!(cache.logits.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_by_one_identity_conv_reproduces_input() {
        let net = NetworkSpec {
            input: [4, 4, 1],
            layers: vec![LayerSpec::Conv {
                out_channels: 1,
                kernel: 1,
                pad: 0,
            }],
            hooks: vec![],
        };
        let mut params = ModelParams::init(&net, 1).unwrap();
        params.layers[0] = LayerParams::Conv {
            w: vec![1.0],
            b: vec![0.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = batch_from(&net, &mut rng, 2);
        let cache = forward_with(&net, &params, &batch, &mut Phase::Eval, |_, t| Ok(t)).unwrap();
        assert_eq!(cache.logits.data, batch.data);
    }

    /// Central-difference gradient check on a toy net, step 1e-5.
    #[test]
    fn backward_matches_finite_differences() {
        let net = toy_net();
        let params = ModelParams::init(&net, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = batch_from(&net, &mut rng, 4);
        let labels = vec![0u8, 1, 2, 1];

        let loss_of = |p: &ModelParams| -> f64 {
            let cache = forward_with(&net, p, &batch, &mut Phase::Eval, |_, t| Ok(t)).unwrap();
            softmax_cross_entropy(&cache.logits, &labels).0
        };

        let cache = forward_with(&net, &params, &batch, &mut Phase::Eval, |_, t| Ok(t)).unwrap();
        let (_, dlogits) = softmax_cross_entropy(&cache.logits, &labels);
        let back = backward_with(&net, &params, &cache, dlogits, |_, g| Ok(g)).unwrap();

        let h = 1e-5;
        let mut max_rel: f64 = 0.0;
        for li in 0..net.layers.len() {
            let (w_len, b_len) = match &params.layers[li] {
                LayerParams::Conv { w, b } | LayerParams::Dense { w, b } => (w.len(), b.len()),
                LayerParams::None => continue,
            };
            let probes: Vec<(bool, usize)> = (0..w_len)
                .step_by((w_len / 7).max(1))
                .map(|k| (true, k))
                .chain((0..b_len).map(|k| (false, k)))
                .collect();
            for (is_w, k) in probes {
                let bump = |delta: f64| -> f64 {
                    let mut p = params.clone();
                    match &mut p.layers[li] {
                        LayerParams::Conv { w, b } | LayerParams::Dense { w, b } => {
                            if is_w {
                                w[k] += delta;
                            } else {
                                b[k] += delta;
                            }
                        }
                        LayerParams::None => unreachable!(),
                    }
                    loss_of(&p)
                };
                let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                let analytic = match &back.grads.layers[li] {
                    LayerParams::Conv { w, b } | LayerParams::Dense { w, b } => {
                        if is_w {
                            w[k]
                        } else {
                            b[k]
                        }
                    }
                    LayerParams::None => unreachable!(),
                };
                let rel = (numeric - analytic).abs() / analytic.abs().max(1e-6);
                max_rel = max_rel.max(rel);
            }
        }
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn confident_correct_prediction_has_tiny_gradient() {
        let logits = BatchTensor {
            batch: 1,
            shape: [1, 1, 3],
            data: vec![30.0, 0.0, 0.0],
        };
        let (loss, d) = softmax_cross_entropy(&logits, &[0]);
        assert!(loss < 1e-9);
        assert!(d.data.iter().all(|g| g.abs() < 1e-9));
    }

    #[test]
    fn duplicated_sample_keeps_mean_gradient() {
        let net = toy_net();
        let params = ModelParams::init(&net, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let single = batch_from(&net, &mut rng, 1);
        let mut double = BatchTensor::zeros(2, net.input);
        double.data[..single.data.len()].copy_from_slice(&single.data);
        double.data[single.data.len()..].copy_from_slice(&single.data);

        let grad_of = |batch: &BatchTensor, labels: &[u8]| -> ModelParams {
            let cache =
                forward_with(&net, &params, batch, &mut Phase::Eval, |_, t| Ok(t)).unwrap();
            let (_, d) = softmax_cross_entropy(&cache.logits, labels);
            backward_with(&net, &params, &cache, d, |_, g| Ok(g))
                .unwrap()
                .grads
        };
        // The loss is a batch mean: a duplicated sample contributes twice the
        // raw gradient at half the weight, so the means coincide exactly.
        let g1 = grad_of(&single, &[1]);
        let g2 = grad_of(&double, &[1, 1]);
        for (a, b) in g1.layers.iter().zip(&g2.layers) {
            match (a, b) {
                (LayerParams::Conv { w: w1, .. }, LayerParams::Conv { w: w2, .. })
                | (LayerParams::Dense { w: w1, .. }, LayerParams::Dense { w: w2, .. }) => {
                    for (x, y) in w1.iter().zip(w2) {
                        assert!((x - y).abs() < 1e-12);
                    }
                }
                _ => {}
            }
        }
    }

    #[test]
    fn maxpool_backward_routes_to_argmax_only() {
        let net = NetworkSpec {
            input: [2, 2, 1],
            layers: vec![LayerSpec::MaxPool { size: 2 }],
            hooks: vec![],
        };
        let params = ModelParams {
            layers: vec![LayerParams::None],
        };
        let batch = BatchTensor {
            batch: 1,
            shape: [2, 2, 1],
            data: vec![0.1, 0.9, 0.4, 0.2],
        };
        let cache = forward_with(&net, &params, &batch, &mut Phase::Eval, |_, t| Ok(t)).unwrap();
        assert_eq!(cache.logits.data, vec![0.9]);
        let dy = BatchTensor {
            batch: 1,
            shape: [1, 1, 1],
            data: vec![5.0],
        };
        let back = backward_with(&net, &params, &cache, dy, |_, g| Ok(g)).unwrap();
        assert_eq!(back.input_grad.data, vec![0.0, 5.0, 0.0, 0.0]);
    }

    #[test]
    fn standardize_outputs_unit_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut x = BatchTensor::zeros(8, [4, 4, 3]);
        for v in &mut x.data {
            *v = rng.random_range(0.0..10.0);
        }
        let (y, inv) = standardize_per_channel(&x);
        assert_eq!(inv.len(), 3);
        for ch in 0..3 {
            let vals: Vec<f64> = y.data.iter().skip(ch).step_by(3).cloned().collect();
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn evaluate_chance_level_and_errors() {
        let net = NetworkSpec::network_ii();
        let params = ModelParams::init(&net, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let images: Vec<Vec<f64>> = (0..1000)
            .map(|_| (0..28 * 28).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let labels: Vec<u8> = (0..1000).map(|i| (i % 10) as u8).collect();
        let acc = evaluate(&net, &params, &images, &labels).unwrap();
        assert!((acc - 0.1).abs() <= 0.03, "chance-level accuracy was {acc}");
        assert!(matches!(
            evaluate(&net, &params, &[], &[]),
            Err(Error::EmptyTestSet)
        ));
    }
}
