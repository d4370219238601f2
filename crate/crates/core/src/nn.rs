//! A small CNN engine for sequential networks: direct convolution, ReLU,
//! pooling, linear layers, softmax cross-entropy and momentum SGD with
//! hand-written reverse mode.
//!
//! Batchnorm always runs in inference mode with its stored statistics; only
//! its affine parameters train. That keeps a pruned network an exact slice of
//! its parent.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result, ScapError};
use crate::network::{Activation, ConvSpec, Layer, LinearSpec, NetworkSpec};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub eps: T,
}

impl<T: Scalar> BatchNormParams<T> {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            eps: T::lit(1e-5),
        }
    }

    fn inv_std(&self, c: usize) -> T {
        T::one() / (self.var[c] + self.eps).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    /// `(C_out, C_in, k_h, k_w)` row-major.
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
    pub bn: Option<BatchNormParams<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<T> {
    /// `(out, in)` row-major.
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams<T> {
    Conv(ConvParams<T>),
    Linear(LinearParams<T>),
    Stateless,
}

impl<T: Scalar> LayerParams<T> {
    /// Trainable tensors in a fixed order: weight, bias, then BN scale and shift.
    pub fn trainable(&self) -> Vec<&Vec<T>> {
        match self {
            LayerParams::Conv(c) => {
                let mut v = vec![&c.weight];
                v.extend(c.bias.as_ref());
                if let Some(bn) = &c.bn {
                    v.push(&bn.gamma);
                    v.push(&bn.beta);
                }
                v
            }
            LayerParams::Linear(l) => {
                let mut v = vec![&l.weight];
                v.extend(l.bias.as_ref());
                v
            }
            LayerParams::Stateless => Vec::new(),
        }
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Vec<T>> {
        match self {
            LayerParams::Conv(c) => {
                let mut v = vec![&mut c.weight];
                v.extend(c.bias.as_mut());
                if let Some(bn) = &mut c.bn {
                    v.push(&mut bn.gamma);
                    v.push(&mut bn.beta);
                }
                v
            }
            LayerParams::Linear(l) => {
                let mut v = vec![&mut l.weight];
                v.extend(l.bias.as_mut());
                v
            }
            LayerParams::Stateless => Vec::new(),
        }
    }

    /// Same structure, every value zero (gradients and momentum buffers).
    pub fn zeros_like(&self) -> Self {
        let z = |v: &Vec<T>| vec![T::zero(); v.len()];
        match self {
            LayerParams::Conv(c) => LayerParams::Conv(ConvParams {
                weight: z(&c.weight),
                bias: c.bias.as_ref().map(z),
                bn: c.bn.as_ref().map(|bn| BatchNormParams {
                    gamma: z(&bn.gamma),
                    beta: z(&bn.beta),
                    mean: z(&bn.mean),
                    var: z(&bn.var),
                    eps: bn.eps,
                }),
            }),
            LayerParams::Linear(l) => LayerParams::Linear(LinearParams { weight: z(&l.weight), bias: l.bias.as_ref().map(z) }),
            LayerParams::Stateless => LayerParams::Stateless,
        }
    }

    pub fn param_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum::<usize>()
            + match self {
                LayerParams::Conv(ConvParams { bn: Some(bn), .. }) => bn.mean.len() + bn.var.len(),
                _ => 0,
            }
    }
}

/// A sequential network together with its weights and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub spec: NetworkSpec,
    pub layers: Vec<LayerParams<T>>,
    pub velocity: Vec<LayerParams<T>>,
    pub seed: u64,
}

/// Where a conv layer's output map is recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum CapturePoint {
    #[default]
    PostActivation,
    PreActivation,
}

impl fmt::Display for CapturePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CapturePoint::PostActivation => "post",
            CapturePoint::PreActivation => "pre",
        })
    }
}

impl FromStr for CapturePoint {
    type Err = ScapError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "post" | "post_activation" => Ok(CapturePoint::PostActivation),
            "pre" | "pre_activation" => Ok(CapturePoint::PreActivation),
            other => Err(invalid!("unknown capture point '{other}' (expected post or pre)")),
        }
    }
}

/// Cached input/output pairs of one conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CapturedLayer<T> {
    /// Index into the spec's layer list.
    pub layer_index: usize,
    pub x: Tensor4<T>,
    pub y: Tensor4<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationPool<T> {
    pub capture_point: CapturePoint,
    pub layers: Vec<CapturedLayer<T>>,
}

impl<T: Scalar> ActivationPool<T> {
    pub fn samples(&self) -> usize {
        self.layers.first().map_or(0, |l| l.x.shape().b)
    }
}

/// Labeled image set.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub images: Tensor4<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Tensor4<T>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.shape().b != labels.len() {
            return Err(invalid!("{} images but {} labels", images.shape().b, labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(invalid!("label {bad} out of range for {classes} classes"));
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.gather_batch(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        })
    }
}

/// Synthetic images: a Gaussian blob whose position depends on the class,
/// overlaid with a horizontal stripe pattern of class-dependent frequency,
/// plus white noise. Labels cycle through the classes, so counts are balanced.
pub fn synthetic_dataset<T: Scalar>(
    samples: usize,
    classes: usize,
    channels: usize,
    size: usize,
    seed: u64,
) -> Result<Dataset<T>> {
    if classes < 2 || channels == 0 || size < 2 {
        return Err(invalid!("synthetic data needs at least 2 classes, 1 channel and 2x2 images"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let sigma = s / 6.0;
    let mut data = Vec::with_capacity(samples * channels * size * size);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let label = i % classes;
        let angle = std::f64::consts::TAU * label as f64 / classes as f64;
        let cy = s / 2.0 + s / 4.0 * angle.sin() + rng.random_range(-1.0..1.0);
        let cx = s / 2.0 + s / 4.0 * angle.cos() + rng.random_range(-1.0..1.0);
        let freq = std::f64::consts::TAU * (label + 1) as f64 / s;
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        for _ in 0..channels {
            for h in 0..size {
                for w in 0..size {
                    let d2 = (h as f64 - cy).powi(2) + (w as f64 - cx).powi(2);
                    let noise: f64 = rng.sample(StandardNormal);
                    let v = (-d2 / (2.0 * sigma * sigma)).exp() + 0.3 * (freq * w as f64 + phase).sin() + 0.2 * noise;
                    data.push(T::lit(v));
                }
            }
        }
        labels.push(label);
    }
    Dataset::new(Tensor4::new([samples, channels, size, size], data)?, labels, classes)
}

/// Plain momentum-SGD schedule with step decay by 10× at each listed epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub decay_epochs: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self { epochs: 50, learning_rate: 0.05, momentum: 0.9, weight_decay: 5e-4, batch_size: 32, decay_epochs: vec![25, 40], seed: 0 }
    }
}

impl TrainSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.learning_rate / 10f64.powi(decays as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
}

enum Trace<T> {
    Conv { input: Tensor4<T>, conv_out: Tensor4<T>, pre_act: Tensor4<T> },
    MaxPool { input_shape: Shape4, argmax: Vec<usize> },
    AvgPool { input_shape: Shape4 },
    GlobalAvgPool { input_shape: Shape4 },
    Flatten { input_shape: Shape4 },
    Linear { input: Tensor4<T>, pre_act: Tensor4<T> },
}

struct RunOptions<'a> {
    trace: bool,
    capture: Option<CapturePoint>,
    keep: Option<&'a [Vec<usize>]>,
}

struct RunOutput<T> {
    output: Tensor4<T>,
    traces: Vec<Trace<T>>,
    captured: Vec<CapturedLayer<T>>,
}

impl<T: Scalar> ModelState<T> {
    /// He-normal weights, zero biases, identity batchnorm.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.require_sequential()?;
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |n: usize, fan_in: usize| -> Vec<T> {
            let std = (2.0 / fan_in as f64).sqrt();
            (0..n).map(|_| T::lit(std * rng.sample::<f64, _>(StandardNormal))).collect()
        };
        let layers: Vec<LayerParams<T>> = spec
            .layers
            .iter()
            .map(|layer| match layer {
                Layer::Conv(c) => LayerParams::Conv(ConvParams {
                    weight: normal(c.weight_len(), c.filter_len()),
                    bias: c.bias.then(|| vec![T::zero(); c.out_channels]),
                    bn: c.batchnorm.then(|| BatchNormParams::identity(c.out_channels)),
                }),
                Layer::Linear(l) => LayerParams::Linear(LinearParams {
                    weight: normal(l.in_features * l.out_features, l.in_features),
                    bias: l.bias.then(|| vec![T::zero(); l.out_features]),
                }),
                _ => LayerParams::Stateless,
            })
            .collect();
        let velocity = layers.iter().map(LayerParams::zeros_like).collect();
        Ok(Self { spec, layers, velocity, seed })
    }

    /// Checks that every parameter tensor matches the spec.
    pub fn validate(&self) -> Result<()> {
        self.spec.require_sequential()?;
        self.spec.validate()?;
        if self.layers.len() != self.spec.layers.len() || self.velocity.len() != self.layers.len() {
            return Err(ScapError::Validation(format!(
                "model has {} parameter slots for {} layers",
                self.layers.len(),
                self.spec.layers.len()
            )));
        }
        for (i, (layer, params)) in self.spec.layers.iter().zip(&self.layers).enumerate() {
            let mismatch = |what: &str| ScapError::Validation(format!("layer {i}: {what} does not match the spec"));
            match (layer, params) {
                (Layer::Conv(c), LayerParams::Conv(p)) => {
                    if p.weight.len() != c.weight_len() {
                        return Err(mismatch("conv weight size"));
                    }
                    if p.bias.as_ref().map(Vec::len) != c.bias.then_some(c.out_channels) {
                        return Err(mismatch("conv bias"));
                    }
                    let bn_ok = match &p.bn {
                        None => !c.batchnorm,
                        Some(bn) => {
                            c.batchnorm
                                && [&bn.gamma, &bn.beta, &bn.mean, &bn.var].iter().all(|v| v.len() == c.out_channels)
                        }
                    };
                    if !bn_ok {
                        return Err(mismatch("batchnorm"));
                    }
                }
                (Layer::Linear(l), LayerParams::Linear(p)) => {
                    if p.weight.len() != l.in_features * l.out_features {
                        return Err(mismatch("linear weight size"));
                    }
                    if p.bias.as_ref().map(Vec::len) != l.bias.then_some(l.out_features) {
                        return Err(mismatch("linear bias"));
                    }
                }
                (Layer::Conv(_) | Layer::Linear(_), _) => return Err(mismatch("parameter kind")),
                (_, LayerParams::Stateless) => {}
                _ => return Err(mismatch("parameter kind")),
            }
        }
        for (p, v) in self.layers.iter().zip(&self.velocity) {
            let ps: Vec<usize> = p.trainable().iter().map(|t| t.len()).collect();
            let vs: Vec<usize> = v.trainable().iter().map(|t| t.len()).collect();
            if ps != vs {
                return Err(ScapError::Validation("momentum buffers do not match the parameters".into()));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerParams::param_count).sum()
    }

    pub fn conv_params(&self, layer_index: usize) -> Result<(&ConvSpec, &ConvParams<T>)> {
        match (self.spec.layers.get(layer_index), self.layers.get(layer_index)) {
            (Some(Layer::Conv(c)), Some(LayerParams::Conv(p))) => Ok((c, p)),
            _ => Err(invalid!("layer {layer_index} is not a conv layer")),
        }
    }

    /// Flattened weights of each output filter of a conv layer.
    pub fn filters(&self, layer_index: usize) -> Result<Vec<&[T]>> {
        let (c, p) = self.conv_params(layer_index)?;
        Ok(p.weight.chunks(c.filter_len()).collect())
    }

    /// Logits `(B, classes, 1, 1)`.
    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        Ok(self.run(x, RunOptions { trace: false, capture: None, keep: None })?.output)
    }

    /// Forward pass that also records `(X, Y)` for every conv layer.
    pub fn forward_capture(&self, x: &Tensor4<T>, point: CapturePoint) -> Result<(Tensor4<T>, ActivationPool<T>)> {
        let out = self.run(x, RunOptions { trace: false, capture: Some(point), keep: None })?;
        Ok((out.output, ActivationPool { capture_point: point, layers: out.captured }))
    }

    /// Forward pass with every conv channel outside `keep[j]` (j-th conv
    /// layer) forced to zero after its activation. Captures post-mask outputs.
    pub fn forward_masked(&self, x: &Tensor4<T>, keep: &[Vec<usize>]) -> Result<(Tensor4<T>, ActivationPool<T>)> {
        if keep.len() != self.spec.conv_layers().len() {
            return Err(invalid!("mask covers {} conv layers, network has {}", keep.len(), self.spec.conv_layers().len()));
        }
        let out = self.run(x, RunOptions { trace: false, capture: Some(CapturePoint::PostActivation), keep: Some(keep) })?;
        Ok((out.output, ActivationPool { capture_point: CapturePoint::PostActivation, layers: out.captured }))
    }

    /// Captures in chunks of `chunk` samples and concatenates along the batch.
    pub fn capture_pool(&self, x: &Tensor4<T>, point: CapturePoint, chunk: usize) -> Result<ActivationPool<T>> {
        let b = x.shape().b;
        if b == 0 {
            return Err(invalid!("activation pool needs at least one sample"));
        }
        let chunk = chunk.max(1);
        let mut parts: Vec<ActivationPool<T>> = Vec::new();
        let mut start = 0;
        while start < b {
            let end = (start + chunk).min(b);
            parts.push(self.forward_capture(&x.batch_slice(start..end)?, point)?.1);
            start = end;
        }
        let n_layers = parts[0].layers.len();
        let mut layers = Vec::with_capacity(n_layers);
        for j in 0..n_layers {
            let xs: Vec<&Tensor4<T>> = parts.iter().map(|p| &p.layers[j].x).collect();
            let ys: Vec<&Tensor4<T>> = parts.iter().map(|p| &p.layers[j].y).collect();
            layers.push(CapturedLayer { layer_index: parts[0].layers[j].layer_index, x: concat_batch(&xs)?, y: concat_batch(&ys)? });
        }
        Ok(ActivationPool { capture_point: point, layers })
    }

    fn run(&self, x: &Tensor4<T>, opts: RunOptions<'_>) -> Result<RunOutput<T>> {
        let s = x.shape();
        let inp = self.spec.input;
        if (s.c, s.h, s.w) != (inp.c, inp.h, inp.w) {
            return Err(invalid!("input batch {s} does not match the network input {inp}"));
        }
        let mut traces = Vec::new();
        let mut captured = Vec::new();
        let mut cur = x.clone();
        let mut conv_ordinal = 0;
        for (i, (layer, params)) in self.spec.layers.iter().zip(&self.layers).enumerate() {
            cur = match (layer, params) {
                (Layer::Conv(c), LayerParams::Conv(p)) => {
                    let conv_out = conv_forward(&cur, c, &p.weight, p.bias.as_deref());
                    let pre_act = match &p.bn {
                        Some(bn) => bn_forward(&conv_out, bn),
                        None => conv_out.clone(),
                    };
                    let mut out = activate(&pre_act, c.activation);
                    if let Some(keep) = opts.keep {
                        zero_channels(&mut out, &keep[conv_ordinal])?;
                    }
                    if let Some(point) = opts.capture {
                        let y = match point {
                            CapturePoint::PostActivation => out.clone(),
                            CapturePoint::PreActivation => pre_act.clone(),
                        };
                        captured.push(CapturedLayer { layer_index: i, x: cur.clone(), y });
                    }
                    conv_ordinal += 1;
                    if opts.trace {
                        traces.push(Trace::Conv { input: cur, conv_out, pre_act });
                    }
                    out
                }
                (Layer::Linear(l), LayerParams::Linear(p)) => {
                    let pre_act = linear_forward(&cur, l, &p.weight, p.bias.as_deref());
                    let out = activate(&pre_act, l.activation);
                    if opts.trace {
                        traces.push(Trace::Linear { input: cur, pre_act });
                    }
                    out
                }
                (&Layer::MaxPool { kernel, stride }, _) => {
                    let (out, argmax) = maxpool_forward(&cur, kernel, stride);
                    if opts.trace {
                        traces.push(Trace::MaxPool { input_shape: cur.shape(), argmax });
                    }
                    out
                }
                (&Layer::AvgPool { kernel, stride }, _) => {
                    let out = avgpool_forward(&cur, kernel, stride);
                    if opts.trace {
                        traces.push(Trace::AvgPool { input_shape: cur.shape() });
                    }
                    out
                }
                (Layer::GlobalAvgPool, _) => {
                    let out = avgpool_forward(&cur, 0, 0);
                    if opts.trace {
                        traces.push(Trace::GlobalAvgPool { input_shape: cur.shape() });
                    }
                    out
                }
                (Layer::Flatten, _) => {
                    let shape = cur.shape();
                    if opts.trace {
                        traces.push(Trace::Flatten { input_shape: shape });
                    }
                    cur.reshape([shape.b, shape.sample(), 1, 1])?
                }
                _ => return Err(ScapError::Validation(format!("layer {i} parameters do not match the spec"))),
            };
        }
        Ok(RunOutput { output: cur, traces, captured })
    }

    /// Mean softmax cross-entropy and its gradient for every layer.
    pub fn loss_and_grads(&self, x: &Tensor4<T>, labels: &[usize]) -> Result<(T, Vec<LayerParams<T>>)> {
        let RunOutput { output, traces, .. } = self.run(x, RunOptions { trace: true, capture: None, keep: None })?;
        let (loss, mut grad) = softmax_cross_entropy(&output, labels)?;
        let mut grads: Vec<LayerParams<T>> = self.layers.iter().map(LayerParams::zeros_like).collect();
        for (i, trace) in traces.into_iter().enumerate().rev() {
            let layer = &self.spec.layers[i];
            grad = match (trace, layer, &self.layers[i], &mut grads[i]) {
                (Trace::Conv { input, conv_out, pre_act }, Layer::Conv(c), LayerParams::Conv(p), LayerParams::Conv(g)) => {
                    let mut d = activation_backward(&grad, &pre_act, c.activation);
                    if let (Some(bn), Some(gbn)) = (&p.bn, &mut g.bn) {
                        d = bn_backward(&d, &conv_out, bn, gbn);
                    }
                    conv_backward(&input, c, &p.weight, &d, g)
                }
                (Trace::Linear { input, pre_act }, Layer::Linear(l), LayerParams::Linear(p), LayerParams::Linear(g)) => {
                    let d = activation_backward(&grad, &pre_act, l.activation);
                    linear_backward(&input, l, &p.weight, &d, g)
                }
                (Trace::MaxPool { input_shape, argmax }, ..) => maxpool_backward(&grad, input_shape, &argmax),
                (Trace::AvgPool { input_shape }, &Layer::AvgPool { kernel, stride }, ..) => {
                    avgpool_backward(&grad, input_shape, kernel, stride)
                }
                (Trace::GlobalAvgPool { input_shape }, ..) => avgpool_backward(&grad, input_shape, 0, 0),
                (Trace::Flatten { input_shape }, ..) => grad.reshape(input_shape)?,
                _ => unreachable!("traces are recorded in layer order"),
            };
        }
        Ok((loss, grads))
    }

    /// One momentum-SGD step on a batch; returns the loss before the update.
    ///
    /// `g ← ∇ + λ·w`, `v ← μ·v + g`, `w ← w − η·v` on every trainable tensor.
    pub fn backward_and_step(&mut self, x: &Tensor4<T>, labels: &[usize], lr: f64, momentum: f64, weight_decay: f64) -> Result<T> {
        if lr < 0.0 || !(0.0..1.0).contains(&momentum) || weight_decay < 0.0 {
            return Err(invalid!("need lr >= 0, momentum in [0, 1), weight decay >= 0"));
        }
        let (loss, grads) = self.loss_and_grads(x, labels)?;
        let (lr, mu, wd) = (T::lit(lr), T::lit(momentum), T::lit(weight_decay));
        for ((p, v), g) in self.layers.iter_mut().zip(&mut self.velocity).zip(&grads) {
            for ((pw, vw), gw) in p.trainable_mut().into_iter().zip(v.trainable_mut()).zip(g.trainable()) {
                for ((w, vel), &d) in pw.iter_mut().zip(vw.iter_mut()).zip(gw) {
                    *vel = mu * *vel + d + wd * *w;
                    *w -= lr * *vel;
                }
            }
        }
        Ok(loss)
    }

    /// Epoch loop with per-epoch shuffling; returns per-epoch mean loss and
    /// training accuracy measured on the fly.
    pub fn train(&mut self, data: &Dataset<T>, schedule: &TrainSchedule) -> Result<Vec<EpochStats>> {
        if data.is_empty() {
            return Err(invalid!("cannot train on an empty dataset"));
        }
        if schedule.batch_size == 0 {
            return Err(invalid!("batch size must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut log = Vec::with_capacity(schedule.epochs);
        for epoch in 0..schedule.epochs {
            order.shuffle(&mut rng);
            let lr = schedule.lr_at(epoch);
            let (mut loss_sum, mut correct) = (0.0, 0usize);
            for chunk in order.chunks(schedule.batch_size) {
                let x = data.images.gather_batch(chunk)?;
                let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
                correct += predictions(&self.forward(&x)?).iter().zip(&labels).filter(|(p, l)| p == l).count();
                let loss = self.backward_and_step(&x, &labels, lr, schedule.momentum, schedule.weight_decay)?;
                loss_sum += loss.to_f64_lossy() * chunk.len() as f64;
            }
            log.push(EpochStats { loss: loss_sum / data.len() as f64, accuracy: correct as f64 / data.len() as f64 });
        }
        Ok(log)
    }

    /// Top-1 accuracy.
    pub fn evaluate(&self, data: &Dataset<T>) -> Result<f64> {
        if data.is_empty() {
            return Err(invalid!("cannot evaluate on an empty dataset"));
        }
        let preds = self.predict(&data.images)?;
        Ok(preds.iter().zip(&data.labels).filter(|(p, l)| p == l).count() as f64 / data.len() as f64)
    }

    /// Argmax class per sample, ties to the lowest index.
    pub fn predict(&self, x: &Tensor4<T>) -> Result<Vec<usize>> {
        let b = x.shape().b;
        let mut out = Vec::with_capacity(b);
        let mut start = 0;
        while start < b {
            let end = (start + 256).min(b);
            out.extend(predictions(&self.forward(&x.batch_slice(start..end)?)?));
            start = end;
        }
        Ok(out)
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Worst `‖a − n‖ / (‖a‖² + ‖n‖²)^½` over the parameter tensors.
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because the ±step probes land on different sides
    /// of a ReLU or max-pool switch, where the loss is not differentiable.
    pub skipped: usize,
}

/// Compares [`ModelState::loss_and_grads`] against central differences of
/// the loss with the given step, one parameter coordinate at a time.
pub fn gradient_check(model: &ModelState<f64>, x: &Tensor4<f64>, labels: &[usize], step: f64) -> Result<GradCheckReport> {
    let (_, grads) = model.loss_and_grads(x, labels)?;
    let mut probe = model.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, skipped: 0 };
    for (li, g) in grads.iter().enumerate() {
        for (ti, analytic) in g.trainable().iter().enumerate() {
            let (mut diff2, mut norm2) = (0.0, 0.0);
            for (idx, &a) in analytic.iter().enumerate() {
                let orig = probe.layers[li].trainable()[ti][idx];
                let mut eval = |v: f64| -> Result<(f64, Vec<usize>)> {
                    probe.layers[li].trainable_mut()[ti][idx] = v;
                    let out = probe.run(x, RunOptions { trace: true, capture: None, keep: None })?;
                    Ok((softmax_cross_entropy(&out.output, labels)?.0, switch_pattern(&probe.spec, &out.traces)))
                };
                let (plus, pat_plus) = eval(orig + step)?;
                let (minus, pat_minus) = eval(orig - step)?;
                probe.layers[li].trainable_mut()[ti][idx] = orig;
                if pat_plus != pat_minus {
                    report.skipped += 1;
                    continue;
                }
                report.checked += 1;
                let numeric = (plus - minus) / (2.0 * step);
                diff2 += (a - numeric).powi(2);
                norm2 += a * a + numeric * numeric;
            }
            if norm2 > 1e-24 {
                report.max_rel_error = report.max_rel_error.max(diff2.sqrt() / norm2.sqrt());
            }
        }
    }
    Ok(report)
}

/// ReLU on/off bits and max-pool winners of a traced pass.
fn switch_pattern<T: Scalar>(spec: &NetworkSpec, traces: &[Trace<T>]) -> Vec<usize> {
    let mut pattern = Vec::new();
    for (layer, trace) in spec.layers.iter().zip(traces) {
        match (layer, trace) {
            (Layer::Conv(ConvSpec { activation: Activation::Relu, .. }), Trace::Conv { pre_act, .. })
            | (Layer::Linear(LinearSpec { activation: Activation::Relu, .. }), Trace::Linear { pre_act, .. }) => {
                pattern.extend(pre_act.data().iter().map(|&v| usize::from(v > T::zero())));
            }
            (_, Trace::MaxPool { argmax, .. }) => pattern.extend_from_slice(argmax),
            _ => {}
        }
    }
    pattern
}

/// Argmax over the channel axis of `(B, K, 1, 1)` logits.
pub fn predictions<T: Scalar>(logits: &Tensor4<T>) -> Vec<usize> {
    (0..logits.shape().b)
        .map(|b| {
            let row = logits.sample(b);
            row.iter().enumerate().fold(0, |best, (k, &v)| if v > row[best] { k } else { best })
        })
        .collect()
}

/// Mean softmax cross-entropy over the batch and `∂loss/∂logits`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor4<T>, labels: &[usize]) -> Result<(T, Tensor4<T>)> {
    let s = logits.shape();
    if s.h != 1 || s.w != 1 {
        return Err(invalid!("logits must be (B, K, 1, 1), got {s}"));
    }
    if labels.len() != s.b || s.b == 0 {
        return Err(invalid!("{} labels for a batch of {}", labels.len(), s.b));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= s.c) {
        return Err(invalid!("label {bad} out of range for {} classes", s.c));
    }
    let inv_b = T::one() / T::from_usize_lossy(s.b);
    let mut grad = Vec::with_capacity(s.len());
    let mut loss = T::zero();
    for (b, &label) in labels.iter().enumerate() {
        let row = logits.sample(b);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        loss += sum.ln() - (row[label] - max);
        for (k, e) in exps.into_iter().enumerate() {
            let onehot = if k == label { T::one() } else { T::zero() };
            grad.push((e / sum - onehot) * inv_b);
        }
    }
    Ok((loss * inv_b, Tensor4::new(s, grad)?))
}

fn concat_batch<T: Scalar>(parts: &[&Tensor4<T>]) -> Result<Tensor4<T>> {
    let first = parts[0].shape();
    let mut data = Vec::new();
    let mut b = 0;
    for p in parts {
        let s = p.shape();
        if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
            return Err(invalid!("cannot concatenate {s} onto {first}"));
        }
        b += s.b;
        data.extend_from_slice(p.data());
    }
    Tensor4::new([b, first.c, first.h, first.w], data)
}

fn zero_channels<T: Scalar>(t: &mut Tensor4<T>, keep: &[usize]) -> Result<()> {
    let s = t.shape();
    if let Some(&bad) = keep.iter().find(|&&k| k >= s.c) {
        return Err(invalid!("keep index {bad} out of range for {} channels", s.c));
    }
    for c in 0..s.c {
        if !keep.contains(&c) {
            for b in 0..s.b {
                t.plane_mut(b, c).fill(T::zero());
            }
        }
    }
    Ok(())
}

fn activate<T: Scalar>(x: &Tensor4<T>, act: Activation) -> Tensor4<T> {
    match act {
        Activation::None => x.clone(),
        Activation::Relu => x.map(|v| v.max(T::zero())),
    }
}

/// ReLU'(0) is taken as 0.
fn activation_backward<T: Scalar>(grad: &Tensor4<T>, pre_act: &Tensor4<T>, act: Activation) -> Tensor4<T> {
    match act {
        Activation::None => grad.clone(),
        Activation::Relu => {
            let data = grad.data().iter().zip(pre_act.data()).map(|(&g, &z)| if z > T::zero() { g } else { T::zero() }).collect();
            Tensor4::new(grad.shape(), data).expect("shapes agree")
        }
    }
}

fn conv_out_dims(c: &ConvSpec, h: usize, w: usize) -> (usize, usize) {
    ((h + 2 * c.padding - c.kernel_h) / c.stride + 1, (w + 2 * c.padding - c.kernel_w) / c.stride + 1)
}

/// Visits every (output position, input position) pair of one kernel tap.
#[inline]
fn for_tap(c: &ConvSpec, ki: usize, kj: usize, h: usize, w: usize, oh: usize, ow: usize, mut f: impl FnMut(usize, usize)) {
    for y in 0..oh {
        let ih = y * c.stride + ki;
        if ih < c.padding || ih - c.padding >= h {
            continue;
        }
        let ih = ih - c.padding;
        for x in 0..ow {
            let iw = x * c.stride + kj;
            if iw < c.padding || iw - c.padding >= w {
                continue;
            }
            f(y * ow + x, ih * w + iw - c.padding);
        }
    }
}

fn conv_forward<T: Scalar>(x: &Tensor4<T>, c: &ConvSpec, weight: &[T], bias: Option<&[T]>) -> Tensor4<T> {
    let s = x.shape();
    let (oh, ow) = conv_out_dims(c, s.h, s.w);
    let mut out = Tensor4::zeros([s.b, c.out_channels, oh, ow]);
    for b in 0..s.b {
        for co in 0..c.out_channels {
            let o = out.plane_mut(b, co);
            if let Some(bias) = bias {
                o.fill(bias[co]);
            }
            for ci in 0..c.in_channels {
                let xp = x.plane(b, ci);
                for ki in 0..c.kernel_h {
                    for kj in 0..c.kernel_w {
                        let wv = weight[((co * c.in_channels + ci) * c.kernel_h + ki) * c.kernel_w + kj];
                        for_tap(c, ki, kj, s.h, s.w, oh, ow, |oi, ii| o[oi] += wv * xp[ii]);
                    }
                }
            }
        }
    }
    out
}

fn conv_backward<T: Scalar>(x: &Tensor4<T>, c: &ConvSpec, weight: &[T], dy: &Tensor4<T>, g: &mut ConvParams<T>) -> Tensor4<T> {
    let s = x.shape();
    let ds = dy.shape();
    let (oh, ow) = (ds.h, ds.w);
    let mut dx = Tensor4::zeros(s);
    for b in 0..s.b {
        for co in 0..c.out_channels {
            let d = dy.plane(b, co);
            if let Some(gb) = &mut g.bias {
                gb[co] += d.iter().copied().sum::<T>();
            }
            for ci in 0..c.in_channels {
                let xp = x.plane(b, ci);
                for ki in 0..c.kernel_h {
                    for kj in 0..c.kernel_w {
                        let wi = ((co * c.in_channels + ci) * c.kernel_h + ki) * c.kernel_w + kj;
                        let mut acc = T::zero();
                        for_tap(c, ki, kj, s.h, s.w, oh, ow, |oi, ii| acc += d[oi] * xp[ii]);
                        g.weight[wi] += acc;
                        let wv = weight[wi];
                        let dxp = dx.plane_mut(b, ci);
                        for_tap(c, ki, kj, s.h, s.w, oh, ow, |oi, ii| dxp[ii] += d[oi] * wv);
                    }
                }
            }
        }
    }
    dx
}

fn bn_forward<T: Scalar>(x: &Tensor4<T>, bn: &BatchNormParams<T>) -> Tensor4<T> {
    let s = x.shape();
    let mut out = x.clone();
    for b in 0..s.b {
        for c in 0..s.c {
            let (scale, mean, shift) = (bn.gamma[c] * bn.inv_std(c), bn.mean[c], bn.beta[c]);
            out.plane_mut(b, c).iter_mut().for_each(|v| *v = (*v - mean) * scale + shift);
        }
    }
    out
}

fn bn_backward<T: Scalar>(dz: &Tensor4<T>, x: &Tensor4<T>, bn: &BatchNormParams<T>, g: &mut BatchNormParams<T>) -> Tensor4<T> {
    let s = x.shape();
    let mut dx = dz.clone();
    for b in 0..s.b {
        for c in 0..s.c {
            let inv = bn.inv_std(c);
            for (&d, &v) in dz.plane(b, c).iter().zip(x.plane(b, c)) {
                g.gamma[c] += d * (v - bn.mean[c]) * inv;
                g.beta[c] += d;
            }
            let scale = bn.gamma[c] * inv;
            dx.plane_mut(b, c).iter_mut().for_each(|v| *v *= scale);
        }
    }
    dx
}

fn linear_forward<T: Scalar>(x: &Tensor4<T>, l: &LinearSpec, weight: &[T], bias: Option<&[T]>) -> Tensor4<T> {
    let b = x.shape().b;
    let mut out = Vec::with_capacity(b * l.out_features);
    for s in 0..b {
        let row = x.sample(s);
        for o in 0..l.out_features {
            let w = &weight[o * l.in_features..(o + 1) * l.in_features];
            let mut acc = bias.map_or(T::zero(), |bv| bv[o]);
            for (&wi, &xi) in w.iter().zip(row) {
                acc += wi * xi;
            }
            out.push(acc);
        }
    }
    Tensor4::new([b, l.out_features, 1, 1], out).expect("sized above")
}

fn linear_backward<T: Scalar>(x: &Tensor4<T>, l: &LinearSpec, weight: &[T], dy: &Tensor4<T>, g: &mut LinearParams<T>) -> Tensor4<T> {
    let b = x.shape().b;
    let mut dx = Tensor4::zeros(x.shape());
    for s in 0..b {
        let row = x.sample(s);
        let d = dy.sample(s);
        for o in 0..l.out_features {
            if let Some(gb) = &mut g.bias {
                gb[o] += d[o];
            }
            let gw = &mut g.weight[o * l.in_features..(o + 1) * l.in_features];
            for (gwi, &xi) in gw.iter_mut().zip(row) {
                *gwi += d[o] * xi;
            }
        }
        let dxs = &mut dx.data_mut()[s * l.in_features..(s + 1) * l.in_features];
        for o in 0..l.out_features {
            let w = &weight[o * l.in_features..(o + 1) * l.in_features];
            for (dxi, &wi) in dxs.iter_mut().zip(w) {
                *dxi += d[o] * wi;
            }
        }
    }
    dx
}

fn maxpool_forward<T: Scalar>(x: &Tensor4<T>, k: usize, stride: usize) -> (Tensor4<T>, Vec<usize>) {
    let s = x.shape();
    let (oh, ow) = ((s.h - k) / stride + 1, (s.w - k) / stride + 1);
    let mut out = Vec::with_capacity(s.b * s.c * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    for b in 0..s.b {
        for c in 0..s.c {
            let p = x.plane(b, c);
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = (y * stride) * s.w + xo * stride;
                    for i in 0..k {
                        for j in 0..k {
                            let idx = (y * stride + i) * s.w + xo * stride + j;
                            if p[idx] > p[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(p[best]);
                    argmax.push(best);
                }
            }
        }
    }
    (Tensor4::new([s.b, s.c, oh, ow], out).expect("sized above"), argmax)
}

fn maxpool_backward<T: Scalar>(dy: &Tensor4<T>, input_shape: Shape4, argmax: &[usize]) -> Tensor4<T> {
    let mut dx = Tensor4::zeros(input_shape);
    let per = dy.shape().plane();
    for b in 0..input_shape.b {
        for c in 0..input_shape.c {
            let d = dy.plane(b, c);
            let base = (b * input_shape.c + c) * per;
            let dxp = dx.plane_mut(b, c);
            for (i, &g) in d.iter().enumerate() {
                dxp[argmax[base + i]] += g;
            }
        }
    }
    dx
}

/// Average pooling without padding; `k == 0` means global.
fn avgpool_forward<T: Scalar>(x: &Tensor4<T>, k: usize, stride: usize) -> Tensor4<T> {
    let s = x.shape();
    let (kh, kw, sh, sw) = if k == 0 { (s.h, s.w, 1, 1) } else { (k, k, stride, stride) };
    let (oh, ow) = ((s.h - kh) / sh + 1, (s.w - kw) / sw + 1);
    let inv = T::one() / T::from_usize_lossy(kh * kw);
    let mut out = Vec::with_capacity(s.b * s.c * oh * ow);
    for b in 0..s.b {
        for c in 0..s.c {
            let p = x.plane(b, c);
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = T::zero();
                    for i in 0..kh {
                        for j in 0..kw {
                            acc += p[(y * sh + i) * s.w + xo * sw + j];
                        }
                    }
                    out.push(acc * inv);
                }
            }
        }
    }
    Tensor4::new([s.b, s.c, oh, ow], out).expect("sized above")
}

fn avgpool_backward<T: Scalar>(dy: &Tensor4<T>, input_shape: Shape4, k: usize, stride: usize) -> Tensor4<T> {
    let s = input_shape;
    let (kh, kw, sh, sw) = if k == 0 { (s.h, s.w, 1, 1) } else { (k, k, stride, stride) };
    let ds = dy.shape();
    let inv = T::one() / T::from_usize_lossy(kh * kw);
    let mut dx = Tensor4::zeros(s);
    for b in 0..s.b {
        for c in 0..s.c {
            let d = dy.plane(b, c).to_vec();
            let dxp = dx.plane_mut(b, c);
            for y in 0..ds.h {
                for xo in 0..ds.w {
                    let g = d[y * ds.w + xo] * inv;
                    for i in 0..kh {
                        for j in 0..kw {
                            dxp[(y * sh + i) * s.w + xo * sw + j] += g;
                        }
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{bundled, FeatureShape, Topology};

    fn spec(text: &str) -> NetworkSpec {
        NetworkSpec::parse(text).unwrap()
    }

    fn random(shape: impl Into<Shape4>, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
        let shape = shape.into();
        Tensor4::new(shape, (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_1x1_conv() {
        let mut m = ModelState::<f64>::init(spec("input channels=3 height=4 width=4\nconv in=3 out=3 kernel=1\n"), 0).unwrap();
        if let LayerParams::Conv(p) = &mut m.layers[0] {
            p.weight = vec![1., 0., 0., 0., 1., 0., 0., 0., 1.];
        }
        let x = random([2, 3, 4, 4], &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(m.forward(&x).unwrap(), x);
    }

    #[test]
    fn hand_convolution_of_ones() {
        let mut m = ModelState::<f64>::init(spec("input channels=1 height=2 width=2\nconv in=1 out=1 kernel=3 pad=1\n"), 0).unwrap();
        if let LayerParams::Conv(p) = &mut m.layers[0] {
            p.weight = vec![1.0; 9];
        }
        let out = m.forward(&Tensor4::filled([1, 1, 2, 2], 1.0)).unwrap();
        assert_eq!(out.data(), &[4.0; 4]);
    }

    #[test]
    fn strided_conv_matches_direct_sum() {
        let text = "input channels=2 height=7 width=6\nconv in=2 out=3 kh=3 kw=2 stride=2 pad=1 bias=true\n";
        let m = ModelState::<f64>::init(spec(text), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random([2, 2, 7, 6], &mut rng);
        let (c, p) = m.conv_params(0).unwrap();
        let out = m.forward(&x).unwrap();
        let os = out.shape();
        assert_eq!((os.h, os.w), (4, 4));
        for b in 0..2 {
            for co in 0..3 {
                for y in 0..4 {
                    for xo in 0..4 {
                        let mut acc = p.bias.as_ref().unwrap()[co];
                        for ci in 0..2 {
                            for i in 0..3 {
                                for j in 0..2 {
                                    let (ih, iw) = ((y * 2 + i) as isize - 1, (xo * 2 + j) as isize - 1);
                                    if ih >= 0 && iw >= 0 && (ih as usize) < 7 && (iw as usize) < 6 {
                                        acc += p.weight[((co * 2 + ci) * 3 + i) * 2 + j] * x.get(b, ci, ih as usize, iw as usize);
                                    }
                                }
                            }
                        }
                        assert!((out.get(b, co, y, xo) - acc).abs() < 1e-12);
                    }
                }
            }
        }
        assert_eq!(c.out_channels, 3);
    }

    #[test]
    fn captured_pairs_chain() {
        let text = "input channels=2 height=5 width=5\nconv in=2 out=3 kernel=3 pad=1 act=relu\nconv in=3 out=4 kernel=3 pad=1 act=relu\n";
        let m = ModelState::<f64>::init(spec(text), 3).unwrap();
        let x = random([4, 2, 5, 5], &mut ChaCha8Rng::seed_from_u64(3));
        let (_, pool) = m.forward_capture(&x, CapturePoint::PostActivation).unwrap();
        assert_eq!(pool.layers.len(), 2);
        assert_eq!(pool.layers[1].x, pool.layers[0].y);
        let (_, pre) = m.forward_capture(&x, CapturePoint::PreActivation).unwrap();
        assert!(pre.layers[0].y.data().iter().any(|&v| v < 0.0));
        assert!(pool.layers[0].y.data().iter().all(|&v| v >= 0.0));
        let chunked = m.capture_pool(&x, CapturePoint::PostActivation, 3).unwrap();
        assert_eq!(chunked, pool);
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let m = ModelState::<f64>::init(spec(bundled::TOY), 0).unwrap();
        assert!(m.forward(&Tensor4::zeros([1, 2, 16, 16])).is_err());
        let resnet = spec(bundled::RESNET56_CIFAR);
        assert_eq!(resnet.topology, Topology::Residual);
        assert!(ModelState::<f64>::init(resnet, 0).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let logits = Tensor4::<f64>::filled([3, 4, 1, 1], 0.7);
        let (loss, grad) = softmax_cross_entropy(&logits, &[0, 1, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        let total: f64 = grad.data().iter().sum();
        assert!(total.abs() < 1e-12);
        assert!(softmax_cross_entropy(&logits, &[0, 4, 1]).is_err());
        assert!(softmax_cross_entropy(&logits, &[0, 1]).is_err());
    }

    fn check_gradients(model: &ModelState<f64>, x: &Tensor4<f64>, labels: &[usize]) -> f64 {
        let report = gradient_check(model, x, labels, 1e-3).unwrap();
        assert!(report.skipped * 10 <= report.checked, "{report:?}");
        report.max_rel_error
    }

    #[test]
    fn gradients_match_finite_differences() {
        let text = "input channels=2 height=8 width=8
conv in=2 out=3 kernel=3 pad=1 bias=true bn=true act=relu
maxpool kernel=2 stride=2
conv in=3 out=2 kernel=2 stride=1 bias=false act=relu
avgpool kernel=2 stride=1
flatten
linear in=8 out=4 bias=true act=relu
linear in=4 out=3 bias=true
";
        for seed in 0..5 {
            let mut m = ModelState::<f64>::init(spec(text), seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            if let LayerParams::Conv(ConvParams { bn: Some(bn), .. }) = &mut m.layers[0] {
                for c in 0..3 {
                    bn.gamma[c] = rng.random_range(0.5..1.5);
                    bn.beta[c] = rng.random_range(-0.2..0.2);
                    bn.mean[c] = rng.random_range(-0.2..0.2);
                    bn.var[c] = rng.random_range(0.5..2.0);
                }
            }
            let x = random([3, 2, 8, 8], &mut rng);
            let rel = check_gradients(&m, &x, &[0, 2, 1]);
            assert!(rel < 1e-3, "seed {seed}: {rel}");
        }
    }

    #[test]
    fn global_pool_gradient() {
        let text = "input channels=1 height=4 width=4\nconv in=1 out=2 kernel=3 pad=1 act=relu\nglobal_avgpool\nflatten\nlinear in=2 out=2\n";
        let m = ModelState::<f64>::init(spec(text), 9).unwrap();
        let x = random([2, 1, 4, 4], &mut ChaCha8Rng::seed_from_u64(9));
        let rel = check_gradients(&m, &x, &[1, 0]);
        assert!(rel < 1e-3, "{rel}");
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut m = ModelState::<f64>::init(spec(bundled::TOY), 1).unwrap();
        let data = synthetic_dataset::<f64>(8, 2, 1, 16, 1).unwrap();
        let before = m.layers.clone();
        let loss = m.backward_and_step(&data.images, &data.labels, 0.0, 0.9, 5e-4).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(m.layers, before);
    }

    #[test]
    fn single_step_descends() {
        let text = "input channels=1 height=6 width=6\nconv in=1 out=3 kernel=3 pad=1 bias=true act=relu\nmaxpool kernel=2\nflatten\nlinear in=27 out=3 bias=true\n";
        let mut descended = 0;
        for seed in 0..100 {
            let mut m = ModelState::<f64>::init(spec(text), seed).unwrap();
            let data = synthetic_dataset::<f64>(6, 3, 1, 6, seed).unwrap();
            let before = m.backward_and_step(&data.images, &data.labels, 1e-3, 0.0, 0.0).unwrap();
            let after = m.loss_and_grads(&data.images, &data.labels).unwrap().0;
            descended += usize::from(after < before);
        }
        assert!(descended >= 95, "{descended}/100");
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let data = synthetic_dataset::<f64>(200, 2, 1, 16, 7).unwrap();
        let schedule = TrainSchedule { epochs: 15, decay_epochs: vec![10], seed: 3, ..TrainSchedule::default() };
        let mut a = ModelState::<f64>::init(spec(bundled::TOY), 11).unwrap();
        let mut b = a.clone();
        a.train(&data, &schedule).unwrap();
        b.train(&data, &schedule).unwrap();
        assert_eq!(a, b);
        assert!(a.evaluate(&data).unwrap() >= 0.95);

        let mut c = ModelState::<f64>::init(spec(bundled::TOY), 11).unwrap();
        let before = c.clone();
        assert!(c.train(&data, &TrainSchedule { epochs: 0, ..schedule.clone() }).unwrap().is_empty());
        assert_eq!(c, before);
        assert!(c.train(&data.subset(&[]).unwrap(), &schedule).is_err());
    }

    #[test]
    fn evaluate_cases() {
        let m = ModelState::<f64>::init(spec(bundled::TOY), 4).unwrap();
        let data = synthetic_dataset::<f64>(40, 2, 1, 16, 4).unwrap();
        let preds = m.predict(&data.images).unwrap();
        let matched = Dataset::new(data.images.clone(), preds.clone(), 2).unwrap();
        assert_eq!(m.evaluate(&matched).unwrap(), 1.0);
        let anti = Dataset::new(data.images.clone(), preds.iter().map(|p| 1 - p).collect(), 2).unwrap();
        assert_eq!(m.evaluate(&anti).unwrap(), 0.0);
        assert!(m.evaluate(&data.subset(&[]).unwrap()).is_err());
        assert_eq!(predictions(&Tensor4::new([1, 3, 1, 1], vec![2.0, 2.0, 1.0]).unwrap()), vec![0]);
    }

    #[test]
    fn random_model_is_near_chance() {
        let text = "input channels=1 height=8 width=8\nconv in=1 out=4 kernel=3 pad=1 act=relu\nflatten\nlinear in=256 out=4\n";
        let data = synthetic_dataset::<f64>(2000, 4, 1, 8, 21).unwrap();
        let mut accs = Vec::new();
        for seed in 0..8 {
            let m = ModelState::<f64>::init(spec(text), seed).unwrap();
            accs.push(m.evaluate(&data).unwrap());
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.25).abs() < 0.05, "{accs:?}");
    }

    #[test]
    fn validate_catches_shape_drift() {
        let mut m = ModelState::<f64>::init(spec(bundled::TOY), 0).unwrap();
        assert!(m.validate().is_ok());
        if let LayerParams::Conv(p) = &mut m.layers[0] {
            p.weight.pop();
        }
        assert!(m.validate().is_err());
        assert_eq!(m.spec.input, FeatureShape::new(1, 16, 16));
    }
}
