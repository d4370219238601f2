//! Declarative network descriptions, shape inference, and cost accounting.
//!
//! A spec is a line-oriented text file:
//!
//! ```text
//! # toy net
//! topology sequential
//! input channels=1 height=16 width=16
//! conv in=1 out=8 kernel=3 pad=1 act=relu
//! maxpool kernel=2 stride=2
//! flatten
//! linear in=512 out=2 bias=true
//! ```
//!
//! Only `sequential` specs can be trained and pruned. `residual` and `dense`
//! specs exist so that standard CIFAR backbones can be costed; they unlock
//! the `resblock`, `denselayer`, `transition` and `batchnorm` layer kinds.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Result, ScapError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Topology {
    Sequential,
    Residual,
    Dense,
}

impl Topology {
    fn name(self) -> &'static str {
        match self {
            Topology::Sequential => "sequential",
            Topology::Residual => "residual",
            Topology::Dense => "dense",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Activation {
    #[default]
    None,
    Relu,
}

impl Activation {
    fn name(self) -> &'static str {
        match self {
            Activation::None => "none",
            Activation::Relu => "relu",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FeatureShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl FeatureShape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl fmt::Display for FeatureShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
    pub batchnorm: bool,
    pub activation: Activation,
}

impl ConvSpec {
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.filter_len()
    }

    /// Weights per output filter, `C_in · k_h · k_w`.
    pub fn filter_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn output_shape(&self, input: FeatureShape) -> std::result::Result<FeatureShape, String> {
        if input.c != self.in_channels {
            return Err(format!("conv expects {} input channels, receives {}", self.in_channels, input.c));
        }
        let h = window_out(input.h, self.kernel_h, self.stride, self.padding)?;
        let w = window_out(input.w, self.kernel_w, self.stride, self.padding)?;
        Ok(FeatureShape::new(self.out_channels, h, w))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LinearSpec {
    pub in_features: usize,
    pub out_features: usize,
    pub bias: bool,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layer {
    Conv(ConvSpec),
    MaxPool { kernel: usize, stride: usize },
    AvgPool { kernel: usize, stride: usize },
    GlobalAvgPool,
    Flatten,
    Linear(LinearSpec),
    /// Basic residual block: two 3×3 conv+BN, parameter-free zero-padded
    /// shortcut when the shape changes, add, ReLU.
    ResBlock { in_channels: usize, out_channels: usize, stride: usize },
    /// Pre-activation BN-ReLU-conv3×3 whose output is concatenated onto its input.
    DenseLayer { in_channels: usize, growth: usize },
    /// BN-ReLU-conv1×1 followed by 2×2 average pooling.
    Transition { in_channels: usize, out_channels: usize },
    BatchNorm { channels: usize, activation: Activation },
}

impl Layer {
    pub fn keyword(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::MaxPool { .. } => "maxpool",
            Layer::AvgPool { .. } => "avgpool",
            Layer::GlobalAvgPool => "global_avgpool",
            Layer::Flatten => "flatten",
            Layer::Linear(_) => "linear",
            Layer::ResBlock { .. } => "resblock",
            Layer::DenseLayer { .. } => "denselayer",
            Layer::Transition { .. } => "transition",
            Layer::BatchNorm { .. } => "batchnorm",
        }
    }

    fn allowed_in(&self, topology: Topology) -> bool {
        match self {
            Layer::ResBlock { .. } => topology == Topology::Residual,
            Layer::DenseLayer { .. } | Layer::Transition { .. } | Layer::BatchNorm { .. } => {
                topology == Topology::Dense
            }
            _ => true,
        }
    }

    /// Output shape for a given input, or a description of the incompatibility.
    pub fn output_shape(&self, input: FeatureShape) -> std::result::Result<FeatureShape, String> {
        let expect = |want: usize, what: &str| {
            if input.c == want {
                Ok(())
            } else {
                Err(format!("{what} expects {want} input channels, receives {}", input.c))
            }
        };
        match *self {
            Layer::Conv(ref c) => c.output_shape(input),
            Layer::MaxPool { kernel, stride } | Layer::AvgPool { kernel, stride } => Ok(FeatureShape::new(
                input.c,
                window_out(input.h, kernel, stride, 0)?,
                window_out(input.w, kernel, stride, 0)?,
            )),
            Layer::GlobalAvgPool => Ok(FeatureShape::new(input.c, 1, 1)),
            Layer::Flatten => Ok(FeatureShape::new(input.len(), 1, 1)),
            Layer::Linear(l) => {
                if input.h != 1 || input.w != 1 {
                    return Err(format!("linear needs a flattened input, receives {input}"));
                }
                if input.c != l.in_features {
                    return Err(format!("linear expects {} input features, receives {}", l.in_features, input.c));
                }
                Ok(FeatureShape::new(l.out_features, 1, 1))
            }
            Layer::ResBlock { in_channels, out_channels, stride } => {
                expect(in_channels, "resblock")?;
                if out_channels < in_channels {
                    return Err(format!("resblock cannot shrink channels ({in_channels} -> {out_channels}) with a padding shortcut"));
                }
                Ok(FeatureShape::new(
                    out_channels,
                    window_out(input.h, 3, stride, 1)?,
                    window_out(input.w, 3, stride, 1)?,
                ))
            }
            Layer::DenseLayer { in_channels, growth } => {
                expect(in_channels, "denselayer")?;
                Ok(FeatureShape::new(in_channels + growth, input.h, input.w))
            }
            Layer::Transition { in_channels, out_channels } => {
                expect(in_channels, "transition")?;
                Ok(FeatureShape::new(out_channels, window_out(input.h, 2, 2, 0)?, window_out(input.w, 2, 2, 0)?))
            }
            Layer::BatchNorm { channels, .. } => {
                expect(channels, "batchnorm")?;
                Ok(input)
            }
        }
    }
}

fn window_out(n: usize, k: usize, stride: usize, pad: usize) -> std::result::Result<usize, String> {
    if k == 0 || stride == 0 {
        return Err("kernel and stride must be positive".into());
    }
    if n + 2 * pad < k {
        return Err(format!("window {k} exceeds padded extent {}", n + 2 * pad));
    }
    Ok((n + 2 * pad - k) / stride + 1)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NetworkSpec {
    pub topology: Topology,
    pub input: FeatureShape,
    pub layers: Vec<Layer>,
}

/// Multiply-adds, elementwise operations and parameter count of a network.
///
/// `macs` is the FLOP convention used for reduction ratios (one multiply-add
/// is one FLOP; bias, batchnorm, activation and pooling cost nothing).
/// `elementwise` counts what layer profilers usually add on top: one op per
/// output element for a bias add, two for batchnorm, one for ReLU and one for
/// a residual add.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Cost {
    pub macs: u64,
    pub elementwise: u64,
    pub params: u64,
}

impl Cost {
    pub fn profiler_flops(&self) -> u64 {
        self.macs + self.elementwise
    }
}

impl std::ops::Add for Cost {
    type Output = Cost;

    fn add(self, o: Cost) -> Cost {
        Cost { macs: self.macs + o.macs, elementwise: self.elementwise + o.elementwise, params: self.params + o.params }
    }
}

impl NetworkSpec {
    /// Parses and validates a spec; errors carry 1-based line numbers.
    pub fn parse(text: &str) -> Result<Self> {
        let mut topology = None;
        let mut input = None;
        let mut layers = Vec::new();
        let mut lines = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |message: String| ScapError::Parse { line: line_no, message };
            let mut words = content.split_whitespace();
            let keyword = words.next().unwrap_or_default();
            if keyword == "topology" {
                let name = words.next().ok_or_else(|| err("topology needs a value".into()))?;
                if words.next().is_some() {
                    return Err(err("unexpected text after topology".into()));
                }
                if topology.is_some() {
                    return Err(err("topology declared twice".into()));
                }
                topology = Some(match name {
                    "sequential" => Topology::Sequential,
                    "residual" => Topology::Residual,
                    "dense" => Topology::Dense,
                    other => return Err(err(format!("unknown topology '{other}'"))),
                });
                continue;
            }
            let mut fields = Fields::parse(words).map_err(err)?;
            if keyword == "input" {
                if input.is_some() {
                    return Err(err("input declared twice".into()));
                }
                let shape = FeatureShape::new(
                    fields.count("channels").map_err(err)?,
                    fields.count("height").map_err(err)?,
                    fields.count("width").map_err(err)?,
                );
                fields.finish().map_err(err)?;
                input = Some(shape);
                continue;
            }
            if input.is_none() {
                return Err(err(format!("'{keyword}' appears before the input line")));
            }
            let layer = parse_layer(keyword, &mut fields).map_err(err)?;
            fields.finish().map_err(err)?;
            layers.push(layer);
            lines.push(line_no);
        }
        let spec = NetworkSpec {
            topology: topology.unwrap_or(Topology::Sequential),
            input: input.ok_or(ScapError::Parse { line: 0, message: "missing input line".into() })?,
            layers,
        };
        spec.infer_shapes().map_err(|(idx, message)| ScapError::Parse {
            line: idx.map(|i| lines[i]).unwrap_or(0),
            message,
        })?;
        Ok(spec)
    }

    /// Shape after each layer; errors name the offending layer index.
    pub fn shapes(&self) -> Result<Vec<FeatureShape>> {
        self.infer_shapes().map_err(|(idx, message)| match idx {
            Some(i) => ScapError::Validation(format!("layer {i} ({}): {message}", self.layers[i].keyword())),
            None => ScapError::Validation(message),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    fn infer_shapes(&self) -> std::result::Result<Vec<FeatureShape>, (Option<usize>, String)> {
        if self.input.is_empty() {
            return Err((None, format!("input shape {} is empty", self.input)));
        }
        if self.layers.is_empty() {
            return Err((None, "network has no layers".into()));
        }
        let mut shape = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            if !layer.allowed_in(self.topology) {
                return Err((
                    Some(i),
                    format!("layer kind '{}' is not allowed in a {} network", layer.keyword(), self.topology.name()),
                ));
            }
            if let Some(zero) = zero_size_field(layer) {
                return Err((Some(i), format!("{zero} must be positive")));
            }
            shape = layer.output_shape(shape).map_err(|m| (Some(i), m))?;
            out.push(shape);
        }
        Ok(out)
    }

    /// Output shape of the whole network.
    pub fn output_shape(&self) -> Result<FeatureShape> {
        Ok(*self.shapes()?.last().expect("validated specs have layers"))
    }

    /// Layer indices of the plain conv layers, in order. Pruning masks are
    /// indexed by position in this list.
    pub fn conv_layers(&self) -> Vec<usize> {
        self.layers.iter().enumerate().filter(|(_, l)| matches!(l, Layer::Conv(_))).map(|(i, _)| i).collect()
    }

    pub fn require_sequential(&self) -> Result<()> {
        if self.topology != Topology::Sequential {
            return Err(invalid!(
                "{} networks can only be costed; training and pruning support sequential chains",
                self.topology.name()
            ));
        }
        Ok(())
    }

    /// Per-layer costs. The sum is [`NetworkSpec::cost`].
    pub fn layer_costs(&self) -> Result<Vec<Cost>> {
        let shapes = self.shapes()?;
        let mut input = self.input;
        let mut costs = Vec::with_capacity(self.layers.len());
        for (layer, &out) in self.layers.iter().zip(&shapes) {
            costs.push(layer_cost(layer, input, out));
            input = out;
        }
        Ok(costs)
    }

    pub fn cost(&self) -> Result<Cost> {
        Ok(self.layer_costs()?.into_iter().fold(Cost::default(), |a, b| a + b))
    }
}

fn zero_size_field(layer: &Layer) -> Option<&'static str> {
    match *layer {
        Layer::Conv(c) if c.in_channels == 0 || c.out_channels == 0 => Some("conv channel count"),
        Layer::Linear(l) if l.in_features == 0 || l.out_features == 0 => Some("linear feature count"),
        Layer::ResBlock { in_channels, out_channels, stride } if in_channels == 0 || out_channels == 0 || stride == 0 => {
            Some("resblock size")
        }
        Layer::DenseLayer { in_channels, growth } if in_channels == 0 || growth == 0 => Some("denselayer size"),
        Layer::Transition { in_channels, out_channels } if in_channels == 0 || out_channels == 0 => {
            Some("transition channel count")
        }
        Layer::BatchNorm { channels: 0, .. } => Some("batchnorm channel count"),
        _ => None,
    }
}

fn layer_cost(layer: &Layer, input: FeatureShape, out: FeatureShape) -> Cost {
    let u = |v: usize| v as u64;
    let out_elems = u(out.len());
    let relu = |a: Activation| u64::from(a == Activation::Relu);
    match *layer {
        Layer::Conv(c) => {
            let per_elem = u64::from(c.bias) + 2 * u64::from(c.batchnorm) + relu(c.activation);
            Cost {
                macs: u(c.weight_len() * out.plane()),
                elementwise: per_elem * out_elems,
                params: u(c.weight_len()) + u(c.out_channels) * (u64::from(c.bias) + 2 * u64::from(c.batchnorm)),
            }
        }
        Layer::Linear(l) => Cost {
            macs: u(l.in_features * l.out_features),
            elementwise: (u64::from(l.bias) + relu(l.activation)) * u(l.out_features),
            params: u(l.in_features * l.out_features) + u64::from(l.bias) * u(l.out_features),
        },
        Layer::ResBlock { in_channels, out_channels, .. } => {
            let w1 = u(9 * in_channels * out_channels);
            let w2 = u(9 * out_channels * out_channels);
            Cost {
                macs: (w1 + w2) * u(out.plane()),
                // BN + ReLU after the first conv, BN after the second, add, ReLU.
                elementwise: 7 * out_elems,
                params: w1 + w2 + 4 * u(out_channels),
            }
        }
        Layer::DenseLayer { in_channels, growth } => {
            let w = u(9 * in_channels * growth);
            Cost { macs: w * u(out.plane()), elementwise: 3 * u(input.len()), params: w + 2 * u(in_channels) }
        }
        Layer::Transition { in_channels, out_channels } => {
            let w = u(in_channels * out_channels);
            Cost { macs: w * u(input.plane()), elementwise: 3 * u(input.len()), params: w + 2 * u(in_channels) }
        }
        Layer::BatchNorm { channels, activation } => Cost {
            macs: 0,
            elementwise: (2 + relu(activation)) * u(input.len()),
            params: 2 * u(channels),
        },
        Layer::MaxPool { .. } | Layer::AvgPool { .. } | Layer::GlobalAvgPool | Layer::Flatten => Cost::default(),
    }
}

/// `key=value` pairs of one spec line, consumed as the layer is built.
struct Fields(BTreeMap<String, String>);

impl Fields {
    fn parse<'a>(words: impl Iterator<Item = &'a str>) -> std::result::Result<Self, String> {
        let mut map = BTreeMap::new();
        for word in words {
            let (k, v) = word.split_once('=').ok_or_else(|| format!("expected key=value, found '{word}'"))?;
            if k.is_empty() || v.is_empty() {
                return Err(format!("malformed field '{word}'"));
            }
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(format!("field '{k}' given twice"));
            }
        }
        Ok(Fields(map))
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.0.remove(key)
    }

    fn count(&mut self, key: &str) -> std::result::Result<usize, String> {
        let v = self.take(key).ok_or_else(|| format!("missing field '{key}'"))?;
        v.parse().map_err(|_| format!("field '{key}' must be a non-negative integer, found '{v}'"))
    }

    fn count_or(&mut self, key: &str, default: usize) -> std::result::Result<usize, String> {
        if self.0.contains_key(key) {
            self.count(key)
        } else {
            Ok(default)
        }
    }

    fn flag(&mut self, key: &str) -> std::result::Result<bool, String> {
        match self.take(key).as_deref() {
            None | Some("false") => Ok(false),
            Some("true") => Ok(true),
            Some(other) => Err(format!("field '{key}' must be true or false, found '{other}'")),
        }
    }

    fn activation(&mut self) -> std::result::Result<Activation, String> {
        match self.take("act").as_deref() {
            None | Some("none") => Ok(Activation::None),
            Some("relu") => Ok(Activation::Relu),
            Some(other) => Err(format!("unknown activation '{other}'")),
        }
    }

    /// Square `kernel=` or explicit `kh=`/`kw=`.
    fn kernel(&mut self) -> std::result::Result<(usize, usize), String> {
        if self.0.contains_key("kernel") {
            if self.0.contains_key("kh") || self.0.contains_key("kw") {
                return Err("give either kernel= or kh=/kw=, not both".into());
            }
            let k = self.count("kernel")?;
            return Ok((k, k));
        }
        Ok((self.count("kh")?, self.count("kw")?))
    }

    fn finish(self) -> std::result::Result<(), String> {
        match self.0.keys().next() {
            Some(k) => Err(format!("unknown field '{k}'")),
            None => Ok(()),
        }
    }
}

fn parse_layer(keyword: &str, f: &mut Fields) -> std::result::Result<Layer, String> {
    Ok(match keyword {
        "conv" => {
            let (kernel_h, kernel_w) = f.kernel()?;
            Layer::Conv(ConvSpec {
                in_channels: f.count("in")?,
                out_channels: f.count("out")?,
                kernel_h,
                kernel_w,
                stride: f.count_or("stride", 1)?,
                padding: f.count_or("pad", 0)?,
                bias: f.flag("bias")?,
                batchnorm: f.flag("bn")?,
                activation: f.activation()?,
            })
        }
        "maxpool" | "avgpool" => {
            let kernel = f.count("kernel")?;
            let stride = f.count_or("stride", kernel)?;
            if keyword == "maxpool" {
                Layer::MaxPool { kernel, stride }
            } else {
                Layer::AvgPool { kernel, stride }
            }
        }
        "global_avgpool" => Layer::GlobalAvgPool,
        "flatten" => Layer::Flatten,
        "linear" => Layer::Linear(LinearSpec {
            in_features: f.count("in")?,
            out_features: f.count("out")?,
            bias: f.flag("bias")?,
            activation: f.activation()?,
        }),
        "resblock" => Layer::ResBlock {
            in_channels: f.count("in")?,
            out_channels: f.count("out")?,
            stride: f.count_or("stride", 1)?,
        },
        "denselayer" => Layer::DenseLayer { in_channels: f.count("in")?, growth: f.count("growth")? },
        "transition" => Layer::Transition { in_channels: f.count("in")?, out_channels: f.count("out")? },
        "batchnorm" => Layer::BatchNorm { channels: f.count("channels")?, activation: f.activation()? },
        other => return Err(format!("unknown layer kind '{other}'")),
    })
}

impl FromStr for NetworkSpec {
    type Err = ScapError;

    fn from_str(s: &str) -> Result<Self> {
        NetworkSpec::parse(s)
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.keyword())?;
        match *self {
            Layer::Conv(c) => {
                write!(f, " in={} out={}", c.in_channels, c.out_channels)?;
                if c.kernel_h == c.kernel_w {
                    write!(f, " kernel={}", c.kernel_h)?;
                } else {
                    write!(f, " kh={} kw={}", c.kernel_h, c.kernel_w)?;
                }
                write!(
                    f,
                    " stride={} pad={} bias={} bn={} act={}",
                    c.stride,
                    c.padding,
                    c.bias,
                    c.batchnorm,
                    c.activation.name()
                )
            }
            Layer::MaxPool { kernel, stride } | Layer::AvgPool { kernel, stride } => {
                write!(f, " kernel={kernel} stride={stride}")
            }
            Layer::GlobalAvgPool | Layer::Flatten => Ok(()),
            Layer::Linear(l) => write!(
                f,
                " in={} out={} bias={} act={}",
                l.in_features,
                l.out_features,
                l.bias,
                l.activation.name()
            ),
            Layer::ResBlock { in_channels, out_channels, stride } => {
                write!(f, " in={in_channels} out={out_channels} stride={stride}")
            }
            Layer::DenseLayer { in_channels, growth } => write!(f, " in={in_channels} growth={growth}"),
            Layer::Transition { in_channels, out_channels } => write!(f, " in={in_channels} out={out_channels}"),
            Layer::BatchNorm { channels, activation } => write!(f, " channels={channels} act={}", activation.name()),
        }
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "topology {}", self.topology.name())?;
        writeln!(f, "input channels={} height={} width={}", self.input.c, self.input.h, self.input.w)?;
        for layer in &self.layers {
            writeln!(f, "{layer}")?;
        }
        Ok(())
    }
}

/// Specs shipped with the crate.
pub mod bundled {
    pub const VGG16_CIFAR: &str = include_str!("../specs/vgg16-cifar.spec");
    pub const RESNET56_CIFAR: &str = include_str!("../specs/resnet56-cifar.spec");
    pub const DENSENET40_CIFAR: &str = include_str!("../specs/densenet40-cifar.spec");
    pub const TOY: &str = include_str!("../specs/toy.spec");
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(cin: usize, cout: usize, k: usize) -> ConvSpec {
        ConvSpec {
            in_channels: cin,
            out_channels: cout,
            kernel_h: k,
            kernel_w: k,
            stride: 1,
            padding: 0,
            bias: false,
            batchnorm: false,
            activation: Activation::None,
        }
    }

    #[test]
    fn hand_counted_conv_and_linear() {
        let spec = NetworkSpec {
            topology: Topology::Sequential,
            input: FeatureShape::new(1, 10, 10),
            layers: vec![Layer::Conv(conv(1, 1, 3))],
        };
        let c = spec.cost().unwrap();
        assert_eq!((c.params, c.macs, c.elementwise), (9, 576, 0));

        let spec = NetworkSpec {
            topology: Topology::Sequential,
            input: FeatureShape::new(10, 1, 1),
            layers: vec![Layer::Linear(LinearSpec { in_features: 10, out_features: 5, bias: true, activation: Activation::None })],
        };
        let c = spec.cost().unwrap();
        assert_eq!((c.params, c.macs), (55, 50));
    }

    #[test]
    fn batchnorm_counts_params_not_macs() {
        let mut c = conv(2, 4, 3);
        c.batchnorm = true;
        c.bias = true;
        c.padding = 1;
        let spec = NetworkSpec { topology: Topology::Sequential, input: FeatureShape::new(2, 5, 5), layers: vec![Layer::Conv(c)] };
        let cost = spec.cost().unwrap();
        assert_eq!(cost.params, 72 + 4 + 8);
        assert_eq!(cost.macs, 72 * 25);
        assert_eq!(cost.elementwise, 3 * 4 * 25);
    }

    #[test]
    fn parse_emit_round_trip() {
        for text in [bundled::VGG16_CIFAR, bundled::RESNET56_CIFAR, bundled::DENSENET40_CIFAR, bundled::TOY] {
            let spec = NetworkSpec::parse(text).unwrap();
            let again = NetworkSpec::parse(&spec.to_string()).unwrap();
            assert_eq!(spec, again);
        }
    }

    #[test]
    fn parse_errors_name_the_line() {
        let text = "topology sequential\ninput channels=1 height=8 width=8\nconv in=1 out=4 kernel=3\nconv in=3 out=2 kernel=3\n";
        match NetworkSpec::parse(text) {
            Err(ScapError::Parse { line, message }) => {
                assert_eq!(line, 4);
                assert!(message.contains("4"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
        let bad = "input channels=1 height=8 width=8\nconv in=1 out=4 kernel=3 colour=red\n";
        assert!(matches!(NetworkSpec::parse(bad), Err(ScapError::Parse { line: 2, .. })));
        let bad = "input channels=1 height=8 width=8\nresblock in=1 out=1\n";
        assert!(matches!(NetworkSpec::parse(bad), Err(ScapError::Parse { line: 2, .. })));
        assert!(NetworkSpec::parse("conv in=1 out=1 kernel=1\n").is_err());
        assert!(NetworkSpec::parse("input channels=1 height=2 width=2\nconv in=1 out=1 kernel=5\n").is_err());
        assert!(NetworkSpec::parse("input channels=4 height=2 width=2\nflatten\nlinear in=15 out=2\n").is_err());
    }

    #[test]
    fn costs_are_additive() {
        let spec = NetworkSpec::parse(bundled::VGG16_CIFAR).unwrap();
        let total = spec.cost().unwrap();
        let parts = spec.layer_costs().unwrap();
        assert_eq!(parts.iter().map(|c| c.macs).sum::<u64>(), total.macs);
        assert_eq!(parts.iter().map(|c| c.params).sum::<u64>(), total.params);
    }

    #[test]
    fn bundled_shapes_end_in_class_logits() {
        for text in [bundled::VGG16_CIFAR, bundled::RESNET56_CIFAR, bundled::DENSENET40_CIFAR] {
            let spec = NetworkSpec::parse(text).unwrap();
            assert_eq!(spec.output_shape().unwrap(), FeatureShape::new(10, 1, 1));
        }
        let toy = NetworkSpec::parse(bundled::TOY).unwrap();
        assert_eq!(toy.output_shape().unwrap(), FeatureShape::new(2, 1, 1));
        assert_eq!(toy.conv_layers().len(), 3);
        assert!(toy.require_sequential().is_ok());
        assert!(NetworkSpec::parse(bundled::RESNET56_CIFAR).unwrap().require_sequential().is_err());
    }
}
