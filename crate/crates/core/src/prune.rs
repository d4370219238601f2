//! Threshold selection, mask propagation through a sequential chain, and
//! reduction accounting.

use std::fmt;

use crate::error::{invalid, Result, ScapError};
use crate::network::{Cost, Layer, NetworkSpec};
use crate::nn::{BatchNormParams, ConvParams, LayerParams, LinearParams, ModelState};
use crate::scalar::Scalar;

/// `max(2, ⌈C_out/16⌉)`, capped at `C_out`.
pub fn default_k_min(c_out: usize) -> usize {
    2usize.max(c_out.div_ceil(16)).min(c_out)
}

/// How the per-layer keep floor is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KMin {
    #[default]
    Default,
    Fixed(usize),
}

impl KMin {
    pub fn resolve(self, c_out: usize) -> usize {
        match self {
            KMin::Default => default_k_min(c_out),
            KMin::Fixed(k) => k,
        }
    }
}

impl fmt::Display for KMin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KMin::Default => f.write_str("default"),
            KMin::Fixed(k) => write!(f, "{k}"),
        }
    }
}

impl std::str::FromStr for KMin {
    type Err = ScapError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "default" {
            return Ok(KMin::Default);
        }
        s.parse().map(KMin::Fixed).map_err(|_| invalid!("k_min must be 'default' or a positive integer, got '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    /// Kept channel indices, ascending.
    pub keep: Vec<usize>,
    /// Whether thresholding alone kept fewer than `k_min` channels.
    pub safeguard: bool,
}

/// Keeps `{k : score_k ≥ τ}`, topped up to the `k_min` best scorers
/// (ties toward the lower index) when thresholding keeps too few.
pub fn select_channels<T: Scalar>(normalized: &[T], tau: f64, k_min: usize) -> Result<Selection> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(invalid!("threshold must lie in [0, 1], got {tau}"));
    }
    if k_min == 0 || k_min > normalized.len() {
        return Err(invalid!("k_min = {k_min} must lie in [1, {}]", normalized.len()));
    }
    let keep: Vec<usize> = (0..normalized.len()).filter(|&k| normalized[k].to_f64_lossy() >= tau).collect();
    if keep.len() >= k_min {
        return Ok(Selection { keep, safeguard: false });
    }
    let mut order: Vec<usize> = (0..normalized.len()).collect();
    order.sort_by(|&a, &b| normalized[b].partial_cmp(&normalized[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut keep = order[..k_min].to_vec();
    keep.sort_unstable();
    Ok(Selection { keep, safeguard: true })
}

/// Keep-set per conv layer, indexed by conv position in the spec.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PruneMask {
    pub keep: Vec<Vec<usize>>,
}

impl PruneMask {
    /// Keeps every channel.
    pub fn full(spec: &NetworkSpec) -> Self {
        let keep = spec
            .conv_layers()
            .into_iter()
            .map(|i| match spec.layers[i] {
                Layer::Conv(c) => (0..c.out_channels).collect(),
                _ => unreachable!("conv_layers returns conv indices"),
            })
            .collect();
        Self { keep }
    }

    /// Index errors are invalid arguments; an empty keep-set is a contract breach.
    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        let convs = spec.conv_layers();
        if convs.len() != self.keep.len() {
            return Err(invalid!("mask has {} keep-sets, network has {} conv layers", self.keep.len(), convs.len()));
        }
        for (j, (&li, keep)) in convs.iter().zip(&self.keep).enumerate() {
            let Layer::Conv(c) = spec.layers[li] else { unreachable!() };
            if keep.is_empty() {
                return Err(ScapError::Contract(format!("conv {j} (layer {li}) would keep no channels")));
            }
            if let Some(&bad) = keep.iter().find(|&&k| k >= c.out_channels) {
                return Err(invalid!("conv {j}: channel {bad} out of range for {} outputs", c.out_channels));
            }
            if keep.windows(2).any(|w| w[0] >= w[1]) {
                return Err(invalid!("conv {j}: keep indices must be strictly increasing"));
            }
        }
        Ok(())
    }
}

fn gather<T: Copy>(src: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| src[i]).collect()
}

fn slice_conv<T: Scalar>(p: &ConvParams<T>, in_total: usize, k_area: usize, inputs: &[usize], outputs: &[usize]) -> ConvParams<T> {
    let mut weight = Vec::with_capacity(outputs.len() * inputs.len() * k_area);
    for &co in outputs {
        for &ci in inputs {
            let start = (co * in_total + ci) * k_area;
            weight.extend_from_slice(&p.weight[start..start + k_area]);
        }
    }
    ConvParams {
        weight,
        bias: p.bias.as_ref().map(|b| gather(b, outputs)),
        bn: p.bn.as_ref().map(|bn| BatchNormParams {
            gamma: gather(&bn.gamma, outputs),
            beta: gather(&bn.beta, outputs),
            mean: gather(&bn.mean, outputs),
            var: gather(&bn.var, outputs),
            eps: bn.eps,
        }),
    }
}

fn slice_linear<T: Scalar>(p: &LinearParams<T>, in_total: usize, inputs: &[usize]) -> LinearParams<T> {
    let rows = p.weight.len() / in_total;
    let mut weight = Vec::with_capacity(rows * inputs.len());
    for r in 0..rows {
        weight.extend(inputs.iter().map(|&i| p.weight[r * in_total + i]));
    }
    LinearParams { weight, bias: p.bias.clone() }
}

/// Removes pruned filters and the matching input slices downstream.
///
/// Each conv keeps its masked output filters (with bias and batchnorm
/// entries) and the input channels its producer kept. At a flatten →
/// linear boundary every removed channel takes its `H·W` block of
/// channel-major features with it. Momentum buffers are sliced the same way.
pub fn propagate_and_apply<T: Scalar>(model: &ModelState<T>, mask: &PruneMask) -> Result<ModelState<T>> {
    model.validate()?;
    mask.validate(&model.spec)?;
    let shapes = model.spec.shapes()?;
    let mut spec = model.spec.clone();
    let mut layers = Vec::with_capacity(model.layers.len());
    let mut velocity = Vec::with_capacity(model.layers.len());
    // Surviving indices along the channel (or feature) axis of the current activation.
    let mut surviving: Vec<usize> = (0..model.spec.input.c).collect();
    let mut conv_ordinal = 0;
    for (i, layer) in model.spec.layers.iter().enumerate() {
        let slice = |p: &LayerParams<T>, surviving: &[usize], outputs: Option<&[usize]>| -> LayerParams<T> {
            match (layer, p) {
                (Layer::Conv(c), LayerParams::Conv(cp)) => LayerParams::Conv(slice_conv(
                    cp,
                    c.in_channels,
                    c.kernel_h * c.kernel_w,
                    surviving,
                    outputs.expect("convs have output sets"),
                )),
                (Layer::Linear(l), LayerParams::Linear(lp)) => LayerParams::Linear(slice_linear(lp, l.in_features, surviving)),
                (_, other) => other.clone(),
            }
        };
        match layer {
            Layer::Conv(c) => {
                let keep = &mask.keep[conv_ordinal];
                conv_ordinal += 1;
                layers.push(slice(&model.layers[i], &surviving, Some(keep)));
                velocity.push(slice(&model.velocity[i], &surviving, Some(keep)));
                if let Layer::Conv(nc) = &mut spec.layers[i] {
                    nc.in_channels = surviving.len();
                    nc.out_channels = keep.len();
                }
                debug_assert_eq!(c.out_channels, shapes[i].c);
                surviving = keep.clone();
            }
            Layer::Flatten => {
                let input = if i == 0 { model.spec.input } else { shapes[i - 1] };
                let plane = input.plane();
                surviving = surviving.iter().flat_map(|&c| c * plane..(c + 1) * plane).collect();
                layers.push(model.layers[i].clone());
                velocity.push(model.velocity[i].clone());
            }
            Layer::Linear(l) => {
                layers.push(slice(&model.layers[i], &surviving, None));
                velocity.push(slice(&model.velocity[i], &surviving, None));
                if let Layer::Linear(nl) = &mut spec.layers[i] {
                    nl.in_features = surviving.len();
                }
                surviving = (0..l.out_features).collect();
            }
            _ => {
                layers.push(model.layers[i].clone());
                velocity.push(model.velocity[i].clone());
            }
        }
    }
    let pruned = ModelState { spec, layers, velocity, seed: model.seed };
    pruned.validate().map_err(|e| ScapError::Contract(format!("pruned network is inconsistent: {e}")))?;
    Ok(pruned)
}

/// Multiply-add FLOPs and parameter count.
pub fn count_flops_params(spec: &NetworkSpec) -> Result<(u64, u64)> {
    let c = spec.cost()?;
    Ok((c.macs, c.params))
}

/// `FR = 100·(1 − F̃/F)` and `PR = 100·(1 − P̃/P)`.
pub fn compute_fr_pr(baseline: (u64, u64), pruned: (u64, u64)) -> Result<(f64, f64)> {
    if baseline.0 == 0 || baseline.1 == 0 {
        return Err(invalid!("baseline FLOPs and parameters must be positive"));
    }
    let ratio = |p: u64, b: u64| 100.0 * (1.0 - p as f64 / b as f64);
    Ok((ratio(pruned.0, baseline.0), ratio(pruned.1, baseline.1)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPruneStats {
    /// Index into the spec's layer list.
    pub layer_index: usize,
    pub kept: usize,
    pub total: usize,
    pub safeguard: bool,
}

/// Everything needed to reproduce and audit one pruning run.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    pub tau: f64,
    pub fusion: crate::scoring::FusionRule,
    pub k_min: KMin,
    pub capture_point: crate::nn::CapturePoint,
    pub layers: Vec<LayerPruneStats>,
    pub baseline: Cost,
    pub pruned: Cost,
    pub fr: f64,
    pub pr: f64,
    /// Echo of every other numeric setting and seed, in emission order.
    pub config: Vec<(String, String)>,
}

impl PruneReport {
    pub fn any_safeguard(&self) -> bool {
        self.layers.iter().any(|l| l.safeguard)
    }
}
