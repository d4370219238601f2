//! Channel importance from spectral reconstruction fidelity, optionally fused
//! with the layer-normalized filter ℓ1 magnitude.

use std::fmt;
use std::str::FromStr;

use crate::autoencoder::{rows_to_spectrum, spectrum_rows, AutoencoderParams};
use crate::error::{invalid, Result, ScapError};
use crate::field::{build_interaction_field, InteractionField};
use crate::scalar::Scalar;
use crate::spectral::{destandardize_spectrum, fft2, ifft2, standardize_spectrum, DEFAULT_EPSILON};
use crate::tensor::{vectorize_complex, CTensor4, Matrix, Tensor4};

/// Norm floor used when forming cosine similarities.
pub const FIDELITY_EPSILON: f64 = 1e-8;

/// Anything that maps standardized spectral rows to reconstructed rows.
pub trait RowReconstructor<T: Scalar> {
    fn width(&self) -> usize;
    fn reconstruct(&self, rows: &Matrix<T>) -> Result<Matrix<T>>;
}

impl<T: Scalar> RowReconstructor<T> for AutoencoderParams<T> {
    fn width(&self) -> usize {
        self.n
    }

    fn reconstruct(&self, rows: &Matrix<T>) -> Result<Matrix<T>> {
        self.forward(rows)
    }
}

/// `ifft2(destandardize(ae(standardize(fft2(z)))))`.
pub fn reconstruct_field<T: Scalar, R: RowReconstructor<T> + ?Sized>(
    field: &InteractionField<T>,
    real: &R,
    imag: &R,
    epsilon: T,
) -> Result<CTensor4<T>> {
    let shape = field.z.shape();
    for r in [real.width(), imag.width()] {
        if r != shape.plane() {
            return Err(invalid!(
                "reconstructor width {r} does not match field plane {}x{} = {}",
                shape.h,
                shape.w,
                shape.plane()
            ));
        }
    }
    let spectrum = fft2(&field.z);
    let (standardized, stats) = standardize_spectrum(&spectrum, epsilon)?;
    drop(spectrum);
    let (rows_r, rows_i) = spectrum_rows(&standardized);
    drop(standardized);
    let rec = rows_to_spectrum(&real.reconstruct(&rows_r)?, &imag.reconstruct(&rows_i)?, shape)?;
    Ok(ifft2(&destandardize_spectrum(&rec, &stats)))
}

/// `|⟨v, v̂⟩| / (‖v‖·‖v̂‖)` with each norm floored at [`FIDELITY_EPSILON`],
/// clamped to `[0, 1]`.
pub fn cosine_fidelity<T: Scalar>(v: &[T], v_hat: &[T]) -> Result<T> {
    if v.len() != v_hat.len() {
        return Err(invalid!("vector lengths differ: {} vs {}", v.len(), v_hat.len()));
    }
    let eps = T::lit(FIDELITY_EPSILON);
    let (mut dot, mut nv, mut nh) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in v.iter().zip(v_hat) {
        dot += a * b;
        nv += a * a;
        nh += b * b;
    }
    let denom = nv.sqrt().max(eps) * nh.sqrt().max(eps);
    Ok((dot.abs() / denom).min(T::one()))
}

/// Per-sample fidelity of a reconstruction.
pub fn per_sample_fidelity<T: Scalar>(z: &CTensor4<T>, z_hat: &CTensor4<T>) -> Result<Vec<T>> {
    if z.shape() != z_hat.shape() {
        return Err(invalid!("field shape {} does not match reconstruction {}", z.shape(), z_hat.shape()));
    }
    (0..z.shape().b)
        .map(|b| cosine_fidelity(&vectorize_complex(z, b)?, &vectorize_complex(z_hat, b)?))
        .collect()
}

/// Batch-mean absolute cosine similarity between original and reconstructed fields.
pub fn fidelity<T: Scalar>(z: &CTensor4<T>, z_hat: &CTensor4<T>) -> Result<T> {
    let per = per_sample_fidelity(z, z_hat)?;
    if per.is_empty() {
        return Err(invalid!("fidelity of an empty batch"));
    }
    Ok(per.iter().copied().sum::<T>() / T::from_usize_lossy(per.len()))
}

/// `‖W_k‖₁ / (max_j ‖W_j‖₁ + ε)` for each filter.
pub fn l1_importance<'a, T: Scalar>(filters: impl IntoIterator<Item = &'a [T]>, epsilon: T) -> Vec<T> {
    let norms: Vec<T> = filters.into_iter().map(|f| f.iter().map(|w| w.abs()).sum()).collect();
    let max = norms.iter().copied().fold(T::zero(), T::max);
    norms.into_iter().map(|n| n / (max + epsilon)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionKind {
    Add,
    Mul,
    PowMul,
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionKind::Add => "add",
            FusionKind::Mul => "mul",
            FusionKind::PowMul => "powmul",
        })
    }
}

impl FromStr for FusionKind {
    type Err = ScapError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "add" => Ok(FusionKind::Add),
            "mul" => Ok(FusionKind::Mul),
            "powmul" => Ok(FusionKind::PowMul),
            other => Err(invalid!("unknown fusion rule '{other}' (expected add, mul or powmul)")),
        }
    }
}

/// How fidelity importance and ℓ1 magnitude combine. `alpha` weights the
/// fidelity term in `Add` and is its exponent in `PowMul`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionRule {
    pub kind: FusionKind,
    pub alpha: f64,
}

impl Default for FusionRule {
    fn default() -> Self {
        Self { kind: FusionKind::Add, alpha: 0.5 }
    }
}

impl FusionRule {
    pub fn new(kind: FusionKind, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(invalid!("fusion alpha must lie in [0, 1], got {alpha}"));
        }
        Ok(Self { kind, alpha })
    }
}

/// Add: `α·f + (1−α)·m`; Mul: `f·m`; PowMul: `f^α · m^(1−α)` with `0^0 = 1`.
pub fn fuse<T: Scalar>(i_fid: &[T], i_l1: &[T], rule: FusionRule) -> Result<Vec<T>> {
    if i_fid.len() != i_l1.len() {
        return Err(invalid!("fusion inputs differ in length: {} vs {}", i_fid.len(), i_l1.len()));
    }
    let alpha = T::lit(rule.alpha);
    let beta = T::one() - alpha;
    let pow = |base: T, exp: T| if exp == T::zero() { T::one() } else { base.powf(exp) };
    Ok(i_fid
        .iter()
        .zip(i_l1)
        .map(|(&f, &m)| match rule.kind {
            FusionKind::Add => alpha * f + beta * m,
            FusionKind::Mul => f * m,
            FusionKind::PowMul => pow(f, alpha) * pow(m, beta),
        })
        .collect())
}

/// Min-max maps scores into `[0, 1]` within the layer. A range no wider than
/// ε (including a single channel) maps to all zeros.
pub fn normalize_layer_scores<T: Scalar>(fused: &[T]) -> Vec<T> {
    let Some(&first) = fused.first() else {
        return Vec::new();
    };
    let (lo, hi) = fused.iter().fold((first, first), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if range <= T::lit(FIDELITY_EPSILON) {
        return vec![T::zero(); fused.len()];
    }
    fused.iter().map(|&v| ((v - lo) / range).min(T::one()).max(T::zero())).collect()
}

/// Per-channel scores of one layer at every stage of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceVector<T> {
    pub layer_id: usize,
    pub fid: Vec<T>,
    pub i_fid: Vec<T>,
    pub i_l1: Vec<T>,
    pub fused: Vec<T>,
    pub normalized: Vec<T>,
}

impl<T: Scalar> ImportanceVector<T> {
    pub fn len(&self) -> usize {
        self.fid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fid.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreConfig {
    pub fusion: FusionRule,
    /// Samples per scoring micro-batch (standardization statistics are per micro-batch).
    pub batch_size: usize,
    /// Standardization guard.
    pub epsilon: f64,
    /// Guard in the ℓ1 denominator.
    pub l1_epsilon: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self { fusion: FusionRule::default(), batch_size: 128, epsilon: DEFAULT_EPSILON, l1_epsilon: 1e-8 }
    }
}

/// Per-channel fidelity over the whole pool, one output channel at a time.
///
/// Fields, spectra and reconstructions for channel `k` are dropped before
/// channel `k + 1` is built, so peak memory is one micro-batch field.
pub fn channel_fidelities<T: Scalar, R: RowReconstructor<T> + ?Sized>(
    x: &Tensor4<T>,
    y: &Tensor4<T>,
    layer_id: usize,
    real: &R,
    imag: &R,
    batch_size: usize,
    epsilon: T,
) -> Result<Vec<T>> {
    let (xs, ys) = (x.shape(), y.shape());
    if xs.b == 0 {
        return Err(invalid!("scoring pool for layer {layer_id} is empty"));
    }
    if batch_size == 0 {
        return Err(invalid!("scoring batch size must be at least 1"));
    }
    if xs.b != ys.b {
        return Err(invalid!("layer {layer_id}: input pool has {} samples, output pool has {}", xs.b, ys.b));
    }
    let mut fid = Vec::with_capacity(ys.c);
    for k in 0..ys.c {
        let y_k = y.channel(k)?;
        let mut total = T::zero();
        let mut start = 0;
        while start < xs.b {
            let end = (start + batch_size).min(xs.b);
            let field = build_interaction_field(&x.batch_slice(start..end)?, &y_k.batch_slice(start..end)?, layer_id, k)?;
            let rec = reconstruct_field(&field, real, imag, epsilon)?;
            total += per_sample_fidelity(&field.z, &rec)?.into_iter().sum::<T>();
            start = end;
        }
        fid.push(total / T::from_usize_lossy(xs.b));
    }
    Ok(fid)
}

/// Scores every output channel of one conv layer.
///
/// `filters` yields the flattened weights of each output filter, in channel order.
pub fn score_layer<'a, T: Scalar, R: RowReconstructor<T> + ?Sized>(
    x: &Tensor4<T>,
    y: &Tensor4<T>,
    layer_id: usize,
    filters: impl IntoIterator<Item = &'a [T]>,
    real: &R,
    imag: &R,
    cfg: &ScoreConfig,
) -> Result<ImportanceVector<T>> {
    let fid = channel_fidelities(x, y, layer_id, real, imag, cfg.batch_size, T::lit(cfg.epsilon))?;
    let i_l1 = l1_importance(filters, T::lit(cfg.l1_epsilon));
    if i_l1.len() != fid.len() {
        return Err(invalid!(
            "layer {layer_id}: {} filters but {} captured output channels",
            i_l1.len(),
            fid.len()
        ));
    }
    let i_fid: Vec<T> = fid.iter().map(|&f| T::one() - f).collect();
    let fused = fuse(&i_fid, &i_l1, cfg.fusion)?;
    let normalized = normalize_layer_scores(&fused);
    Ok(ImportanceVector { layer_id, fid, i_fid, i_l1, fused, normalized })
}
