//! Per-output-channel complex interaction fields and aligned-channel extraction.

use num_complex::Complex;

use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::{bilinear_resize, CTensor4, Shape4, Tensor4};

/// Complex field pairing a layer input with one output channel.
///
/// `Re(z)` is the full multi-channel input; every input-channel plane of
/// `Im(z)` holds the same copy of the output map, resized to the input's
/// spatial size.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionField<T> {
    pub layer_id: usize,
    pub channel: usize,
    pub z: CTensor4<T>,
}

/// `z = x + i·broadcast(resize(y_k, (H, W)), C_in)`.
///
/// `y_k` is whatever map the caller captured for channel `k`; the builder does
/// not care whether it was taken before or after the nonlinearity.
pub fn build_interaction_field<T: Scalar>(
    x: &Tensor4<T>,
    y_k: &Tensor4<T>,
    layer_id: usize,
    channel: usize,
) -> Result<InteractionField<T>> {
    let xs = x.shape();
    let ys = y_k.shape();
    if ys.c != 1 {
        return Err(invalid!("output map must have exactly one channel, got {}", ys.c));
    }
    if xs.b != ys.b {
        return Err(invalid!("batch mismatch: input has {} samples, output map has {}", xs.b, ys.b));
    }
    if xs.h == 0 || xs.w == 0 {
        return Err(invalid!("layer input has an empty spatial plane {}x{}", xs.h, xs.w));
    }
    let aligned = bilinear_resize(y_k, (xs.h, xs.w))?;
    let mut data = Vec::with_capacity(xs.len());
    for b in 0..xs.b {
        let imag = aligned.plane(b, 0);
        for c in 0..xs.c {
            data.extend(x.plane(b, c).iter().zip(imag).map(|(&re, &im)| Complex::new(re, im)));
        }
    }
    Ok(InteractionField { layer_id, channel, z: CTensor4::new(xs, data)? })
}

/// Channel mean of the imaginary part, `(1/C_in)·Σ_c Im(z)_c`, shape `(B, 1, H, W)`.
///
/// Computed as `first + Σ(v_c − first)/C_in` so that a broadcast field
/// returns its aligned map bit-exactly.
pub fn extract_aligned_channel<T: Scalar>(z: &CTensor4<T>) -> Result<Tensor4<T>> {
    let s = z.shape();
    if s.c == 0 {
        return Err(invalid!("cannot extract an aligned channel from zero input channels"));
    }
    let inv_c = T::one() / T::from_usize_lossy(s.c);
    let shape = Shape4::new(s.b, 1, s.h, s.w);
    let mut out = Vec::with_capacity(shape.len());
    for b in 0..s.b {
        let base = z.plane(b, 0);
        for i in 0..s.plane() {
            let anchor = base[i].im;
            let mut dev = T::zero();
            for c in 1..s.c {
                dev += z.plane(b, c)[i].im - anchor;
            }
            out.push(anchor + dev * inv_c);
        }
    }
    Tensor4::new(shape, out)
}
