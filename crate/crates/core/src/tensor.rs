//! Dense rank-4 real and complex tensors in `(batch, channel, height, width)`
//! row-major layout (width fastest), plus the row matrices the autoencoder
//! operates on.

use num_complex::Complex;

use crate::error::{invalid, Result};
use crate::scalar::Scalar;

/// `(B, C, H, W)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(b: usize, c: usize, h: usize, w: usize) -> Self {
        Self { b, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.b * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one `(h, w)` plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements in one sample (`C·H·W`).
    pub const fn sample(&self) -> usize {
        self.c * self.h * self.w
    }

    #[inline]
    pub const fn index(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.c + c) * self.h + h) * self.w + w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.b, self.c, self.h, self.w]
    }
}

impl From<[usize; 4]> for Shape4 {
    fn from(d: [usize; 4]) -> Self {
        Self::new(d[0], d[1], d[2], d[3])
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.b, self.c, self.h, self.w)
    }
}

/// Real rank-4 tensor. Constructors reject non-finite data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn new(shape: impl Into<Shape4>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.len() {
            return Err(invalid!(
                "tensor data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.len()
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid!("non-finite value at flat index {i}"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Shape4>) -> Self {
        let shape = shape.into();
        Self { shape, data: vec![T::zero(); shape.len()] }
    }

    pub fn filled(shape: impl Into<Shape4>, value: T) -> Self {
        let shape = shape.into();
        assert!(value.is_finite(), "fill value must be finite");
        Self { shape, data: vec![value; shape.len()] }
    }

    /// Builds a tensor from `f(b, c, h, w)`.
    pub fn from_fn(shape: impl Into<Shape4>, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Result<Self> {
        let shape = shape.into();
        let mut data = Vec::with_capacity(shape.len());
        for b in 0..shape.b {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(b, c, h, w));
                    }
                }
            }
        }
        Self::new(shape, data)
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access to the raw buffer. Callers must keep values finite.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.index(b, c, h, w)]
    }

    /// Contiguous `(h, w)` plane of sample `b`, channel `c`.
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (b * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (b * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// Contiguous `C·H·W` block of sample `b`.
    pub fn sample(&self, b: usize) -> &[T] {
        let s = self.shape.sample();
        &self.data[b * s..(b + 1) * s]
    }

    /// Single-channel view `(B, 1, H, W)` of channel `c`.
    pub fn channel(&self, c: usize) -> Result<Self> {
        if c >= self.shape.c {
            return Err(invalid!("channel {c} out of range for {}", self.shape));
        }
        let shape = Shape4::new(self.shape.b, 1, self.shape.h, self.shape.w);
        let mut data = Vec::with_capacity(shape.len());
        for b in 0..self.shape.b {
            data.extend_from_slice(self.plane(b, c));
        }
        Ok(Self { shape, data })
    }

    /// Samples `range` along the batch axis.
    pub fn batch_slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.start > range.end || range.end > self.shape.b {
            return Err(invalid!("batch range {range:?} out of bounds for {}", self.shape));
        }
        let s = self.shape.sample();
        let shape = Shape4::new(range.len(), self.shape.c, self.shape.h, self.shape.w);
        Ok(Self { shape, data: self.data[range.start * s..range.end * s].to_vec() })
    }

    /// Gathers the listed samples (in order) into a new tensor.
    pub fn gather_batch(&self, indices: &[usize]) -> Result<Self> {
        let s = self.shape.sample();
        let mut data = Vec::with_capacity(indices.len() * s);
        for &i in indices {
            if i >= self.shape.b {
                return Err(invalid!("sample {i} out of range for {}", self.shape));
            }
            data.extend_from_slice(self.sample(i));
        }
        let shape = Shape4::new(indices.len(), self.shape.c, self.shape.h, self.shape.w);
        Ok(Self { shape, data })
    }

    /// Same data under a different shape of equal size.
    pub fn reshape(self, shape: impl Into<Shape4>) -> Result<Self> {
        let shape = shape.into();
        if shape.len() != self.data.len() {
            return Err(invalid!("cannot reshape {} into {shape}", self.shape));
        }
        Ok(Self { shape, data: self.data })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn min_max(&self) -> Option<(T, T)> {
        let mut it = self.data.iter().copied();
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
    }
}

/// Complex rank-4 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct CTensor4<T> {
    shape: Shape4,
    data: Vec<Complex<T>>,
}

impl<T: Scalar> CTensor4<T> {
    pub fn new(shape: impl Into<Shape4>, data: Vec<Complex<T>>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.len() {
            return Err(invalid!(
                "complex tensor data length {} does not match shape {shape}",
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(invalid!("non-finite complex value at flat index {i}"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Shape4>) -> Self {
        let shape = shape.into();
        Self { shape, data: vec![Complex::new(T::zero(), T::zero()); shape.len()] }
    }

    /// `re + i·im`; shapes must agree.
    pub fn from_parts(re: &Tensor4<T>, im: &Tensor4<T>) -> Result<Self> {
        if re.shape() != im.shape() {
            return Err(invalid!("real part {} and imaginary part {} differ in shape", re.shape(), im.shape()));
        }
        let data = re.data().iter().zip(im.data()).map(|(&r, &i)| Complex::new(r, i)).collect();
        Ok(Self { shape: re.shape(), data })
    }

    pub fn from_real(re: &Tensor4<T>) -> Self {
        let data = re.data().iter().map(|&r| Complex::new(r, T::zero())).collect();
        Self { shape: re.shape(), data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    /// Mutable access to the raw buffer. Callers must keep values finite.
    pub fn data_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex<T>> {
        self.data
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, h: usize, w: usize) -> Complex<T> {
        self.data[self.shape.index(b, c, h, w)]
    }

    pub fn plane(&self, b: usize, c: usize) -> &[Complex<T>] {
        let p = self.shape.plane();
        let start = (b * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [Complex<T>] {
        let p = self.shape.plane();
        let start = (b * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn re(&self) -> Tensor4<T> {
        Tensor4 { shape: self.shape, data: self.data.iter().map(|z| z.re).collect() }
    }

    pub fn im(&self) -> Tensor4<T> {
        Tensor4 { shape: self.shape, data: self.data.iter().map(|z| z.im).collect() }
    }

    pub fn scale(&self, factor: Complex<T>) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&z| z * factor).collect() }
    }

    /// `a·self + b·other`.
    pub fn axpby(&self, a: Complex<T>, other: &Self, b: Complex<T>) -> Result<Self> {
        if self.shape != other.shape {
            return Err(invalid!("shape mismatch {} vs {}", self.shape, other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(&x, &y)| x * a + y * b).collect();
        Ok(Self { shape: self.shape, data })
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid!("matrix data length {} does not match {rows}x{cols}", data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(invalid!("cannot stack {} columns onto {}", other.cols, self.cols));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self { rows: self.rows + other.rows, cols: self.cols, data })
    }
}

/// Resizes every `(h, w)` plane to `target` with bilinear sampling under the
/// half-pixel-center convention: `src = (dst + 0.5)·(in/out) − 0.5`, clamped
/// to `[0, in − 1]`.
pub fn bilinear_resize<T: Scalar>(src: &Tensor4<T>, target: (usize, usize)) -> Result<Tensor4<T>> {
    let s = src.shape();
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(invalid!("resize target {th}x{tw} has a zero dimension"));
    }
    if s.h == 0 || s.w == 0 {
        return Err(invalid!("cannot resize empty spatial plane {}x{}", s.h, s.w));
    }
    if (s.h, s.w) == (th, tw) {
        return Ok(src.clone());
    }

    let ys = axis_taps::<T>(s.h, th);
    let xs = axis_taps::<T>(s.w, tw);
    let out_shape = Shape4::new(s.b, s.c, th, tw);
    let mut out = Vec::with_capacity(out_shape.len());
    for b in 0..s.b {
        for c in 0..s.c {
            let plane = src.plane(b, c);
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    let top = lerp(plane[y0 * s.w + x0], plane[y0 * s.w + x1], fx);
                    let bottom = lerp(plane[y1 * s.w + x0], plane[y1 * s.w + x1], fx);
                    out.push(lerp(top, bottom, fy));
                }
            }
        }
    }
    Ok(Tensor4 { shape: out_shape, data: out })
}

/// `(lower index, upper index, fraction)` for each destination coordinate.
fn axis_taps<T: Scalar>(src_len: usize, dst_len: usize) -> Vec<(usize, usize, T)> {
    let scale = src_len as f64 / dst_len as f64;
    let max = (src_len - 1) as f64;
    (0..dst_len)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src_len - 1);
            (i0, i1, T::lit(pos - i0 as f64))
        })
        .collect()
}

/// Interpolates between `a` and `b`; equal endpoints are returned exactly and
/// the result never leaves `[min(a,b), max(a,b)]`.
#[inline]
fn lerp<T: Scalar>(a: T, b: T, t: T) -> T {
    if a == b {
        return a;
    }
    let v = a + (b - a) * t;
    v.max(a.min(b)).min(a.max(b))
}

/// Replicates a single-channel tensor across `c_target` channels.
pub fn broadcast_channel<T: Scalar>(src: &Tensor4<T>, c_target: usize) -> Result<Tensor4<T>> {
    let s = src.shape();
    if s.c != 1 {
        return Err(invalid!("broadcast source must have exactly one channel, got {}", s.c));
    }
    let shape = Shape4::new(s.b, c_target, s.h, s.w);
    let mut data = Vec::with_capacity(shape.len());
    for b in 0..s.b {
        let plane = src.plane(b, 0);
        for _ in 0..c_target {
            data.extend_from_slice(plane);
        }
    }
    Ok(Tensor4 { shape, data })
}

/// `vec([Re(z_b), Im(z_b)])` for one sample: the flattened real part
/// followed by the flattened imaginary part, length `2·C·H·W`.
pub fn vectorize_complex<T: Scalar>(z: &CTensor4<T>, sample: usize) -> Result<Vec<T>> {
    let s = z.shape();
    if sample >= s.b {
        return Err(invalid!("sample {sample} out of range for batch of {}", s.b));
    }
    let block = &z.data()[sample * s.sample()..(sample + 1) * s.sample()];
    let mut v = Vec::with_capacity(2 * block.len());
    v.extend(block.iter().map(|c| c.re));
    v.extend(block.iter().map(|c| c.im));
    Ok(v)
}

/// Inverse of [`vectorize_complex`] for a single sample of shape `(C, H, W)`.
pub fn devectorize_complex<T: Scalar>(v: &[T], c: usize, h: usize, w: usize) -> Result<CTensor4<T>> {
    let n = c * h * w;
    if v.len() != 2 * n {
        return Err(invalid!("vector length {} is not 2·{c}·{h}·{w}", v.len()));
    }
    let data = (0..n).map(|i| Complex::new(v[i], v[n + i])).collect();
    CTensor4::new(Shape4::new(1, c, h, w), data)
}

/// Mean and population standard deviation over every element.
pub fn batch_stats<T: Scalar>(t: &Tensor4<T>) -> Result<(T, T)> {
    slice_stats(t.data()).ok_or_else(|| invalid!("batch statistics of an empty tensor"))
}

/// Two-pass mean / population std; `None` for an empty slice.
pub(crate) fn slice_stats<T: Scalar>(xs: &[T]) -> Option<(T, T)> {
    if xs.is_empty() {
        return None;
    }
    let n = T::from_usize_lossy(xs.len());
    let mean = xs.iter().copied().sum::<T>() / n;
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    Some((mean, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: Shape4, seed: u64) -> Tensor4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::new(shape, (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct evaluation of the half-pixel bilinear formula for one output pixel.
    fn bilinear_oracle(plane: &[f64], h: usize, w: usize, th: usize, tw: usize, y: usize, x: usize) -> f64 {
        let sy = ((y as f64 + 0.5) * (h as f64 / th as f64) - 0.5).max(0.0).min((h - 1) as f64);
        let sx = ((x as f64 + 0.5) * (w as f64 / tw as f64) - 0.5).max(0.0).min((w - 1) as f64);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (wy, wx) = (sy - y0 as f64, sx - x0 as f64);
        plane[y0 * w + x0] * (1.0 - wy) * (1.0 - wx)
            + plane[y0 * w + x1] * (1.0 - wy) * wx
            + plane[y1 * w + x0] * wy * (1.0 - wx)
            + plane[y1 * w + x1] * wy * wx
    }

    #[test]
    fn constructor_rejects_bad_length_and_nan() {
        assert!(Tensor4::<f64>::new([1, 1, 2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor4::<f64>::new([1, 1, 1, 2], vec![0.0, f64::NAN]).is_err());
        assert!(Tensor4::<f64>::new([1, 1, 1, 1], vec![f64::INFINITY]).is_err());
        assert!(Tensor4::<f64>::new([0, 3, 4, 4], vec![]).is_ok());
    }

    #[test]
    fn resize_identity_is_bitwise_copy() {
        let t = random_tensor(Shape4::new(1, 1, 4, 4), 1);
        let r = bilinear_resize(&t, (4, 4)).unwrap();
        assert_eq!(t.data(), r.data());
    }

    #[test]
    fn resize_preserves_constants() {
        let t = Tensor4::filled([1, 1, 2, 2], 3.0f64);
        let r = bilinear_resize(&t, (5, 5)).unwrap();
        assert_eq!(r.shape(), Shape4::new(1, 1, 5, 5));
        assert!(r.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn resize_two_by_two_matches_direct_formula() {
        let t = Tensor4::new([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let r = bilinear_resize(&t, (4, 4)).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let expect = bilinear_oracle(t.data(), 2, 2, 4, 4, y, x);
                assert!((r.get(0, 0, y, x) - expect).abs() < 1e-12, "({y},{x})");
            }
        }
        // Corners clamp to source corners, interior pixel (1,1) samples source (0.25, 0.25).
        assert_eq!(r.get(0, 0, 0, 0), 0.0);
        assert_eq!(r.get(0, 0, 3, 3), 3.0);
        assert!((r.get(0, 0, 1, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn resize_matches_oracle_for_odd_sizes() {
        let t = random_tensor(Shape4::new(2, 3, 5, 7), 9);
        for &(th, tw) in &[(3, 4), (9, 2), (1, 1), (16, 11)] {
            let r = bilinear_resize(&t, (th, tw)).unwrap();
            for b in 0..2 {
                for c in 0..3 {
                    for y in 0..th {
                        for x in 0..tw {
                            let expect = bilinear_oracle(t.plane(b, c), 5, 7, th, tw, y, x);
                            assert!((r.get(b, c, y, x) - expect).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn resize_rejects_zero_target() {
        let t = Tensor4::<f64>::zeros([1, 1, 2, 2]);
        assert!(bilinear_resize(&t, (0, 3)).is_err());
        assert!(bilinear_resize(&t, (3, 0)).is_err());
    }

    #[test]
    fn broadcast_cases() {
        let t = random_tensor(Shape4::new(2, 1, 3, 3), 2);
        assert_eq!(broadcast_channel(&t, 1).unwrap(), t);

        let ones = Tensor4::filled([1, 1, 2, 2], 1.0f64);
        let b = broadcast_channel(&ones, 4).unwrap();
        assert_eq!(b.shape(), Shape4::new(1, 4, 2, 2));
        assert!(b.data().iter().all(|&v| v == 1.0));

        let t = random_tensor(Shape4::new(2, 1, 4, 4), 3);
        let b = broadcast_channel(&t, 8).unwrap();
        for s in 0..2 {
            for c in 0..8 {
                assert_eq!(b.plane(s, c), t.plane(s, 0));
            }
        }

        let multi = Tensor4::<f64>::zeros([1, 2, 2, 2]);
        assert!(broadcast_channel(&multi, 3).is_err());
    }

    #[test]
    fn vectorize_cases() {
        let re = Tensor4::new([1, 1, 1, 1], vec![5.0f64]).unwrap();
        let z = CTensor4::from_real(&re);
        assert_eq!(vectorize_complex(&z, 0).unwrap(), vec![5.0, 0.0]);

        let im = Tensor4::new([1, 1, 1, 1], vec![2.0f64]).unwrap();
        let z = CTensor4::from_parts(&Tensor4::zeros([1, 1, 1, 1]), &im).unwrap();
        assert_eq!(vectorize_complex(&z, 0).unwrap(), vec![0.0, 2.0]);
        assert!(vectorize_complex(&z, 1).is_err());

        let re = random_tensor(Shape4::new(1, 2, 2, 2), 4);
        let im = random_tensor(Shape4::new(1, 2, 2, 2), 5);
        let z = CTensor4::from_parts(&re, &im).unwrap();
        let v = vectorize_complex(&z, 0).unwrap();
        assert_eq!(v.len(), 16);
        for c in 0..2 {
            for h in 0..2 {
                for w in 0..2 {
                    let i = c * 4 + h * 2 + w;
                    assert_eq!(v[i], re.get(0, c, h, w));
                    assert_eq!(v[8 + i], im.get(0, c, h, w));
                }
            }
        }
    }

    #[test]
    fn batch_stats_cases() {
        assert_eq!(batch_stats(&Tensor4::<f64>::zeros([2, 2, 2, 2])).unwrap(), (0.0, 0.0));
        assert_eq!(batch_stats(&Tensor4::filled([1, 3, 2, 2], 7.0f64)).unwrap(), (7.0, 0.0));
        assert!(batch_stats(&Tensor4::<f64>::zeros([0, 1, 1, 1])).is_err());

        let t = random_tensor(Shape4::new(3, 2, 5, 5), 6);
        let (m, s) = batch_stats(&t).unwrap();
        // Independent two-pass oracle with explicit loops.
        let n = t.data().len() as f64;
        let mut sum = 0.0;
        for &v in t.data() {
            sum += v;
        }
        let mean = sum / n;
        let mut ss = 0.0;
        for &v in t.data() {
            ss += (v - mean) * (v - mean);
        }
        let std = (ss / n).sqrt();
        assert!(((m - mean) / mean).abs() < 1e-10);
        assert!(((s - std) / std).abs() < 1e-10);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn tensor_strategy() -> impl Strategy<Value = Tensor4<f64>> {
            (1usize..3, 1usize..3, 1usize..6, 1usize..6).prop_flat_map(|(b, c, h, w)| {
                proptest::collection::vec(-100.0f64..100.0, b * c * h * w)
                    .prop_map(move |d| Tensor4::new([b, c, h, w], d).unwrap())
            })
        }

        proptest! {
            #[test]
            fn resize_output_within_source_range(t in tensor_strategy(), th in 1usize..12, tw in 1usize..12) {
                let (lo, hi) = t.min_max().unwrap();
                let r = bilinear_resize(&t, (th, tw)).unwrap();
                prop_assert!(r.data().iter().all(|&v| v >= lo && v <= hi));
            }

            #[test]
            fn broadcast_scales_sum(t in tensor_strategy(), c in 1usize..6) {
                let single = t.channel(0).unwrap();
                let b = broadcast_channel(&single, c).unwrap();
                let s_in: f64 = single.data().iter().sum();
                let s_out: f64 = b.data().iter().sum();
                prop_assert!((s_out - c as f64 * s_in).abs() <= 1e-9 * (1.0 + s_out.abs()));
            }

            #[test]
            fn vectorize_is_bijective(re in tensor_strategy(), seed in any::<u64>()) {
                let s = re.shape();
                let im = random_tensor(s, seed);
                let z = CTensor4::from_parts(&re, &im).unwrap();
                for b in 0..s.b {
                    let v = vectorize_complex(&z, b).unwrap();
                    let back = devectorize_complex(&v, s.c, s.h, s.w).unwrap();
                    let block = &z.data()[b * s.sample()..(b + 1) * s.sample()];
                    prop_assert_eq!(back.data(), block);
                }
            }
        }
    }
}
