//! 2D DFT over the spatial axes and batch-wide spectral standardization.
//!
//! The forward transform is unnormalized and the inverse carries the
//! `1/(H·W)` factor. Power-of-two axes use an iterative radix-2
//! Cooley–Tukey kernel; any other length falls back to a direct DFT.

use num_complex::Complex;

use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::{slice_stats, CTensor4};

/// Default guard added to the standard deviations.
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    Forward,
    Inverse,
}

/// Forward 2D DFT of every `(b, c)` plane.
pub fn fft2<T: Scalar>(z: &CTensor4<T>) -> CTensor4<T> {
    transform2(z, Direction::Forward)
}

/// Inverse 2D DFT of every `(b, c)` plane, normalized by `1/(H·W)`.
pub fn ifft2<T: Scalar>(f: &CTensor4<T>) -> CTensor4<T> {
    transform2(f, Direction::Inverse)
}

fn transform2<T: Scalar>(z: &CTensor4<T>, dir: Direction) -> CTensor4<T> {
    let s = z.shape();
    let mut out = z.clone();
    if s.is_empty() {
        return out;
    }
    let row_plan = Plan::new(s.w, dir);
    let col_plan = Plan::new(s.h, dir);
    let mut column = vec![Complex::new(T::zero(), T::zero()); s.h];
    let mut scratch = Vec::new();
    let norm = match dir {
        Direction::Forward => None,
        Direction::Inverse => Some(T::one() / T::from_usize_lossy(s.plane())),
    };
    for b in 0..s.b {
        for c in 0..s.c {
            let plane = out.plane_mut(b, c);
            for row in plane.chunks_exact_mut(s.w) {
                row_plan.run(row, &mut scratch);
            }
            for x in 0..s.w {
                for y in 0..s.h {
                    column[y] = plane[y * s.w + x];
                }
                col_plan.run(&mut column, &mut scratch);
                for y in 0..s.h {
                    plane[y * s.w + x] = column[y];
                }
            }
            if let Some(k) = norm {
                for v in plane.iter_mut() {
                    *v *= k;
                }
            }
        }
    }
    out
}

/// Precomputed twiddles for one axis length and direction.
struct Plan<T> {
    n: usize,
    radix2: bool,
    /// `exp(∓2πi·k/n)` for `k in 0..n`.
    twiddles: Vec<Complex<T>>,
}

impl<T: Scalar> Plan<T> {
    fn new(n: usize, dir: Direction) -> Self {
        let sign = match dir {
            Direction::Forward => -1.0,
            Direction::Inverse => 1.0,
        };
        let twiddles = (0..n)
            .map(|k| {
                let theta = sign * 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                Complex::new(T::lit(theta.cos()), T::lit(theta.sin()))
            })
            .collect();
        Self { n, radix2: n.is_power_of_two(), twiddles }
    }

    fn run(&self, buf: &mut [Complex<T>], scratch: &mut Vec<Complex<T>>) {
        debug_assert_eq!(buf.len(), self.n);
        if self.n <= 1 {
            return;
        }
        if self.radix2 {
            self.radix2_in_place(buf);
        } else {
            self.direct(buf, scratch);
        }
    }

    fn radix2_in_place(&self, buf: &mut [Complex<T>]) {
        let n = self.n;
        let bits = n.trailing_zeros();
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if j > i {
                buf.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let stride = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let w = self.twiddles[k * stride];
                    let a = buf[start + k];
                    let b = buf[start + k + half] * w;
                    buf[start + k] = a + b;
                    buf[start + k + half] = a - b;
                }
            }
            len <<= 1;
        }
    }

    fn direct(&self, buf: &mut [Complex<T>], scratch: &mut Vec<Complex<T>>) {
        let n = self.n;
        scratch.clear();
        scratch.extend_from_slice(buf);
        for (k, out) in buf.iter_mut().enumerate() {
            let mut acc = Complex::new(T::zero(), T::zero());
            for (j, &x) in scratch.iter().enumerate() {
                acc += x * self.twiddles[(j * k) % n];
            }
            *out = acc;
        }
    }
}

/// Batch statistics cached by [`standardize_spectrum`] so the transform can be undone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralStats<T> {
    pub mu_r: T,
    pub sigma_r: T,
    pub mu_i: T,
    pub sigma_i: T,
    pub epsilon: T,
}

/// Standardizes real and imaginary parts independently with mean and
/// population std taken over the whole `(b, c, h, w)` extent.
pub fn standardize_spectrum<T: Scalar>(f: &CTensor4<T>, epsilon: T) -> Result<(CTensor4<T>, SpectralStats<T>)> {
    if !(epsilon > T::zero()) {
        return Err(invalid!("standardization epsilon must be positive, got {epsilon}"));
    }
    let re: Vec<T> = f.data().iter().map(|z| z.re).collect();
    let im: Vec<T> = f.data().iter().map(|z| z.im).collect();
    let (mu_r, sigma_r) = slice_stats(&re).ok_or_else(|| invalid!("cannot standardize an empty spectrum"))?;
    let (mu_i, sigma_i) = slice_stats(&im).ok_or_else(|| invalid!("cannot standardize an empty spectrum"))?;
    let stats = SpectralStats { mu_r, sigma_r, mu_i, sigma_i, epsilon };
    let (dr, di) = (sigma_r + epsilon, sigma_i + epsilon);
    let data = f.data().iter().map(|z| Complex::new((z.re - mu_r) / dr, (z.im - mu_i) / di)).collect();
    Ok((CTensor4::new(f.shape(), data)?, stats))
}

/// Exact inverse of [`standardize_spectrum`]: `(σ + ε)·x + μ` per part.
pub fn destandardize_spectrum<T: Scalar>(f_std: &CTensor4<T>, stats: &SpectralStats<T>) -> CTensor4<T> {
    let (dr, di) = (stats.sigma_r + stats.epsilon, stats.sigma_i + stats.epsilon);
    let data: Vec<_> = f_std
        .data()
        .iter()
        .map(|z| Complex::new(dr * z.re + stats.mu_r, di * z.im + stats.mu_i))
        .collect();
    CTensor4::new(f_std.shape(), data).expect("affine map of finite values stays finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex<f64> {
        Complex::new(re, im)
    }

    fn random_ct(shape: Shape4, seed: u64) -> CTensor4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.len()).map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        CTensor4::new(shape, data).unwrap()
    }

    /// O((HW)²) double-sum DFT evaluated straight from the definition.
    fn naive_dft2(plane: &[Complex<f64>], h: usize, w: usize) -> Vec<Complex<f64>> {
        let mut out = vec![c(0.0, 0.0); h * w];
        for u in 0..h {
            for v in 0..w {
                let mut acc = c(0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let phase = -2.0 * std::f64::consts::PI
                            * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                        acc += plane[y * w + x] * c(phase.cos(), phase.sin());
                    }
                }
                out[u * w + v] = acc;
            }
        }
        out
    }

    fn max_abs_diff(a: &[Complex<f64>], b: &[Complex<f64>]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn impulse_gives_flat_spectrum() {
        let mut z = CTensor4::<f64>::zeros([1, 1, 4, 4]);
        z.data_mut()[0] = c(1.0, 0.0);
        let f = fft2(&z);
        assert!(f.data().iter().all(|v| (v - c(1.0, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn constant_gives_dc_only() {
        let z = CTensor4::new([1, 1, 2, 2], vec![c(1.0, 0.0); 4]).unwrap();
        let f = fft2(&z);
        assert!((f.data()[0] - c(4.0, 0.0)).norm() < 1e-15);
        assert!(f.data()[1..].iter().all(|v| v.norm() < 1e-15));
    }

    #[test]
    fn random_8x8_matches_naive_dft() {
        let z = random_ct(Shape4::new(1, 1, 8, 8), 11);
        let f = fft2(&z);
        assert!(max_abs_diff(f.data(), &naive_dft2(z.data(), 8, 8)) < 1e-6);
    }

    #[test]
    fn mixed_sizes_match_naive_dft() {
        for &(h, w) in &[(3, 5), (4, 6), (7, 8), (1, 9), (12, 2)] {
            let z = random_ct(Shape4::new(2, 2, h, w), (h * 31 + w) as u64);
            let f = fft2(&z);
            for b in 0..2 {
                for ch in 0..2 {
                    let err = max_abs_diff(f.plane(b, ch), &naive_dft2(z.plane(b, ch), h, w));
                    assert!(err < 1e-9, "{h}x{w}: {err}");
                }
            }
        }
    }

    #[test]
    fn inverse_cases() {
        let z = random_ct(Shape4::new(1, 2, 8, 8), 12);
        assert!(max_abs_diff(ifft2(&fft2(&z)).data(), z.data()) < 1e-10);

        let zero = CTensor4::<f64>::zeros([1, 1, 4, 4]);
        assert!(ifft2(&zero).data().iter().all(|v| v.norm() == 0.0));

        let mut dc = CTensor4::<f64>::zeros([1, 1, 4, 4]);
        dc.data_mut()[0] = c(16.0, 0.0);
        assert!(ifft2(&dc).data().iter().all(|v| (v - c(1.0, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn empty_batch_is_passthrough() {
        let z = CTensor4::<f64>::zeros([0, 3, 4, 4]);
        assert_eq!(fft2(&z).shape(), z.shape());
    }

    #[test]
    fn standardize_degenerate_variance() {
        let z = CTensor4::new([1, 1, 2, 2], vec![c(3.0, 0.0); 4]).unwrap();
        let (s, st) = standardize_spectrum(&z, 1e-8).unwrap();
        assert_eq!(st.sigma_r, 0.0);
        assert!(s.data().iter().all(|v| v.re == 0.0 && v.im == 0.0));
    }

    #[test]
    fn standardize_near_fixed_point() {
        // Real parts {-1, 1}, imaginary parts {1, -1}: zero mean, unit std already.
        let z = CTensor4::new([1, 1, 1, 4], vec![c(-1.0, 1.0), c(1.0, -1.0), c(-1.0, -1.0), c(1.0, 1.0)]).unwrap();
        let (s, _) = standardize_spectrum(&z, 1e-8).unwrap();
        assert!(max_abs_diff(s.data(), z.data()) < 1e-7);
    }

    #[test]
    fn standardize_random_matches_stats_oracle() {
        let z = random_ct(Shape4::new(3, 2, 4, 4), 13);
        let eps = 1e-8;
        let (s, st) = standardize_spectrum(&z, eps).unwrap();
        let re: Vec<f64> = s.data().iter().map(|v| v.re).collect();
        let n = re.len() as f64;
        let mean = re.iter().sum::<f64>() / n;
        let std = (re.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-9);
        assert!((std - st.sigma_r / (st.sigma_r + eps)).abs() < 1e-6);
    }

    #[test]
    fn standardize_rejects_bad_epsilon_and_empty() {
        let z = random_ct(Shape4::new(1, 1, 2, 2), 1);
        assert!(standardize_spectrum(&z, 0.0).is_err());
        assert!(standardize_spectrum(&CTensor4::<f64>::zeros([0, 1, 2, 2]), 1e-8).is_err());
    }

    #[test]
    fn destandardize_cases() {
        let z = random_ct(Shape4::new(2, 3, 4, 4), 14);
        let (s, st) = standardize_spectrum(&z, 1e-8).unwrap();
        let back = destandardize_spectrum(&s, &st);
        for (a, b) in back.data().iter().zip(z.data()) {
            assert!((a - b).norm() <= 1e-9 * b.norm().max(1.0));
        }

        let st = SpectralStats { mu_r: 2.0, sigma_r: 0.5, mu_i: -1.0, sigma_i: 3.0, epsilon: 1e-8 };
        let out = destandardize_spectrum(&CTensor4::<f64>::zeros([1, 2, 2, 2]), &st);
        assert!(out.data().iter().all(|v| *v == c(2.0, -1.0)));

        let eps = 1e-8;
        let neutral = SpectralStats { mu_r: 0.0, sigma_r: 1.0 - eps, mu_i: 0.0, sigma_i: 1.0 - eps, epsilon: eps };
        let out = destandardize_spectrum(&z, &neutral);
        assert!(max_abs_diff(out.data(), z.data()) < 1e-12);
    }

    #[test]
    fn parseval_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for trial in 0..20 {
            let shape = Shape4::new(1, 2, 2 + trial % 7, 3 + trial % 5);
            let z1 = random_ct(shape, 100 + trial as u64);
            let z2 = random_ct(shape, 200 + trial as u64);
            let f1 = fft2(&z1);
            for ch in 0..2 {
                let e_space: f64 = z1.plane(0, ch).iter().map(|v| v.norm_sqr()).sum();
                let e_freq: f64 = f1.plane(0, ch).iter().map(|v| v.norm_sqr()).sum::<f64>() / shape.plane() as f64;
                assert!((e_space - e_freq).abs() <= 1e-8 * e_space);
            }
            let a = c(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let b = c(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let lhs = fft2(&z1.axpby(a, &z2, b).unwrap());
            let rhs = f1.axpby(a, &fft2(&z2), b).unwrap();
            assert!(max_abs_diff(lhs.data(), rhs.data()) < 1e-9);
        }
    }

    #[test]
    fn f32_roundtrip_is_close() {
        let z64 = random_ct(Shape4::new(1, 1, 8, 8), 16);
        let data = z64.data().iter().map(|v| Complex::new(v.re as f32, v.im as f32)).collect();
        let z = CTensor4::<f32>::new(z64.shape(), data).unwrap();
        let back = ifft2(&fft2(&z));
        let err = back.data().iter().zip(z.data()).map(|(a, b)| (a - b).norm()).fold(0.0f32, f32::max);
        assert!(err < 1e-5);
    }
}
