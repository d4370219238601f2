//! Randomized checks of the fidelity identities and the aligned-channel
//! perturbation bound.
//!
//! Every check is deterministic under its seed and reports its own tolerance,
//! so a log line is self-describing. All arithmetic is `f64`.

use std::fmt;
use std::ops::RangeInclusive;

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::field::extract_aligned_channel;
use crate::scoring::cosine_fidelity;
use crate::tensor::{vectorize_complex, CTensor4, Shape4};

/// Vectors with a smaller norm are redrawn; the identities assume nonzero inputs.
const MIN_NORM: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub trials: usize,
    /// Trials whose violation exceeded the tolerance.
    pub failures: usize,
    pub max_violation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckOutcome {
    fn new(name: &str, tolerance: f64) -> Self {
        Self { name: name.into(), trials: 0, failures: 0, max_violation: 0.0, tolerance, passed: true }
    }

    fn record(&mut self, violation: f64) {
        self.trials += 1;
        // NaN counts as a failure.
        if !(violation <= self.tolerance) {
            self.failures += 1;
        }
        self.max_violation = if violation.is_nan() { f64::NAN } else { self.max_violation.max(violation) };
        self.passed = self.failures == 0;
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<24} trials={:<5} failures={:<4} max_violation={:.3e} tolerance={:.0e} {}",
            self.name,
            self.trials,
            self.failures,
            self.max_violation,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `sign(⟨a, b⟩)` with `sign(0) = +1`.
fn alignment_sign(a: &[f64], b: &[f64]) -> f64 {
    if dot(a, b) < 0.0 {
        -1.0
    } else {
        1.0
    }
}

fn dist_sq(a: &[f64], b: &[f64], s: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - s * y).powi(2)).sum()
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if norm(&v) >= MIN_NORM {
            return v;
        }
    }
}

fn fid(a: &[f64], b: &[f64]) -> f64 {
    cosine_fidelity(a, b).expect("equal lengths")
}

/// `‖u − s·û‖² = 2(1 − F)` for unit vectors, `s` the sign of their inner product.
pub fn fidelity_identity_violation(u: &[f64], u_hat: &[f64]) -> f64 {
    let (nu, nh) = (norm(u), norm(u_hat));
    let a: Vec<f64> = u.iter().map(|x| x / nu).collect();
    let b: Vec<f64> = u_hat.iter().map(|x| x / nh).collect();
    (dist_sq(&a, &b, alignment_sign(&a, &b)) - 2.0 * (1.0 - fid(u, u_hat))).abs()
}

/// Right-hand side of the non-normalized identity,
/// `(‖v‖ − ‖v̂‖)² + 2‖v‖‖v̂‖(1 − F)`.
pub fn nonnorm_rhs(v: &[f64], v_hat: &[f64]) -> f64 {
    let (a, b) = (norm(v), norm(v_hat));
    (a - b).powi(2) + 2.0 * a * b * (1.0 - fid(v, v_hat))
}

/// Relative violation of `‖v − s·v̂‖² = (‖v‖ − ‖v̂‖)² + 2‖v‖‖v̂‖(1 − F)`.
pub fn nonnorm_identity_violation(v: &[f64], v_hat: &[f64]) -> f64 {
    let lhs = dist_sq(v, v_hat, alignment_sign(v, v_hat));
    let rhs = nonnorm_rhs(v, v_hat);
    (lhs - rhs).abs() / lhs.max(rhs).max(f64::MIN_POSITIVE)
}

/// `‖𝒜(Z) − 𝒜(Ẑ)‖` and `(1/√C)·‖v − v̂‖` for one sample.
pub fn extraction_sides(z: &CTensor4<f64>, z_hat: &CTensor4<f64>) -> Result<(f64, f64)> {
    let a = extract_aligned_channel(z)?;
    let b = extract_aligned_channel(z_hat)?;
    let diff: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    let v = vectorize_complex(z, 0)?;
    let vh = vectorize_complex(z_hat, 0)?;
    let dv: Vec<f64> = v.iter().zip(&vh).map(|(x, y)| x - y).collect();
    Ok((norm(&diff), norm(&dv) / (z.shape().c as f64).sqrt()))
}

/// `‖ȳ − ŷ̄‖` and the fidelity bound `(1/√C)·√((‖v‖−‖v̂‖)² + 2‖v‖‖v̂‖(1−F))`.
pub fn aligned_bound_sides(z: &CTensor4<f64>, z_hat: &CTensor4<f64>) -> Result<(f64, f64)> {
    let a = extract_aligned_channel(z)?;
    let b = extract_aligned_channel(z_hat)?;
    let diff: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    let v = vectorize_complex(z, 0)?;
    let vh = vectorize_complex(z_hat, 0)?;
    Ok((norm(&diff), nonnorm_rhs(&v, &vh).max(0.0).sqrt() / (z.shape().c as f64).sqrt()))
}

fn random_field(rng: &mut ChaCha8Rng, shape: Shape4) -> CTensor4<f64> {
    let data = (0..shape.len()).map(|_| Complex::new(rng.sample(StandardNormal), rng.sample(StandardNormal))).collect();
    CTensor4::new(shape, data).expect("sized above")
}

/// A field whose imaginary part is one map repeated over every channel.
fn broadcast_field(rng: &mut ChaCha8Rng, shape: Shape4) -> CTensor4<f64> {
    let y: Vec<f64> = (0..shape.plane()).map(|_| rng.sample(StandardNormal)).collect();
    let mut data = Vec::with_capacity(shape.len());
    for _ in 0..shape.c {
        data.extend(y.iter().map(|&im| Complex::new(rng.sample(StandardNormal), im)));
    }
    CTensor4::new(shape, data).expect("sized above")
}

fn random_shape(rng: &mut ChaCha8Rng, cin: &RangeInclusive<usize>) -> Shape4 {
    Shape4::new(1, rng.random_range(cin.clone()), rng.random_range(1..=6), rng.random_range(1..=6))
}

fn nonzero(z: &CTensor4<f64>) -> bool {
    norm(&vectorize_complex(z, 0).expect("sample 0 exists")) >= MIN_NORM
}

pub fn check_fidelity_identity(trials: usize, dims: RangeInclusive<usize>, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = CheckOutcome::new("fidelity identity", 1e-9);
    for _ in 0..trials {
        let d = rng.random_range(dims.clone());
        let u = normal_vec(&mut rng, d);
        let u_hat = normal_vec(&mut rng, d);
        out.record(fidelity_identity_violation(&u, &u_hat));
    }
    out
}

pub fn check_extraction_stability(trials: usize, cin: RangeInclusive<usize>, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = CheckOutcome::new("extraction stability", 1e-10);
    for _ in 0..trials {
        let shape = random_shape(&mut rng, &cin);
        let z = random_field(&mut rng, shape);
        let z_hat = random_field(&mut rng, shape);
        let (lhs, rhs) = extraction_sides(&z, &z_hat)?;
        out.record((lhs - rhs).max(0.0));
    }
    Ok(out)
}

pub fn check_nonnorm_identity(trials: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = CheckOutcome::new("non-normalized identity", 1e-8);
    for _ in 0..trials {
        let d = rng.random_range(1..=64);
        let v: Vec<f64> = normal_vec(&mut rng, d).into_iter().map(|x| x * rng.random_range(0.1..10.0)).collect();
        let v_hat = normal_vec(&mut rng, d);
        out.record(nonnorm_identity_violation(&v, &v_hat));
    }
    out
}

/// One instance of the aligned-channel bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundTrial {
    pub lhs: f64,
    pub rhs: f64,
    /// Sign of `⟨v, v̂⟩`.
    pub sign: f64,
}

/// Ẑ is a reconstruction-like perturbation of Z: both carry broadcast
/// imaginary parts, and `Ẑ = Z + σ·N` with structured noise `N` and `σ`
/// log-uniform on `[1e-3, 10]`.
pub fn aligned_bound_trials(trials: usize, cin: RangeInclusive<usize>, seed: u64) -> Result<Vec<BoundTrial>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(trials);
    while out.len() < trials {
        let shape = random_shape(&mut rng, &cin);
        let z = broadcast_field(&mut rng, shape);
        let noise = broadcast_field(&mut rng, shape);
        let sigma = 10f64.powf(rng.random_range(-3.0..=1.0));
        let z_hat = z.axpby(Complex::new(1.0, 0.0), &noise, Complex::new(sigma, 0.0))?;
        if !nonzero(&z) || !nonzero(&z_hat) {
            continue;
        }
        let (lhs, rhs) = aligned_bound_sides(&z, &z_hat)?;
        let sign = alignment_sign(&vectorize_complex(&z, 0)?, &vectorize_complex(&z_hat, 0)?);
        out.push(BoundTrial { lhs, rhs, sign });
    }
    Ok(out)
}

pub fn check_aligned_bound(trials: usize, cin: RangeInclusive<usize>, seed: u64) -> Result<CheckOutcome> {
    let mut out = CheckOutcome::new("aligned-channel bound", 1e-10);
    for t in aligned_bound_trials(trials, cin, seed)? {
        out.record((t.lhs - t.rhs).max(0.0));
    }
    Ok(out)
}

/// The same bound on independently drawn broadcast-structured pairs. Pairs
/// that point in opposite directions (`⟨v, v̂⟩ < 0`) can break the bound; this
/// sweep measures how often that happens.
pub fn check_aligned_bound_independent(trials: usize, cin: RangeInclusive<usize>, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = CheckOutcome::new("aligned bound (indep.)", 1e-10);
    while out.trials < trials {
        let shape = random_shape(&mut rng, &cin);
        let z = broadcast_field(&mut rng, shape);
        let z_hat = broadcast_field(&mut rng, shape);
        if !nonzero(&z) || !nonzero(&z_hat) {
            continue;
        }
        let (lhs, rhs) = aligned_bound_sides(&z, &z_hat)?;
        out.record((lhs - rhs).max(0.0));
    }
    Ok(out)
}

/// The four checks with their default sizes: 1000 trials each, vector
/// dimensions up to 64, 1 to 8 input channels.
pub fn run_all(seed: u64) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        check_fidelity_identity(1000, 1..=64, seed),
        check_extraction_stability(1000, 1..=8, seed.wrapping_add(1))?,
        check_nonnorm_identity(1000, seed.wrapping_add(2)),
        check_aligned_bound(1000, 1..=8, seed.wrapping_add(3))?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::build_interaction_field;
    use crate::tensor::Tensor4;

    #[test]
    fn identity_edge_cases() {
        let u = [0.3, -1.2, 2.0];
        assert!(fidelity_identity_violation(&u, &u) < 1e-15);
        assert!(fidelity_identity_violation(&[1.0, 0.0], &[0.0, 5.0]) < 1e-15);
        assert!((dist_sq(&[1.0, 0.0], &[0.0, 1.0], 1.0) - 2.0).abs() < 1e-15);

        let v = [1.0, 2.0, -2.0];
        let twice: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
        assert!((nonnorm_rhs(&v, &twice) - 9.0).abs() < 1e-12);
        assert!(nonnorm_identity_violation(&v, &twice) < 1e-14);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!(nonnorm_rhs(&v, &neg).abs() < 1e-12);
        assert!(dist_sq(&v, &neg, alignment_sign(&v, &neg)) < 1e-24);
    }

    #[test]
    fn stability_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = broadcast_field(&mut rng, Shape4::new(1, 3, 2, 2));
        assert_eq!(extraction_sides(&z, &z).unwrap(), (0.0, 0.0));
        let real_noise = CTensor4::from_real(&Tensor4::filled([1, 3, 2, 2], 0.5));
        let z_hat = z.axpby(Complex::new(1.0, 0.0), &real_noise, Complex::new(1.0, 0.0)).unwrap();
        let (lhs, rhs) = extraction_sides(&z, &z_hat).unwrap();
        assert!(lhs < 1e-15 && rhs > 0.0);
    }

    #[test]
    fn bound_corollary_with_matched_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let shape = random_shape(&mut rng, &(1..=8));
            let z = broadcast_field(&mut rng, shape);
            let noise = broadcast_field(&mut rng, shape);
            let raw = z.axpby(Complex::new(1.0, 0.0), &noise, Complex::new(0.05, 0.0)).unwrap();
            let v = vectorize_complex(&z, 0).unwrap();
            let scale = norm(&v) / norm(&vectorize_complex(&raw, 0).unwrap());
            let z_hat = raw.scale(Complex::new(scale, 0.0));
            let vh = vectorize_complex(&z_hat, 0).unwrap();
            let delta = 1.0 - fid(&v, &vh);
            let (lhs, bound) = aligned_bound_sides(&z, &z_hat).unwrap();
            let corollary = (2.0 * delta / shape.c as f64).sqrt() * norm(&v);
            assert!((bound - corollary).abs() <= 1e-9 * corollary.max(1e-12));
            assert!(lhs <= bound + 1e-10);
        }
    }

    /// Opposite-direction pairs break the aligned-channel bound: with the
    /// same real part and a negated output map, `F` is near 1 through the
    /// sign flip while the aligned maps differ by `2‖y‖`.
    #[test]
    fn sign_flip_counterexample() {
        let x = Tensor4::filled([1, 2, 2, 2], 0.01);
        let y = Tensor4::new([1, 1, 2, 2], vec![1.0, -0.5, 0.25, 2.0]).unwrap();
        let neg_y = y.map(|v| -v);
        let z = build_interaction_field(&x, &y, 0, 0).unwrap().z;
        let z_hat = build_interaction_field(&x, &neg_y, 0, 0).unwrap().z;
        let (lhs, rhs) = aligned_bound_sides(&z, &z_hat).unwrap();
        let y_norm = norm(y.data());
        assert!((lhs - 2.0 * y_norm).abs() < 1e-12);
        assert!(lhs > rhs + 1.0, "lhs {lhs} rhs {rhs}");
    }

    #[test]
    fn default_suite_is_deterministic() {
        let a = run_all(7).unwrap();
        assert_eq!(a.len(), 4);
        for outcome in &a[..3] {
            assert_eq!(outcome.trials, 1000);
            assert!(outcome.passed, "{outcome}");
        }
        assert_eq!(a, run_all(7).unwrap());
    }

    /// The bound can fail, but only for opposite-direction pairs; with
    /// `s = +1` it follows from extraction stability and the identity.
    #[test]
    fn aligned_bound_holds_for_aligned_pairs() {
        let trials = aligned_bound_trials(5000, 1..=8, 11).unwrap();
        for t in &trials {
            if t.sign > 0.0 {
                assert!(t.lhs <= t.rhs + 1e-10, "{t:?}");
            }
        }
        let flipped = trials.iter().filter(|t| t.sign < 0.0).count();
        assert!(flipped > 0, "the sweep should reach opposite-direction pairs");
    }

    #[test]
    fn outcome_bookkeeping() {
        let mut o = CheckOutcome::new("x", 1e-3);
        o.record(1e-4);
        assert!(o.passed);
        o.record(1.0);
        assert!(!o.passed);
        assert_eq!((o.trials, o.failures, o.max_violation), (2, 1, 1.0));
        o.record(f64::NAN);
        assert_eq!(o.failures, 2);
    }
}
