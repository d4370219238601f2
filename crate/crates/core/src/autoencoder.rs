//! Capacity-limited row-wise spectral autoencoder.
//!
//! Each row `u ∈ R^N` (one `H·W` spectral plane) is mapped through
//! `h(u) = tanh(W2 · relu(W1 · u))` with a `⌊N/4⌋` bottleneck and no biases.
//! Training follows the layer-local recipe: one output channel at a time,
//! micro-batches through FFT + standardization, gradients accumulated for
//! `accum_steps` micro-batches before each optimizer update.

use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::field::build_interaction_field;
use crate::scalar::Scalar;
use crate::spectral::{fft2, standardize_spectrum, DEFAULT_EPSILON};
use crate::tensor::{CTensor4, Matrix, Shape4, Tensor4};

/// Which spectral component a parameter set reconstructs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Real,
    Imaginary,
    /// One set used for both components.
    Shared,
}

impl Branch {
    pub fn tag(self) -> u8 {
        match self {
            Branch::Real => 0,
            Branch::Imaginary => 1,
            Branch::Shared => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Branch::Real),
            1 => Some(Branch::Imaginary),
            2 => Some(Branch::Shared),
            _ => None,
        }
    }
}

/// `⌊N/4⌋`, at least 1.
pub fn bottleneck_width(n: usize) -> usize {
    (n / 4).max(1)
}

/// Weights of one row-wise MLP branch: `w1` is `bottleneck × n`, `w2` is `n × bottleneck`.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderParams<T> {
    pub n: usize,
    pub bottleneck: usize,
    pub w1: Matrix<T>,
    pub w2: Matrix<T>,
    pub branch: Branch,
}

/// Gradients with the same layout as [`AutoencoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderGrads<T> {
    pub w1: Matrix<T>,
    pub w2: Matrix<T>,
}

impl<T: Scalar> AutoencoderGrads<T> {
    pub fn zeros(n: usize, bottleneck: usize) -> Self {
        Self { w1: Matrix::zeros(bottleneck, n), w2: Matrix::zeros(n, bottleneck) }
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, &b) in self.w1.data_mut().iter_mut().zip(other.w1.data()) {
            *a += b;
        }
        for (a, &b) in self.w2.data_mut().iter_mut().zip(other.w2.data()) {
            *a += b;
        }
    }

    fn scale(&mut self, k: T) {
        self.w1.data_mut().iter_mut().chain(self.w2.data_mut()).for_each(|g| *g *= k);
    }
}

impl<T: Scalar> AutoencoderParams<T> {
    /// Uniform `±1/√fan_in` initialization per matrix.
    pub fn init(n: usize, branch: Branch, rng: &mut impl rand::Rng) -> Result<Self> {
        if n == 0 {
            return Err(invalid!("autoencoder row width must be positive"));
        }
        let bottleneck = bottleneck_width(n);
        let draw = |fan_in: usize, len: usize, rng: &mut dyn rand::RngCore| -> Vec<T> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bounds");
            (0..len).map(|_| T::lit(dist.sample(rng))).collect()
        };
        let w1 = Matrix::new(bottleneck, n, draw(n, bottleneck * n, rng))?;
        let w2 = Matrix::new(n, bottleneck, draw(bottleneck, n * bottleneck, rng))?;
        Ok(Self { n, bottleneck, w1, w2, branch })
    }

    pub fn zeros(n: usize, branch: Branch) -> Self {
        let bottleneck = bottleneck_width(n);
        Self { n, bottleneck, w1: Matrix::zeros(bottleneck, n), w2: Matrix::zeros(n, bottleneck), branch }
    }

    /// `2·N·⌊N/4⌋`; does not depend on the number of input channels.
    pub fn param_count(&self) -> usize {
        self.w1.data().len() + self.w2.data().len()
    }

    fn check_width(&self, rows: &Matrix<T>) -> Result<()> {
        if rows.cols() != self.n {
            return Err(invalid!("row width {} does not match autoencoder width {}", rows.cols(), self.n));
        }
        Ok(())
    }

    /// Applies `h` to every row.
    pub fn forward(&self, rows: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_width(rows)?;
        let mut out = Matrix::zeros(rows.rows(), self.n);
        let mut hidden = vec![T::zero(); self.bottleneck];
        for r in 0..rows.rows() {
            self.hidden(rows.row(r), &mut hidden);
            for v in hidden.iter_mut() {
                *v = v.max(T::zero());
            }
            self.decode(&hidden, out.row_mut(r));
        }
        Ok(out)
    }

    /// Pre-activation `W1·u`.
    fn hidden(&self, u: &[T], out: &mut [T]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = dot(self.w1.row(j), u);
        }
    }

    /// `tanh(W2·h)`.
    fn decode(&self, h: &[T], out: &mut [T]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(self.w2.row(i), h).tanh();
        }
    }

    /// Reverse-mode gradients of a scalar loss with respect to `w1` and `w2`,
    /// given `grad_out = ∂L/∂h(rows)`. The ReLU derivative at 0 is 0.
    pub fn backward(&self, rows: &Matrix<T>, grad_out: &Matrix<T>) -> Result<AutoencoderGrads<T>> {
        self.check_width(rows)?;
        if grad_out.rows() != rows.rows() || grad_out.cols() != self.n {
            return Err(invalid!(
                "upstream gradient is {}x{}, expected {}x{}",
                grad_out.rows(),
                grad_out.cols(),
                rows.rows(),
                self.n
            ));
        }
        let mut grads = AutoencoderGrads::zeros(self.n, self.bottleneck);
        let mut pre = vec![T::zero(); self.bottleneck];
        let mut act = vec![T::zero(); self.bottleneck];
        let mut d_out = vec![T::zero(); self.n];
        let mut d_hidden = vec![T::zero(); self.bottleneck];
        for r in 0..rows.rows() {
            let u = rows.row(r);
            self.hidden(u, &mut pre);
            for (a, &p) in act.iter_mut().zip(&pre) {
                *a = p.max(T::zero());
            }
            let g = grad_out.row(r);
            for i in 0..self.n {
                let y = dot(self.w2.row(i), &act).tanh();
                d_out[i] = g[i] * (T::one() - y * y);
            }
            d_hidden.iter_mut().for_each(|v| *v = T::zero());
            for i in 0..self.n {
                let di = d_out[i];
                if di == T::zero() {
                    continue;
                }
                let w2_row = self.w2.row(i);
                let gw2_row = grads.w2.row_mut(i);
                for j in 0..self.bottleneck {
                    gw2_row[j] += di * act[j];
                    d_hidden[j] += w2_row[j] * di;
                }
            }
            for j in 0..self.bottleneck {
                if pre[j] <= T::zero() {
                    continue;
                }
                let dj = d_hidden[j];
                for (gw, &x) in grads.w1.row_mut(j).iter_mut().zip(u) {
                    *gw += dj * x;
                }
            }
        }
        Ok(grads)
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.w1.data_mut().iter_mut().chain(self.w2.data_mut().iter_mut())
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Mean of the real-branch and imaginary-branch mean squared errors.
pub fn ae_loss<T: Scalar>(pred_r: &Matrix<T>, target_r: &Matrix<T>, pred_i: &Matrix<T>, target_i: &Matrix<T>) -> Result<T> {
    let half = T::lit(0.5);
    Ok(half * (mse(pred_r, target_r)? + mse(pred_i, target_i)?))
}

/// Mean squared error over all entries.
pub fn mse<T: Scalar>(pred: &Matrix<T>, target: &Matrix<T>) -> Result<T> {
    same_shape(pred, target)?;
    if pred.data().is_empty() {
        return Err(invalid!("mean squared error of empty matrices"));
    }
    let sum = pred.data().iter().zip(target.data()).map(|(&p, &t)| (p - t) * (p - t)).sum::<T>();
    Ok(sum / T::from_usize_lossy(pred.data().len()))
}

/// `∂ ae_loss / ∂ pred` for one branch: `(pred − target) / count`.
pub fn branch_loss_grad<T: Scalar>(pred: &Matrix<T>, target: &Matrix<T>) -> Result<Matrix<T>> {
    same_shape(pred, target)?;
    let inv = T::one() / T::from_usize_lossy(pred.data().len().max(1));
    let data = pred.data().iter().zip(target.data()).map(|(&p, &t)| (p - t) * inv).collect();
    Matrix::new(pred.rows(), pred.cols(), data)
}

fn same_shape<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(invalid!("shape mismatch {}x{} vs {}x{}", a.rows(), a.cols(), b.rows(), b.cols()));
    }
    Ok(())
}

/// Reshapes a `(B, C, H, W)` spectrum into `(B·C) × (H·W)` real and imaginary row matrices.
pub fn spectrum_rows<T: Scalar>(f: &CTensor4<T>) -> (Matrix<T>, Matrix<T>) {
    let s = f.shape();
    let rows = s.b * s.c;
    let re = f.data().iter().map(|z| z.re).collect();
    let im = f.data().iter().map(|z| z.im).collect();
    (
        Matrix::new(rows, s.plane(), re).expect("consistent reshape"),
        Matrix::new(rows, s.plane(), im).expect("consistent reshape"),
    )
}

/// Inverse of [`spectrum_rows`].
pub fn rows_to_spectrum<T: Scalar>(re: &Matrix<T>, im: &Matrix<T>, shape: Shape4) -> Result<CTensor4<T>> {
    same_shape(re, im)?;
    if re.rows() != shape.b * shape.c || re.cols() != shape.plane() {
        return Err(invalid!("{}x{} rows do not reshape to {shape}", re.rows(), re.cols()));
    }
    let data = re
        .data()
        .iter()
        .zip(im.data())
        .map(|(&r, &i)| num_complex::Complex::new(r, i))
        .collect();
    CTensor4::new(shape, data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    /// Adam with decoupled weight decay.
    Adam { beta1: f64, beta2: f64, eps: f64 },
    /// Plain gradient descent with decoupled weight decay.
    Sgd,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Samples per micro-batch.
    pub batch_size: usize,
    /// Micro-batches accumulated per optimizer update.
    pub accum_steps: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Train one parameter set for both spectral components.
    pub share_branches: bool,
    /// Standardization guard.
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            batch_size: 128,
            accum_steps: 4,
            seed: 0,
            optimizer: OptimizerKind::default(),
            share_branches: false,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.accum_steps == 0 {
            return Err(invalid!("batch_size and accum_steps must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(invalid!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) || !(self.epsilon > 0.0) {
            return Err(invalid!("weight decay must be non-negative and epsilon positive"));
        }
        Ok(())
    }
}

/// One parameter set plus its optimizer state and pending accumulated gradient.
#[derive(Debug, Clone)]
pub struct BranchTrainer<T> {
    pub params: AutoencoderParams<T>,
    accum: AutoencoderGrads<T>,
    pending: usize,
    first_moment: Vec<T>,
    second_moment: Vec<T>,
    step: i32,
    optimizer: OptimizerKind,
    learning_rate: T,
    weight_decay: T,
}

impl<T: Scalar> BranchTrainer<T> {
    pub fn new(params: AutoencoderParams<T>, cfg: &TrainConfig) -> Self {
        let count = params.param_count();
        Self {
            accum: AutoencoderGrads::zeros(params.n, params.bottleneck),
            params,
            pending: 0,
            first_moment: vec![T::zero(); count],
            second_moment: vec![T::zero(); count],
            step: 0,
            optimizer: cfg.optimizer,
            learning_rate: T::lit(cfg.learning_rate),
            weight_decay: T::lit(cfg.weight_decay),
        }
    }

    /// Adds one micro-batch gradient to the accumulator.
    pub fn accumulate(&mut self, grads: &AutoencoderGrads<T>) {
        self.accum.add_assign(grads);
        self.pending += 1;
    }

    pub fn pending(&self) -> usize {
        self.pending
    }

    /// Applies the average of the accumulated gradients and clears the
    /// accumulator. No-op when nothing is pending.
    pub fn apply(&mut self) {
        if self.pending == 0 {
            return;
        }
        let mut g = std::mem::replace(&mut self.accum, AutoencoderGrads::zeros(self.params.n, self.params.bottleneck));
        g.scale(T::one() / T::from_usize_lossy(self.pending));
        self.pending = 0;
        self.step += 1;
        let (lr, wd) = (self.learning_rate, self.weight_decay);
        let grads = g.w1.data().iter().chain(g.w2.data());
        match self.optimizer {
            OptimizerKind::Sgd => {
                for (p, &gi) in self.params.params_mut().zip(grads) {
                    *p = *p - lr * (gi + wd * *p);
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
                let c1 = T::one() - b1.powi(self.step);
                let c2 = T::one() - b2.powi(self.step);
                let moments = self.first_moment.iter_mut().zip(self.second_moment.iter_mut());
                for ((p, &gi), (m, v)) in self.params.params_mut().zip(grads).zip(moments) {
                    *m = b1 * *m + (T::one() - b1) * gi;
                    *v = b2 * *v + (T::one() - b2) * gi * gi;
                    let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                    *p = *p - lr * (update + wd * *p);
                }
            }
        }
    }
}

/// Trained branch parameters for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAutoencoder<T> {
    pub layer_id: usize,
    pub real: AutoencoderParams<T>,
    pub imag: AutoencoderParams<T>,
    /// Mean micro-batch loss per epoch.
    pub loss_history: Vec<T>,
}

/// Builds the standardized spectral rows of one micro-batch field.
pub fn field_rows<T: Scalar>(x: &Tensor4<T>, y_k: &Tensor4<T>, layer_id: usize, k: usize, epsilon: T) -> Result<(Matrix<T>, Matrix<T>)> {
    let field = build_interaction_field(x, y_k, layer_id, k)?;
    let spectrum = fft2(&field.z);
    let (standardized, _) = standardize_spectrum(&spectrum, epsilon)?;
    Ok(spectrum_rows(&standardized))
}

/// Trains the real and imaginary reconstructors of one conv layer from its
/// cached `(X, Y)` activations.
pub fn train_layer_autoencoder<T: Scalar>(
    x: &Tensor4<T>,
    y: &Tensor4<T>,
    layer_id: usize,
    cfg: &TrainConfig,
) -> Result<LayerAutoencoder<T>> {
    cfg.validate()?;
    let (xs, ys) = (x.shape(), y.shape());
    if xs.b == 0 || ys.c == 0 {
        return Err(invalid!("activation pool for layer {layer_id} is empty"));
    }
    if xs.b != ys.b {
        return Err(invalid!("layer {layer_id}: input pool has {} samples, output pool has {}", xs.b, ys.b));
    }
    let n = xs.plane();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (layer_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let eps = T::lit(cfg.epsilon);

    let (mut real, mut imag) = if cfg.share_branches {
        let shared = BranchTrainer::new(AutoencoderParams::init(n, Branch::Shared, &mut rng)?, cfg);
        (shared, None)
    } else {
        let r = BranchTrainer::new(AutoencoderParams::init(n, Branch::Real, &mut rng)?, cfg);
        let i = BranchTrainer::new(AutoencoderParams::init(n, Branch::Imaginary, &mut rng)?, cfg);
        (r, Some(i))
    };

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..xs.b).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = T::zero();
        let mut batches = 0usize;
        for k in 0..ys.c {
            let y_k = y.channel(k)?;
            for chunk in order.chunks(cfg.batch_size) {
                let xb = x.gather_batch(chunk)?;
                let yb = y_k.gather_batch(chunk)?;
                let (rows_r, rows_i) = field_rows(&xb, &yb, layer_id, k, eps)?;

                let imag_params = imag.as_ref().map_or(&real.params, |t| &t.params);
                let pred_r = real.params.forward(&rows_r)?;
                let pred_i = imag_params.forward(&rows_i)?;
                loss_sum += ae_loss(&pred_r, &rows_r, &pred_i, &rows_i)?;
                batches += 1;

                let gr = real.params.backward(&rows_r, &branch_loss_grad(&pred_r, &rows_r)?)?;
                let gi = imag_params.backward(&rows_i, &branch_loss_grad(&pred_i, &rows_i)?)?;
                match imag.as_mut() {
                    Some(it) => {
                        real.accumulate(&gr);
                        it.accumulate(&gi);
                    }
                    None => {
                        let mut g = gr;
                        g.add_assign(&gi);
                        real.accumulate(&g);
                    }
                }
                if real.pending() == cfg.accum_steps {
                    real.apply();
                    if let Some(it) = imag.as_mut() {
                        it.apply();
                    }
                }
            }
        }
        real.apply();
        if let Some(it) = imag.as_mut() {
            it.apply();
        }
        history.push(loss_sum / T::from_usize_lossy(batches.max(1)));
    }

    let real_params = real.params;
    let imag_params = match imag {
        Some(t) => t.params,
        None => real_params.clone(),
    };
    Ok(LayerAutoencoder { layer_id, real: real_params, imag: imag_params, loss_history: history })
}
