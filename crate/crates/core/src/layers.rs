//! Convolution, batch normalization, ReLU and fully connected layers.
//!
//! Layers own their parameters as plain [`Tensor`]s and register them on a
//! [`Tape`] by name each time they run, so the same layer can be evaluated
//! on a recording tape for training or an inference tape for prediction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BatchMoments, Tape, Tensor, Var};

/// Batch-norm behaviour: batch statistics (and running-stat updates) or
/// frozen running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// State that is saved but not optimized (running statistics).
    Buffer,
}

/// Named parameter traversal.
pub trait Module<T: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind));

    /// Redraws every parameter from `rng`.
    fn init(&mut self, rng: &mut ChaCha8Rng);

    fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t, kind| {
            if kind == ParamKind::Trainable {
                n += t.numel();
            }
        });
        n
    }
}

/// Seeds a fresh generator and initializes `layer` from it.
pub fn init_parameters<T: Scalar, M: Module<T>>(layer: &mut M, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    layer.init(&mut rng);
}

/// Bound of the uniform fan-in initialization, `sqrt(6 / fan_in)`.
pub fn init_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

fn uniform<T: Scalar>(t: &mut Tensor<T>, bound: f64, rng: &mut ChaCha8Rng) {
    for v in t.data_mut() {
        *v = T::of(rng.gen_range(-bound..bound));
    }
}

fn fill<T: Scalar>(t: &mut Tensor<T>, value: f64) {
    t.data_mut().iter_mut().for_each(|v| *v = T::of(value));
}

/// Valid, stride-1 2-D convolution (cross-correlation, no kernel flip).
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    name: String,
    weight_name: String,
    bias_name: String,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(name: &str, c_in: usize, c_out: usize, kernel: usize) -> Self {
        Self {
            name: name.to_string(),
            weight_name: format!("{name}.weight"),
            bias_name: format!("{name}.bias"),
            weight: Tensor::zeros([c_out, c_in, kernel, kernel]),
            bias: Tensor::zeros([c_out]),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels() * self.kernel() * self.kernel()
    }

    /// Output spatial extent for an `h x w` input, if the kernel fits.
    pub fn output_extent(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let k = self.kernel();
        (h >= k && w >= k).then(|| (h - k + 1, w - k + 1))
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() == 4 && self.output_extent(shape[2], shape[3]).is_none() {
            return Err(Error::InputTooSmall {
                layer: self.name.clone(),
                height: shape[2],
                width: shape[3],
                kernel: self.kernel(),
            });
        }
        let w = tape.param(&self.weight_name, &self.weight);
        let b = tape.param(&self.bias_name, &self.bias);
        tape.conv2d(x, w, b)
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        f(&self.weight_name, &self.weight, ParamKind::Trainable);
        f(&self.bias_name, &self.bias, ParamKind::Trainable);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        f(&self.weight_name, &mut self.weight, ParamKind::Trainable);
        f(&self.bias_name, &mut self.bias, ParamKind::Trainable);
    }

    fn init(&mut self, rng: &mut ChaCha8Rng) {
        let bound = init_bound(self.fan_in());
        uniform(&mut self.weight, bound, rng);
        fill(&mut self.bias, 0.0);
    }
}

/// Per-channel batch normalization with exponential running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    name: String,
    names: [String; 4],
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(name: &str, channels: usize) -> Self {
        Self::with_hyper(name, channels, Self::DEFAULT_EPS, Self::DEFAULT_MOMENTUM)
    }

    pub fn with_hyper(name: &str, channels: usize, eps: f64, momentum: f64) -> Self {
        Self {
            name: name.to_string(),
            names: ["gamma", "beta", "running_mean", "running_var"].map(|s| format!("{name}.{s}")),
            gamma: Tensor::ones([channels]),
            beta: Tensor::zeros([channels]),
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::ones([channels]),
            momentum,
            eps,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Train mode normalizes with batch statistics and returns them so the
    /// caller can commit them with [`BatchNorm::update_running`]; eval mode
    /// applies the running statistics.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<(Var, Option<BatchMoments<T>>)> {
        let g = tape.param(&self.names[0], &self.gamma);
        let b = tape.param(&self.names[1], &self.beta);
        match mode {
            Mode::Train => {
                let batch = tape.shape(x).first().copied().unwrap_or(0);
                if batch < 2 {
                    return Err(Error::BatchTooSmall { layer: self.name.clone(), batch });
                }
                tape.batch_norm(x, g, b, self.eps, None)
            }
            Mode::Eval => {
                tape.batch_norm(x, g, b, self.eps, Some((self.running_mean.data(), self.running_var.data())))
            }
        }
    }

    /// `running = (1 - momentum) * running + momentum * batch`, using the
    /// unbiased batch variance.
    pub fn update_running(&mut self, m: &BatchMoments<T>) {
        let mom = T::of(self.momentum);
        let keep = T::one() - mom;
        let n = m.count as f64;
        let unbias = T::of(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
        for (r, v) in self.running_mean.data_mut().iter_mut().zip(&m.mean) {
            *r = keep * *r + mom * *v;
        }
        for (r, v) in self.running_var.data_mut().iter_mut().zip(&m.var) {
            *r = keep * *r + mom * *v * unbias;
        }
    }
}

impl<T: Scalar> Module<T> for BatchNorm<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        f(&self.names[0], &self.gamma, ParamKind::Trainable);
        f(&self.names[1], &self.beta, ParamKind::Trainable);
        f(&self.names[2], &self.running_mean, ParamKind::Buffer);
        f(&self.names[3], &self.running_var, ParamKind::Buffer);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        f(&self.names[0], &mut self.gamma, ParamKind::Trainable);
        f(&self.names[1], &mut self.beta, ParamKind::Trainable);
        f(&self.names[2], &mut self.running_mean, ParamKind::Buffer);
        f(&self.names[3], &mut self.running_var, ParamKind::Buffer);
    }

    fn init(&mut self, _rng: &mut ChaCha8Rng) {
        fill(&mut self.gamma, 1.0);
        fill(&mut self.beta, 0.0);
        fill(&mut self.running_mean, 0.0);
        fill(&mut self.running_var, 1.0);
    }
}

/// Fully connected layer, `y = x W^T + b` with `W: [n_out, n_in]`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    weight_name: String,
    bias_name: String,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: &str, n_in: usize, n_out: usize) -> Self {
        Self {
            weight_name: format!("{name}.weight"),
            bias_name: format!("{name}.bias"),
            weight: Tensor::zeros([n_out, n_in]),
            bias: Tensor::zeros([n_out]),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight_name, &self.weight);
        let b = tape.param(&self.bias_name, &self.bias);
        tape.linear(x, w, b)
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        f(&self.weight_name, &self.weight, ParamKind::Trainable);
        f(&self.bias_name, &self.bias, ParamKind::Trainable);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        f(&self.weight_name, &mut self.weight, ParamKind::Trainable);
        f(&self.bias_name, &mut self.bias, ParamKind::Trainable);
    }

    fn init(&mut self, rng: &mut ChaCha8Rng) {
        let bound = init_bound(self.in_features());
        uniform(&mut self.weight, bound, rng);
        fill(&mut self.bias, 0.0);
    }
}

pub fn relu<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    tape.relu(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradient_check, Differentiable, GradCheckOptions};
    use proptest::prelude::*;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv1_shape_on_a_patch() {
        let mut conv = Conv2d::<f32>::new("conv1", 3, 32, 5);
        init_parameters(&mut conv, 1);
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::zeros([1, 3, 36, 36]));
        let y = conv.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(y), &[1, 32, 32, 32]);
    }

    #[test]
    fn unit_kernel_copies_input() {
        let mut conv = Conv2d::<f32>::new("id", 1, 1, 1);
        conv.weight.data_mut()[0] = 1.0;
        let x = Tensor::from_fn([1, 1, 4, 5], |i| i as f32 * 0.5 - 3.0);
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let y = conv.forward(&mut tape, xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn too_small_input_names_the_layer() {
        let conv = Conv2d::<f32>::new("rgb.conv9", 2, 2, 4);
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::zeros([1, 2, 3, 8]));
        let err = conv.forward(&mut tape, x).unwrap_err();
        assert!(err.to_string().contains("rgb.conv9"), "{err}");
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let mut a = Conv2d::<f32>::new("conv1", 3, 32, 5);
        let mut b = Conv2d::<f32>::new("conv1", 3, 32, 5);
        init_parameters(&mut a, 9);
        init_parameters(&mut b, 9);
        assert_eq!(a.weight, b.weight);
        assert_eq!(a.fan_in(), 75);
        let bound = (6.0f64 / 75.0).sqrt();
        assert!((init_bound(75) - bound).abs() < 1e-15);
        assert!(a.weight.data().iter().all(|v| (v.abs() as f64) <= bound));
        assert!(a.bias.data().iter().all(|v| *v == 0.0));
        init_parameters(&mut b, 10);
        assert_ne!(a.weight, b.weight);
    }

    #[test]
    fn batchnorm_train_standardizes_and_eval_is_identity() {
        let bn = BatchNorm::<f64>::new("bn", 2);
        let x = random(&[4, 2, 3, 3], 5);
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let (y, stats) = bn.forward(&mut tape, xv, Mode::Train).unwrap();
        assert!(stats.is_some());
        let y = tape.value(y).data().to_vec();
        for c in 0..2 {
            let vals: Vec<f64> = (0..4).flat_map(|b| y[(b * 2 + c) * 9..(b * 2 + c + 1) * 9].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-9 && (v - 1.0).abs() < 1e-3);
        }
        let (e, none) = bn.forward(&mut tape, xv, Mode::Eval).unwrap();
        assert!(none.is_none());
        let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (a, b) in tape.value(e).data().iter().zip(x.data()) {
            assert!((a - b * scale).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_rejects_single_sample_in_train_mode() {
        let bn = BatchNorm::<f32>::new("rgb.bn1", 2);
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::zeros([1, 2, 3, 3]));
        assert!(matches!(bn.forward(&mut tape, x, Mode::Train), Err(Error::BatchTooSmall { .. })));
        assert!(bn.forward(&mut tape, x, Mode::Eval).is_ok());
    }

    #[test]
    fn running_stats_follow_ema() {
        let mut bn = BatchNorm::<f64>::new("bn", 1);
        let m = BatchMoments { mean: vec![2.0], var: vec![3.0], count: 4 };
        bn.update_running(&m);
        assert!((bn.running_mean.data()[0] - 0.2).abs() < 1e-12);
        assert!((bn.running_var.data()[0] - (0.9 + 0.1 * 4.0)).abs() < 1e-12);
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::<f32>::inference();
        let x = tape.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = relu(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let n = tape.constant(Tensor::from_vec(vec![-3.0, -0.5]));
        let z = relu(&mut tape, n).unwrap();
        assert_eq!(tape.value(z).data(), &[0.0, 0.0]);
    }

    struct ConvKernelLoss {
        x: Tensor<f64>,
        weights: Tensor<f64>,
    }
    impl Differentiable for ConvKernelLoss {
        fn eval<S: Scalar>(&self, tape: &mut Tape<S>, kernel: Var) -> Result<Var> {
            let x = tape.constant(self.x.cast());
            let b = tape.constant(Tensor::zeros([1]));
            let y = tape.conv2d(x, kernel, b)?;
            let w = tape.constant(self.weights.cast());
            let p = tape.mul(y, w)?;
            tape.sum(p)
        }
    }

    #[test]
    fn conv_kernel_gradient_matches_finite_differences() {
        let f = ConvKernelLoss { x: random(&[1, 1, 6, 6], 1), weights: random(&[1, 1, 4, 4], 2) };
        let k: Tensor<f32> = random(&[1, 1, 3, 3], 3).cast();
        let r = gradient_check(&f, &k, &GradCheckOptions::default()).unwrap();
        assert!(r.passed(), "{}", r.max_rel_error());
    }

    struct BnLoss {
        weights: Tensor<f64>,
        gamma: Tensor<f64>,
        beta: Tensor<f64>,
    }
    impl Differentiable for BnLoss {
        fn eval<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
            let g = tape.constant(self.gamma.cast());
            let b = tape.constant(self.beta.cast());
            let (y, _) = tape.batch_norm(x, g, b, 1e-5, None)?;
            let w = tape.constant(self.weights.cast());
            let p = tape.mul(y, w)?;
            tape.sum(p)
        }
    }

    #[test]
    fn batchnorm_input_gradient_matches_finite_differences() {
        let f = BnLoss { weights: random(&[4, 2, 3, 3], 7), gamma: random(&[2], 8), beta: random(&[2], 9) };
        let x: Tensor<f32> = random(&[4, 2, 3, 3], 10).cast();
        let r = gradient_check(&f, &x, &GradCheckOptions::default()).unwrap();
        assert!(r.passed(), "{}", r.max_rel_error());
    }

    struct ReluLoss(Tensor<f64>);
    impl Differentiable for ReluLoss {
        fn eval<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
            let y = tape.relu(x)?;
            let w = tape.constant(self.0.cast());
            let p = tape.mul(y, w)?;
            tape.sum(p)
        }
    }

    #[test]
    fn relu_gradient_away_from_zero_is_exact() {
        let x = Tensor::<f32>::from_vec(vec![-1.5, -0.25, 0.5, 2.0]);
        let f = ReluLoss(Tensor::from_vec(vec![1.0, 2.0, -3.0, 0.5]));
        let r = gradient_check(&f, &x, &GradCheckOptions::new(1.0 / 1024.0, 1e-2)).unwrap();
        assert_eq!(r.max_rel_error(), 0.0);
    }

    proptest! {
        #[test]
        fn relu_is_idempotent(v in proptest::collection::vec(-10.0f32..10.0, 0..32)) {
            let mut tape = Tape::<f32>::inference();
            let x = tape.constant(Tensor::from_vec(v));
            let once = relu(&mut tape, x).unwrap();
            let twice = relu(&mut tape, once).unwrap();
            prop_assert_eq!(tape.value(once), tape.value(twice));
        }

        #[test]
        fn valid_conv_is_translation_equivariant(seed in any::<u64>(), dy in 0usize..3, dx in 0usize..3) {
            let mut conv = Conv2d::<f32>::new("c", 2, 3, 3);
            init_parameters(&mut conv, seed);
            let big: Tensor<f32> = random(&[1, 2, 10, 10], seed ^ 1).cast();
            // Two 7x7 windows of the same image, offset by (dy, dx).
            let crop = |oy: usize, ox: usize| Tensor::from_fn([1, 2, 7, 7], |i| {
                let (c, r) = (i / 49, i % 49);
                big.data()[c * 100 + (r / 7 + oy) * 10 + r % 7 + ox]
            });
            let mut tape = Tape::inference();
            let a = tape.constant(crop(0, 0));
            let b = tape.constant(crop(dy, dx));
            let ya = conv.forward(&mut tape, a).unwrap();
            let yb = conv.forward(&mut tape, b).unwrap();
            let (ya, yb) = (tape.value(ya), tape.value(yb));
            for c in 0..3 {
                for y in 0..5 - dy {
                    for x in 0..5 - dx {
                        prop_assert_eq!(ya.data()[c * 25 + (y + dy) * 5 + x + dx], yb.data()[c * 25 + y * 5 + x]);
                    }
                }
            }
        }
    }
}
