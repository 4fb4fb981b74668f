//! Central finite-difference verification of tape gradients.
//!
//! The analytic gradient is taken from a tape in the caller's scalar type.
//! The numeric side re-evaluates the same function in `f64`, which keeps
//! the oracle's truncation and rounding error well below 32-bit noise.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A scalar-valued function that can be evaluated at any precision.
pub trait Differentiable {
    fn eval<S: Scalar>(&self, tape: &mut Tape<S>, input: Var) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference half step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so entries whose true
    /// gradient is ~0 are judged on absolute error.
    pub floor: f64,
    /// Restrict the check to these flat indices (all when `None`).
    pub indices: Option<Vec<usize>>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-4, tolerance: 1e-2, floor: 1e-3, indices: None }
    }
}

impl GradCheckOptions {
    pub fn new(step: f64, tolerance: f64) -> Self {
        Self { step, tolerance, ..Self::default() }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub indices: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_errors: Vec<f64>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }

    /// Flat indices whose relative error exceeds the tolerance.
    pub fn failures(&self) -> Vec<usize> {
        self.indices
            .iter()
            .zip(&self.rel_errors)
            .filter(|(_, e)| !(**e <= self.tolerance))
            .map(|(i, _)| *i)
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

fn eval_f64<F: Differentiable>(f: &F, x: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::<f64>::inference();
    let input = tape.constant(x.clone());
    let out = f.eval(&mut tape, input)?;
    tape.value(out).item()
}

/// Compares the tape gradient of `f` at `x` with central differences
/// `(f(x + h) - f(x - h)) / 2h`.
pub fn gradient_check<T: Scalar, F: Differentiable>(
    f: &F,
    x: &Tensor<T>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if !(opts.step > 0.0) {
        return Err(Error::InvalidStep(opts.step));
    }

    let mut tape = Tape::<T>::new();
    let input = tape.leaf(x.clone(), true);
    let out = f.eval(&mut tape, input)?;
    tape.backward(out)?;
    let zeros = vec![T::zero(); x.numel()];
    let analytic_all: Vec<f64> = tape.grad(input).unwrap_or(&zeros).iter().map(|v| v.as_f64()).collect();

    let mut probe = x.cast::<f64>();
    let first = eval_f64(f, &probe)?;
    let second = eval_f64(f, &probe)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let indices: Vec<usize> = match &opts.indices {
        Some(ix) => ix.clone(),
        None => (0..x.numel()).collect(),
    };
    let mut report = GradCheckReport {
        indices: Vec::with_capacity(indices.len()),
        analytic: Vec::with_capacity(indices.len()),
        numeric: Vec::with_capacity(indices.len()),
        rel_errors: Vec::with_capacity(indices.len()),
        tolerance: opts.tolerance,
    };
    for i in indices {
        if i >= x.numel() {
            return Err(Error::InvalidShape { op: "gradient_check", msg: format!("index {} out of range", i) });
        }
        let base = probe.data()[i];
        probe.data_mut()[i] = base + opts.step;
        let plus = eval_f64(f, &probe)?;
        probe.data_mut()[i] = base - opts.step;
        let minus = eval_f64(f, &probe)?;
        probe.data_mut()[i] = base;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let analytic = analytic_all[i];
        let denom = analytic.abs().max(numeric.abs()).max(opts.floor);
        report.indices.push(i);
        report.analytic.push(analytic);
        report.numeric.push(numeric);
        report.rel_errors.push((analytic - numeric).abs() / denom);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::OpKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct SumAll;
    impl Differentiable for SumAll {
        fn eval<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
            tape.sum(x)
        }
    }

    /// `sum(c * softmax(x B))` over rows.
    struct SoftmaxMatmul {
        b: Tensor<f64>,
        c: Tensor<f64>,
        fault: Option<OpKind>,
    }
    impl Differentiable for SoftmaxMatmul {
        fn eval<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
            if let Some(k) = self.fault {
                tape.inject_fault(k);
            }
            let b = tape.constant(self.b.cast());
            let c = tape.constant(self.c.cast());
            let z = tape.matmul(x, b)?;
            let y = tape.softmax(z, 1)?;
            let w = tape.mul(y, c)?;
            tape.sum(w)
        }
    }

    struct Flaky(std::cell::Cell<u32>);
    impl Differentiable for Flaky {
        fn eval<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
            self.0.set(self.0.get() + 1);
            let s = tape.sum(x)?;
            tape.scale(s, S::of(self.0.get() as f64))
        }
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn sum_is_exact() {
        let x = Tensor::<f32>::from_vec(vec![0.5, -1.25, 3.0, 0.0]);
        let report = gradient_check(&SumAll, &x, &GradCheckOptions::new(1.0 / 1024.0, 1e-2)).unwrap();
        assert_eq!(report.max_rel_error(), 0.0);
    }

    #[test]
    fn softmax_of_matmul_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = SoftmaxMatmul { b: random(&[4, 5], &mut rng), c: random(&[3, 5], &mut rng), fault: None };
        let x: Tensor<f32> = random(&[3, 4], &mut rng).cast();
        let report = gradient_check(&f, &x, &GradCheckOptions::default()).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_error());
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = SoftmaxMatmul { b: random(&[4, 5], &mut rng), c: random(&[3, 5], &mut rng), fault: Some(OpKind::Softmax) };
        let x: Tensor<f32> = random(&[3, 4], &mut rng).cast();
        let report = gradient_check(&f, &x, &GradCheckOptions::default()).unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        let x = Tensor::<f32>::from_vec(vec![1.0, 2.0]);
        let err = gradient_check(&Flaky(Default::default()), &x, &GradCheckOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    #[test]
    fn step_must_be_positive() {
        let x = Tensor::<f32>::from_vec(vec![1.0]);
        assert!(gradient_check(&SumAll, &x, &GradCheckOptions::new(0.0, 1e-2)).is_err());
    }
}
