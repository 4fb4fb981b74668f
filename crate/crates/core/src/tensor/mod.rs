//! Dense row-major tensors and the reverse-mode tape that differentiates them.

mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use gradcheck::{gradient_check, Differentiable, GradCheckOptions, GradCheckReport};
pub use tape::{BatchMoments, OpKind, Tape, Var};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Contiguous row-major array with an optional gradient buffer.
///
/// The gradient buffer is only ever written by
/// [`Tensor::accumulate_grad`], which model code calls after a backward pass
/// for the tensors it registered on a tape as parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if numel_of(&shape) != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                msg: format!("shape {:?} holds {} elements, data has {}", shape, numel_of(&shape), data.len()),
            });
        }
        Ok(Self { shape, data, grad: None })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = numel_of(&shape);
        Self { shape, data: vec![value; n], grad: None }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: Vec::new(), data: vec![value], grad: None }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self { shape: vec![data.len()], data, grad: None }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let data = (0..numel_of(&shape)).map(&mut f).collect();
        Self { shape, data, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::NotScalar(self.shape.clone())),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel_of(&shape) != self.data.len() {
            return Err(Error::InvalidShape {
                op: "reshape",
                msg: format!("cannot view {:?} as {:?}", self.shape, shape),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Resets the gradient buffer to zeros (allocating it if absent).
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = T::zero()),
            None => self.grad = Some(vec![T::zero(); self.data.len()]),
        }
    }

    /// Drops the gradient buffer entirely.
    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// `grad += delta`.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::LengthMismatch { left: self.data.len(), right: delta.len() });
        }
        let g = self.grad.get_or_insert_with(|| vec![T::zero(); delta.len()]);
        for (a, b) in g.iter_mut().zip(delta) {
            *a += *b;
        }
        Ok(())
    }

    /// Element-wise conversion to another scalar type; the gradient is not carried over.
    pub fn cast<S: Scalar>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| S::of(v.as_f64())).collect(),
            grad: None,
        }
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(a: &Self, b: &Self, axis: usize) -> Result<Self> {
        let (shape, data) = kernels::concat(a.shape(), a.data(), b.shape(), b.data(), axis)?;
        Ok(Self { shape, data, grad: None })
    }

    /// Splits along `axis` into `[0, at)` and `[at, extent)`.
    pub fn split(&self, axis: usize, at: usize) -> Result<(Self, Self)> {
        let extent = *self.shape.get(axis).ok_or_else(|| Error::InvalidShape {
            op: "split",
            msg: format!("axis {} out of range for {:?}", axis, self.shape),
        })?;
        if at > extent {
            return Err(Error::InvalidShape { op: "split", msg: format!("split point {} exceeds extent {}", at, extent) });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut left = Vec::with_capacity(outer * at * inner);
        let mut right = Vec::with_capacity(outer * (extent - at) * inner);
        for o in 0..outer {
            let row = &self.data[o * extent * inner..(o + 1) * extent * inner];
            left.extend_from_slice(&row[..at * inner]);
            right.extend_from_slice(&row[at * inner..]);
        }
        let mut ls = self.shape.clone();
        ls[axis] = at;
        let mut rs = self.shape.clone();
        rs[axis] = extent - at;
        Ok((Self { shape: ls, data: left, grad: None }, Self { shape: rs, data: right, grad: None }))
    }

    /// Rows `[start, start + len)` of the leading axis.
    pub fn narrow_batch(&self, start: usize, len: usize) -> Result<Self> {
        let b = *self.shape.first().unwrap_or(&0);
        if start + len > b {
            return Err(Error::InvalidShape { op: "narrow", msg: format!("rows {}..{} of {}", start, start + len, b) });
        }
        let row = if b == 0 { 0 } else { self.data.len() / b };
        let mut shape = self.shape.clone();
        shape[0] = len;
        Ok(Self { shape, data: self.data[start * row..(start + len) * row].to_vec(), grad: None })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items.first().ok_or(Error::EmptyBatch)?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::ShapeMismatch { op: "stack", left: first.shape.clone(), right: t.shape.clone() });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data, grad: None })
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch { op: "compare", left: self.shape.clone(), right: other.shape.clone() });
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).fold(0.0, f64::max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::<f32>::scalar(2.0).numel(), 1);
    }

    #[test]
    fn concat_with_empty_is_neutral() {
        let x = Tensor::<f32>::from_vec(vec![1.0, 2.0, 3.0]);
        let e = Tensor::<f32>::from_vec(vec![]);
        assert_eq!(Tensor::concat(&x, &e, 0).unwrap(), x);
        assert_eq!(Tensor::concat(&e, &x, 0).unwrap(), x);
    }

    #[test]
    fn concat_rejects_mismatched_extents() {
        let a = Tensor::<f32>::zeros([2, 3]);
        let b = Tensor::<f32>::zeros([3, 3]);
        assert!(Tensor::concat(&a, &b, 1).is_err());
        assert_eq!(Tensor::concat(&a, &b, 0).unwrap().shape(), &[5, 3]);
    }

    #[test]
    fn accumulate_grad_adds() {
        let mut t = Tensor::<f32>::zeros([2]);
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
        assert!(t.accumulate_grad(&[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn concat_then_split_is_identity(
            outer in 1usize..4, a_ext in 0usize..4, b_ext in 0usize..4, inner in 1usize..4, axis_pick in 0usize..3,
            seed in any::<u64>(),
        ) {
            let axis = axis_pick;
            let mut sa = vec![outer, 2, inner];
            let mut sb = sa.clone();
            sa[axis] = a_ext;
            sb[axis] = b_ext;
            let mut state = seed;
            let mut next = || { state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (state >> 40) as f32 };
            let a = Tensor::from_fn(sa.clone(), |_| next());
            let b = Tensor::from_fn(sb.clone(), |_| next());
            let c = Tensor::concat(&a, &b, axis).unwrap();
            let (l, r) = c.split(axis, a_ext).unwrap();
            prop_assert_eq!(l, a);
            prop_assert_eq!(r, b);
        }
    }
}
