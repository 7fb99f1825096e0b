//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a row-major buffer plus a shape. Differentiable
//! computation happens on a [`Tape`]: every op appends a node holding the
//! result and a backward rule, and [`Tape::backward`] walks the nodes in
//! reverse to populate gradients. Tapes are rebuilt per forward pass; there
//! is no graph caching.

mod check;
mod tape;

pub use check::grad_check;
pub use tape::{Tape, TensorId};

use crate::error::TensorError;
use rand::Rng;
use rand_distr::StandardNormal;

/// Dense multi-dimensional f64 array in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Standard-normal entries drawn from `rng`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.sample(StandardNormal)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Uniform entries on `(-bound, bound)`.
    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Row-major strides of `shape`.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides
}

/// Broadcast two shapes under the standard trailing-dimension rules.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() {
            1
        } else {
            a[i - (ndim - a.len())]
        };
        let db = if i < ndim - b.len() {
            1
        } else {
            b[i - (ndim - b.len())]
        };
        if da != db && da != 1 && db != 1 {
            return None;
        }
        // a 1-extent stretches to the partner, including zero extents
        out[i] = if da == 1 { db } else { da };
    }
    Some(out)
}

/// Maps flat indices of a broadcast result back to flat indices of a source
/// shape; broadcast dimensions get stride 0.
pub(crate) struct BroadcastMap {
    out_shape: Vec<usize>,
    src_strides: Vec<usize>,
    identity: bool,
}

impl BroadcastMap {
    pub(crate) fn new(src_shape: &[usize], out_shape: &[usize]) -> Self {
        let ndim = out_shape.len();
        let offset = ndim - src_shape.len();
        let src_nat = strides_of(src_shape);
        let mut src_strides = vec![0usize; ndim];
        for i in 0..src_shape.len() {
            src_strides[offset + i] = if src_shape[i] == 1 { 0 } else { src_nat[i] };
        }
        let identity = src_shape == out_shape;
        BroadcastMap {
            out_shape: out_shape.to_vec(),
            src_strides,
            identity,
        }
    }

    #[inline]
    pub(crate) fn src_index(&self, mut flat: usize) -> usize {
        if self.identity {
            return flat;
        }
        let mut idx = 0usize;
        for d in (0..self.out_shape.len()).rev() {
            let extent = self.out_shape[d];
            let coord = flat % extent;
            flat /= extent;
            idx += coord * self.src_strides[d];
        }
        idx
    }
}

/// Accumulates `grad` (laid out as `from_shape`) into a buffer of
/// `to_shape`, summing over broadcast dimensions.
pub(crate) fn reduce_to_shape(grad: &[f64], from_shape: &[usize], to_shape: &[usize]) -> Vec<f64> {
    let numel: usize = to_shape.iter().product();
    if from_shape == to_shape {
        return grad.to_vec();
    }
    let map = BroadcastMap::new(to_shape, from_shape);
    let mut out = vec![0.0; numel];
    for (flat, g) in grad.iter().enumerate() {
        out[map.src_index(flat)] += g;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_length() {
        let err = Tensor::from_vec(vec![2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::DataLength { .. }));
        let t = Tensor::from_vec(vec![2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[2, 3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1], &[1, 3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[5, 2, 3], &[3]), Some(vec![5, 2, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[2, 4]), None);
    }

    #[test]
    fn reduce_sums_broadcast_dims() {
        // grad over [2, 3] reduced to [1, 3] sums rows
        let grad = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let out = reduce_to_shape(&grad, &[2, 3], &[1, 3]);
        assert_eq!(out, vec![5.0, 7.0, 9.0]);
        let out = reduce_to_shape(&grad, &[2, 3], &[3]);
        assert_eq!(out, vec![5.0, 7.0, 9.0]);
    }
}
