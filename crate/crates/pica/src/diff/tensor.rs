//! Dense row-major tensor: a flat buffer plus a shape.

use crate::Real;

/// Dense tensor. `data.len()` always equals the product of `shape`.
/// Layout is row-major: the last axis is contiguous. Conventions used by the
/// rest of the crate: convolution activations are `[C, H, W]`, spatial maps
/// handed to sampling ops are `[H, W, C]`, batched vectors are `[N, C]`, and
/// scalars are `[1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub data: Vec<Real>,
    pub shape: Vec<usize>,
}

impl Tensor {
    pub fn new(data: Vec<Real>, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(data.len(), n, "tensor data length {} != shape {:?}", data.len(), shape);
        Tensor { data, shape: shape.to_vec() }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { data: vec![0.0; shape.iter().product()], shape: shape.to_vec() }
    }

    pub fn full(shape: &[usize], v: Real) -> Self {
        Tensor { data: vec![v; shape.iter().product()], shape: shape.to_vec() }
    }

    pub fn scalar(v: Real) -> Self {
        Tensor { data: vec![v], shape: vec![1] }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> Real) -> Self {
        let n: usize = shape.iter().product();
        Tensor { data: (0..n).map(f).collect(), shape: shape.to_vec() }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> Real {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(self.numel(), n, "reshape {:?} -> {:?}", self.shape, shape);
        self.shape = shape.to_vec();
        self
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Real> {
        self.data.iter()
    }

    /// Index into a `[H, W, C]` tensor.
    pub fn at3(&self, i: usize, j: usize, k: usize) -> Real {
        debug_assert_eq!(self.rank(), 3);
        let (d1, d2) = (self.shape[1], self.shape[2]);
        self.data[(i * d1 + j) * d2 + k]
    }

    /// Index into a `[N, C]` tensor.
    pub fn at2(&self, i: usize, j: usize) -> Real {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Max |element|.
    pub fn max_abs(&self) -> Real {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Euclidean norm of the flattened tensor.
    pub fn norm(&self) -> Real {
        self.data.iter().map(|v| v * v).sum::<Real>().sqrt()
    }

    /// Elementwise `self += other` (shapes must match).
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }
}
