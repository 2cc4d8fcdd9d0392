//! Minimal dense tensor engine with reverse-mode differentiation.
//!
//! Tensors are immutable, row-major and contiguous. Every operation
//! materializes its output; when any input requires a gradient the output
//! records the operation and its inputs so that [`Tensor::backward`] can
//! replay the graph in reverse.

mod autograd;
pub mod counters;
mod kernels;
mod ops;
#[cfg(test)]
mod tests;

use std::fmt;
use std::sync::{Arc, Mutex};

use num_traits::Float;

use crate::error::{shape_err, Error, Result};

pub(crate) use autograd::Op;

/// Element type tag, also used as the on-disk dtype code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        })
    }
}

/// Floating-point element of a [`Tensor`].
pub trait Scalar:
    Float
    + Default
    + fmt::Debug
    + fmt::Display
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `C = alpha * A * B + beta * C` on strided views.
    ///
    /// # Safety
    /// All strided views must lie inside their backing allocations and `c`
    /// must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) op: Op<T>,
    pub(crate) inputs: Vec<Tensor<T>>,
}

struct Inner<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    node: Option<Node<T>>,
    grad: Mutex<Option<Vec<T>>>,
}

impl<T: Scalar> Drop for Inner<T> {
    fn drop(&mut self) {
        counters::release_bytes(self.data.len() * T::DTYPE.size_of());
    }
}

/// Dense row-major n-dimensional array with optional gradient tracking.
///
/// Cloning is cheap (reference counted); the data itself is never mutated
/// after construction.
pub struct Tensor<T: Scalar> {
    inner: Arc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<T> = self.inner.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("dtype", &T::DTYPE)
            .field("requires_grad", &self.inner.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

pub fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn build(data: Vec<T>, shape: Vec<usize>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        counters::acquire_bytes(data.len() * T::DTYPE.size_of());
        Self {
            inner: Arc::new(Inner {
                shape,
                data,
                requires_grad,
                node,
                grad: Mutex::new(None),
            }),
        }
    }

    /// Result of an operation: attaches the graph node when an input tracks
    /// gradients.
    pub(crate) fn from_op(data: Vec<T>, shape: Vec<usize>, op: Op<T>, inputs: Vec<Tensor<T>>) -> Self {
        debug_assert!(
            data.iter().all(|v| v.is_finite()) || inputs.iter().any(|t| !t.all_finite()),
            "non-finite output from {} on finite inputs",
            op.name()
        );
        if inputs.iter().any(|t| t.requires_grad()) {
            Self::build(data, shape, true, Some(Node { op, inputs }))
        } else {
            Self::build(data, shape, false, None)
        }
    }

    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(shape_err("Tensor::new", shape, &[data.len()]));
        }
        Ok(Self::build(data, shape.to_vec(), false, None))
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.iter().map(|&v| T::of(v)).collect(), shape)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(vec![T::zero(); numel_of(shape)], shape.to_vec(), false, None)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::build(vec![value; numel_of(shape)], shape.to_vec(), false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::build(vec![value], Vec::new(), false, None)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let data = (0..numel_of(shape)).map(&mut f).collect();
        Self::build(data, shape.to_vec(), false, None)
    }

    /// Identity matrices stacked `batch` times: `[batch, n, n]`.
    pub fn eye_batched(batch: usize, n: usize) -> Self {
        Self::from_fn(&[batch, n, n], |i| {
            let r = (i / n) % n;
            let c = i % n;
            if r == c {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    /// Leaf copy of this tensor that accumulates gradients.
    pub fn requires_grad_(self) -> Self {
        Self::build(self.inner.data.clone(), self.inner.shape.clone(), true, None)
    }

    /// Leaf copy detached from any graph.
    pub fn detach(&self) -> Self {
        Self::build(self.inner.data.clone(), self.inner.shape.clone(), false, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    pub(crate) fn node(&self) -> Option<&Node<T>> {
        self.inner.node.as_ref()
    }

    pub(crate) fn id(&self) -> usize {
        Arc::as_ptr(&self.inner) as usize
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data[0])
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Non-differentiable conversion to another element type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::build(
            self.inner.data.iter().map(|v| U::of(v.as_f64())).collect(),
            self.inner.shape.clone(),
            false,
            None,
        )
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.lock().expect("grad lock").clone()
    }

    /// Gradient, treating an unreached leaf as having zero gradient.
    pub fn grad_or_zeros(&self) -> Vec<T> {
        self.grad().unwrap_or_else(|| vec![T::zero(); self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock") = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.inner.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Bitwise equality of shape and data.
    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        self.shape() == other.shape()
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    /// Largest absolute elementwise difference; `inf` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}
