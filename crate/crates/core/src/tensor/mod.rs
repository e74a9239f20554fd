//! Dense NCHW tensors and the differentiable kernels the detector is built from.
//!
//! There is no autodiff tape. Every kernel comes as a forward/backward pair and
//! composite blocks call them explicitly. Element type is either `f32`
//! (training, benchmarking) or `f64` (gradient checks, oracles) through the
//! [`Real`] trait.

mod activation;
mod conv;
mod pool;
mod sample;

pub use activation::{
    activate, activate_backward, hard_sigmoid, relu, sigmoid, silu, Activation,
};
pub use conv::{conv2d_backward, conv2d_forward, conv_output_extent, ConvGrads, ConvParams};
pub use pool::{
    avg_pool2x, avg_pool2x_backward, concat_channels, global_avg_pool, global_avg_pool_backward,
    split_channels, upsample_nearest, upsample_nearest_backward,
};
pub use sample::{bilinear_sample, bilinear_sample_backward, SampleGrads};
pub(crate) use sample::{bilinear_at, bilinear_scatter};

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Numeric precision of a tensor's elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

/// Scalar element type for tensors.
pub trait Real:
    Float + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Send + Sync + 'static
{
    const PRECISION: Precision;
    /// Bytes per element in serialized form.
    const BYTES: usize;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn to_le_bytes_vec(self, out: &mut Vec<u8>);
    fn from_le_slice(bytes: &[u8]) -> Self;

    /// `C = alpha * A * B + beta * C` with arbitrary row/column strides.
    ///
    /// # Safety
    /// Slices must cover every index addressed by the given dimensions and strides.
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

impl Real for f32 {
    const PRECISION: Precision = Precision::Single;
    const BYTES: usize = 4;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn to_le_bytes_vec(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::Double;
    const BYTES: usize = 8;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn to_le_bytes_vec(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Safe row-major matrix product `c = a * b (+ c if accumulate)`.
///
/// `a` is `m x k`, `b` is `k x n`; `transpose_a`/`transpose_b` reinterpret the
/// stored buffers as `k x m` / `n x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    transpose_a: bool,
    b: &[T],
    transpose_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if transpose_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if transpose_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    // SAFETY: the asserts above bound every index the strides can address.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dense row-major array with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {len} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    /// Builds a tensor from `f64` values, converting to the element type.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// `(N, C, H, W)` extents of a 4-D tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::invalid(
                "tensor",
                format!("expected a 4-D NCHW tensor, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::shape("reshape", shape, &self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient slot, allocated as zeros on first access.
    pub fn grad_mut(&mut self) -> &mut [T] {
        let len = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); len])
    }

    pub fn accumulate_grad(&mut self, delta: &[T]) {
        assert_eq!(delta.len(), self.data.len(), "gradient length mismatch");
        for (g, &d) in self.grad_mut().iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            grad: None,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// Converts between element precisions. The gradient slot is dropped.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
            grad: None,
        }
    }

    /// One sample `n` of a 4-D tensor as a contiguous slice.
    pub fn sample(&self, n: usize) -> &[T] {
        let per = self.data.len() / self.shape[0].max(1);
        &self.data[n * per..(n + 1) * per]
    }
}

/// Stacks equally shaped per-sample tensors of shape `(1, ...)` or `(...)` into a batch.
pub fn stack_batch<T: Real>(items: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = items
        .first()
        .ok_or_else(|| Error::invalid("stack_batch", "empty batch"))?;
    let inner: Vec<usize> = if first.shape.first() == Some(&1) && first.shape.len() == 4 {
        first.shape[1..].to_vec()
    } else {
        first.shape.clone()
    };
    let mut data = Vec::with_capacity(first.len() * items.len());
    for t in items {
        if t.len() != first.len() {
            return Err(Error::shape("stack_batch", &first.shape, &t.shape));
        }
        data.extend_from_slice(&t.data);
    }
    let mut shape = vec![items.len()];
    shape.extend(inner);
    Tensor::from_vec(&shape, data)
}
