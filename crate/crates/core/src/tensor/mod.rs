//! Dense row-major tensors.
//!
//! A [`Tensor`] is an immutable shape plus a shared flat buffer; cloning is
//! O(1). All forward kernels here are pure functions that return new tensors.
//! Reverse-mode differentiation lives in [`crate::autodiff`], which records
//! these kernels on a tape.

mod broadcast;
pub(crate) mod conv;
mod reduce;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::{shape_str, Scalar};

pub use broadcast::broadcast_shape;
pub(crate) use broadcast::{broadcast_strides, sum_to_shape, walk2};
pub use reduce::ReduceKind;
pub(crate) use reduce::{reduce as reduce_with_arg, reduced_layout};

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: std::fmt::Debug> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const SHOWN: usize = 8;
        let head: Vec<&T> = self.data.iter().take(SHOWN).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field(
                "data",
                &format_args!(
                    "{:?}{}",
                    head,
                    if self.data.len() > SHOWN { " .." } else { "" }
                ),
            )
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &d) in strides.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= d;
    }
    strides
}

impl<T: Scalar> Tensor<T> {
    /// Wraps `data` as a tensor of `shape`. Every dimension must be positive.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "zero-sized dimension in shape {}",
                shape_str(&shape)
            )));
        }
        if numel(&shape) != data.len() {
            return Err(Error::Dimension(format!(
                "shape {} needs {} elements, buffer has {}",
                shape_str(&shape),
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: T) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        Self::from_parts(shape.to_vec(), (0..numel(shape)).map(f).collect())
    }

    /// Builds a tensor from `f64` values, rounding for `f32`.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Mutable access, copying the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {}",
                shape_str(&self.shape)
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "cannot reshape {} into {}",
                shape_str(&self.shape),
                shape_str(shape)
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination of two tensors of identical shape.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "elementwise operands {} and {} differ",
                shape_str(&self.shape),
                shape_str(&other.shape)
            )));
        }
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    /// Converts every element to another precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .map(|&v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        )
    }

    // ---- elementwise ----

    pub fn add(&self, other: &Self) -> Result<Self> {
        broadcast::binary(self, other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        broadcast::binary(self, other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        broadcast::binary(self, other, |a, b| a * b)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn exp(&self) -> Self {
        self.map(T::exp)
    }

    pub fn ln(&self) -> Self {
        self.map(T::ln)
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub fn add_scalar(&self, offset: T) -> Self {
        self.map(|v| v + offset)
    }

    pub fn clip(&self, lo: T, hi: T) -> Self {
        self.map(|v| v.max(lo).min(hi))
    }

    // ---- reductions ----

    pub fn reduce(&self, kind: ReduceKind, axes: &[usize]) -> Result<Self> {
        reduce::reduce(self, kind, axes).map(|(t, _)| t)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.len()).unwrap_or_else(T::one)
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| if v.abs() > acc { v.abs() } else { acc })
    }

    /// `max |a - b|`, with `a` and `b` of identical shape.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        Ok(self.zip_map(other, |a, b| a - b)?.max_abs())
    }

    // ---- linear algebra / spatial ----

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k, n) = matmul_dims(self.shape(), other.shape())?;
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.data(),
            false,
            other.data(),
            false,
            &mut out,
            false,
        );
        Ok(Self::from_parts(vec![m, n], out))
    }

    pub fn conv2d(&self, kernels: &Self, stride: usize, padding: usize) -> Result<Self> {
        let geom = conv::ConvGeom::new(self.shape(), kernels.shape(), stride, padding)?;
        Ok(Self::from_parts(
            geom.output_shape(),
            conv::conv2d_forward(&geom, self.data(), kernels.data()),
        ))
    }

    pub fn maxpool2d(&self, window: usize) -> Result<Self> {
        let geom = conv::PoolGeom::new(self.shape(), window)?;
        let (out, _) = conv::maxpool_forward(&geom, self.data());
        Ok(Self::from_parts(geom.output_shape(), out))
    }

    /// Row-wise log-softmax of a `B×C` tensor, stabilised by max subtraction.
    pub fn log_softmax_rows(&self) -> Result<Self> {
        let (rows, cols) = as_matrix(self.shape(), "log_softmax")?;
        let mut out = vec![T::zero(); rows * cols];
        for (src, dst) in self.data.chunks(cols).zip(out.chunks_mut(cols)) {
            log_softmax_row(src, dst);
        }
        Ok(Self::from_parts(vec![rows, cols], out))
    }

    /// Row `i` of the leading dimension, keeping the remaining shape.
    pub fn row(&self, i: usize) -> Result<Self> {
        self.slice_rows(i, i + 1)
    }

    /// Rows `start..end` of the leading dimension.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let lead = *self
            .shape
            .first()
            .ok_or_else(|| Error::Dimension("slice_rows on a rank-0 tensor".into()))?;
        if start >= end || end > lead {
            return Err(Error::Dimension(format!(
                "row range {start}..{end} invalid for shape {}",
                shape_str(&self.shape)
            )));
        }
        let stride = self.len() / lead;
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self::from_parts(
            shape,
            self.data[start * stride..end * stride].to_vec(),
        ))
    }

    /// Gathers rows of the leading dimension in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let lead = *self
            .shape
            .first()
            .ok_or_else(|| Error::Dimension("select_rows on a rank-0 tensor".into()))?;
        if rows.is_empty() {
            return Err(Error::Dimension("select_rows with no rows".into()));
        }
        let stride = self.len() / lead;
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= lead {
                return Err(Error::Dimension(format!(
                    "row {r} out of range for shape {}",
                    shape_str(&self.shape)
                )));
            }
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Self::from_parts(shape, data))
    }

    /// Concatenates tensors along the leading dimension.
    pub fn concat_rows(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let tail = &first.shape()[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.rank() == 0 || &p.shape()[1..] != tail {
                return Err(Error::Dimension(format!(
                    "cannot concatenate {} with {}",
                    shape_str(first.shape()),
                    shape_str(p.shape())
                )));
            }
            lead += p.shape()[0];
            data.extend_from_slice(p.data());
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Ok(Self::from_parts(shape, data))
    }

    /// Index of the largest entry in each row of a `B×C` tensor (first on ties).
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        let (_, cols) = as_matrix(self.shape(), "argmax_rows")?;
        Ok(self.data.chunks(cols).map(|r| extreme_index(r, true)).collect())
    }

    /// Index of the smallest entry in each row of a `B×C` tensor (first on ties).
    pub fn argmin_rows(&self) -> Result<Vec<usize>> {
        let (_, cols) = as_matrix(self.shape(), "argmin_rows")?;
        Ok(self
            .data
            .chunks(cols)
            .map(|r| extreme_index(r, false))
            .collect())
    }
}

fn extreme_index<T: Scalar>(row: &[T], largest: bool) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        let better = if largest { v > row[best] } else { v < row[best] };
        if better {
            best = i;
        }
    }
    best
}

pub(crate) fn log_softmax_row<T: Scalar>(src: &[T], dst: &mut [T]) {
    let max = src.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = src.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = s - lse;
    }
}

pub(crate) fn as_matrix(shape: &[usize], op: &str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Dimension(format!(
            "{op} expects a 2-D tensor, got {}",
            shape_str(shape)
        ))),
    }
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    match (a, b) {
        ([m, k1], [k2, n]) if k1 == k2 => Ok((*m, *k1, *n)),
        _ => Err(Error::Dimension(format!(
            "matmul of {} and {}",
            shape_str(a),
            shape_str(b)
        ))),
    }
}

/// `out (+)= op(a) · op(b)` for row-major buffers, where `op` optionally
/// transposes. `a` is `m×k` after `op`, `b` is `k×n` after `op`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_transposed: bool,
    b: &[T],
    b_transposed: bool,
    out: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    let (rsa, csa) = if a_transposed { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_transposed { (1, k) } else { (n, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: bounds asserted above; `out` is a distinct mutable borrow.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
