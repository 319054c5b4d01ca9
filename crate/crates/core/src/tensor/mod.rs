//! Dense row-major tensors and the numeric kernels built on them.
//!
//! Every operation is pure: it reads its operands and returns a new tensor.
//! Reductions and products accumulate in a fixed order, so a given build
//! produces bit-identical results from run to run.

mod conv;
mod linalg;
mod loss;
mod rng;

pub use conv::{conv2d, conv2d_backward_input, conv2d_backward_kernels, Conv2dGeometry};
pub use linalg::{matmul, matmul_into, matmul_nt_into, matmul_tn_into};
pub use loss::{softmax, softmax_cross_entropy};
pub use rng::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {:?} holds {} elements but {} were supplied",
                shape,
                len,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Builds from a shape the caller has already validated.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Self {
            shape,
            data: (0..len).map(&mut f).collect(),
        }
    }

    /// Convenience for literals in tests and examples.
    pub fn from_f64(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
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

    /// Element access in place; the shape cannot change through it.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn bytes(&self) -> usize {
        self.data.len() * T::BYTES
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                expected: self.shape,
                actual: shape,
            });
        }
        Ok(Self { shape, data: self.data })
    }

    /// Number of elements per leading-axis entry.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        same_shape(op, self, other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)?.finite("add")
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)?.finite("sub")
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)?.finite("mul")
    }

    pub fn add_scalar(&self, s: T) -> Result<Self> {
        self.map(|v| v + s).finite("add_scalar")
    }

    pub fn scale(&self, s: T) -> Result<Self> {
        self.map(|v| v * s).finite("scale")
    }

    pub fn tanh(&self) -> Self {
        self.map(T::tanh)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn clip(&self, lo: T, hi: T) -> Result<Self> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!("clip bounds {lo} > {hi}")));
        }
        Ok(self.map(|v| v.max(lo).min(hi)))
    }

    /// Swaps the two trailing axes of a rank-2 or rank-3 tensor.
    pub fn transpose_last2(&self) -> Result<Self> {
        let r = self.rank();
        if !(2..=3).contains(&r) {
            return Err(Error::InvalidGeometry {
                op: "transpose",
                detail: format!("rank {r} not supported"),
            });
        }
        let (rows, cols) = (self.shape[r - 2], self.shape[r - 1]);
        let batch = self.len() / (rows * cols);
        const BLOCK: usize = 32;
        let mut out = vec![T::zero(); self.len()];
        for b in 0..batch {
            let src = &self.data[b * rows * cols..(b + 1) * rows * cols];
            let dst = &mut out[b * rows * cols..(b + 1) * rows * cols];
            for r0 in (0..rows).step_by(BLOCK) {
                for c0 in (0..cols).step_by(BLOCK) {
                    for r in r0..(r0 + BLOCK).min(rows) {
                        for c in c0..(c0 + BLOCK).min(cols) {
                            dst[c * rows + r] = src[r * cols + c];
                        }
                    }
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(r - 2, r - 1);
        Ok(Self { shape, data: out })
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.len() as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn norm(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        same_shape("dot", self, other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Passes the tensor through, or reports which operation went non-finite.
    pub fn finite(self, op: &'static str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// Rows `[start, start+count)` along the leading axis.
    pub fn slice_rows(&self, start: usize, count: usize) -> Result<Self> {
        if self.rank() == 0 || start + count > self.shape[0] || count == 0 {
            return Err(Error::InvalidArgument(format!(
                "row range {start}..{} outside leading axis of {:?}",
                start + count,
                self.shape
            )));
        }
        let row = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = count;
        Ok(Self {
            shape,
            data: self.data[start * row..(start + count) * row].to_vec(),
        })
    }

    /// Gathers leading-axis rows by index.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let row = self.row_len();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            if i >= self.shape[0] {
                return Err(Error::InvalidArgument(format!(
                    "row {i} out of range for {:?}",
                    self.shape
                )));
            }
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Self { shape, data })
    }

    pub fn argmax_rows(&self) -> Vec<usize> {
        let row = self.row_len();
        self.data
            .chunks(row)
            .map(|r| {
                let mut best = 0;
                for (i, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    pub fn one_hot(labels: &[usize], classes: usize) -> Result<Self> {
        let mut data = vec![T::zero(); labels.len() * classes];
        for (i, &l) in labels.iter().enumerate() {
            if l >= classes {
                return Err(Error::InvalidArgument(format!("label {l} outside {classes} classes")));
            }
            data[i * classes + l] = T::one();
        }
        Tensor::new(vec![labels.len(), classes], data)
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "shape {shape:?} must be non-empty with positive dimensions"
        )));
    }
    Ok(())
}

pub(crate) fn same_shape<T>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op,
            expected: a.shape.clone(),
            actual: b.shape.clone(),
        });
    }
    Ok(())
}
