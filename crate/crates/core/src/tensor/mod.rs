//! Dense row-major tensors and the handful of primitives the model is built
//! from.
//!
//! Axis meaning (batch, channel, rows, columns, target rows, target columns)
//! is a convention of the caller; the tensor itself only knows extents.

mod ops;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive};
use rand::Rng;

use crate::error::{Error, Result};

pub(crate) use ops::group_norm_slice;
pub use ops::{
    bilinear_resize, bilinear_sample, conv2d, conv2d_same, gelu, group_norm, linear, matmul, relu,
    resize_by_scale, row_softmax, scaled_extent, softmax_in_place,
};

/// Maximum number of axes a tensor may carry.
pub const MAX_RANK: usize = 6;

/// Floating point element type: `f32` for inference, `f64` for gradient work.
pub trait Scalar:
    Float + FromPrimitive + Default + Debug + Send + Sync + Sum + AddAssign + 'static
{
    /// Element code used by the tensor file format.
    const DTYPE: u8;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn put_le(self, out: &mut Vec<u8>);

    /// Decode from exactly `size_of::<Self>()` little-endian bytes.
    fn get_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: u8 = 0;

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn get_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: u8 = 1;

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn get_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "Tensor::new",
                axis: "data",
                expected: n,
                found: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        validate_shape(shape)?;
        let n = shape.iter().product();
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        validate_shape(shape)?;
        let n = shape.iter().product();
        Ok(Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        })
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(
        shape: &[usize],
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Self::from_fn(shape, |_| T::lit(rng.gen_range(lo..hi)))
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

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| {
            debug_assert!(i < n);
            acc * n + i
        })
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(first_mismatch("Tensor::zip_map", &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
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

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    /// Largest absolute elementwise difference; `inf` when shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().to_f64().unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max)
    }

    /// Largest elementwise difference relative to the largest magnitude of
    /// `reference` (floored at 1e-12).
    pub fn max_rel_diff(&self, reference: &Self) -> f64 {
        let scale = reference
            .data
            .iter()
            .map(|v| v.abs().to_f64().unwrap_or(0.0))
            .fold(0.0, f64::max)
            .max(1e-12);
        self.max_abs_diff(reference) / scale
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::Config(format!(
            "tensor rank must be in 1..={MAX_RANK}, got {}",
            shape.len()
        )));
    }
    if let Some(pos) = shape.iter().position(|&n| n == 0) {
        return Err(Error::Config(format!(
            "tensor extent at axis {pos} is zero"
        )));
    }
    Ok(())
}

pub(crate) fn first_mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    if a.len() != b.len() {
        return Error::Rank {
            op,
            expected: a.len(),
            found: b.len(),
        };
    }
    let i = a.iter().zip(b).position(|(x, y)| x != y).unwrap_or(0);
    Error::Shape {
        op,
        axis: AXIS_NAMES[i.min(AXIS_NAMES.len() - 1)],
        expected: a[i],
        found: b[i],
    }
}

const AXIS_NAMES: [&str; 6] = ["axis0", "axis1", "axis2", "axis3", "axis4", "axis5"];
