//! Dense row-major tensors and the handful of numeric primitives the rest of
//! the crate is built from.
//!
//! There is no broadcasting: element-wise operations require identical
//! shapes. Images use the `(batch, height, width, channel)` layout.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{shape_err, Result};

/// On-disk scalar type code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

impl DType {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Scalar types a [`Tensor`] can hold. `f32` is the working precision,
/// `f64` is used by oracles.
pub trait Element: Float + Default + Debug + Sum + Send + Sync + 'static {
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Element-wise binary operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EwiseOp {
    Add,
    Sub,
    Mul,
}

/// Reduction operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Max,
    AbsSum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    /// Builds a tensor from explicit row-major data.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return shape_err(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn ones_like(other: &Self) -> Self {
        Self::ones(&other.shape)
    }

    /// Rank-0 tensor.
    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
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

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Same data, new shape. Element counts must agree.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn into_reshaped(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(format!(
                "element-wise shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            ));
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

    pub fn ewise(op: EwiseOp, a: &Self, b: &Self) -> Result<Self> {
        match op {
            EwiseOp::Add => a.zip_map(b, |x, y| x + y),
            EwiseOp::Sub => a.zip_map(b, |x, y| x - y),
            EwiseOp::Mul => a.zip_map(b, |x, y| x * y),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        Self::ewise(EwiseOp::Add, self, other)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        Self::ewise(EwiseOp::Sub, self, other)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        Self::ewise(EwiseOp::Mul, self, other)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!(
                "accumulation shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    /// `num / (den + eps * sign0(den))` with `sign0(0) = +1`.
    pub fn safe_divide(num: &Self, den: &Self, eps: T) -> Result<Self> {
        num.zip_map(den, |n, d| {
            let stabilizer = if d >= T::zero() { eps } else { -eps };
            n / (d + stabilizer)
        })
    }

    /// Sum of all elements, accumulated in double precision.
    pub fn sum(&self) -> T {
        T::from_f64(self.data.iter().map(|v| v.as_f64()).sum())
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    /// Reduces over `axes`; reducing every axis yields a rank-0 tensor.
    pub fn reduce(&self, op: ReduceOp, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut reduced = vec![false; rank];
        for &ax in axes {
            if ax >= rank {
                return shape_err(format!("axis {} out of range for rank {}", ax, rank));
            }
            if reduced[ax] {
                return shape_err(format!("axis {} listed twice", ax));
            }
            reduced[ax] = true;
        }
        let out_shape: Vec<usize> = self
            .shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&e, _)| e)
            .collect();
        let out_len: usize = out_shape.iter().product();
        // sums accumulate in f64
        let init = match op {
            ReduceOp::Max => f64::NEG_INFINITY,
            _ => 0.0,
        };
        let mut out = vec![init; out_len];

        let strides = strides_of(&self.shape);
        let out_strides = strides_of(&out_shape);
        for (flat, &v) in self.data.iter().enumerate() {
            let mut rem = flat;
            let mut o = 0;
            let mut k = 0;
            for ax in 0..rank {
                let idx = rem / strides[ax];
                rem %= strides[ax];
                if !reduced[ax] {
                    o += idx * out_strides[k];
                    k += 1;
                }
            }
            let v = v.as_f64();
            let slot = &mut out[o];
            *slot = match op {
                ReduceOp::Sum => *slot + v,
                ReduceOp::AbsSum => *slot + v.abs(),
                ReduceOp::Max => slot.max(v),
            };
        }
        Self::new(&out_shape, out.into_iter().map(T::from_f64).collect())
    }

    /// Index of the largest element; ties resolve to the lowest index.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(usize, T)> = None;
        for (i, &v) in self.data.iter().enumerate() {
            match best {
                Some((_, b)) if v <= b => {}
                _ => best = Some((i, v)),
            }
        }
        best.map(|(i, _)| i)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Largest absolute element-wise difference.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        Ok(self.zip_map(other, |a, b| a - b)?.max_abs())
    }
}

/// Row-major strides for `shape`.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}
