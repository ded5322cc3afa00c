use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use super::{NumericsError, Result};

/// Floating-point element type. Training runs on `f32`; gradient checks
/// run on `f64`.
pub trait Real:
    Float
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const NAME: &'static str;

    fn of(value: f64) -> Self;

    fn as_f64(self) -> f64;

    fn as_f32(self) -> f32;
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    fn of(value: f64) -> Self {
        value as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn as_f32(self) -> f32 {
        self
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    fn of(value: f64) -> Self {
        value
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn as_f32(self) -> f32 {
        self as f32
    }
}

/// Row-major dense array whose entries are always finite.
#[derive(Clone, Debug, PartialEq)]
pub struct RealArray<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub(crate) fn first_non_finite<T: Real>(data: &[T]) -> Option<usize> {
    data.iter().position(|v| !v.is_finite())
}

impl<T: Real> RealArray<T> {
    /// Builds an array, checking the element count and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "array",
                left: shape,
                right: vec![data.len()],
            });
        }
        if let Some(index) = first_non_finite(&data) {
            return Err(NumericsError::NonFinite { op: "array", index });
        }
        Ok(Self { shape, data })
    }

    /// Kernels that already validated their output use this.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub(crate) fn checked(op: &'static str, shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if let Some(index) = first_non_finite(&data) {
            return Err(NumericsError::NonFinite { op, index });
        }
        Ok(Self::from_parts(shape, data))
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn scalar(value: T) -> Result<Self> {
        Self::new(Vec::new(), vec![value])
    }

    pub fn vector(data: Vec<T>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(NumericsError::ShapeMismatch {
                op: "from_rows",
                left: vec![cols],
                right: vec![bad.len()],
            });
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Leading extent of a 2-D array; a 1-D array counts as one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Trailing extent.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, index: usize) -> &[T] {
        let cols = self.cols();
        &self.data[index * cols..(index + 1) * cols]
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.cols() + col]
    }

    /// The single value of a scalar or one-element array.
    pub fn scalar_value(&self) -> Result<T> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(NumericsError::NotScalar {
                shape: self.shape.clone(),
            })
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Self::checked("map", self.shape.clone(), data)
    }

    pub fn cast<U: Real>(&self) -> Result<RealArray<U>> {
        let data = self.data.iter().map(|v| U::of(v.as_f64())).collect();
        RealArray::checked("cast", self.shape.clone(), data)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|v| *v * *v).sum::<T>().sqrt()
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn scale(&self, factor: T) -> Result<Self> {
        self.map(|v| v * factor)
    }

    fn zip_with(&self, op: &'static str, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(NumericsError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::checked(op, self.shape.clone(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(RealArray::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let a = RealArray::<f64>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(a.rows(), 2);
        assert_eq!(a.cols(), 3);
    }

    #[test]
    fn non_finite_rejected() {
        let err = RealArray::<f32>::vector(vec![1.0, f32::NAN]).unwrap_err();
        assert_eq!(err, NumericsError::NonFinite { op: "array", index: 1 });
        assert!(RealArray::<f64>::scalar(f64::INFINITY).is_err());
    }

    #[test]
    fn empty_matrix_is_allowed() {
        let a = RealArray::<f64>::zeros(vec![0, 4]);
        assert!(a.is_empty());
        assert_eq!(a.cols(), 4);
    }

    #[test]
    fn scalar_value_requires_one_element() {
        assert_eq!(RealArray::<f64>::scalar(3.0).unwrap().scalar_value().unwrap(), 3.0);
        assert!(RealArray::<f64>::vector(vec![1.0, 2.0])
            .unwrap()
            .scalar_value()
            .is_err());
    }
}
