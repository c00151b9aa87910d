use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating point element type. `f32` is used for training, `f64` for gradient checks.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

pub(crate) fn numel(dims: &[usize]) -> usize {
    dims.iter().product()
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {dims:?}")));
        }
        if numel(&dims) != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {} values, got {}",
                numel(&dims),
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![T::zero(); numel(dims)],
        }
    }

    pub fn filled(dims: &[usize], value: T) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; numel(dims)],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            dims: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Tensor {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
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

    /// Row `i` of the array viewed as `[dims[0], rest]`.
    pub fn row(&self, i: usize) -> &[T] {
        let width = self.data.len() / self.dims.first().copied().unwrap_or(1);
        &self.data[i * width..(i + 1) * width]
    }

    pub fn reshape(mut self, dims: Vec<usize>) -> Result<Self> {
        if numel(&dims) != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {dims:?}", self.dims)));
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }
}

/// Index of the largest element; ties resolve to the lowest index.
pub fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_lengths() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax(&[0.1f32, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[0.5f32, 0.5]), 0);
        assert_eq!(argmax(&[3.0f64]), 0);
    }

    #[test]
    fn reshape_round_trip() {
        let t = Tensor::new(vec![2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let flat = t.clone().reshape(vec![4]).unwrap();
        assert_eq!(flat.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(flat.reshape(vec![2, 2]).unwrap(), t);
    }
}
