//! Dense 4-D tensors in row-major NCHW layout.
//!
//! A `Tensor` is a plain value: data plus extents. Gradient participation
//! happens through the tape in [`crate::autodiff`], which hands out `Var`
//! handles to tensors it owns. Convolution kernels reuse the same type with
//! the (out_channels, in_channels, kh, kw) reading of the four extents.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand::Rng;
use rand_distr::StandardNormal;

pub type Shape = [usize; 4];

pub fn numel(shape: Shape) -> usize {
    shape[0] * shape[1] * shape[2] * shape[3]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Shape,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Shape, data: Vec<S>) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(Error::DimensionMismatch {
                axis: "numel",
                expected: numel(shape),
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![S::ZERO; numel(shape)],
        }
    }

    pub fn full(shape: Shape, value: S) -> Self {
        Tensor {
            shape,
            data: vec![value; numel(shape)],
        }
    }

    /// Scalar wrapped as a (1,1,1,1) tensor.
    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: [1, 1, 1, 1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> S) -> Self {
        Tensor {
            shape,
            data: (0..numel(shape)).map(&mut f).collect(),
        }
    }

    /// I.i.d. N(0, std^2) entries.
    pub fn randn(shape: Shape, std: f64, rng: &mut impl Rng) -> Self {
        Tensor::from_fn(shape, |_| {
            let z: f64 = rng.sample(StandardNormal);
            S::from_f64(z * std)
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Flat offset of (n, c, h, w).
    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> S {
        self.data[self.at(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: S) {
        let i = self.at(n, c, h, w);
        self.data[i] = v;
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| T::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Output spatial extent of a conv/pool window, or an error when the window
/// does not fit in the padded input.
pub fn out_extent(
    axis: &'static str,
    input: usize,
    kernel: usize,
    pad: usize,
    stride: usize,
) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid("stride must be positive"));
    }
    let padded = input + 2 * pad;
    if kernel == 0 || kernel > padded {
        return Err(Error::DimensionMismatch {
            axis,
            expected: kernel,
            got: padded,
        });
    }
    Ok((padded - kernel) / stride + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::<f32>::new([1, 2, 3, 4], vec![0.0; 23]).is_err());
        assert!(Tensor::<f32>::new([1, 2, 3, 4], vec![0.0; 24]).is_ok());
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::<f64>::from_fn([2, 3, 4, 5], |i| i as f64);
        assert_eq!(t.get(0, 0, 0, 0), 0.0);
        assert_eq!(t.get(0, 0, 0, 4), 4.0);
        assert_eq!(t.get(0, 0, 1, 0), 5.0);
        assert_eq!(t.get(0, 1, 0, 0), 20.0);
        assert_eq!(t.get(1, 0, 0, 0), 60.0);
    }

    #[test]
    fn out_extent_matches_formula() {
        // (32 + 2*1 - 3) / 1 + 1 = 32
        assert_eq!(out_extent("h", 32, 3, 1, 1).unwrap(), 32);
        // stride 2: (32 + 2 - 3) / 2 + 1 = 16
        assert_eq!(out_extent("h", 32, 3, 1, 2).unwrap(), 16);
        assert!(out_extent("h", 2, 5, 0, 1).is_err());
    }
}
