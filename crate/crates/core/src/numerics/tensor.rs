use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{broadcast, kernels, NumericsError, Result, Scalar};

/// Dense row-major tensor. `shape.iter().product() == data.len()` always holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericsError::InvalidShape {
                op: "tensor",
                shape,
                reason: format!("holds {} elements", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: (0..numel).map(&mut f).collect(),
        }
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64(z * std)
        })
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_f64(self.data.len().max(1) as f64)
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// `[m, k] x [k, n]`; leading axes of `self` are flattened into rows.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (m, k, n) = kernels::matmul_dims(&self.shape, &rhs.shape)?;
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(&self.data, &rhs.data, &mut out, m, k, n, false);
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = n;
        Self::new(shape, out)
    }

    pub fn transpose2(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(NumericsError::InvalidShape {
                op: "transpose",
                shape: self.shape.clone(),
                reason: "expected rank 2".into(),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        Ok(Self::from_fn([c, r], |i| self.data[(i % r) * c + i / r]))
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        broadcast::binary(&self.shape, &self.data, &rhs.shape, &rhs.data, "add", |a, b| a + b)
            .map(|(shape, data)| Self { shape, data })
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        broadcast::binary(&self.shape, &self.data, &rhs.shape, &rhs.data, "sub", |a, b| a - b)
            .map(|(shape, data)| Self { shape, data })
    }

    pub fn mul(&self, rhs: &Self) -> Result<Self> {
        broadcast::binary(&self.shape, &self.data, &rhs.shape, &rhs.data, "mul", |a, b| a * b)
            .map(|(shape, data)| Self { shape, data })
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub fn silu(&self) -> Self {
        self.map(kernels::silu)
    }

    pub fn softmax_last_axis(&self) -> Result<Self> {
        let d = last_dim(&self.shape, "softmax")?;
        let mut out = self.data.clone();
        kernels::softmax_rows(&mut out, d);
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Layer norm over the last axis with affine gain and bias.
    pub fn layer_norm(&self, gain: &Self, bias: &Self, eps: T) -> Result<Self> {
        let d = last_dim(&self.shape, "layer_norm")?;
        if gain.shape != [d] || bias.shape != [d] {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape.clone(),
                rhs: gain.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); self.data.len()];
        let rows = self.data.len() / d;
        let mut stats = vec![T::zero(); 2 * rows];
        kernels::layer_norm_forward(
            &self.data,
            Some(&gain.data),
            Some(&bias.data),
            &mut out,
            &mut stats,
            d,
            eps,
        );
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }
}

pub(crate) fn last_dim(shape: &[usize], op: &'static str) -> Result<usize> {
    match shape.last() {
        Some(&d) if d > 0 => Ok(d),
        _ => Err(NumericsError::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: "last axis must be non-empty".into(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let a = Tensor::<f64>::from_f64([2, 2], &[1., 2., 3., 4.]).unwrap();
        let out = Tensor::eye(2).matmul(&a).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn row_times_column() {
        let a = Tensor::<f64>::from_f64([1, 2], &[1., 2.]).unwrap();
        let b = Tensor::<f64>::from_f64([2, 1], &[3., 4.]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f32>::zeros([2, 3]);
        let b = Tensor::<f32>::zeros([2, 3]);
        assert!(matches!(a.matmul(&b), Err(NumericsError::ShapeMismatch { .. })));
    }

    #[test]
    fn constant_row_layer_norm_is_zero() {
        let x = Tensor::<f64>::full([1, 4], 5.0);
        let out = x
            .layer_norm(&Tensor::full([4], 1.0), &Tensor::zeros([4]), 1e-6)
            .unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_element_layer_norm() {
        let x = Tensor::<f64>::from_f64([2], &[1.0, 3.0]).unwrap();
        let out = x
            .layer_norm(&Tensor::full([2], 1.0), &Tensor::zeros([2]), 0.0)
            .unwrap();
        assert_eq!(out.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn layer_norm_rejects_empty_axis() {
        let x = Tensor::<f64>::zeros([3, 0]);
        let g = Tensor::zeros([0]);
        assert!(x.layer_norm(&g, &g, 1e-6).is_err());
    }

    #[test]
    fn silu_and_softmax_basics() {
        assert_eq!(Tensor::<f64>::scalar(0.0).silu().item(), 0.0);
        let sm = Tensor::<f64>::zeros([2]).softmax_last_axis().unwrap();
        assert_eq!(sm.data(), &[0.5, 0.5]);
    }

    #[test]
    fn broadcast_add_column_and_row() {
        let a = Tensor::<f64>::from_f64([2, 1], &[10., 20.]).unwrap();
        let b = Tensor::<f64>::from_f64([1, 3], &[1., 2., 3.]).unwrap();
        let c = a.add(&b).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[11., 12., 13., 21., 22., 23.]);
    }

    #[test]
    fn broadcast_incompatible() {
        let a = Tensor::<f64>::zeros([2, 3]);
        let b = Tensor::<f64>::zeros([4]);
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn new_checks_length() {
        assert!(Tensor::<f32>::new([2, 2], vec![0.0; 3]).is_err());
    }
}
