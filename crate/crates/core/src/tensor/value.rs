use crate::error::{Error, Result};
use crate::tensor::Real;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("zero extent in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_slice(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        assert!(n > 0, "zero extent in shape {shape:?}");
        Tensor { shape, data: vec![value; n] }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        assert!(n > 0, "zero extent in shape {shape:?}");
        Tensor { shape, data: (0..n).map(&mut f).collect() }
    }

    /// Standard-normal entries.
    pub fn randn(shape: impl Into<Vec<usize>>, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| {
            let v: f64 = StandardNormal.sample(rng);
            T::lit(v)
        })
    }

    /// Entries uniform in `[lo, hi)`.
    pub fn uniform(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| T::lit(rng.random_range(lo..hi)))
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extents of a `C x H x W` tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Dimension(format!("expected C x H x W, got {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "elementwise op on {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.map(|v| v.max(lo).min(hi))
    }

    /// Channel-axis concatenation of `C_i x ...` tensors sharing trailing extents.
    pub fn concat(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::Dimension(format!(
                    "concat of {:?} with {:?}",
                    first.shape, p.shape
                )));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        Tensor::new(shape, data)
    }
}
