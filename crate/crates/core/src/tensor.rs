use crate::error::{Error, Result};
use crate::scalar::{Dual, Real, Scalar};

/// Dense row-major array whose first axis is the batch.
///
/// Images are stored NHWC, latents as `(N, n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

/// `(N, H, W, C)` batch of images in `[-1, 1]`.
pub type ImageBatch<S> = Tensor<S>;
/// `(N, n)` batch of latent codes.
pub type LatentBatch<S> = Tensor<S>;

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape("tensor construction", &[len], &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![S::zero(); len] }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; len] }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| S::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Number of elements per batch row.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[S] {
        let n = self.row_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        let n = self.row_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::shape("reshape", shape, &self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(S) -> U) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_shape(&self, context: &str, expected: &[usize]) -> Result<()> {
        if self.shape != expected {
            return Err(Error::shape(context, expected, &self.shape));
        }
        Ok(())
    }

    /// Stacks tensors along the batch axis.
    pub fn concat_rows(parts: &[&Tensor<S>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_rows", &[1], &[0]))?;
        let tail = &first.shape[1..];
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        let mut batch = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::shape("concat_rows", &first.shape, &p.shape));
            }
            batch += p.batch();
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = batch;
        Ok(Self { shape, data })
    }

    /// Rows `start..end` as a new tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let n = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Self { shape, data: self.data[start * n..end * n].to_vec() }
    }

    /// Concatenates two `(N, a)` and `(N, b)` matrices into `(N, a + b)`.
    pub fn concat_features(a: &Tensor<S>, b: &Tensor<S>) -> Result<Self> {
        if a.batch() != b.batch() {
            return Err(Error::shape("concat_features", &[a.batch()], &[b.batch()]));
        }
        let (fa, fb) = (a.row_len(), b.row_len());
        let mut data = Vec::with_capacity(a.len() + b.len());
        for i in 0..a.batch() {
            data.extend_from_slice(a.row(i));
            data.extend_from_slice(b.row(i));
        }
        Ok(Self { shape: vec![a.batch(), fa + fb], data })
    }

    /// Inverse of [`Tensor::concat_features`].
    pub fn split_features(&self, left: usize) -> (Self, Self) {
        let n = self.batch();
        let f = self.row_len();
        let mut a = Vec::with_capacity(n * left);
        let mut b = Vec::with_capacity(n * (f - left));
        for i in 0..n {
            let r = self.row(i);
            a.extend_from_slice(&r[..left]);
            b.extend_from_slice(&r[left..]);
        }
        (Self { shape: vec![n, left], data: a }, Self { shape: vec![n, f - left], data: b })
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: S) {
        for a in &mut self.data {
            *a *= k;
        }
    }

    pub fn sum_sq(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &v| acc + v * v)
    }
}

impl<T: Real> Tensor<T> {
    /// Lifts to dual numbers with zero tangent.
    pub fn to_dual(&self) -> Tensor<Dual<T>> {
        self.map(Dual::constant)
    }

    /// Lifts to dual numbers with the given tangent.
    pub fn with_tangent(&self, tangent: &Tensor<T>) -> Tensor<Dual<T>> {
        debug_assert_eq!(self.shape, tangent.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&tangent.data).map(|(&re, &eps)| Dual::new(re, eps)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        self.map(|v| U::of(v.real()))
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.real()).collect()
    }
}

impl<T: Real> Tensor<Dual<T>> {
    pub fn tangent(&self) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|d| d.eps).collect() }
    }

    pub fn primal(&self) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|d| d.re).collect() }
    }
}
