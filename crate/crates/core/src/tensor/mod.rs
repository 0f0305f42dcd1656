//! Dense tensors, their kernels, the HMT1 container and the differentiation
//! tape.

pub mod graph;
pub mod hmt;
pub mod kernels;

pub use graph::{Gradients, Graph, NodeId};
pub use kernels::{conv2d, conv2d_backward, resize_avg, resize_avg_backward, upsample_nearest};

use crate::error::{Error, Result};
use crate::real::Real;

pub const MAX_RANK: usize = 4;

/// Dense row-major array of rank 1 to 4. Rasters use N,C,H,W order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(Error::shape(format!("rank {} outside 1..=4", dims.len())));
    }
    if dims.contains(&0) {
        return Err(Error::shape(format!("zero extent in {dims:?}")));
    }
    Ok(dims.iter().product())
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_dims(dims)?;
        if n != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    /// Like [`Tensor::new`], additionally rejecting NaN and infinities.
    pub fn from_external(dims: &[usize], data: Vec<T>) -> Result<Self> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("element {i} of tensor {dims:?}")));
        }
        Self::new(dims, data)
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], v: T) -> Self {
        let n = check_dims(dims).expect("valid dims");
        Tensor {
            dims: dims.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn from_fn(dims: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let n = check_dims(dims).expect("valid dims");
        Tensor {
            dims: dims.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![v],
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn same_dims(&self, other: &Tensor<T>) -> bool {
        self.dims == other.dims
    }

    /// Extents of a rank-4 tensor as `(n, c, h, w)`.
    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.dims.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(format!(
                "expected N,C,H,W tensor, got {:?}",
                self.dims
            ))),
        }
    }

    /// Height and width, taken from the last two extents.
    pub fn hw(&self) -> Result<(usize, usize)> {
        let r = self.dims.len();
        if r < 2 {
            return Err(Error::shape(format!("no spatial extents in {:?}", self.dims)));
        }
        Ok((self.dims[r - 2], self.dims[r - 1]))
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        Self::new(dims, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "operand dims differ: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "operand dims differ: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Stacks same-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("cannot stack zero tensors"))?;
        if first.rank() >= MAX_RANK {
            return Err(Error::shape("stacked tensor would exceed rank 4"));
        }
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.dims != first.dims {
                return Err(Error::shape(format!(
                    "stack operands differ: {:?} vs {:?}",
                    first.dims, t.dims
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut dims = vec![items.len()];
        dims.extend_from_slice(&first.dims);
        Self::new(&dims, data)
    }

    /// Item `i` along the leading axis, with that axis dropped.
    pub fn index_outer(&self, i: usize) -> Result<Self> {
        if self.rank() < 2 || i >= self.dims[0] {
            return Err(Error::shape(format!(
                "cannot take item {i} of {:?}",
                self.dims
            )));
        }
        let stride = self.len() / self.dims[0];
        Self::new(
            &self.dims[1..],
            self.data[i * stride..(i + 1) * stride].to_vec(),
        )
    }
}
