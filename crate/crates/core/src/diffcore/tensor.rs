use crate::error::{invalid, Result};
use crate::scalar::Real;

/// Dense row-major array with an optional gradient buffer of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorBuf<S> {
    dims: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
}

impl<S: Real> TensorBuf<S> {
    pub fn new(dims: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return invalid(format!("extents must be positive, got {dims:?}"));
        }
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return invalid(format!(
                "dims {dims:?} hold {numel} entries but {} were given",
                data.len()
            ));
        }
        Ok(Self { dims, data, grad: None })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let numel = dims.iter().product();
        Self::new(dims, vec![S::zero(); numel])
    }

    pub fn scalar(value: S) -> Self {
        Self { dims: vec![1], data: vec![value], grad: None }
    }

    /// A rank-1 vector.
    pub fn vector(data: Vec<S>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// A rank-2 matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return invalid("matrix needs at least one row");
        };
        let cols = first.len();
        if rows.iter().any(|r| r.len() != cols) {
            return invalid("ragged rows");
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<S>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub(crate) fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Row count under the row-wise view (a rank-1 vector is a single row).
    pub fn rows(&self) -> usize {
        match self.dims.len() {
            1 => 1,
            _ => self.dims[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.dims.len() {
            1 => self.dims[0],
            _ => self.data.len() / self.dims[0],
        }
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[S]> {
        self.data.chunks(self.cols())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
