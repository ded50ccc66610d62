use crate::error::{Result, TensorError};

/// Dense row-major n-dimensional array of `f64`.
///
/// Every extent is at least 1 and `dims.iter().product() == data.len()`.
/// A scalar is a rank-1 tensor of extent 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) || dims.iter().product::<usize>() != data.len()
        {
            return Err(TensorError::InvalidDims {
                dims: dims.to_vec(),
                len: data.len(),
            });
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Tensor::new(dims, vec![value; n]).expect("extents must be >= 1")
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Tensor::full(dims, 0.0)
    }

    pub fn ones(dims: &[usize]) -> Self {
        Tensor::full(dims, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
        }
    }

    /// Rank-1 tensor. Panics on an empty slice.
    pub fn vector(values: &[f64]) -> Self {
        Tensor::new(&[values.len()], values.to_vec()).expect("vector must be non-empty")
    }

    /// Rank-2 tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::domain("from_rows", "ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(&[rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor with dims {:?}", self.dims);
        self.data[0]
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        Tensor::new(dims, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.dims != other.dims {
            return Err(TensorError::shape("zip_map", &self.dims, &other.dims));
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

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.dims != other.dims {
            return Err(TensorError::shape("dot", &self.dims, &other.dims));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rows `[start, start+count)` along the leading axis.
    pub fn slice_rows(&self, start: usize, count: usize) -> Result<Tensor> {
        let rows = self.dims[0];
        if count == 0 || start + count > rows {
            return Err(TensorError::domain(
                "slice_rows",
                format!("rows {start}..{} out of 0..{rows}", start + count),
            ));
        }
        let stride = self.data.len() / rows;
        let mut dims = self.dims.clone();
        dims[0] = count;
        Tensor::new(&dims, self.data[start * stride..(start + count) * stride].to_vec())
    }

    /// Gathers rows along the leading axis in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let rows = self.dims[0];
        let stride = self.data.len() / rows;
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::domain(
                    "select_rows",
                    format!("row {i} out of 0..{rows}"),
                ));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut dims = self.dims.clone();
        dims[0] = indices.len();
        Tensor::new(&dims, data)
    }

    /// Concatenates tensors along the leading axis; trailing dims must agree.
    pub fn stack_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::domain("stack_rows", "no tensors"))?;
        let tail = &first.dims[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.dims[1..] != tail {
                return Err(TensorError::shape("stack_rows", &first.dims, &p.dims));
            }
            rows += p.dims[0];
            data.extend_from_slice(&p.data);
        }
        let mut dims = first.dims.clone();
        dims[0] = rows;
        Tensor::new(&dims, data)
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(TensorError::domain("transpose2", "rank must be 2"));
        }
        let (m, n) = (self.dims[0], self.dims[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(&[n, m], out)
    }
}
