//! Dense row-major `f64` tensors.
//!
//! Only what the graph engine and the networks need: elementwise maps, the
//! three matmul layouts, row-vector broadcasting, and column slicing. Anything
//! above rank 2 is representable but no operation here consumes it.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("from_rows", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// `(rows, cols)` of a rank-2 tensor; rank-1 tensors are a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            s => Err(Error::shape("dims2", format!("expected rank 1 or 2, got {s:?}"))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `self` shaped `[m, n]` combined with a row vector `[n]` repeated over rows.
    pub fn zip_rows(&self, row: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let n = row.len();
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .enumerate()
                .map(|(i, &a)| f(a, row.data[i % n]))
                .collect(),
        }
    }

    /// Column sums of a `[m, n]` tensor, returned as `[n]`.
    pub fn sum_rows(&self, n: usize) -> Tensor {
        let mut out = vec![0.0; n];
        for chunk in self.data.chunks(n) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        Tensor::vector(out)
    }

    /// `self · other` for `[m, k] · [k, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        Ok(gemm(m, k, n, &self.data, (k, 1), &other.data, (n, 1)))
    }

    /// `self · otherᵀ` for `[m, k] · [n, k]ᵀ`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (n, k2) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        Ok(gemm(m, k, n, &self.data, (k, 1), &other.data, (1, k)))
    }

    /// `selfᵀ · other` for `[k, m]ᵀ · [k, n]`.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul_tn", format!("[{k},{m}]^T x [{k2},{n}]")));
        }
        Ok(gemm(m, k, n, &self.data, (1, m), &other.data, (n, 1)))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    /// Column-wise concatenation of two tensors with equal row counts.
    pub fn concat_cols(&self, other: &Tensor) -> Result<Tensor> {
        let (m, a) = self.dims2()?;
        let (m2, b) = other.dims2()?;
        if m != m2 {
            return Err(Error::shape("concat", format!("rows {m} vs {m2}")));
        }
        let mut out = Vec::with_capacity(m * (a + b));
        for i in 0..m {
            out.extend_from_slice(&self.data[i * a..(i + 1) * a]);
            out.extend_from_slice(&other.data[i * b..(i + 1) * b]);
        }
        let shape = if self.rank() == 1 && other.rank() == 1 {
            vec![a + b]
        } else {
            vec![m, a + b]
        };
        Tensor::new(shape, out)
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        if start >= end || end > n {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {n} columns")));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&self.data[i * n + start..i * n + end]);
        }
        let shape = if self.rank() == 1 { vec![w] } else { vec![m, w] };
        Tensor::new(shape, out)
    }

    /// Writes `block` into columns `start..` of a zero tensor shaped like `self`.
    pub fn embed_cols(shape: &[usize], block: &Tensor, start: usize) -> Tensor {
        let mut out = Tensor::zeros(shape);
        let n = *shape.last().unwrap_or(&1);
        let w = *block.shape.last().unwrap_or(&1);
        for (i, chunk) in block.data.chunks(w).enumerate() {
            out.data[i * n + start..i * n + start + w].copy_from_slice(chunk);
        }
        out
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let n = *self.shape.last().unwrap_or(&1);
        &self.data[i * n..(i + 1) * n]
    }

    /// Repeats every row `times` times consecutively: row `i` lands at rows
    /// `i*times .. (i+1)*times`.
    pub fn repeat_rows(&self, times: usize) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut out = Vec::with_capacity(m * n * times);
        for i in 0..m {
            for _ in 0..times {
                out.extend_from_slice(&self.data[i * n..(i + 1) * n]);
            }
        }
        Tensor::new(vec![m * times, n], out)
    }
}

/// `[m, k] · [k, n]` with operands given by (row, column) strides.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize)) -> Tensor {
    let mut out = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: the strides describe in-bounds views of `a` ([m, k]) and
        // `b` ([k, n]) and `out` is a dense row-major [m, n] buffer.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                sa.0 as isize,
                sa.1 as isize,
                b.as_ptr(),
                sb.0 as isize,
                sb.1 as isize,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}
