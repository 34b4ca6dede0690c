//! Dense row-major `f64` tensors, a reverse-mode gradient tape, AdamW with a
//! cosine schedule, and a central-difference gradient checker.
//!
//! Everything above this module (encoders, hosts, the spatial-affinity loss,
//! probes) is expressed in terms of [`Tape`] operations on [`Tensor`] values.

mod gemm;
pub mod gradcheck;
pub mod optim;
mod tape;

pub use gradcheck::{finite_difference_check, finite_difference_check_sampled, GradCheckReport};
pub use optim::{adamw_step, cosine_lr, AdamWConfig, AdamWState};
pub use tape::{OpKind, Tape, Var, GELU_COEFF, GELU_SQRT_2_OVER_PI, LAYER_NORM_EPS, L2_NORM_FLOOR};

pub(crate) use gemm::gemm;

use crate::error::{Error, Result};

/// Dense tensor with row-major `f64` storage.
///
/// Most operations treat a tensor as a matrix: the last extent is the column
/// count and the product of the leading extents is the row count. A rank-1
/// tensor of length `n` is a single row.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::invalid(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {n} values but {} were given", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a `rows × cols` matrix. Panics when the data length is wrong;
    /// use [`Tensor::new`] for fallible construction.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix {rows}x{cols} data length");
        assert!(rows > 0 && cols > 0, "matrix extents must be positive");
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || cols == 0 {
            return Err(Error::invalid("from_rows needs at least one non-empty row"));
        }
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::shape(
                "from_rows",
                format!("row {bad} has {} columns, expected {cols}", rows[bad].len()),
            ));
        }
        Ok(Tensor::matrix(
            rows.len(),
            cols,
            rows.iter().flatten().copied().collect(),
        ))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(!shape.is_empty() && shape.iter().all(|&e| e > 0));
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor rank >= 1")
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a tensor of {} values", self.data.len());
        self.data[0]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols()).map(<[f64]>::to_vec).collect()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
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

    /// Rows selected by index, in the given order (indices may repeat).
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![idx.len().max(1), c],
            data,
        }
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, data)
    }

    /// Plain matrix product without gradient tracking.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("lhs is {m}x{k}, rhs is {k2}x{n}"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, (k, 1), &other.data, (n, 1), &mut out, 0.0);
        Ok(Tensor::matrix(m, n, out))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vstack(parts: &[&Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return Err(Error::invalid("vstack of zero tensors"));
        };
        let c = first.cols();
        let mut data = Vec::new();
        for p in parts {
            if p.cols() != c {
                return Err(Error::shape(
                    "vstack",
                    format!("column counts {c} and {}", p.cols()),
                ));
            }
            data.extend_from_slice(&p.data);
        }
        let rows = data.len() / c;
        Ok(Tensor::matrix(rows, c, data))
    }
}
