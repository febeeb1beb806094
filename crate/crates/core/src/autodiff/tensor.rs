use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of doubles. Rank 0 (scalar), 1 (vector) or 2 (matrix).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Shape { op: "tensor", lhs: shape, rhs: vec![values.len()] });
        }
        if shape.iter().any(|&s| s == 0) {
            return Err(Error::Precondition(format!("tensor shape {shape:?} has a zero extent")));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), values: vec![0.0; numel] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: Vec::new(), values: vec![v] }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self { shape: vec![values.len()], values }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Shape { op: "from_rows", lhs: vec![cols], rhs: vec![bad.len()] });
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub(crate) fn from_parts(shape: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self { shape, values }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.values[0]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols() + j]
    }

    pub(crate) fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Shape { op, lhs: self.shape.clone(), rhs: vec![0, 0] });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(self.row(i));
        }
        Tensor::from_parts(vec![idx.len(), c], out)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.values[i * c + j];
            }
        }
        Tensor::from_parts(vec![c, r], out)
    }
}

/// `c (m x n) = op(a) * op(b) + beta * c`, with optional transposes expressed
/// through strides. `a` is stored as `a_rows x a_cols`, likewise `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: &[f64],
    a_rows: usize,
    a_cols: usize,
    trans_a: bool,
    b: &[f64],
    b_rows: usize,
    b_cols: usize,
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    let dims = gemm_dims(a, a_rows, a_cols, trans_a, b, b_rows, b_cols, trans_b);
    assert_eq!(c.len(), dims.0 * dims.2);
    // SAFETY: `c` holds exactly m * n initialized values.
    unsafe { gemm_raw(a, a_cols, trans_a, b, b_cols, trans_b, dims, beta, c.as_mut_ptr()) }
}

/// `op(a) * op(b)` into a fresh buffer; skips zero-filling the output.
pub(crate) fn gemm_new(a: &[f64], a_rows: usize, a_cols: usize, trans_a: bool, b: &[f64], b_rows: usize, b_cols: usize, trans_b: bool) -> Vec<f64> {
    let dims = gemm_dims(a, a_rows, a_cols, trans_a, b, b_rows, b_cols, trans_b);
    let (m, n) = (dims.0, dims.2);
    let mut c = Vec::with_capacity(m * n);
    // SAFETY: with beta = 0 the kernel writes every element of C without
    // reading it, so all m * n values are initialized before `set_len`.
    unsafe {
        gemm_raw(a, a_cols, trans_a, b, b_cols, trans_b, dims, 0.0, c.as_mut_ptr());
        c.set_len(m * n);
    }
    c
}

#[allow(clippy::too_many_arguments)]
fn gemm_dims(a: &[f64], a_rows: usize, a_cols: usize, trans_a: bool, b: &[f64], b_rows: usize, b_cols: usize, trans_b: bool) -> (usize, usize, usize) {
    let (m, k) = if trans_a { (a_cols, a_rows) } else { (a_rows, a_cols) };
    let (kb, n) = if trans_b { (b_cols, b_rows) } else { (b_rows, b_cols) };
    assert_eq!(k, kb, "gemm inner dimension");
    assert_eq!(a.len(), a_rows * a_cols);
    assert_eq!(b.len(), b_rows * b_cols);
    (m, k, n)
}

/// Caller guarantees `c` has room for `m * n` values and that `(m, k, n)`
/// came from `gemm_dims`.
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_raw(a: &[f64], a_cols: usize, trans_a: bool, b: &[f64], b_cols: usize, trans_b: bool, (m, k, n): (usize, usize, usize), beta: f64, c: *mut f64) {
    let (rsa, csa) = if trans_a { (1, a_cols as isize) } else { (a_cols as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b_cols as isize) } else { (b_cols as isize, 1) };
    matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c, n as isize, 1);
}
