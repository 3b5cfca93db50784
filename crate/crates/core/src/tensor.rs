//! Dense row-major `f64` tensors and the handful of matrix kernels the
//! network needs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
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

    /// Size of the leading dimension (0 for a scalar-shaped tensor).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Number of values per leading-dimension entry.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Errors with `NonFinite(context)` if any value is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    /// Copies rows `indices` of the leading dimension into a new tensor.
    pub fn gather_rows(&self, indices: &[usize]) -> Tensor {
        let w = self.row_len();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(indices.len());
        } else {
            shape[0] = indices.len();
        }
        Tensor { shape, data }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Matrix view description for [`gemm`]: `rows x cols` with the given strides.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatLayout {
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl MatLayout {
    /// Row-major `rows x cols`.
    pub fn rm(rows: usize, cols: usize) -> Self {
        MatLayout {
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// Transposed view of a row-major `cols x rows` buffer.
    pub fn rm_t(rows: usize, cols: usize) -> Self {
        MatLayout {
            rows,
            cols,
            row_stride: 1,
            col_stride: rows as isize,
        }
    }
}

/// `c = alpha * a * b + beta * c`, `c` row-major.
pub(crate) fn gemm(alpha: f64, a: &[f64], la: MatLayout, b: &[f64], lb: MatLayout, beta: f64, c: &mut [f64]) {
    assert_eq!(la.cols, lb.rows, "gemm inner dimensions");
    let (m, k, n) = (la.rows, la.cols, lb.cols);
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    assert!(a.len() >= span(la) && b.len() >= span(lb));
    // SAFETY: bounds on all three buffers are checked above against the
    // strided extents the kernel will touch.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            la.row_stride,
            la.col_stride,
            b.as_ptr(),
            lb.row_stride,
            lb.col_stride,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn span(l: MatLayout) -> usize {
    if l.rows == 0 || l.cols == 0 {
        return 0;
    }
    (l.rows - 1) * l.row_stride as usize + (l.cols - 1) * l.col_stride as usize + 1
}

/// `c[m,n] (+)= a[m,k] * b[n,k]^T`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64], accumulate: bool) {
    gemm(
        1.0,
        a,
        MatLayout::rm(m, k),
        b,
        MatLayout::rm_t(k, n),
        if accumulate { 1.0 } else { 0.0 },
        c,
    );
}

/// `c[m,n] (+)= a[p,m]^T * b[p,n]`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], p: usize, m: usize, n: usize, c: &mut [f64], accumulate: bool) {
    gemm(
        1.0,
        a,
        MatLayout::rm_t(m, p),
        b,
        MatLayout::rm(p, n),
        if accumulate { 1.0 } else { 0.0 },
        c,
    );
}

/// `c[m,n] (+)= a[m,k] * b[k,n]`.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64], accumulate: bool) {
    gemm(
        1.0,
        a,
        MatLayout::rm(m, k),
        b,
        MatLayout::rm(k, n),
        if accumulate { 1.0 } else { 0.0 },
        c,
    );
}
