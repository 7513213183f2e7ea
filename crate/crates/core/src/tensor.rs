//! Dense row-major matrices and the sparse operator used for neighborhood
//! aggregation.
//!
//! Every value is a rank-2 array of `f64`. Vectors are `1×n` or `n×1`,
//! scalars are `1×1`.

use std::fmt;

use crate::error::{Error, Result};

/// Left operands sparser than this go through the zero-skipping kernel.
const SPARSE_DENSITY: f64 = 0.15;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}x{}", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, ", {:?}", self.data)?;
        }
        write!(f, ")")
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "from_vec",
                format!("{} values for a {rows}x{cols} tensor", data.len()),
            ));
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Builds a tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(
                    "from_rows",
                    format!("row {i} has {} columns, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn column(values: Vec<f64>) -> Self {
        Tensor {
            rows: values.len(),
            cols: 1,
            data: values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    /// Value of a `1×1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn select_rows(&self, ids: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(ids.len() * self.cols);
        for &i in ids {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            rows: ids.len(),
            cols: self.cols,
            data,
        }
    }

    /// In-place `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        gemm(self, false, other, false, &mut out);
        Ok(out)
    }

    fn density(&self) -> f64 {
        if self.data.is_empty() {
            return 1.0;
        }
        let nnz = self.data.iter().filter(|&&v| v != 0.0).count();
        nnz as f64 / self.data.len() as f64
    }
}

/// `out += op(a) · op(b)`, where `op` optionally transposes.
///
/// Shapes are the caller's responsibility.
pub(crate) fn gemm(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool, out: &mut Tensor) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let n = if trans_b { b.rows } else { b.cols };
    debug_assert_eq!(out.shape(), (m, n));
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    if !trans_b && a.density() < SPARSE_DENSITY {
        sparse_left_gemm(a, trans_a, b, out);
        return;
    }
    let (rsa, csa) = if trans_a { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: the strides describe exactly the row-major buffers of `a`,
    // `b` and `out`, whose lengths match the (m, k, n) extents above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            1.0,
            out.data.as_mut_ptr(),
            out.cols as isize,
            1,
        );
    }
}

fn sparse_left_gemm(a: &Tensor, trans_a: bool, b: &Tensor, out: &mut Tensor) {
    let n = b.cols;
    if trans_a {
        // out[i, :] += a[p, i] * b[p, :]
        for p in 0..a.rows {
            let brow = &b.data[p * n..(p + 1) * n];
            for (i, &av) in a.row(p).iter().enumerate() {
                if av != 0.0 {
                    let orow = &mut out.data[i * n..(i + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
    } else {
        for i in 0..a.rows {
            let orow = &mut out.data[i * n..(i + 1) * n];
            for (p, &av) in a.row(i).iter().enumerate() {
                if av != 0.0 {
                    let brow = &b.data[p * n..(p + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
    }
}

/// Weighted sparse matrix in CSR form.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        offsets: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if offsets.len() != rows + 1
            || offsets.first() != Some(&0)
            || offsets.last() != Some(&indices.len())
            || indices.len() != values.len()
            || offsets.windows(2).any(|w| w[0] > w[1])
            || indices.iter().any(|&j| j >= cols)
        {
            return Err(Error::shape("sparse", "inconsistent CSR arrays"));
        }
        Ok(SparseMatrix {
            rows,
            cols,
            offsets,
            indices,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.offsets[i]..self.offsets[i + 1];
        self.indices[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for (j, w) in self.row(i) {
                out.data[i * self.cols + j] += w;
            }
        }
        out
    }

    /// `self · x`.
    pub fn matmul(&self, x: &Tensor) -> Result<Tensor> {
        if self.cols != x.rows {
            return Err(Error::shape(
                "spmm",
                format!("{}x{} x {:?}", self.rows, self.cols, x.shape()),
            ));
        }
        let n = x.cols;
        let mut out = Tensor::zeros(self.rows, n);
        for i in 0..self.rows {
            let orow = &mut out.data[i * n..(i + 1) * n];
            for (j, w) in self.row(i) {
                for (o, &v) in orow.iter_mut().zip(x.row(j)) {
                    *o += w * v;
                }
            }
        }
        Ok(out)
    }

    /// `out += selfᵀ · g`.
    pub(crate) fn transpose_matmul_into(&self, g: &Tensor, out: &mut Tensor) {
        let n = g.cols;
        for i in 0..self.rows {
            let grow = g.row(i);
            for (j, w) in self.row(i) {
                let orow = &mut out.data[j * n..(j + 1) * n];
                for (o, &v) in orow.iter_mut().zip(grow) {
                    *o += w * v;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor, b: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a.get(i, p) * b.get(p, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn identity_matmul_is_identity() {
        let x = Tensor::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(Tensor::identity(3).matmul(&x).unwrap(), x);
    }

    #[test]
    fn gemm_paths_agree_with_naive() {
        let dense = Tensor::from_vec(3, 4, (0..12).map(|v| v as f64 * 0.5 - 2.0).collect()).unwrap();
        let mut sparse = Tensor::zeros(3, 4);
        sparse.set(1, 2, 3.0);
        let b = Tensor::from_vec(4, 2, (0..8).map(|v| v as f64).collect()).unwrap();
        for a in [&dense, &sparse] {
            let expected = naive(a, &b);
            assert!(a.matmul(&b).unwrap().max_abs_diff(&expected) < 1e-12);
            let at = a.transpose();
            let mut out = Tensor::zeros(3, 2);
            gemm(&at, true, &b, false, &mut out);
            assert!(out.max_abs_diff(&expected) < 1e-12);
            let bt = b.transpose();
            let mut out = Tensor::zeros(3, 2);
            gemm(a, false, &bt, true, &mut out);
            assert!(out.max_abs_diff(&expected) < 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        assert!(Tensor::zeros(2, 3).matmul(&Tensor::zeros(2, 3)).is_err());
    }

    #[test]
    fn sparse_matches_dense() {
        let s = SparseMatrix::new(2, 3, vec![0, 2, 3], vec![0, 2, 1], vec![1.0, 2.0, -1.0]).unwrap();
        let x = Tensor::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(s.matmul(&x).unwrap(), s.to_dense().matmul(&x).unwrap());
        let g = Tensor::from_vec(2, 2, vec![1.0, 0.5, -1.0, 2.0]).unwrap();
        let mut out = Tensor::zeros(3, 2);
        s.transpose_matmul_into(&g, &mut out);
        assert_eq!(out, s.to_dense().transpose().matmul(&g).unwrap());
    }
}
