use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
///
/// Batches of vectors are stored column-wise: a batch of `b` points in
/// `R^n` is an `n x b` matrix.
#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Mat {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diag(d: &[f64]) -> Self {
        let mut m = Mat::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(
                "Mat::from_vec",
                format!("{rows}x{cols} needs {} entries, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("Mat::from_rows", "ragged rows"));
        }
        Ok(Mat {
            rows: r,
            cols: c,
            data: rows.concat(),
        })
    }

    /// Single column `n x 1`.
    pub fn col_vector(v: &[f64]) -> Self {
        Mat {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    /// Columns of the result are the given vectors.
    pub fn from_columns(cols: &[Vec<f64>]) -> Result<Self> {
        let c = cols.len();
        let r = cols.first().map_or(0, Vec::len);
        let mut m = Mat::zeros(r, c);
        for (j, col) in cols.iter().enumerate() {
            if col.len() != r {
                return Err(Error::shape("Mat::from_columns", "ragged columns"));
            }
            m.set_column(j, col);
        }
        Ok(m)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, v: &[f64]) {
        debug_assert_eq!(v.len(), self.rows);
        for (i, &x) in v.iter().enumerate() {
            self[(i, j)] = x;
        }
    }

    /// Rows `start..start + len`.
    pub fn row_slice(&self, start: usize, len: usize) -> Mat {
        Mat {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    /// Columns `start..start + len`.
    pub fn col_slice(&self, start: usize, len: usize) -> Mat {
        Mat::from_fn(self.rows, len, |i, j| self[(i, start + j)])
    }

    /// Stack `self` on top of `other`.
    pub fn vstack(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "Mat::vstack",
                format!("{} vs {} columns", self.cols, other.cols),
            ));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Mat {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// Concatenate column blocks left to right.
    pub fn hstack(parts: &[&Mat]) -> Result<Mat> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if parts.iter().any(|m| m.rows != rows) {
            return Err(Error::shape("Mat::hstack", "row counts differ"));
        }
        let cols = parts.iter().map(|m| m.cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for m in parts {
            for i in 0..rows {
                out.data[i * cols + off..i * cols + off + m.cols].copy_from_slice(m.row(i));
            }
            off += m.cols;
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        debug_assert_eq!(self.shape(), other.shape());
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Mat) -> Mat {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Mat) -> Mat {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Mat {
        self.map(|x| s * x)
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn add_diag(&self, s: f64) -> Mat {
        let mut m = self.clone();
        for i in 0..self.rows.min(self.cols) {
            m[(i, i)] += s;
        }
        m
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// Sum over columns, giving an `rows x 1` vector.
    pub fn row_sums(&self) -> Mat {
        Mat::from_fn(self.rows, 1, |i, _| self.row(i).iter().sum())
    }

    /// Sum over rows, giving a `1 x cols` vector.
    pub fn col_sums(&self) -> Mat {
        let mut out = Mat::zeros(1, self.cols);
        for i in 0..self.rows {
            for (o, x) in out.data.iter_mut().zip(self.row(i)) {
                *o += x;
            }
        }
        out
    }

    /// `self + b` with `b` an `rows x 1` column broadcast across columns.
    pub fn add_col(&self, b: &Mat) -> Mat {
        debug_assert_eq!(b.shape(), (self.rows, 1));
        Mat::from_fn(self.rows, self.cols, |i, j| self[(i, j)] + b.data[i])
    }

    /// Row `i` scaled by `s[i]`.
    pub fn scale_rows(&self, s: &Mat) -> Mat {
        debug_assert_eq!(s.shape(), (self.rows, 1));
        Mat::from_fn(self.rows, self.cols, |i, j| self[(i, j)] * s.data[i])
    }

    /// Column `j` scaled by `s[j]` (`s` is `1 x cols`).
    pub fn scale_cols(&self, s: &Mat) -> Mat {
        debug_assert_eq!(s.shape(), (1, self.cols));
        Mat::from_fn(self.rows, self.cols, |i, j| self[(i, j)] * s.data[j])
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        gemm(self, false, other, false)
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Mat) -> Mat {
        gemm(self, true, other, false)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Mat) -> Mat {
        gemm(self, false, other, true)
    }

    pub fn dot(&self, other: &Mat) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

/// `op(a) · op(b)` where `op` optionally transposes.
pub fn gemm(a: &Mat, ta: bool, b: &Mat, tb: bool) -> Mat {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(
        k, k2,
        "gemm inner dimensions differ: {:?}{} x {:?}{}",
        a.shape(),
        if ta { "ᵀ" } else { "" },
        b.shape(),
        if tb { "ᵀ" } else { "" }
    );
    let mut c = Mat::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let (rsa, csa) = if ta { (1, a.cols) } else { (a.cols, 1) };
    let (rsb, csb) = if tb { (1, b.cols) } else { (b.cols, 1) };
    // SAFETY: strides describe exactly the row-major buffers of `a`, `b` and
    // `c`, whose lengths were checked above against (m, k), (k, n), (m, n).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa as isize,
            csa as isize,
            b.data.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            write!(f, "  ")?;
            for x in self.row(i).iter().take(8) {
                write!(f, "{x:>12.5e} ")?;
            }
            if self.cols > 8 {
                write!(f, "...")?;
            }
            writeln!(f)?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        let a = Mat::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let b = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let ab = a.matmul(&b);
        assert_eq!(ab.as_slice(), &[4.0, 5.0, 10.0, 11.0]);
        assert_eq!(a.t_matmul(&a), a.transpose().matmul(&a));
        assert_eq!(a.matmul_t(&a), a.matmul(&a.transpose()));
        assert_eq!(b.t_matmul(&a.transpose()), ab.transpose());
    }

    #[test]
    fn stacking() {
        let a = Mat::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Mat::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let v = a.vstack(&b).unwrap();
        assert_eq!(v.shape(), (3, 2));
        assert_eq!(v.row_slice(1, 2), b);
        let h = Mat::hstack(&[&b, &b.col_slice(0, 1)]).unwrap();
        assert_eq!(h.row(1), &[5.0, 6.0, 5.0]);
        assert!(a.vstack(&Mat::zeros(1, 3)).is_err());
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Mat::from_vec(2, 2, vec![1.0; 3]).is_err());
    }
}
