//! Dense row-major `f64` matrices and a seeded generator.
//!
//! Every reduction here sums left to right in index order, so a result
//! depends only on its inputs and never on the executor that called it.

#![allow(clippy::needless_range_loop)]

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
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

    /// Copy of rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.rows, "row range out of bounds");
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Copy of columns `start..end`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Matrix {
        assert!(
            start <= end && end <= self.cols,
            "column range out of bounds"
        );
        Matrix::from_fn(self.rows, end - start, |i, j| self.get(i, start + j))
    }

    /// Stacks matrices vertically.
    pub fn vstack(parts: &[Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return Err(Error::shape("vstack: column counts differ"));
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            data.extend_from_slice(&m.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Concatenates matrices side by side.
    pub fn hstack(parts: &[Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if parts.iter().any(|m| m.rows != rows) {
            return Err(Error::shape("hstack: row counts differ"));
        }
        let cols = parts.iter().map(|m| m.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for m in parts {
                data.extend_from_slice(m.row(i));
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn exp(&self) -> Matrix {
        self.map(f64::exp)
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        self.map(|x| x * factor)
    }

    /// Subtracts `v[i]` from every entry of row `i`.
    pub fn sub_row_broadcast(&self, v: &[f64]) -> Result<Matrix> {
        if v.len() != self.rows {
            return Err(Error::shape(format!(
                "row vector of length {} for {} rows",
                v.len(),
                self.rows
            )));
        }
        Ok(Matrix::from_fn(self.rows, self.cols, |i, j| {
            self.get(i, j) - v[i]
        }))
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a * b)
    }

    /// `self += other`, entry by entry.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.check_same_shape(other)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|x| x.abs()).fold(0.0, f64::max)
    }

    /// True when every entry has the same bit pattern as in `other`.
    pub fn bit_eq(&self, other: &Matrix) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// `a · b`, or `a · bᵀ` when `transpose_b` is set.
///
/// Each output entry is accumulated over the inner index in increasing order.
pub fn matmul(a: &Matrix, b: &Matrix, transpose_b: bool) -> Result<Matrix> {
    let (inner_b, out_cols) = if transpose_b {
        (b.cols, b.rows)
    } else {
        (b.rows, b.cols)
    };
    if a.cols != inner_b {
        return Err(Error::shape(format!(
            "matmul {}x{} by {}x{}{}",
            a.rows,
            a.cols,
            b.rows,
            b.cols,
            if transpose_b { "ᵀ" } else { "" }
        )));
    }
    let mut out = Matrix::zeros(a.rows, out_cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..out_cols {
            let mut acc = 0.0;
            if transpose_b {
                let b_row = b.row(j);
                for k in 0..a.cols {
                    acc += a_row[k] * b_row[k];
                }
            } else {
                for k in 0..a.cols {
                    acc += a_row[k] * b.data[k * b.cols + j];
                }
            }
            out.data[i * out_cols + j] = acc;
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_transpose_a(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::shape(format!(
            "matmul {}x{}ᵀ by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for i in 0..a.cols {
        for j in 0..b.cols {
            let mut acc = 0.0;
            for k in 0..a.rows {
                acc += a.data[k * a.cols + i] * b.data[k * b.cols + j];
            }
            out.data[i * b.cols + j] = acc;
        }
    }
    Ok(out)
}

pub fn rowmax(m: &Matrix) -> Result<Vec<f64>> {
    non_empty(m)?;
    Ok((0..m.rows)
        .map(|i| m.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

pub fn rowsum(m: &Matrix) -> Result<Vec<f64>> {
    non_empty(m)?;
    Ok((0..m.rows)
        .map(|i| {
            let mut acc = 0.0;
            for &x in m.row(i) {
                acc += x;
            }
            acc
        })
        .collect())
}

fn non_empty(m: &Matrix) -> Result<()> {
    if m.rows == 0 || m.cols == 0 {
        return Err(Error::shape(format!("empty {}x{} matrix", m.rows, m.cols)));
    }
    Ok(())
}

/// Central-difference gradient of a scalar function of `x`, one entry at a time.
pub fn central_difference(x: &Matrix, step: f64, f: impl Fn(&Matrix) -> f64) -> Matrix {
    let mut grad = Matrix::zeros(x.rows, x.cols);
    let mut probe = x.clone();
    for idx in 0..x.data.len() {
        let orig = x.data[idx];
        probe.data[idx] = orig + step;
        let plus = f(&probe);
        probe.data[idx] = orig - step;
        let minus = f(&probe);
        probe.data[idx] = orig;
        grad.data[idx] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// `max|a - b| / max|b|`, with the denominator floored at `1e-12`.
pub fn rel_err(a: &Matrix, b: &Matrix) -> Result<f64> {
    Ok(a.max_abs_diff(b)? / b.max_abs().max(1e-12))
}

/// Seeded generator with a platform-independent stream.
#[derive(Clone, Debug)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Uniform sample in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.0.random_range(lo..hi)
    }

    /// `rows × cols` matrix with entries uniform in `[-1, 1)`.
    pub fn matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.uniform(-1.0, 1.0))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.random()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triple_loop(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = vec![vec![0.0; b.cols()]; a.rows()];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                for k in 0..a.cols() {
                    *cell += a.get(i, k) * b.get(k, j);
                }
            }
        }
        Matrix::from_rows(&out).unwrap()
    }

    #[test]
    fn identity_product_is_noop() {
        let m = Rng::new(1).matrix(3, 5);
        assert!(matmul(&Matrix::identity(3), &m, false).unwrap().bit_eq(&m));
    }

    #[test]
    fn scalar_product() {
        let a = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        let b = Matrix::from_vec(1, 1, vec![3.0]).unwrap();
        assert_eq!(matmul(&a, &b, false).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let mut rng = Rng::new(42);
        let a = rng.matrix(4, 3);
        let b = rng.matrix(3, 2);
        let got = matmul(&a, &b, false).unwrap();
        assert!(got.bit_eq(&triple_loop(&a, &b)));
        // transposed route walks the same inner order
        let bt = b.transpose();
        assert!(matmul(&a, &bt, true).unwrap().bit_eq(&got));
        assert!(matmul_transpose_a(&a.transpose(), &b).unwrap().bit_eq(&got));
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &b, false), Err(Error::Shape(_))));
        assert!(matmul(&a, &b, true).is_ok());
    }

    #[test]
    fn row_reductions() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(rowsum(&m).unwrap(), vec![3.0, 7.0]);
        assert_eq!(rowmax(&m).unwrap(), vec![2.0, 4.0]);
        let same = Matrix::filled(1, 4, -0.75);
        assert_eq!(rowmax(&same).unwrap(), vec![-0.75]);
        assert!(matches!(rowsum(&Matrix::zeros(0, 3)), Err(Error::Shape(_))));
        assert!(matches!(rowmax(&Matrix::zeros(2, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn exp_sub_matches_scalar_loop() {
        let mut rng = Rng::new(3);
        let m = rng.matrix(3, 4);
        let shift = rowmax(&m).unwrap();
        let got = m.sub_row_broadcast(&shift).unwrap().exp();
        for i in 0..3 {
            for j in 0..4 {
                let want = (m.get(i, j) - shift[i]).exp();
                assert_eq!(got.get(i, j).to_bits(), want.to_bits());
            }
        }
    }

    #[test]
    fn rng_stream_is_stable() {
        let a: Vec<u64> = {
            let mut r = Rng::new(9);
            (0..4).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = Rng::new(9);
            (0..4).map(|_| r.next_u64()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(Rng::new(9).next_u64(), Rng::new(10).next_u64());
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Matrix::from_vec(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn stacking_round_trips() {
        let m = Rng::new(5).matrix(6, 4);
        let top = m.slice_rows(0, 2);
        let bottom = m.slice_rows(2, 6);
        assert!(Matrix::vstack(&[top, bottom]).unwrap().bit_eq(&m));
        let left = m.slice_cols(0, 1);
        let right = m.slice_cols(1, 4);
        assert!(Matrix::hstack(&[left, right]).unwrap().bit_eq(&m));
    }
}
