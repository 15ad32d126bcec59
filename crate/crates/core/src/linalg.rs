//! Dense row-major matrices and the handful of kernels everything else is
//! built on.
//!
//! All products accumulate over the shared dimension in ascending index
//! order, so results are deterministic across runs and platforms.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, Index, IndexMut, MulAssign, Range, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Floating-point scalar used by the kernels. Implemented for `f32` and `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    const BYTES: usize;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }
}

impl Real for f32 {
    const BYTES: usize = 4;
}

impl Real for f64 {
    const BYTES: usize = 8;
}

#[derive(Clone, PartialEq)]
pub struct Matrix<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            f.debug_list().entries(self.data.iter()).finish()
        } else {
            f.write_str("[..]")
        }
    }
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    left: (rows.len(), cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[T]> {
        // chunks_exact panics on zero, and a 0-column matrix still has rows
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Copy of rows `range`.
    pub fn row_range(&self, range: Range<usize>) -> Self {
        let data = self.data[range.start * self.cols..range.end * self.cols].to_vec();
        Self {
            rows: range.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Columns `start..start + width` as a new matrix.
    pub fn col_block(&self, start: usize, width: usize) -> Self {
        assert!(start + width <= self.cols, "column block out of range");
        Self::from_fn(self.rows, width, |i, j| self[(i, start + j)])
    }

    pub fn set_col_block(&mut self, start: usize, block: &Matrix<T>) {
        assert_eq!(block.rows, self.rows, "column block row mismatch");
        assert!(start + block.cols <= self.cols, "column block out of range");
        for i in 0..self.rows {
            let dst = &mut self.row_mut(i)[start..start + block.cols];
            dst.copy_from_slice(block.row(i));
        }
    }

    pub fn add_col_block(&mut self, start: usize, block: &Matrix<T>) {
        assert_eq!(block.rows, self.rows, "column block row mismatch");
        for i in 0..self.rows {
            let dst = &mut self.row_mut(i)[start..start + block.cols];
            for (d, &s) in dst.iter_mut().zip(block.row(i)) {
                *d += s;
            }
        }
    }

    /// Stack matrices vertically. All parts must share a column count.
    pub fn vstack(parts: &[Matrix<T>]) -> Result<Self> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::with_capacity(parts.iter().map(|m| m.data.len()).sum());
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::Shape {
                    op: "vstack",
                    left: (rows, cols),
                    right: p.shape(),
                });
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Self { rows, cols, data })
    }

    pub fn hstack(parts: &[Matrix<T>]) -> Result<Self> {
        let rows = parts.first().map_or(0, |m| m.rows);
        let cols: usize = parts.iter().map(|m| m.cols).sum();
        let mut out = Self::zeros(rows, cols);
        let mut at = 0;
        for p in parts {
            if p.rows != rows {
                return Err(Error::Shape {
                    op: "hstack",
                    left: (rows, at),
                    right: p.shape(),
                });
            }
            out.set_col_block(at, p);
            at += p.cols;
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn add(&self, other: &Matrix<T>) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix<T>) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix<T>) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    fn zip_with(&self, other: &Matrix<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Matrix<T>) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[T]) {
        assert_eq!(bias.len(), self.cols, "bias length mismatch");
        for i in 0..self.rows {
            for (v, &b) in self.row_mut(i).iter_mut().zip(bias) {
                *v += b;
            }
        }
    }

    /// Multiplies row `i` by `scale[i]`.
    pub fn scale_rows(&self, scale: &[T]) -> Self {
        assert_eq!(scale.len(), self.rows, "row scale length mismatch");
        let mut out = self.clone();
        for (i, &s) in scale.iter().enumerate() {
            for v in out.row_mut(i) {
                *v *= s;
            }
        }
        out
    }

    pub fn col_sums(&self) -> Vec<T> {
        let mut sums = vec![T::zero(); self.cols];
        for row in self.row_iter() {
            for (s, &v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        sums
    }

    pub fn row_sums(&self) -> Vec<T> {
        self.row_iter().map(|r| r.iter().copied().sum()).collect()
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// `‖a − b‖_F / ‖b‖_F`, falling back to the absolute difference when `b` is zero.
pub fn rel_diff<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> T {
    assert_eq!(a.shape(), b.shape(), "rel_diff shape mismatch");
    let num = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<T>()
        .sqrt();
    let den = b.frobenius_norm();
    if den > T::zero() {
        num / den
    } else {
        num
    }
}

pub fn max_abs_diff<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> T {
    assert_eq!(a.shape(), b.shape(), "max_abs_diff shape mismatch");
    a.data
        .iter()
        .zip(&b.data)
        .fold(T::zero(), |m, (&x, &y)| m.max((x - y).abs()))
}

/// `a · b`.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (p, q, r) = (a.rows, a.cols, b.cols);
    let mut c = Matrix::zeros(p, r);
    for i in 0..p {
        let arow = a.row(i);
        let crow = &mut c.data[i * r..(i + 1) * r];
        for (j, &aij) in arow.iter().enumerate().take(q) {
            let brow = &b.data[j * r..(j + 1) * r];
            for (c_ik, &b_jk) in crow.iter_mut().zip(brow) {
                *c_ik += aij * b_jk;
            }
        }
    }
    Ok(c)
}

/// `aᵀ · b` without materializing the transpose. `a` is P×Q, `b` is P×R.
pub fn matmul_tn<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows != b.rows {
        return Err(Error::Shape {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (q, r) = (a.cols, b.cols);
    let mut c = Matrix::zeros(q, r);
    for p in 0..a.rows {
        let arow = a.row(p);
        let brow = b.row(p);
        for (qi, &a_pq) in arow.iter().enumerate() {
            let crow = &mut c.data[qi * r..(qi + 1) * r];
            for (c_qr, &b_pr) in crow.iter_mut().zip(brow) {
                *c_qr += a_pq * b_pr;
            }
        }
    }
    Ok(c)
}

/// `a · bᵀ`. `a` is P×Q, `b` is R×Q.
pub fn matmul_nt<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.cols {
        return Err(Error::Shape {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut c = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for k in 0..b.rows {
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(b.row(k)) {
                acc += x * y;
            }
            c[(i, k)] = acc;
        }
    }
    Ok(c)
}

/// `x · w + b` with `w` stored in×out.
pub fn affine<T: Real>(x: &Matrix<T>, w: &Matrix<T>, b: &[T]) -> Result<Matrix<T>> {
    let mut y = matmul(x, w)?;
    if b.len() != y.cols {
        return Err(Error::Shape {
            op: "affine bias",
            left: y.shape(),
            right: (1, b.len()),
        });
    }
    y.add_row_vector(b);
    Ok(y)
}

/// In-place softmax of one row with max subtraction.
pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax. Rejects NaN/Inf input.
pub fn softmax_rows<T: Real>(z: &Matrix<T>) -> Result<Matrix<T>> {
    if !z.is_finite() {
        return Err(Error::NonFinite("softmax input"));
    }
    let mut out = z.clone();
    for i in 0..out.rows {
        softmax_in_place(out.row_mut(i));
    }
    Ok(out)
}

/// Per-row normalization to zero mean and unit variance, then `gain ⊙ · + shift`.
pub fn layer_norm<T: Real>(x: &Matrix<T>, gain: &[T], shift: &[T], eps: T) -> Result<Matrix<T>> {
    if gain.len() != x.cols || shift.len() != x.cols {
        return Err(Error::Shape {
            op: "layer_norm",
            left: x.shape(),
            right: (gain.len(), shift.len()),
        });
    }
    if eps <= T::zero() {
        return Err(Error::invalid("layer_norm eps must be positive"));
    }
    let c = T::from_usize(x.cols).unwrap();
    let mut out = Matrix::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() / c;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / c;
        let inv = (var + eps).sqrt().recip();
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = (row[j] - mean) * inv * gain[j] + shift[j];
        }
    }
    Ok(out)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh-approximated GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_A * x * x)
}

/// Seeded generator. ChaCha8 keeps streams identical across platforms.
#[derive(Clone, Debug)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn seed(seed: u64) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.0.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.0)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    pub fn uniform_matrix<T: Real>(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix<T> {
        Matrix::from_fn(rows, cols, |_, _| T::from_f64_lossy(self.uniform(lo, hi)))
    }

    pub fn normal_matrix<T: Real>(&mut self, rows: usize, cols: usize) -> Matrix<T> {
        Matrix::from_fn(rows, cols, |_, _| T::from_f64_lossy(self.normal()))
    }

    /// Derive an independent generator; used to give subsystems their own stream.
    pub fn fork(&mut self) -> Rng {
        Rng::seed(self.0.random::<u64>())
    }

    pub fn inner(&mut self) -> &mut ChaCha8Rng {
        &mut self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), b.cols(), |i, k| {
            let mut s = 0.0;
            for j in 0..a.cols() {
                s += a[(i, j)] * b[(j, k)];
            }
            s
        })
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut rng = Rng::seed(1);
        let a: Matrix = rng.uniform_matrix(3, 3, -1.0, 1.0);
        assert_eq!(matmul(&Matrix::identity(3), &a).unwrap(), a);
        let c = matmul(
            &Matrix::from_vec(1, 1, vec![2.0]).unwrap(),
            &Matrix::from_vec(1, 1, vec![3.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(c.data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::seed(7);
        let a: Matrix = rng.uniform_matrix(5, 4, -1.0, 1.0);
        let b: Matrix = rng.uniform_matrix(4, 3, -1.0, 1.0);
        let c = matmul(&a, &b).unwrap();
        assert!(rel_diff(&c, &naive(&a, &b)) <= 1e-12);
        let tn = matmul_tn(&a.transpose(), &b).unwrap();
        assert!(rel_diff(&tn, &c) <= 1e-12);
        let nt = matmul_nt(&a, &b.transpose()).unwrap();
        assert!(rel_diff(&nt, &c) <= 1e-12);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a: Matrix = Matrix::zeros(2, 3);
        let b: Matrix = Matrix::zeros(2, 3);
        match matmul(&a, &b) {
            Err(Error::Shape { left, right, .. }) => {
                assert_eq!(left, (2, 3));
                assert_eq!(right, (2, 3));
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_cases() {
        let z = Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        assert_eq!(softmax_rows(&z).unwrap().data(), &[0.5, 0.5]);

        let mut rng = Rng::seed(3);
        let col: Matrix = rng.uniform_matrix(6, 1, -50.0, 50.0);
        assert!(softmax_rows(&col).unwrap().data().iter().all(|&v| v == 1.0));

        let z: Matrix = rng.uniform_matrix(8, 5, -3.0, 3.0);
        let shifted = z.map(|v| v + 1000.0);
        let (a, b) = (softmax_rows(&z).unwrap(), softmax_rows(&shifted).unwrap());
        assert!(max_abs_diff(&a, &b) <= 1e-12);

        let bad = Matrix::from_vec(1, 2, vec![f64::NAN, 0.0]).unwrap();
        assert!(softmax_rows(&bad).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let x = Matrix::from_vec(1, 4, vec![2.5; 4]).unwrap();
        let ln = layer_norm(&x, &[1.0; 4], &[0.0; 4], 1e-5).unwrap();
        assert!(ln.data().iter().all(|&v| v == 0.0));

        let mut rng = Rng::seed(11);
        let x: Matrix = rng.uniform_matrix(4, 8, -2.0, 2.0);
        let shift: Vec<f64> = (0..8).map(|j| j as f64).collect();
        let ln = layer_norm(&x, &[0.0; 8], &shift, 1e-5).unwrap();
        for row in ln.row_iter() {
            assert_eq!(row, &shift[..]);
        }

        let eps = 1e-5;
        let ln = layer_norm(&x, &[1.0; 8], &[0.0; 8], eps).unwrap();
        for row in ln.row_iter() {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() <= 1e-12);
            assert!((var - 1.0).abs() <= 2.0 * eps);
        }
        assert!(layer_norm(&x, &[1.0; 8], &[0.0; 8], 0.0).is_err());
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.2] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn rng_reproducible() {
        let a: Matrix = Rng::seed(99).uniform_matrix(4, 4, -1.0, 1.0);
        let b: Matrix = Rng::seed(99).uniform_matrix(4, 4, -1.0, 1.0);
        assert_eq!(a.data(), b.data());
    }
}
