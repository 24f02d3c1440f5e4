//! Dense row-major matrices, elementwise activations and seeded initialization.
//!
//! Everything downstream is generic over [`Scalar`], implemented for `f32`
//! (runtime precision) and `f64` (verification precision).

use std::fmt::{Debug, Display};

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub trait Scalar: Float + Default + Debug + Display + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Numeric precision selector for runs that pick the scalar type at runtime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    /// 32-bit floats.
    #[default]
    Runtime,
    /// 64-bit floats; every oracle comparison runs here.
    Verification,
}

impl Precision {
    pub fn bits(self) -> u32 {
        match self {
            Precision::Runtime => 32,
            Precision::Verification => 64,
        }
    }

    pub fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            32 => Some(Precision::Runtime),
            64 => Some(Precision::Verification),
            _ => None,
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Debug> Debug for Matrix<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Matrix[{}x{}]", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            f.debug_list().entries(self.data.chunks(self.cols.max(1))).finish()?;
        }
        Ok(())
    }
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. An empty slice yields a 0x0 matrix.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
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

    pub fn from_f64_rows(rows: &[&[f64]]) -> Result<Self> {
        let rows: Vec<Vec<T>> = rows
            .iter()
            .map(|r| r.iter().map(|&v| T::from_f64(v)).collect())
            .collect();
        Self::from_rows(&rows)
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

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    /// Checked row access.
    pub fn try_row(&self, i: usize) -> Result<&[T]> {
        if i >= self.rows {
            return Err(Error::IndexOutOfRange {
                what: "row",
                index: i,
                bound: self.rows,
            });
        }
        Ok(self.row(i))
    }

    /// Standard product `self · rhs`. Each output entry accumulates over the
    /// inner dimension left to right.
    pub fn matmul(&self, rhs: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != rhs.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (p, &a_ip) in a.iter().enumerate() {
                axpy(a_ip, rhs.row(p), o);
            }
        }
        Ok(out)
    }

    /// `self · rhsᵀ`; rows of both operands are dotted directly.
    pub fn matmul_transposed(&self, rhs: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != rhs.cols {
            return Err(Error::ShapeMismatch {
                op: "matmul_transposed",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..rhs.rows {
                out.data[i * rhs.rows + j] = dot(a, rhs.row(j));
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `x · self` for a row vector `x`.
    pub fn vec_mul(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.rows {
            return Err(Error::ShapeMismatch {
                op: "vec_mul",
                left: (1, x.len()),
                right: self.shape(),
            });
        }
        let mut out = vec![T::zero(); self.cols];
        for (p, &xp) in x.iter().enumerate() {
            axpy(xp, self.row(p), &mut out);
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&mut self, c: T) {
        self.data.iter_mut().for_each(|v| *v = *v * c);
    }

    pub fn add_assign(&mut self, rhs: &Matrix<T>) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch {
                op: "add_assign",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        self.data
            .iter_mut()
            .zip(&rhs.data)
            .for_each(|(a, &b)| *a = *a + b);
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.as_f64().abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix<T>) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a.as_f64() - b.as_f64()).abs())))
    }

    /// `max|a-b| / max(max|a|, max|b|)`, zero when both are zero.
    pub fn max_rel_diff(&self, other: &Matrix<T>) -> Result<f64> {
        let diff = self.max_abs_diff(other)?;
        let scale = self.max_abs().max(other.max_abs());
        Ok(if scale == 0.0 { diff } else { diff / scale })
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `y += a·x`
#[inline]
pub fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn silu<T: Scalar>(z: T) -> T {
    z * sigmoid(z)
}

/// d/dz of `z·sigmoid(z)`.
#[inline]
pub fn silu_grad<T: Scalar>(z: T) -> T {
    let s = sigmoid(z);
    s * (T::one() + z * (T::one() - s))
}

pub fn silu_matrix<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    m.map(silu)
}

pub fn softmax<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    let max = max_of(v, "softmax")?;
    let exps: Vec<T> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum = exps.iter().fold(T::zero(), |a, &b| a + b);
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

pub fn log_softmax<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    let max = max_of(v, "log_softmax")?;
    let sum = v.iter().fold(T::zero(), |a, &x| a + (x - max).exp());
    let log_z = max + sum.ln();
    Ok(v.iter().map(|&x| x - log_z).collect())
}

fn max_of<T: Scalar>(v: &[T], op: &'static str) -> Result<T> {
    v.iter()
        .copied()
        .reduce(T::max)
        .ok_or(Error::Empty { op })
}

/// Seeded ChaCha8 stream.
///
/// Stream split rule: `SeededRng::stream(seed, id)` uses the same 256-bit key
/// derived from `seed` and selects ChaCha stream `id`, so distinct ids never
/// overlap. `SeededRng::new(seed)` is stream 0.
#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::stream(seed, 0)
    }

    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// `k` distinct values from `[0, n)` in draw order.
    pub fn distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, n, k).into_vec()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }
}

/// Gaussian fill with mean 0 and standard deviation `std`, drawn row-major.
pub fn rng_normal<T: Scalar>(
    rng: &mut SeededRng,
    rows: usize,
    cols: usize,
    std: f64,
) -> Result<Matrix<T>> {
    if !(std > 0.0 && std.is_finite()) {
        return Err(crate::error::invalid(format!(
            "rng_normal: std must be positive, got {std}"
        )));
    }
    let data = (0..rows * cols)
        .map(|_| T::from_f64(rng.normal() * std))
        .collect();
    Matrix::from_vec(rows, cols, data)
}
