//! Dense numeric core: a row-major matrix, SiLU, softmax and a seeded RNG.
//!
//! Every dot product is accumulated in ascending index order by a single
//! thread, so results are bit-identical no matter how rows are scheduled
//! across a rayon pool.

use std::fmt::Debug;
use std::ops::Range;

use num_traits::Float;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Element type of a [`Matrix`]. Implemented for `f32` (storage) and `f64`
/// (verification).
pub trait Scalar: Float + Default + Debug + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dot-product accumulator width for [`Matrix::matmul_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Accumulate {
    /// Accumulate in the element type.
    #[default]
    Native,
    /// Accumulate in `f64`, round once on store.
    Wide,
}

#[derive(Clone, PartialEq)]
pub struct Matrix<T: Scalar = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Matrix<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("Matrix::new", (rows, cols), (data.len(), 1)));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
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

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("Matrix::from_rows", (rows.len(), cols), (1, r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Copy of the column block `range`.
    pub fn slice_cols(&self, range: Range<usize>) -> Result<Self> {
        if range.end > self.cols || range.start > range.end {
            return Err(Error::shape("slice_cols", self.shape(), (range.start, range.end)));
        }
        let width = range.len();
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[range.clone()]);
        }
        Ok(Self {
            rows: self.rows,
            cols: width,
            data,
        })
    }

    /// Copy of the row block `range`.
    pub fn slice_rows(&self, range: Range<usize>) -> Result<Self> {
        if range.end > self.rows || range.start > range.end {
            return Err(Error::shape("slice_rows", self.shape(), (range.start, range.end)));
        }
        Ok(Self {
            rows: range.len(),
            cols: self.cols,
            data: self.data[range.start * self.cols..range.end * self.cols].to_vec(),
        })
    }

    /// Rows of `self` picked by `index`, in that order.
    pub fn gather_rows(&self, index: &[usize]) -> Self {
        let mut data = Vec::with_capacity(index.len() * self.cols);
        for &r in index {
            data.extend_from_slice(self.row(r));
        }
        Self {
            rows: index.len(),
            cols: self.cols,
            data,
        }
    }

    /// Concatenate along columns.
    pub fn hstack(parts: &[Matrix<T>]) -> Result<Self> {
        let rows = parts.first().map_or(0, Matrix::rows);
        if let Some(bad) = parts.iter().find(|p| p.rows != rows) {
            return Err(Error::shape("hstack", (rows, 0), bad.shape()));
        }
        let cols = parts.iter().map(Matrix::cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Self { rows, cols, data })
    }

    /// Concatenate along rows.
    pub fn vstack(parts: &[Matrix<T>]) -> Result<Self> {
        let cols = parts.first().map_or(0, Matrix::cols);
        if let Some(bad) = parts.iter().find(|p| p.cols != cols) {
            return Err(Error::shape("vstack", (0, cols), bad.shape()));
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            rows: data.len() / cols.max(1),
            cols,
            data,
        })
    }

    pub fn matmul(&self, rhs: &Matrix<T>) -> Result<Self> {
        self.matmul_with(rhs, Accumulate::Native)
    }

    /// Matrix product. Each output element is a single ascending-`k` sum,
    /// so the result does not depend on the thread schedule.
    pub fn matmul_with(&self, rhs: &Matrix<T>, acc: Accumulate) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::shape("matmul", self.shape(), rhs.shape()));
        }
        let (inner, n) = (self.cols, rhs.cols);
        let mut out = vec![T::zero(); self.rows * n];
        if n == 0 {
            return Ok(Self {
                rows: self.rows,
                cols: n,
                data: out,
            });
        }
        match acc {
            Accumulate::Native => {
                out.par_chunks_mut(n).enumerate().for_each(|(i, o)| {
                    let a = &self.data[i * inner..(i + 1) * inner];
                    for (k, &aik) in a.iter().enumerate() {
                        let b = &rhs.data[k * n..(k + 1) * n];
                        for (oj, &bkj) in o.iter_mut().zip(b) {
                            *oj = *oj + aik * bkj;
                        }
                    }
                });
            }
            Accumulate::Wide => {
                out.par_chunks_mut(n).enumerate().for_each(|(i, o)| {
                    let a = &self.data[i * inner..(i + 1) * inner];
                    let mut wide = vec![0.0f64; n];
                    for (k, &aik) in a.iter().enumerate() {
                        let aik = aik.as_f64();
                        let b = &rhs.data[k * n..(k + 1) * n];
                        for (wj, &bkj) in wide.iter_mut().zip(b) {
                            *wj += aik * bkj.as_f64();
                        }
                    }
                    for (oj, w) in o.iter_mut().zip(wide) {
                        *oj = T::of(w);
                    }
                });
            }
        }
        Ok(Self {
            rows: self.rows,
            cols: n,
            data: out,
        })
    }

    pub fn add(&self, rhs: &Matrix<T>) -> Result<Self> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix<T>) -> Result<Self> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, rhs: &Matrix<T>) -> Result<Self> {
        self.zip_with(rhs, "hadamard", |a, b| a * b)
    }

    pub fn add_assign(&mut self, rhs: &Matrix<T>) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape("add_assign", self.shape(), rhs.shape()));
        }
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, rhs: &Matrix<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape(op, self.shape(), rhs.shape()));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Max absolute difference divided by the max absolute entry of
    /// `reference` (plain max absolute difference when the reference is zero).
    pub fn max_rel_diff(&self, reference: &Matrix<T>) -> Result<f64> {
        if self.shape() != reference.shape() {
            return Err(Error::shape("max_rel_diff", self.shape(), reference.shape()));
        }
        let diff = self
            .data
            .iter()
            .zip(&reference.data)
            .fold(0.0f64, |m, (a, b)| m.max((a.as_f64() - b.as_f64()).abs()));
        let scale = reference.max_abs().as_f64();
        Ok(if scale > 0.0 { diff / scale } else { diff })
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

/// d/dx silu(x) = sigmoid(x)·(1 + x·(1 − sigmoid(x))).
#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

pub fn softmax<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out)?;
    Ok(out)
}

pub fn softmax_in_place<T: Scalar>(v: &mut [T]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::EmptyInput("softmax"));
    }
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in v.iter_mut() {
        *x = *x / sum;
    }
    Ok(())
}

/// Seeded generator used for every fixture and initialisation in the crate.
///
/// Backed by ChaCha8, whose output stream is fixed by the seed on every
/// platform.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child generator, seeded from this one's stream.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.inner.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        let z: f64 = self.inner.sample(StandardNormal);
        mean + std * z
    }

    pub fn normal_matrix<T: Scalar>(&mut self, rows: usize, cols: usize, std: f64) -> Matrix<T> {
        Matrix::from_fn(rows, cols, |_, _| T::of(self.normal(0.0, std)))
    }

    pub fn uniform_matrix<T: Scalar>(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix<T> {
        Matrix::from_fn(rows, cols, |_, _| T::of(lo + (hi - lo) * self.uniform()))
    }

    /// `k` distinct indices from `0..n`, uniformly, via a partial
    /// Fisher–Yates shuffle.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let k = k.min(n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}
