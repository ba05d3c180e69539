//! Dense row-major matrices and the small set of kernels everything else is
//! built from.
//!
//! Summation order is fixed so results are bitwise reproducible on a given
//! platform:
//!
//! * reductions (`dot`, norms, means, softmax denominators) run sequentially
//!   in ascending index order into an `f64` accumulator;
//! * matrix products go through the single-threaded blocked gemm in
//!   `matrixmultiply`, whose panel order depends only on the shapes and the
//!   CPU feature set detected at startup.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
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
            write!(f, "[..]")
        }
    }
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape("Matrix::new", format!("empty shape {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{rows}x{cols} needs {} elements, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "empty shape {rows}x{cols}");
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(rows > 0 && cols > 0, "empty shape {rows}x{cols}");
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from nested rows; panics on ragged input. Mostly for tests.
    pub fn from_rows(rows: &[&[T]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self::new(rows.len(), cols, rows.iter().flat_map(|r| r.iter().copied()).collect()).expect("non-empty rows")
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
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    fn zip_with(&self, op: &'static str, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Copies columns `start..start + len`.
    pub fn columns(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.cols && len > 0, "column range out of bounds");
        let mut data = Vec::with_capacity(self.rows * len);
        for r in self.iter_rows() {
            data.extend_from_slice(&r[start..start + len]);
        }
        Self { rows: self.rows, cols: len, data }
    }

    /// Copies rows `start..start + len`.
    pub fn row_block(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.rows && len > 0, "row range out of bounds");
        Self { rows: len, cols: self.cols, data: self.data[start * self.cols..(start + len) * self.cols].to_vec() }
    }

    /// Writes `block` into columns starting at `start`.
    pub fn set_columns(&mut self, start: usize, block: &Self) {
        assert_eq!(block.rows, self.rows);
        assert!(start + block.cols <= self.cols);
        for i in 0..self.rows {
            let dst = &mut self.data[i * self.cols + start..i * self.cols + start + block.cols];
            dst.copy_from_slice(block.row(i));
        }
    }
}

fn gemm_into<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (isize, isize),
    b: &[T],
    (rsb, csb): (isize, isize),
    out: &mut [T],
) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    // SAFETY: the caller passes slices whose lengths match the described
    // strided views; `out` is a fresh, distinct buffer.
    unsafe {
        T::gemm(m, k, n, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, out.as_mut_ptr(), n as isize, 1);
    }
}

/// `a * b`.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("lhs {}x{} cannot multiply rhs {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    gemm_into(a.rows, a.cols, b.cols, &a.data, (a.cols as isize, 1), &b.data, (b.cols as isize, 1), &mut out.data);
    Ok(out)
}

/// `a * bᵀ` without materializing the transpose.
pub fn matmul_nt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.cols {
        return Err(Error::shape(
            "matmul_nt",
            format!("lhs {}x{} cannot multiply transposed rhs {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    gemm_into(a.rows, a.cols, b.rows, &a.data, (a.cols as isize, 1), &b.data, (1, b.cols as isize), &mut out.data);
    Ok(out)
}

/// `aᵀ * b` without materializing the transpose.
pub fn matmul_tn<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows != b.rows {
        return Err(Error::shape(
            "matmul_tn",
            format!("transposed lhs {}x{} cannot multiply rhs {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    gemm_into(a.cols, a.rows, b.cols, &a.data, (1, a.cols as isize), &b.data, (b.cols as isize, 1), &mut out.data);
    Ok(out)
}

pub fn transpose<T: Scalar>(a: &Matrix<T>) -> Matrix<T> {
    let mut data = Vec::with_capacity(a.data.len());
    for j in 0..a.cols {
        for i in 0..a.rows {
            data.push(a.data[i * a.cols + j]);
        }
    }
    Matrix { rows: a.cols, cols: a.rows, data }
}

/// Sum of squares in ascending index order, accumulated in `f64`.
pub fn sum_of_squares<T: Scalar>(xs: &[T]) -> f64 {
    xs.iter().fold(0.0f64, |acc, &v| {
        let v = v.as_f64();
        acc + v * v
    })
}

pub fn frobenius_norm<T: Scalar>(a: &Matrix<T>) -> T {
    T::of(sum_of_squares(&a.data).sqrt())
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0f64, |acc, (&x, &y)| acc + x.as_f64() * y.as_f64())
}

pub fn l2_norm<T: Scalar>(a: &[T]) -> f64 {
    sum_of_squares(a).sqrt()
}

/// Which positions of each softmax row participate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SupportMask {
    /// Every position.
    Full,
    /// Row `i` sees columns `0..=i`.
    Causal,
    /// Explicit row-major mask with the same shape as the logits.
    Explicit(Vec<bool>),
}

impl SupportMask {
    /// Number of supported positions in `row` of a `cols`-wide matrix.
    pub fn support_len(&self, row: usize, cols: usize) -> usize {
        match self {
            SupportMask::Full => cols,
            SupportMask::Causal => (row + 1).min(cols),
            SupportMask::Explicit(m) => m[row * cols..(row + 1) * cols].iter().filter(|&&b| b).count(),
        }
    }

    #[inline]
    fn allows(&self, row: usize, col: usize, cols: usize) -> bool {
        match self {
            SupportMask::Full => true,
            SupportMask::Causal => col <= row,
            SupportMask::Explicit(m) => m[row * cols + col],
        }
    }
}

/// How the per-row maximum is used to keep `exp` in range.
///
/// Only [`Stabilizer::SubtractMax`] is correct; the other variant exists so
/// validation suites can prove they catch a broken kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stabilizer {
    #[default]
    SubtractMax,
    /// Adds the row maximum instead of subtracting it.
    NegatedMax,
}

/// Softmax of every row over its supported positions; masked entries are 0.
pub fn row_softmax<T: Scalar>(logits: &Matrix<T>, mask: &SupportMask) -> Result<Matrix<T>> {
    row_softmax_with(logits, mask, Stabilizer::SubtractMax)
}

pub fn row_softmax_with<T: Scalar>(
    logits: &Matrix<T>,
    mask: &SupportMask,
    stabilizer: Stabilizer,
) -> Result<Matrix<T>> {
    if let SupportMask::Explicit(m) = mask {
        if m.len() != logits.data.len() {
            return Err(Error::shape(
                "row_softmax",
                format!("mask has {} entries for {}x{} logits", m.len(), logits.rows, logits.cols),
            ));
        }
    }
    let mut out = logits.clone();
    let cols = out.cols;
    for i in 0..out.rows {
        let row = &mut out.data[i * cols..(i + 1) * cols];
        let done = match mask {
            SupportMask::Full => softmax_dense(row, stabilizer),
            SupportMask::Causal => {
                let (head, tail) = row.split_at_mut((i + 1).min(cols));
                tail.fill(T::zero());
                softmax_dense(head, stabilizer)
            }
            SupportMask::Explicit(_) => softmax_row(row, |j| mask.allows(i, j, cols), stabilizer),
        };
        done.map_err(|_| Error::contract(format!("row_softmax: row {i} has empty support")))?;
    }
    Ok(out)
}

/// [`softmax_row`] with every position supported.
fn softmax_dense<T: Scalar>(row: &mut [T], stabilizer: Stabilizer) -> std::result::Result<(), ()> {
    let max = row.iter().copied().fold(T::neg_infinity(), |m, v| if v > m { v } else { m });
    if row.is_empty() {
        return Err(());
    }
    let shift = match stabilizer {
        Stabilizer::SubtractMax => max,
        Stabilizer::NegatedMax => -max,
    };
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - shift).exp();
        sum += v.as_f64();
    }
    let inv = T::of(1.0 / sum);
    for v in row.iter_mut() {
        *v = *v * inv;
    }
    Ok(())
}

/// In-place softmax of one row; `allowed(j)` selects the support.
pub(crate) fn softmax_row<T: Scalar>(
    row: &mut [T],
    allowed: impl Fn(usize) -> bool,
    stabilizer: Stabilizer,
) -> std::result::Result<(), ()> {
    let mut max = T::neg_infinity();
    let mut any = false;
    for (j, &v) in row.iter().enumerate() {
        if allowed(j) {
            any = true;
            if v > max {
                max = v;
            }
        }
    }
    if !any {
        return Err(());
    }
    let shift = match stabilizer {
        Stabilizer::SubtractMax => max,
        Stabilizer::NegatedMax => -max,
    };
    let mut sum = 0.0f64;
    for (j, v) in row.iter_mut().enumerate() {
        if allowed(j) {
            let e = (*v - shift).exp();
            sum += e.as_f64();
            *v = e;
        } else {
            *v = T::zero();
        }
    }
    let inv = T::of(1.0 / sum);
    for (j, v) in row.iter_mut().enumerate() {
        if allowed(j) {
            *v = *v * inv;
        }
    }
    Ok(())
}

fn check_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("lengths {a} and {b} differ")));
    }
    Ok(())
}

/// `x * gain / sqrt(mean(x²) + eps)`.
pub fn rms_norm<T: Scalar>(x: &[T], gain: &[T], eps: T) -> Result<Vec<T>> {
    check_len("rms_norm", x.len(), gain.len())?;
    let mut out = vec![T::zero(); x.len()];
    rms_norm_into(x, gain, eps, &mut out);
    Ok(out)
}

pub(crate) fn rms_norm_into<T: Scalar>(x: &[T], gain: &[T], eps: T, out: &mut [T]) {
    let ms = sum_of_squares(x) / x.len() as f64;
    let denom = (ms + eps.as_f64()).sqrt();
    // x = 0 with eps = 0 would be 0/0; a zero vector normalizes to zero.
    let inv = if denom > 0.0 { T::of(1.0 / denom) } else { T::zero() };
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
}

/// Mean/variance normalization with affine gain and bias.
pub fn layer_norm<T: Scalar>(x: &[T], gain: &[T], bias: &[T], eps: T) -> Result<Vec<T>> {
    check_len("layer_norm", x.len(), gain.len())?;
    check_len("layer_norm", x.len(), bias.len())?;
    let mut out = vec![T::zero(); x.len()];
    layer_norm_into(x, gain, bias, eps, &mut out);
    Ok(out)
}

pub(crate) fn layer_norm_into<T: Scalar>(x: &[T], gain: &[T], bias: &[T], eps: T, out: &mut [T]) {
    let n = x.len() as f64;
    let mean = x.iter().fold(0.0f64, |a, &v| a + v.as_f64()) / n;
    let var = x.iter().fold(0.0f64, |a, &v| {
        let d = v.as_f64() - mean;
        a + d * d
    }) / n;
    let denom = (var + eps.as_f64()).sqrt();
    let inv = if denom > 0.0 { 1.0 / denom } else { 0.0 };
    for (((o, &v), &g), &b) in out.iter_mut().zip(x).zip(gain).zip(bias) {
        *o = T::of((v.as_f64() - mean) * inv) * g + b;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x³)))`
    Gelu,
    /// `x / (1 + exp(-x))`
    Silu,
}

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

impl Activation {
    #[inline]
    pub fn apply_scalar<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Gelu => {
                let inner = T::of(GELU_SQRT_2_OVER_PI) * (x + T::of(GELU_CUBIC) * x * x * x);
                T::of(0.5) * x * (T::one() + inner.tanh())
            }
            Activation::Silu => x / (T::one() + (-x).exp()),
        }
    }

    pub fn apply<T: Scalar>(self, x: &[T]) -> Vec<T> {
        x.iter().map(|&v| self.apply_scalar(v)).collect()
    }
}

/// Cosine similarity in `[-1, 1]`. Zero-norm inputs are rejected.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    cosine_f64(a, b).map(T::of)
}

/// [`cosine`] without rounding the result back to `T`.
pub fn cosine_f64<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    check_len("cosine", a.len(), b.len())?;
    let (sa, sb) = (sum_of_squares(a), sum_of_squares(b));
    if sa == 0.0 || sb == 0.0 {
        return Err(Error::contract("cosine of a zero-norm vector"));
    }
    // sqrt of a correctly rounded square is exact, so cos(a, a) == 1
    let denom = match sa * sb {
        p if p.is_finite() => p.sqrt(),
        _ => sa.sqrt() * sb.sqrt(),
    };
    Ok((dot(a, b) / denom).clamp(-1.0, 1.0))
}

/// Column means of `rows`, accumulated in `f64`.
pub fn column_mean<T: Scalar>(rows: &Matrix<T>) -> Vec<T> {
    let mut acc = vec![0.0f64; rows.cols];
    for r in rows.iter_rows() {
        for (a, &v) in acc.iter_mut().zip(r) {
            *a += v.as_f64();
        }
    }
    let n = rows.rows as f64;
    acc.into_iter().map(|a| T::of(a / n)).collect()
}

/// Subtracts the column-wise mean row from every row.
pub fn mean_center<T: Scalar>(rows: &Matrix<T>) -> Matrix<T> {
    let mean = column_mean(rows);
    let mut out = rows.clone();
    for i in 0..out.rows {
        for (v, &m) in out.row_mut(i).iter_mut().zip(&mean) {
            *v = *v - m;
        }
    }
    out
}
