//! Dense rank-2 arrays in row-major order.

use crate::error::Error;
use crate::scalar::{lit, Scalar};
use crate::Result;

/// Dense rank-2 real array; rows are tokens, columns are channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2<T: Scalar> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor2<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Tensor2::from_vec",
                format!("{} values for {rows}x{cols}", rows * cols),
                format!("{}", data.len()),
            ));
        }
        Ok(Tensor2 { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|v| v.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::dim("Tensor2::from_rows", format!("{c}"), format!("{}", row.len())));
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor2 { rows: r, cols: c, data })
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t[(i, i)] = T::one();
        }
        t
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape(), other.shape(), "zip_map shape mismatch");
        Tensor2 {
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

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul_elem(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[(c, r)] = self[(r, c)];
            }
        }
        out
    }

    /// self (m×k) · other (k×n).
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul inner dim mismatch");
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Self::zeros(m, n);
        for i in 0..m {
            for p in 0..k {
                let a = self[(i, p)];
                if a == T::zero() {
                    continue;
                }
                let brow = other.row(p);
                let orow = out.row_mut(i);
                for j in 0..n {
                    orow[j] += a * brow[j];
                }
            }
        }
        out
    }

    /// self (m×k) · otherᵀ (k×n from n×k).
    pub fn matmul_nt(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.cols, "matmul_nt inner dim mismatch");
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = Self::zeros(m, n);
        for i in 0..m {
            let arow = self.row(i);
            for j in 0..n {
                let brow = other.row(j);
                let mut acc = T::zero();
                for p in 0..k {
                    acc += arow[p] * brow[p];
                }
                out[(i, j)] = acc;
            }
        }
        out
    }

    /// selfᵀ (k×m from m×k) · other (m×n).
    pub fn matmul_tn(&self, other: &Self) -> Self {
        assert_eq!(self.rows, other.rows, "matmul_tn inner dim mismatch");
        let (k, m, n) = (self.cols, self.rows, other.cols);
        let mut out = Self::zeros(k, n);
        for p in 0..m {
            let arow = self.row(p);
            let brow = other.row(p);
            for i in 0..k {
                let a = arow[i];
                let orow = out.row_mut(i);
                for j in 0..n {
                    orow[j] += a * brow[j];
                }
            }
        }
        out
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    pub fn frobenius_norm(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &x| acc + x * x)
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        for (i, x) in self.data.iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite value {x} at flat index {i} in {context}"
                )));
            }
        }
        Ok(())
    }

    /// Maximum absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs()))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor2<U> {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::from_f64c(x.to_f64c())).collect(),
        }
    }
}

impl<T: Scalar> std::ops::Index<(usize, usize)> for Tensor2<T> {
    type Output = T;
    fn index(&self, (r, c): (usize, usize)) -> &T {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl<T: Scalar> std::ops::IndexMut<(usize, usize)> for Tensor2<T> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Rotary rotation of a single row vector at the given position.
///
/// Channel pair (2t, 2t+1) is rotated by `position * base^(-2t/d)`; the
/// operation preserves the Euclidean norm.
pub fn rope_rotate<T: Scalar>(x: &Tensor2<T>, position: usize, base: T) -> Result<Tensor2<T>> {
    if x.cols() % 2 != 0 {
        return Err(Error::dim("rope_rotate", "even column count", format!("{}", x.cols())));
    }
    let d = x.cols();
    let mut out = x.clone();
    for r in 0..x.rows() {
        for t in 0..d / 2 {
            let theta = lit::<T>(position as f64)
                * base.powf(lit::<T>(-2.0 * t as f64 / d as f64));
            let (s, c) = (theta.sin(), theta.cos());
            let x0 = x[(r, 2 * t)];
            let x1 = x[(r, 2 * t + 1)];
            out[(r, 2 * t)] = x0 * c - x1 * s;
            out[(r, 2 * t + 1)] = x0 * s + x1 * c;
        }
    }
    Ok(out)
}
