//! Small dense linear algebra for the Newton solvers and sandwich variances.
//!
//! Parameter dimensions here never exceed a handful, so a row-major `Vec`
//! with Cholesky and Gauss-Jordan is all that is needed.

use crate::scalar::Real;
use std::ops::{Index, IndexMut};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged matrix rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        self.data.chunks(self.cols.max(1)).map(<[T]>::to_vec).take(self.rows).collect()
    }

    pub fn diagonal(&self) -> Vec<T> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "dimension mismatch in matmul");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.cols, v.len(), "dimension mismatch in mul_vec");
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| self[(i, j)] * v[j]).sum())
            .collect()
    }

    pub fn scale(&mut self, s: T) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// `self += w * v v'`.
    pub fn add_outer(&mut self, v: &[T], w: T) {
        let n = v.len();
        assert_eq!((self.rows, self.cols), (n, n));
        for i in 0..n {
            let vi = w * v[i];
            for j in 0..n {
                self.data[i * n + j] += vi * v[j];
            }
        }
    }

    /// Mirrors the upper triangle onto the lower one.
    pub fn symmetrize(&mut self) {
        let two = T::lit(2.0);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let m = (self[(i, j)] + self[(j, i)]) / two;
                self[(i, j)] = m;
                self[(j, i)] = m;
            }
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Lower Cholesky factor of a symmetric positive definite matrix.
    pub fn cholesky(&self) -> Option<Self> {
        let n = self.rows;
        if n != self.cols {
            return None;
        }
        let mut l = Self::zeros(n, n);
        for j in 0..n {
            let mut d = self[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > T::zero()) || !d.is_finite() {
                return None;
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Some(l)
    }

    /// Solves `self x = b` for symmetric positive definite `self`.
    pub fn solve_spd(&self, b: &[T]) -> Option<Vec<T>> {
        let l = self.cholesky()?;
        Some(cholesky_solve(&l, b))
    }

    /// Inverse of a symmetric positive definite matrix.
    pub fn inverse_spd(&self) -> Option<Self> {
        let l = self.cholesky()?;
        let n = self.rows;
        let mut inv = Self::zeros(n, n);
        let mut e = vec![T::zero(); n];
        for j in 0..n {
            e.iter_mut().for_each(|x| *x = T::zero());
            e[j] = T::one();
            let col = cholesky_solve(&l, &e);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        inv.symmetrize();
        Some(inv)
    }

    /// General inverse by Gauss-Jordan elimination with partial pivoting.
    pub fn inverse(&self) -> Option<Self> {
        let n = self.rows;
        if n != self.cols {
            return None;
        }
        let mut a = self.clone();
        let mut inv = Self::identity(n);
        let scale = a.max_abs().max(T::min_positive_value());
        let tiny = scale * T::epsilon() * T::lit(n as f64 * 16.0);
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| a[(i, col)].abs().partial_cmp(&a[(j, col)].abs()).unwrap())
                .unwrap();
            if !(a[(pivot, col)].abs() > tiny) {
                return None;
            }
            if pivot != col {
                for j in 0..n {
                    a.data.swap(pivot * n + j, col * n + j);
                    inv.data.swap(pivot * n + j, col * n + j);
                }
            }
            let p = a[(col, col)];
            for j in 0..n {
                a[(col, j)] /= p;
                inv[(col, j)] /= p;
            }
            for i in 0..n {
                if i == col {
                    continue;
                }
                let f = a[(i, col)];
                if f == T::zero() {
                    continue;
                }
                for j in 0..n {
                    let aj = a[(col, j)];
                    let ij = inv[(col, j)];
                    a[(i, j)] -= f * aj;
                    inv[(i, j)] -= f * ij;
                }
            }
        }
        inv.is_finite().then_some(inv)
    }

    /// `bread * meat * bread'`.
    pub fn sandwich(bread: &Self, meat: &Self) -> Self {
        let mut v = bread.matmul(meat).matmul(&bread.transpose());
        v.symmetrize();
        v
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

fn cholesky_solve<T: Real>(l: &Matrix<T>, b: &[T]) -> Vec<T> {
    let n = l.rows();
    let mut y = vec![T::zero(); n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    let mut x = vec![T::zero(); n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solves `info * step = score` where `info` is a (negated) Hessian that
/// should be positive definite. When it is not, a ridge is added and grown
/// until the factorization succeeds.
pub fn solve_with_ridge<T: Real>(info: &Matrix<T>, score: &[T], base_ridge: T) -> Option<Vec<T>> {
    if let Some(x) = info.solve_spd(score) {
        return Some(x);
    }
    let n = info.rows();
    let scale = info.diagonal().iter().fold(T::one(), |m, d| m.max(d.abs()));
    let mut ridge = base_ridge * scale;
    for _ in 0..40 {
        let mut m = info.clone();
        for i in 0..n {
            m[(i, i)] += ridge;
        }
        if let Some(x) = m.solve_spd(score) {
            return Some(x);
        }
        ridge *= T::lit(10.0);
    }
    None
}

pub fn max_abs<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |m, x| m.max(x.abs()))
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}
