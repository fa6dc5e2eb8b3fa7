//! Small dense matrices and a column-pivoted Householder QR.
//!
//! Only what the regression code needs: products, transposes, and a
//! rank-revealing least-squares solve.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
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
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::LengthMismatch {
                expected: cols,
                actual: bad.len(),
            });
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
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

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::LengthMismatch {
                expected: self.cols,
                actual: other.rows,
            });
        }
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
        Ok(out)
    }

    pub fn mul_vec(&self, v: &[T]) -> Result<Vec<T>> {
        if self.cols != v.len() {
            return Err(Error::LengthMismatch {
                expected: self.cols,
                actual: v.len(),
            });
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(v).fold(T::zero(), |acc, (&a, &b)| acc + a * b))
            .collect())
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// `A P = Q R` with column pivoting; Q kept implicitly as Householder vectors.
#[derive(Debug, Clone)]
pub struct PivotedQr<T> {
    /// R in the upper triangle, Householder vectors below the diagonal.
    qr: Matrix<T>,
    betas: Vec<T>,
    /// `perm[k]` is the original column in position `k`.
    perm: Vec<usize>,
    rank: usize,
}

impl<T: Scalar> PivotedQr<T> {
    pub fn new(a: &Matrix<T>) -> Self {
        let (m, n) = (a.rows(), a.cols());
        let mut qr = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut betas = Vec::with_capacity(n.min(m));
        let mut norms: Vec<T> = (0..n)
            .map(|j| (0..m).fold(T::zero(), |acc, i| acc + qr[(i, j)] * qr[(i, j)]))
            .collect();
        let max_norm = norms.iter().fold(T::zero(), |a, &b| a.max(b)).sqrt();
        let tol = max_norm * T::from_usize_lossy(m.max(n)) * T::epsilon() * T::lit(10.0);

        let mut rank = 0;
        for k in 0..n.min(m) {
            // Recompute trailing norms exactly; matrices here are tiny.
            for j in k..n {
                norms[j] = (k..m).fold(T::zero(), |acc, i| acc + qr[(i, j)] * qr[(i, j)]);
            }
            let (pivot, pivot_norm) = (k..n)
                .map(|j| (j, norms[j]))
                .fold((k, T::neg_infinity()), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pivot_norm.sqrt() <= tol {
                break;
            }
            if pivot != k {
                for i in 0..m {
                    let tmp = qr[(i, k)];
                    qr[(i, k)] = qr[(i, pivot)];
                    qr[(i, pivot)] = tmp;
                }
                perm.swap(k, pivot);
                norms.swap(k, pivot);
            }

            let alpha = {
                let norm = pivot_norm.sqrt();
                if qr[(k, k)] > T::zero() {
                    -norm
                } else {
                    norm
                }
            };
            let v0 = qr[(k, k)] - alpha;
            // v = [1, x_{k+1}/v0, ...], beta = -v0 / alpha
            for i in (k + 1)..m {
                qr[(i, k)] /= v0;
            }
            let beta = -v0 / alpha;
            qr[(k, k)] = alpha;
            for j in (k + 1)..n {
                let mut s = qr[(k, j)];
                for i in (k + 1)..m {
                    s += qr[(i, k)] * qr[(i, j)];
                }
                s *= beta;
                qr[(k, j)] -= s;
                for i in (k + 1)..m {
                    let vi = qr[(i, k)];
                    qr[(i, j)] -= s * vi;
                }
            }
            betas.push(beta);
            rank += 1;
        }
        Self {
            qr,
            betas,
            perm,
            rank,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    fn require_full_rank(&self) -> Result<()> {
        let cols = self.qr.cols();
        if self.rank < cols {
            Err(Error::RankDeficient {
                rank: self.rank,
                cols,
            })
        } else {
            Ok(())
        }
    }

    /// Least-squares solution of `A x = b`.
    pub fn solve(&self, b: &[T]) -> Result<Vec<T>> {
        self.require_full_rank()?;
        let (m, n) = (self.qr.rows(), self.qr.cols());
        if b.len() != m {
            return Err(Error::LengthMismatch {
                expected: m,
                actual: b.len(),
            });
        }
        let mut y = b.to_vec();
        for (k, &beta) in self.betas.iter().enumerate() {
            let mut s = y[k];
            for i in (k + 1)..m {
                s += self.qr[(i, k)] * y[i];
            }
            s *= beta;
            y[k] -= s;
            for i in (k + 1)..m {
                y[i] -= s * self.qr[(i, k)];
            }
        }
        let z = self.back_substitute(&y[..n]);
        let mut x = vec![T::zero(); n];
        for (k, &col) in self.perm.iter().enumerate() {
            x[col] = z[k];
        }
        Ok(x)
    }

    fn back_substitute(&self, y: &[T]) -> Vec<T> {
        let n = y.len();
        let mut z = vec![T::zero(); n];
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in (i + 1)..n {
                s -= self.qr[(i, j)] * z[j];
            }
            z[i] = s / self.qr[(i, i)];
        }
        z
    }

    /// `(AᵀA)⁻¹`, computed as `P R⁻¹ R⁻ᵀ Pᵀ`.
    pub fn gram_inverse(&self) -> Result<Matrix<T>> {
        self.require_full_rank()?;
        let n = self.qr.cols();
        // Columns of R⁻¹ by back substitution against unit vectors.
        let mut r_inv = Matrix::zeros(n, n);
        for c in 0..n {
            let mut e = vec![T::zero(); n];
            e[c] = T::one();
            let col = self.back_substitute(&e);
            for (i, v) in col.into_iter().enumerate() {
                r_inv[(i, c)] = v;
            }
        }
        let inner = r_inv.matmul(&r_inv.transpose())?;
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                out[(self.perm[i], self.perm[j])] = inner[(i, j)];
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_overdetermined_system() {
        // y = 1 + 2x exactly.
        let a = Matrix::from_rows(&[vec![1.0f64, 0.0], vec![1.0, 1.0], vec![1.0, 2.0], vec![1.0, 3.0]]).unwrap();
        let qr = PivotedQr::new(&a);
        let x = qr.solve(&[1.0, 3.0, 5.0, 7.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn detects_rank_deficiency() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]).unwrap();
        let qr = PivotedQr::new(&a);
        assert_eq!(qr.rank(), 1);
        assert!(matches!(qr.solve(&[1.0, 2.0, 3.0]), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn gram_inverse_matches_direct() {
        let a = Matrix::from_rows(&[
            vec![1.0, 0.5, 2.0],
            vec![1.0, -1.0, 0.0],
            vec![1.0, 3.0, 1.0],
            vec![1.0, 0.0, -2.0],
            vec![1.0, 2.0, 0.5],
        ])
        .unwrap();
        let inv = PivotedQr::new(&a).gram_inverse().unwrap();
        let gram = a.transpose().matmul(&a).unwrap();
        let prod = gram.matmul(&inv).unwrap();
        assert!(prod.max_abs_diff(&Matrix::identity(3)) < 1e-12);
    }
}
