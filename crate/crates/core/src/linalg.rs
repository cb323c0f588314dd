//! Dense LU factorization with partial pivoting.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Pivots smaller than this fraction of `max |a_ij|` count as singular.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct Lu {
    lu: DMatrix<f64>,
    perm: Vec<usize>,
}

impl Lu {
    pub fn factor(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if n != a.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "LU needs a square matrix, got {}x{}",
                n,
                a.ncols()
            )));
        }
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let threshold = PIVOT_TOLERANCE * scale;
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Singular {
                pivot: 0.0,
                threshold,
            });
        }
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut p = k;
            let mut best = lu[(k, k)].abs();
            for i in k + 1..n {
                let v = lu[(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best <= threshold {
                return Err(Error::Singular {
                    pivot: best,
                    threshold,
                });
            }
            if p != k {
                lu.swap_rows(p, k);
                perm.swap(p, k);
            }
            let pivot = lu[(k, k)];
            for i in k + 1..n {
                let f = lu[(i, k)] / pivot;
                lu[(i, k)] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        let u = lu[(k, j)];
                        lu[(i, j)] -= f * u;
                    }
                }
            }
        }
        Ok(Self { lu, perm })
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    /// Solves `A X = B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.dim();
        assert_eq!(b.nrows(), n);
        let mut x = DMatrix::zeros(n, b.ncols());
        for c in 0..b.ncols() {
            for i in 0..n {
                x[(i, c)] = b[(self.perm[i], c)];
            }
            // forward, unit lower
            for i in 0..n {
                let mut s = x[(i, c)];
                for j in 0..i {
                    s -= self.lu[(i, j)] * x[(j, c)];
                }
                x[(i, c)] = s;
            }
            for i in (0..n).rev() {
                let mut s = x[(i, c)];
                for j in i + 1..n {
                    s -= self.lu[(i, j)] * x[(j, c)];
                }
                x[(i, c)] = s / self.lu[(i, i)];
            }
        }
        x
    }

    /// Solves `A^T X = B`.
    pub fn solve_transpose(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.dim();
        assert_eq!(b.nrows(), n);
        let mut y = b.clone();
        for c in 0..b.ncols() {
            // U^T z = b
            for i in 0..n {
                let mut s = y[(i, c)];
                for j in 0..i {
                    s -= self.lu[(j, i)] * y[(j, c)];
                }
                y[(i, c)] = s / self.lu[(i, i)];
            }
            // L^T w = z
            for i in (0..n).rev() {
                let mut s = y[(i, c)];
                for j in i + 1..n {
                    s -= self.lu[(j, i)] * y[(j, c)];
                }
                y[(i, c)] = s;
            }
        }
        let mut x = DMatrix::zeros(n, b.ncols());
        for i in 0..n {
            for c in 0..b.ncols() {
                x[(self.perm[i], c)] = y[(i, c)];
            }
        }
        x
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.solve(&DMatrix::identity(self.dim(), self.dim()))
    }
}

fn sum_squares(a: &DMatrix<f64>) -> f64 {
    a.iter().map(|v| v * v).sum()
}

pub fn frobenius_norm(a: &DMatrix<f64>) -> f64 {
    sum_squares(a).sqrt()
}

/// `|a|_F |b|_F` under a single square root, exact for identities.
pub fn frobenius_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (sum_squares(a) * sum_squares(b)).sqrt()
}

/// `c += a * b` for row-major `a: [m, k]`, `b: [k, n]`; `a_t` / `b_t` read the
/// operand as stored transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the assert above keeps every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 1.0, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_matrix() -> DMatrix<f64> {
        DMatrix::from_row_slice(4, 4, &[
            0.0, 2.0, 1.0, -1.0,
            3.0, 1.0, 0.5, 2.0,
            -1.0, 4.0, 2.0, 0.0,
            2.0, 0.0, -3.0, 1.0,
        ])
    }

    #[test]
    fn solves_and_transposed_solves() {
        let a = test_matrix();
        let b = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 2.0, 1.0, -1.0, 3.0, 0.5, 0.0]);
        let lu = Lu::factor(&a).unwrap();
        let x = lu.solve(&b);
        assert!((&a * &x - &b).norm() < 1e-12);
        let y = lu.solve_transpose(&b);
        assert!((a.transpose() * &y - &b).norm() < 1e-12);
        let inv = lu.inverse();
        assert!((&a * inv - DMatrix::identity(4, 4)).norm() < 1e-12);
    }

    #[test]
    fn singular_detected() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 1.0, 1.0]);
        assert!(matches!(Lu::factor(&a), Err(Error::Singular { .. })));
        assert!(Lu::factor(&DMatrix::zeros(2, 2)).is_err());
    }
}
