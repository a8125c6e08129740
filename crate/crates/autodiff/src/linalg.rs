//! Dense LU factorization helpers used by the inverse op and by determinant
//! based oracles.

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

/// Default bound on the 1-norm condition estimate accepted by [`inverse`].
pub const DEFAULT_CONDITION_BOUND: f64 = 1e12;

/// In-place LU factorization with partial pivoting of a row-major `n×n`
/// matrix. Returns the permutation, the sign of the permutation and the
/// smallest absolute pivot encountered.
struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    sign: f64,
    min_pivot: f64,
}

fn factor(n: usize, a: &[f64]) -> Lu {
    let mut lu = a.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut sign = 1.0;
    let mut min_pivot = f64::INFINITY;
    for col in 0..n {
        let mut piv = col;
        let mut best = lu[col * n + col].abs();
        for row in col + 1..n {
            let v = lu[row * n + col].abs();
            if v > best {
                best = v;
                piv = row;
            }
        }
        min_pivot = min_pivot.min(best);
        if piv != col {
            for j in 0..n {
                lu.swap(col * n + j, piv * n + j);
            }
            perm.swap(col, piv);
            sign = -sign;
        }
        let d = lu[col * n + col];
        if d == 0.0 {
            continue;
        }
        for row in col + 1..n {
            let f = lu[row * n + col] / d;
            lu[row * n + col] = f;
            if f != 0.0 {
                for j in col + 1..n {
                    lu[row * n + j] -= f * lu[col * n + j];
                }
            }
        }
    }
    if n == 0 {
        min_pivot = 1.0;
    }
    Lu {
        n,
        lu,
        perm,
        sign,
        min_pivot,
    }
}

impl Lu {
    fn solve_identity(&self) -> Vec<f64> {
        let n = self.n;
        let mut inv = vec![0.0; n * n];
        let mut col = vec![0.0; n];
        for k in 0..n {
            for (i, c) in col.iter_mut().enumerate() {
                *c = if self.perm[i] == k { 1.0 } else { 0.0 };
            }
            for i in 0..n {
                let mut s = col[i];
                for j in 0..i {
                    s -= self.lu[i * n + j] * col[j];
                }
                col[i] = s;
            }
            for i in (0..n).rev() {
                let mut s = col[i];
                for j in i + 1..n {
                    s -= self.lu[i * n + j] * col[j];
                }
                col[i] = s / self.lu[i * n + i];
            }
            for i in 0..n {
                inv[i * n + k] = col[i];
            }
        }
        inv
    }

    fn det(&self) -> f64 {
        (0..self.n).fold(self.sign, |acc, i| acc * self.lu[i * self.n + i])
    }
}

fn square_dim(a: &Tensor, op: &'static str) -> Result<usize> {
    let (r, c) = a.dims2()?;
    if r != c {
        return Err(AutodiffError::InvalidShape {
            op,
            shape: a.shape().to_vec(),
            reason: "matrix must be square".into(),
        });
    }
    Ok(r)
}

fn norm1(n: usize, a: &[f64]) -> f64 {
    (0..n)
        .map(|j| (0..n).map(|i| a[i * n + j].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Inverse of a square matrix with a 1-norm condition check.
pub fn inverse(a: &Tensor, condition_bound: f64) -> Result<Tensor> {
    let n = square_dim(a, "inverse")?;
    let lu = factor(n, a.data());
    let scale = norm1(n, a.data()).max(f64::MIN_POSITIVE);
    if lu.min_pivot <= f64::EPSILON * scale || !lu.min_pivot.is_finite() {
        return Err(AutodiffError::Singular {
            pivot: lu.min_pivot,
        });
    }
    let inv = lu.solve_identity();
    let condition = scale * norm1(n, &inv);
    if !condition.is_finite() || condition > condition_bound {
        return Err(AutodiffError::IllConditioned {
            condition,
            bound: condition_bound,
            pivot: lu.min_pivot,
        });
    }
    Ok(Tensor::from_parts(vec![n, n], inv))
}

/// Determinant via LU. The empty matrix has determinant 1.
pub fn determinant(a: &Tensor) -> Result<f64> {
    let n = square_dim(a, "determinant")?;
    Ok(factor(n, a.data()).det())
}

/// Principal submatrix selecting `idx` rows and columns.
pub fn principal_submatrix(a: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let n = square_dim(a, "principal_submatrix")?;
    if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
        return Err(AutodiffError::InvalidShape {
            op: "principal_submatrix",
            shape: a.shape().to_vec(),
            reason: format!("index {bad} out of range"),
        });
    }
    let k = idx.len();
    let mut out = Vec::with_capacity(k * k);
    for &i in idx {
        for &j in idx {
            out.push(a.data()[i * n + j]);
        }
    }
    Ok(Tensor::from_parts(vec![k, k], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_of_scaled_identity() {
        let a = Tensor::eye(3).scale(2.0);
        let inv = inverse(&a, DEFAULT_CONDITION_BOUND).unwrap();
        assert!(inv.max_abs_diff(&Tensor::eye(3).scale(0.5)) < 1e-15);
    }

    #[test]
    fn inverse_two_by_two_times_input_is_identity() {
        let a = Tensor::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let inv = inverse(&a, DEFAULT_CONDITION_BOUND).unwrap();
        let expected =
            Tensor::from_rows(&[vec![2.0 / 3.0, -1.0 / 3.0], vec![-1.0 / 3.0, 2.0 / 3.0]]).unwrap();
        assert!(inv.max_abs_diff(&expected) < 1e-15);
        assert!(inv.matmul(&a).unwrap().max_abs_diff(&Tensor::eye(2)) < 1e-15);
    }

    #[test]
    fn singular_matrix_reports_pivot() {
        let a = Tensor::ones(&[2, 2]);
        match inverse(&a, DEFAULT_CONDITION_BOUND) {
            Err(AutodiffError::Singular { pivot }) => assert!(pivot.abs() < 1e-15),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn ill_conditioned_matrix_rejected() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1e-14]]).unwrap();
        assert!(matches!(
            inverse(&a, DEFAULT_CONDITION_BOUND),
            Err(AutodiffError::IllConditioned { .. })
        ));
    }

    #[test]
    fn determinant_handles_permutation_and_empty() {
        let a = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(determinant(&a).unwrap(), -1.0);
        let empty = Tensor::zeros(&[0, 0]);
        assert_eq!(determinant(&empty).unwrap(), 1.0);
    }
}
