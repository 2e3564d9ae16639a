use super::matrix::dot;
use super::Matrix;
use crate::error::{Error, Result};

/// Relative threshold below which a column is treated as linearly dependent
/// on the ones before it.
const RANK_TOL: f64 = 1e-10;

/// Result of [`qr_orthonormalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Orthonormalized {
    pub q: Matrix,
    /// Columns that fell below the numerical rank and were zeroed.
    pub deficient_columns: Vec<usize>,
}

impl Orthonormalized {
    pub fn rank(&self) -> usize {
        self.q.cols() - self.deficient_columns.len()
    }
}

/// Orthonormal basis for the column span of `a` (thin QR, Q factor only).
///
/// Gram-Schmidt with a second re-orthogonalization pass, which keeps
/// `qᵀq = I` at machine precision for the small, well-conditioned blocks
/// produced by the power method.
pub fn qr_orthonormalize(a: &Matrix) -> Result<Orthonormalized> {
    let (rows, cols) = a.shape();
    if rows < cols {
        return Err(Error::InvalidArgument(format!(
            "qr_orthonormalize needs rows >= cols, got {rows}x{cols}"
        )));
    }
    let scale = (0..cols)
        .map(|j| norm(&a.col(j)))
        .fold(0.0f64, f64::max);

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut deficient = Vec::new();
    for j in 0..cols {
        let mut v = a.col(j);
        for _pass in 0..2 {
            for q in basis.iter().filter(|q| q.iter().any(|&x| x != 0.0)) {
                let c = dot(q, &v);
                for (vi, qi) in v.iter_mut().zip(q) {
                    *vi -= c * qi;
                }
            }
        }
        let n = norm(&v);
        if scale == 0.0 || n <= RANK_TOL * scale {
            deficient.push(j);
            basis.push(vec![0.0; rows]);
        } else {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }

    let q = Matrix::from_fn(rows, cols, |i, j| basis[j][i]);
    Ok(Orthonormalized {
        q,
        deficient_columns: deficient,
    })
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{gaussian_matrix, RngStream};

    fn gram_error(q: &Matrix) -> f64 {
        q.t_matmul(q)
            .unwrap()
            .sub(&Matrix::identity(q.cols()))
            .unwrap()
            .frobenius_norm()
    }

    #[test]
    fn normalizes_single_column() {
        let a = Matrix::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        let q = qr_orthonormalize(&a).unwrap().q;
        let s = q.get(0, 0).signum();
        assert!((s * q.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((s * q.get(1, 0) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn orthonormal_input_is_fixed_up_to_sign() {
        let mut rng = RngStream::new(5, 0);
        let q0 = qr_orthonormalize(&gaussian_matrix(6, 3, 1.0, &mut rng).unwrap())
            .unwrap()
            .q;
        let q1 = qr_orthonormalize(&q0).unwrap().q;
        for j in 0..3 {
            let s = (q0.get(0, j) * q1.get(0, j)).signum();
            for i in 0..6 {
                assert!((q0.get(i, j) - s * q1.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn random_tall_matrix_is_orthonormal_and_span_preserving() {
        let mut rng = RngStream::new(9, 1);
        let a = gaussian_matrix(6, 3, 1.0, &mut rng).unwrap();
        let out = qr_orthonormalize(&a).unwrap();
        assert!(out.deficient_columns.is_empty());
        assert!(gram_error(&out.q) <= 1e-10);
        // a lies in span(q): projecting a onto q leaves it unchanged.
        let proj = out.q.matmul(&out.q.t_matmul(&a).unwrap()).unwrap();
        assert!(proj.max_abs_diff(&a).unwrap() < 1e-12);
    }

    #[test]
    fn rank_deficient_columns_are_zeroed_and_reported() {
        let a = Matrix::from_rows(&[
            vec![1.0, 2.0, 0.0],
            vec![1.0, 2.0, 1.0],
            vec![0.0, 0.0, 1.0],
            vec![1.0, 2.0, 0.0],
        ])
        .unwrap();
        let out = qr_orthonormalize(&a).unwrap();
        assert_eq!(out.deficient_columns, vec![1]);
        assert_eq!(out.rank(), 2);
        assert!(out.q.col(1).iter().all(|&v| v == 0.0));
        let zero = qr_orthonormalize(&Matrix::zeros(3, 2)).unwrap();
        assert_eq!(zero.deficient_columns, vec![0, 1]);
    }

    #[test]
    fn wide_input_rejected() {
        assert!(qr_orthonormalize(&Matrix::zeros(2, 3)).is_err());
    }
}
