//! Per-round low-rank factorization of the local prompt, and the
//! reparametrized gradient reconstruction that maps low-rank factor
//! gradients back to the full prompt.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{gaussian_matrix, qr_orthonormalize, Matrix, RngStream};

/// `p = u·v + r` with `u` (b×k) orthonormal, `v = uᵀp` (k×d) and the
/// residual `r` (b×d) holding everything outside `span(u)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactoredPrompt {
    pub u: Matrix,
    pub v: Matrix,
    pub r: Matrix,
    pub rank: usize,
}

impl FactoredPrompt {
    /// `u·v`, the low-rank part.
    pub fn low_rank(&self) -> Matrix {
        self.u.matmul(&self.v).expect("factor shapes are consistent")
    }

    /// `u·v + r`.
    pub fn reconstruct(&self) -> Matrix {
        self.low_rank().add(&self.r).expect("factor shapes are consistent")
    }
}

/// One power-method step: Gaussian probe, orthonormalize `p·probe`, project.
///
/// An all-zero `p` yields all-zero factors.
pub fn factorize(p: &Matrix, rank: usize, rng: &mut RngStream) -> Result<FactoredPrompt> {
    let (b, d) = p.shape();
    if rank == 0 || rank > b.min(d) {
        return Err(Error::InvalidArgument(format!(
            "rank {rank} outside 1..={} for a {b}x{d} prompt",
            b.min(d)
        )));
    }
    if p.is_zero() {
        return Ok(FactoredPrompt {
            u: Matrix::zeros(b, rank),
            v: Matrix::zeros(rank, d),
            r: Matrix::zeros(b, d),
            rank,
        });
    }
    let probe = gaussian_matrix(d, rank, 1.0, rng)?;
    let sketch = p.matmul(&probe)?;
    let u = qr_orthonormalize(&sketch)?.q;
    from_basis(p, u)
}

/// Factorization against a fixed orthonormal basis `u`.
pub fn from_basis(p: &Matrix, u: Matrix) -> Result<FactoredPrompt> {
    let v = u.t_matmul(p)?;
    let r = p.sub(&u.matmul(&v)?)?;
    let rank = u.cols();
    Ok(FactoredPrompt { u, v, r, rank })
}

/// Full-prompt gradient from factor gradients:
/// `∇u·v + u·∇v − u·uᵀ·∇u·v`.
pub fn reconstruct_gradient(grad_u: &Matrix, grad_v: &Matrix, u: &Matrix, v: &Matrix) -> Result<Matrix> {
    let (b, k) = u.shape();
    let d = v.cols();
    if v.rows() != k {
        return Err(Error::shape("reconstruct_gradient(u, v)", u.shape(), v.shape()));
    }
    if grad_u.shape() != (b, k) {
        return Err(Error::shape("reconstruct_gradient(grad_u, u)", grad_u.shape(), u.shape()));
    }
    if grad_v.shape() != (k, d) {
        return Err(Error::shape("reconstruct_gradient(grad_v, v)", grad_v.shape(), v.shape()));
    }
    // (I − u·uᵀ)·∇u·v + u·∇v
    let gu_perp = grad_u.sub(&u.matmul(&u.t_matmul(grad_u)?)?)?;
    let mut out = gu_perp.matmul(v)?;
    out.axpy(1.0, &u.matmul(grad_v)?)?;
    Ok(out)
}
