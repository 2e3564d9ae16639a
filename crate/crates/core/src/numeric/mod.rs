//! Dense linear algebra and seeded randomness shared by every other module.

mod matrix;
mod qr;
mod random;

pub use matrix::Matrix;
pub use qr::{qr_orthonormalize, Orthonormalized};
pub use random::{gaussian_matrix, stream, RngStream};
