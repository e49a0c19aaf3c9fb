//! Dense linear algebra, softmax, norms, randomness and the finite-difference oracle.

mod finite_diff;
mod matrix;
mod norms;
mod rng;
mod softmax;
pub mod stats;

#[cfg(test)]
pub(crate) mod oracle;

pub use finite_diff::{finite_difference_jacobian, DEFAULT_STEP};
pub(crate) use matrix::gemm;
pub use matrix::Matrix;
pub use norms::{frobenius_norm, spectral_norm, NormKind, SPECTRAL_MAX_ITER, SPECTRAL_TOL};
pub use rng::{glorot_bound, init_normal, init_uniform, SeededRng};
pub(crate) use softmax::masked_softmax_rows;
pub use softmax::softmax_rows;
