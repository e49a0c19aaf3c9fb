use crate::error::{LabError, Result};

use super::{Matrix, SeededRng};

pub const SPECTRAL_TOL: f64 = 1e-10;
pub const SPECTRAL_MAX_ITER: usize = 10_000;

/// Which matrix norm to report for a Jacobian.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Operator 2-norm (largest singular value).
    #[default]
    Spectral,
    Frobenius,
}

impl NormKind {
    pub fn apply(self, m: &Matrix) -> Result<f64> {
        match self {
            NormKind::Spectral => spectral_norm(m, SPECTRAL_TOL, SPECTRAL_MAX_ITER),
            NormKind::Frobenius => Ok(frobenius_norm(m)),
        }
    }
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Largest singular value by power iteration on `mᵀm`.
///
/// Stops when the Rayleigh quotient changes by less than `tol` relative to its value.
pub fn spectral_norm(m: &Matrix, tol: f64, max_iter: usize) -> Result<f64> {
    if m.is_empty() {
        return Err(LabError::InvalidArgument("spectral_norm of an empty matrix".into()));
    }
    if m.max_abs() == 0.0 {
        return Ok(0.0);
    }
    let n = m.cols();
    // Fixed pseudo-random start so a structured m is unlikely to be orthogonal to it.
    let mut v = SeededRng::new(0x5eed_5eed).sphere(n, 1.0);
    let mut mv = vec![0.0; m.rows()];
    let mut lambda = 0.0;
    for iter in 0..max_iter {
        // mv = m v
        for (r, out) in mv.iter_mut().enumerate() {
            *out = m.row(r).iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let next_lambda: f64 = mv.iter().map(|x| x * x).sum();
        // w = mᵀ (m v)
        let mut w = vec![0.0; n];
        for (r, s) in mv.iter().enumerate() {
            for (wc, a) in w.iter_mut().zip(m.row(r)) {
                *wc += a * s;
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // v landed in the null space; the start vector was unlucky.
            return Err(LabError::NoConvergence { iterations: iter, estimate: next_lambda.sqrt() });
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / norm;
        }
        if iter > 0 && (next_lambda - lambda).abs() <= tol * next_lambda {
            return Ok(next_lambda.sqrt());
        }
        lambda = next_lambda;
    }
    Err(LabError::NoConvergence { iterations: max_iter, estimate: lambda.sqrt() })
}
