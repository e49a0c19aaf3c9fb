use crate::error::{LabError, Result};

use super::Matrix;

pub const DEFAULT_STEP: f64 = 1e-6;

/// Central-difference Jacobian of `f` at `x`: column `j` is
/// `(f(x + h e_j) - f(x - h e_j)) / 2h`.
pub fn finite_difference_jacobian<F>(mut f: F, x: &[f64], h: f64) -> Result<Matrix>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if h <= 0.0 {
        return Err(LabError::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut columns = Vec::with_capacity(x.len());
    let mut out_len = None;
    for j in 0..x.len() {
        probe[j] = x[j] + h;
        let plus = f(&probe)?;
        probe[j] = x[j] - h;
        let minus = f(&probe)?;
        probe[j] = x[j];
        if plus.len() != minus.len() || out_len.is_some_and(|n| n != plus.len()) {
            return Err(LabError::DimensionMismatch {
                op: "finite_difference_jacobian",
                detail: "f changed its output length".into(),
            });
        }
        out_len = Some(plus.len());
        if plus.iter().chain(&minus).any(|v| !v.is_finite()) {
            return Err(LabError::NonFinite("finite_difference_jacobian: f".into()));
        }
        columns.push(plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * h)).collect::<Vec<_>>());
    }
    let rows = out_len.unwrap_or(0);
    Ok(Matrix::from_fn(rows, x.len(), |r, c| columns[c][r]))
}
