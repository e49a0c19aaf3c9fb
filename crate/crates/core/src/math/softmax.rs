use crate::error::{LabError, Result};

use super::Matrix;

/// Row-wise softmax with max subtraction. `-inf` logits become exact zeros;
/// a row made entirely of `-inf` is rejected.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for r in 0..m.rows() {
        softmax_in_place(out.row_mut(r)).map_err(|e| e.into_error(r))?;
    }
    Ok(out)
}

/// Softmax of `logits` restricted to the entries where `allowed` is true; the rest are zero.
pub(crate) fn masked_softmax_rows(logits: &Matrix, allowed: impl Fn(usize, usize) -> bool) -> Result<Matrix> {
    let mut out = logits.clone();
    for r in 0..logits.rows() {
        let row = out.row_mut(r);
        for (c, v) in row.iter_mut().enumerate() {
            if !allowed(r, c) {
                *v = f64::NEG_INFINITY;
            }
        }
        softmax_in_place(row).map_err(|e| e.into_error(r))?;
    }
    Ok(out)
}

enum RowError {
    FullyMasked,
    NonFinite,
}

impl RowError {
    fn into_error(self, row: usize) -> LabError {
        match self {
            RowError::FullyMasked => LabError::FullyMaskedRow { row },
            RowError::NonFinite => LabError::NonFinite(format!("softmax input row {row}")),
        }
    }
}

fn softmax_in_place(row: &mut [f64]) -> std::result::Result<(), RowError> {
    if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(RowError::NonFinite);
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(RowError::FullyMasked);
    }
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = if *v == f64::NEG_INFINITY { 0.0 } else { (*v - max).exp() };
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
    Ok(())
}
