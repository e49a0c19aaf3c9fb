//! Masked scaled dot-product attention, the mask constructors that distinguish
//! the model variants, and the partial-attention block.
//!
//! `attend(Q, K, V) = Softmax(Q W_Q W_Kᵀ Kᵀ / √d) V W_V`. The bilinear form
//! `A` satisfies `Aᵀ = W_Q W_Kᵀ` and is always recomputed from the factors.

use crate::error::{LabError, Result};
use crate::math::{glorot_bound, init_uniform, masked_softmax_rows, Matrix, SeededRng};

/// Query/key/value projections of one attention head, all `d×d`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    w_q: Matrix,
    w_k: Matrix,
    w_v: Matrix,
}

impl AttentionWeights {
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix) -> Result<Self> {
        let d = w_q.rows();
        for (name, m) in [("w_q", &w_q), ("w_k", &w_k), ("w_v", &w_v)] {
            if m.shape() != (d, d) {
                return Err(LabError::DimensionMismatch {
                    op: "AttentionWeights::new",
                    detail: format!("{name} is {:?}, expected {d}x{d}", m.shape()),
                });
            }
        }
        Ok(Self { w_q, w_k, w_v })
    }

    /// Weights whose bilinear form is exactly `a`: `W_Q = aᵀ`, `W_K = I`.
    pub fn from_bilinear(a: &Matrix, w_v: Matrix) -> Result<Self> {
        Self::new(a.transpose(), Matrix::identity(a.rows()), w_v)
    }

    /// Glorot-uniform initialisation.
    pub fn random(d: usize, rng: &mut SeededRng) -> Self {
        let b = glorot_bound(d, d);
        Self {
            w_q: init_uniform(d, d, b, rng),
            w_k: init_uniform(d, d, b, rng),
            w_v: init_uniform(d, d, b, rng),
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self { w_q: Matrix::zeros(d, d), w_k: Matrix::zeros(d, d), w_v: Matrix::zeros(d, d) }
    }

    pub fn d(&self) -> usize {
        self.w_q.rows()
    }

    pub fn w_q(&self) -> &Matrix {
        &self.w_q
    }

    pub fn w_k(&self) -> &Matrix {
        &self.w_k
    }

    pub fn w_v(&self) -> &Matrix {
        &self.w_v
    }

    /// `A = (W_Q W_Kᵀ)ᵀ = W_K W_Qᵀ`.
    pub fn bilinear(&self) -> Matrix {
        self.w_k.matmul_t(&self.w_q).expect("square factors")
    }
}

/// Boolean visibility grid: `allowed(i, j)` means query `i` may attend to key `j`.
#[derive(Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// Rejects masks with a query row that sees no key.
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(LabError::DimensionMismatch {
                op: "AttentionMask::new",
                detail: format!("{} flags for {rows}x{cols}", allowed.len()),
            });
        }
        for r in 0..rows {
            if !allowed[r * cols..(r + 1) * cols].iter().any(|&a| a) {
                return Err(LabError::FullyMaskedRow { row: r });
            }
        }
        Ok(Self { rows, cols, allowed })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let allowed = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).map(|(r, c)| f(r, c)).collect();
        Self::new(rows, cols, allowed)
    }

    pub fn full(rows: usize, cols: usize) -> Result<Self> {
        Self::from_fn(rows, cols, |_, _| true)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn is_allowed(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }

    pub fn allowed_in_row(&self, r: usize) -> usize {
        self.allowed[r * self.cols..(r + 1) * self.cols].iter().filter(|&&a| a).count()
    }

    /// Query rows `start..end` of this mask.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        Self::new(end - start, self.cols, self.allowed[start * self.cols..end * self.cols].to_vec())
    }
}

impl std::fmt::Debug for AttentionMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "AttentionMask {}x{}", self.rows, self.cols)?;
        for r in 0..self.rows {
            let line: String = (0..self.cols).map(|c| if self.is_allowed(r, c) { '1' } else { '.' }).collect();
            writeln!(f, "  {line}")?;
        }
        Ok(())
    }
}

/// Lower-triangular `n×n` mask: `allowed(i, j) ⇔ j ≤ i`.
pub fn make_causal_mask(n: usize) -> Result<AttentionMask> {
    if n == 0 {
        return Err(LabError::InvalidArgument("causal mask needs n >= 1".into()));
    }
    AttentionMask::from_fn(n, n, |r, c| c <= r)
}

/// Mask of the unidirectional cross attention over the concatenation `[source; target]`.
/// Identical to the causal mask of length `s_len + t_len`.
pub fn make_cross_unidirectional_mask(s_len: usize, t_len: usize) -> Result<AttentionMask> {
    if s_len == 0 {
        return Err(LabError::InvalidArgument("source length must be >= 1".into()));
    }
    make_causal_mask(s_len + t_len)
}

/// Prefix-LM mask: the source block is visible to every position, the rest is causal.
pub fn make_prefix_mask(s_len: usize, t_len: usize) -> Result<AttentionMask> {
    if s_len == 0 {
        return Err(LabError::InvalidArgument("source length must be >= 1".into()));
    }
    let n = s_len + t_len;
    AttentionMask::from_fn(n, n, |r, c| c < s_len || c <= r)
}

/// Result of [`attend`]: the output rows and the post-softmax matrix `P`.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub output: Matrix,
    pub probs: Matrix,
}

/// Single-head masked scaled dot-product attention.
pub fn attend(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    w: &AttentionWeights,
    mask: &AttentionMask,
) -> Result<AttentionOutput> {
    let d = w.d();
    if q.cols() != d || k.cols() != d || v.cols() != d || k.rows() != v.rows() {
        return Err(LabError::DimensionMismatch {
            op: "attend",
            detail: format!("q {:?}, k {:?}, v {:?}, d = {d}", q.shape(), k.shape(), v.shape()),
        });
    }
    if (mask.rows(), mask.cols()) != (q.rows(), k.rows()) {
        return Err(LabError::DimensionMismatch {
            op: "attend",
            detail: format!("mask {}x{} for {} queries and {} keys", mask.rows(), mask.cols(), q.rows(), k.rows()),
        });
    }
    let qp = q.matmul(&w.w_q)?;
    let kp = k.matmul(&w.w_k)?;
    let vp = v.matmul(&w.w_v)?;
    let logits = qp.matmul_t(&kp)?.scale(1.0 / (d as f64).sqrt());
    let probs = masked_softmax_rows(&logits, |r, c| mask.is_allowed(r, c))?;
    let output = probs.matmul(&vp)?;
    Ok(AttentionOutput { output, probs })
}

/// Parameters of the source-only feedforward `F_P` and the attention `ATT^P`.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialAttentionParams {
    pub w_p1: Matrix,
    pub b_p1: Matrix,
    pub w_p2: Matrix,
    pub b_p2: Matrix,
    pub inner: AttentionWeights,
    pub dropout_rate: f64,
}

impl PartialAttentionParams {
    pub fn new(
        w_p1: Matrix,
        b_p1: Matrix,
        w_p2: Matrix,
        b_p2: Matrix,
        inner: AttentionWeights,
        dropout_rate: f64,
    ) -> Result<Self> {
        let d = inner.d();
        let square = |m: &Matrix| m.shape() == (d, d);
        let bias = |m: &Matrix| m.shape() == (1, d);
        if !square(&w_p1) || !square(&w_p2) || !bias(&b_p1) || !bias(&b_p2) {
            return Err(LabError::DimensionMismatch {
                op: "PartialAttentionParams::new",
                detail: format!("width {d} inconsistent with projection or bias shapes"),
            });
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(LabError::InvalidArgument(format!("dropout rate {dropout_rate} not in [0, 1)")));
        }
        Ok(Self { w_p1, b_p1, w_p2, b_p2, inner, dropout_rate })
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            w_p1: Matrix::zeros(d, d),
            b_p1: Matrix::zeros(1, d),
            w_p2: Matrix::zeros(d, d),
            b_p2: Matrix::zeros(1, d),
            inner: AttentionWeights::zeros(d),
            dropout_rate: 0.0,
        }
    }

    pub fn random(d: usize, rng: &mut SeededRng) -> Self {
        let b = glorot_bound(d, d);
        Self {
            w_p1: init_uniform(d, d, b, rng),
            b_p1: Matrix::zeros(1, d),
            w_p2: init_uniform(d, d, b, rng),
            b_p2: Matrix::zeros(1, d),
            inner: AttentionWeights::random(d, rng),
            dropout_rate: 0.0,
        }
    }

    pub fn d(&self) -> usize {
        self.inner.d()
    }
}

/// Output of [`partial_attention_block`].
#[derive(Clone, Debug)]
pub struct PartialAttentionOutput {
    /// `R_l`, one row per query row.
    pub output: Matrix,
    /// `P_l = F_P(Q[1:s])`, the fixed-length key/value memory.
    pub memory: Matrix,
    /// Attention probabilities of `ATT^P`, `rows × s_len`.
    pub probs: Matrix,
}

/// Inverted dropout; identity when `rate == 0`.
pub(crate) fn dropout(m: &Matrix, rate: f64, rng: &mut SeededRng) -> Matrix {
    if rate == 0.0 {
        return m.clone();
    }
    let keep = 1.0 / (1.0 - rate);
    let mut out = m.clone();
    for v in out.data_mut() {
        *v = if rng.uniform() < rate { 0.0 } else { *v * keep };
    }
    out
}

/// Partial attention: attends every row of `q_l` to a feedforward transform of
/// its first `s_len` rows only.
///
/// ```text
/// P1 = Dropout(tanh(Q[1:s] W_P1 + 1 b_P1ᵀ))
/// P2 = Dropout(P1 W_P2 + 1 b_P2ᵀ)
/// P  = P2 + P1
/// R  = ATT^P(Q, P, P)
/// ```
pub fn partial_attention_block(
    q_l: &Matrix,
    s_len: usize,
    p: &PartialAttentionParams,
    rng: &mut SeededRng,
    train_mode: bool,
) -> Result<PartialAttentionOutput> {
    if s_len == 0 || s_len > q_l.rows() {
        return Err(LabError::InvalidArgument(format!(
            "source length {s_len} must be in 1..={}",
            q_l.rows()
        )));
    }
    let rate = if train_mode { p.dropout_rate } else { 0.0 };
    let source = q_l.slice_rows(0, s_len);
    let p1 = source.matmul(&p.w_p1)?.add_row_broadcast(&p.b_p1)?.map(f64::tanh);
    let p1 = dropout(&p1, rate, rng);
    let p2 = p1.matmul(&p.w_p2)?.add_row_broadcast(&p.b_p2)?;
    let p2 = dropout(&p2, rate, rng);
    let memory = p2.add(&p1)?;
    let mask = AttentionMask::full(q_l.rows(), s_len)?;
    let AttentionOutput { output, probs } = attend(q_l, &memory, &memory, &p.inner, &mask)?;
    Ok(PartialAttentionOutput { output, memory, probs })
}
