//! Closed-form Jacobians of attention outputs with respect to source rows,
//! the sensitivity measure built on them, the probabilistic upper bound on that
//! sensitivity, and the perturbation harness that checks it numerically.
//!
//! Notation: `X` (`N×d`) holds the source rows `x_j`, `Y` holds target rows
//! `y_1..y_i`, `A` is the attention bilinear form and `W` the value projection.
//! Indices in this module are 0-based; step `i` in the reports is `i + 1`.
//!
//! The closed forms are written for `Softmax(Y Aᵀ Xᵀ)`, while the executable
//! attention divides logits by `√d`. Every function here folds that factor into
//! `A` (`A ← A/√d`) before applying the formulas, so both agree exactly.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attention::{attend, make_causal_mask, partial_attention_block, AttentionMask, AttentionWeights, PartialAttentionParams};
use crate::error::{LabError, Result};
use crate::math::{
    finite_difference_jacobian, init_normal, init_uniform, masked_softmax_rows, softmax_rows, stats, Matrix, NormKind,
    SeededRng, DEFAULT_STEP,
};

/// How the source reaches the query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Encoder attention `ATT(Y, X, X)`: keys are the source only.
    EncoderAttention,
    /// Unidirectional cross attention `ATT(Y, [X;Y], [X;Y])` under a causal mask.
    CrossUnidirectional,
    /// Partial attention: keys are a feedforward transform of the source only.
    Partial,
}

impl AttentionMode {
    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::EncoderAttention => "encoder",
            AttentionMode::CrossUnidirectional => "cross",
            AttentionMode::Partial => "palm",
        }
    }
}

impl std::str::FromStr for AttentionMode {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" | "encoder_attention" => Ok(AttentionMode::EncoderAttention),
            "cross" | "cross_unidirectional" => Ok(AttentionMode::CrossUnidirectional),
            "palm" | "partial" => Ok(AttentionMode::Partial),
            other => Err(LabError::InvalidArgument(format!("unknown attention mode {other:?}"))),
        }
    }
}

/// One sensitivity question: how does output row `i` react to source row `j`?
#[derive(Clone, Debug)]
pub struct SensitivityQuery {
    pub x: Matrix,
    pub y: Matrix,
    pub a: Matrix,
    pub w: Matrix,
    /// Query row of `Y` (0-based; the generation step is `i + 1`).
    pub i: usize,
    /// Source row of `X` (0-based).
    pub j: usize,
    pub mode: AttentionMode,
    /// Feedforward weights for [`AttentionMode::Partial`]; the inner attention
    /// is rebuilt from `a` and `w`.
    pub partial: Option<PartialAttentionParams>,
}

impl SensitivityQuery {
    pub fn new(x: Matrix, y: Matrix, a: Matrix, w: Matrix, i: usize, j: usize, mode: AttentionMode) -> Result<Self> {
        let q = Self { x, y, a, w, i, j, mode, partial: None };
        q.validate()?;
        Ok(q)
    }

    pub fn with_partial(mut self, params: PartialAttentionParams) -> Result<Self> {
        self.partial = Some(params);
        self.validate()?;
        Ok(self)
    }

    fn d(&self) -> usize {
        self.x.cols()
    }

    fn validate(&self) -> Result<()> {
        let d = self.d();
        if self.y.cols() != d || self.a.shape() != (d, d) || self.w.shape() != (d, d) {
            return Err(LabError::DimensionMismatch {
                op: "SensitivityQuery",
                detail: format!(
                    "X {:?}, Y {:?}, A {:?}, W {:?}",
                    self.x.shape(),
                    self.y.shape(),
                    self.a.shape(),
                    self.w.shape()
                ),
            });
        }
        if self.x.rows() == 0 || self.j >= self.x.rows() {
            return Err(LabError::IndexOutOfRange(format!("source index {} of {}", self.j, self.x.rows())));
        }
        if self.i >= self.y.rows() {
            return Err(LabError::IndexOutOfRange(format!("target index {} of {}", self.i, self.y.rows())));
        }
        if let Some(p) = &self.partial {
            if p.d() != d {
                return Err(LabError::DimensionMismatch { op: "SensitivityQuery", detail: "partial params width".into() });
            }
        }
        Ok(())
    }

    fn scaled_a(&self) -> Matrix {
        self.a.scale(1.0 / (self.d() as f64).sqrt())
    }

    fn weights(&self) -> AttentionWeights {
        AttentionWeights::from_bilinear(&self.a, self.w.clone()).expect("validated shapes")
    }

    /// `[X; Y[0..=i]]`.
    fn concatenation(&self) -> Matrix {
        Matrix::vstack(&[&self.x, &self.y.slice_rows(0, self.i + 1)]).expect("validated widths")
    }

    fn partial_params(&self) -> Result<PartialAttentionParams> {
        let mut p = self
            .partial
            .clone()
            .ok_or_else(|| LabError::InvalidArgument("partial mode needs feedforward parameters".into()))?;
        p.inner = self.weights();
        p.dropout_rate = 0.0;
        Ok(p)
    }

    /// Output row `z_i` computed with the executable attention, for a given source matrix.
    pub fn output_row(&self, x: &Matrix) -> Result<Vec<f64>> {
        let probe = Self { x: x.clone(), ..self.clone() };
        let n = x.rows();
        match self.mode {
            AttentionMode::EncoderAttention => {
                let mask = AttentionMask::full(self.y.rows(), n)?;
                let out = attend(&self.y, x, x, &self.weights(), &mask)?;
                Ok(out.output.row(self.i).to_vec())
            }
            AttentionMode::CrossUnidirectional => {
                let q = probe.concatenation();
                let mask = make_causal_mask(q.rows())?;
                let out = attend(&q, &q, &q, &self.weights(), &mask)?;
                Ok(out.output.row(n + self.i).to_vec())
            }
            AttentionMode::Partial => {
                let q = probe.concatenation();
                let p = self.partial_params()?;
                let out = partial_attention_block(&q, n, &p, &mut SeededRng::new(0), false)?;
                Ok(out.output.row(n + self.i).to_vec())
            }
        }
    }
}

/// `Diag(p) − p pᵀ`.
fn softmax_jacobian(p: &[f64]) -> Matrix {
    let n = p.len();
    Matrix::from_fn(n, n, |r, c| if r == c { p[r] - p[r] * p[c] } else { -p[r] * p[c] })
}

/// `J = Wᵀ (Kᵀ S E + p_j I)` shared by both lemmas.
fn assemble(w: &Matrix, keys: &Matrix, s: &Matrix, e: &Matrix, p_j: f64) -> Matrix {
    let d = w.rows();
    let inner = keys.transpose().matmul(s).and_then(|m| m.matmul(e)).expect("consistent shapes");
    let mut inner = inner;
    for k in 0..d {
        inner.set(k, k, inner.get(k, k) + p_j);
    }
    w.transpose().matmul(&inner).expect("square")
}

/// `∂z_i/∂x_j` for the encoder attention `Z = Softmax(Y Aᵀ Xᵀ) X W`:
/// `J = Wᵀ (Xᵀ (Diag(p_i) − p_i p_iᵀ) (e_ji Y Aᵀ) + I p_ij)`.
pub fn encoder_attention_jacobian(q: &SensitivityQuery) -> Result<Matrix> {
    if q.mode != AttentionMode::EncoderAttention {
        return Err(LabError::InvalidArgument(format!("query mode is {:?}", q.mode)));
    }
    q.validate()?;
    encoder_form(&q.x, &q.y, &q.scaled_a(), &q.w, q.i, q.j)
}

/// Lemma-1 form with an already scaled bilinear matrix.
fn encoder_form(x: &Matrix, y: &Matrix, a: &Matrix, w: &Matrix, i: usize, j: usize) -> Result<Matrix> {
    let n = x.rows();
    let y_i = y.slice_rows(i, i + 1);
    let logits = y_i.matmul_t(a)?.matmul_t(x)?;
    let p = softmax_rows(&logits)?;
    let p = p.row(0);
    // e_ji Y Aᵀ: only row j is non-zero and equals y_iᵀ Aᵀ.
    let row = y_i.matmul_t(a)?;
    let mut e = Matrix::zeros(n, x.cols());
    e.row_mut(j).copy_from_slice(row.row(0));
    Ok(assemble(w, x, &softmax_jacobian(p), &e, p[j]))
}

/// `∂z_i/∂q_j` for self attention `Z = Softmax(Q Aᵀ Qᵀ) Q W`:
/// `J = Wᵀ (Qᵀ (Diag(p_i) − p_i p_iᵀ) (e_ji Q Aᵀ + Q A δ_ij) + I p_ij)`.
///
/// With a mask, `P` is the masked softmax; masked keys carry zero probability
/// and drop out of every term. `None` means every key is visible.
pub fn self_attention_jacobian(
    q: &Matrix,
    a: &Matrix,
    w: &Matrix,
    i: usize,
    j: usize,
    mask: Option<&AttentionMask>,
) -> Result<Matrix> {
    let (n, d) = q.shape();
    if a.shape() != (d, d) || w.shape() != (d, d) {
        return Err(LabError::DimensionMismatch { op: "self_attention_jacobian", detail: "A and W must be d×d".into() });
    }
    if i >= n || j >= n {
        return Err(LabError::IndexOutOfRange(format!("({i}, {j}) in {n} rows")));
    }
    if let Some(m) = mask {
        if (m.rows(), m.cols()) != (n, n) {
            return Err(LabError::DimensionMismatch { op: "self_attention_jacobian", detail: "mask shape".into() });
        }
    }
    let a = a.scale(1.0 / (d as f64).sqrt());
    let q_i = q.slice_rows(i, i + 1);
    let logits = q_i.matmul_t(&a)?.matmul_t(q)?;
    let p = masked_softmax_rows(&logits, |_, c| mask.is_none_or(|m| m.is_allowed(i, c)))?;
    let p = p.row(0);
    let mut e = Matrix::zeros(n, d);
    e.row_mut(j).copy_from_slice(q_i.matmul_t(&a)?.row(0));
    if i == j {
        let qa = q.matmul(&a)?;
        e.add_scaled_assign(&qa, 1.0);
    }
    Ok(assemble(w, q, &softmax_jacobian(p), &e, p[j]))
}

/// `∂z_{N+i}/∂x_j` for the unidirectional cross attention over `[X; Y]`.
pub fn cross_attention_jacobian(q: &SensitivityQuery) -> Result<Matrix> {
    if q.mode != AttentionMode::CrossUnidirectional {
        return Err(LabError::InvalidArgument(format!("query mode is {:?}", q.mode)));
    }
    if q.j >= q.x.rows() {
        return Err(LabError::TargetRowOutOfScope { j: q.j + 1, n: q.x.rows() });
    }
    q.validate()?;
    let concat = q.concatenation();
    let mask = make_causal_mask(concat.rows())?;
    self_attention_jacobian(&concat, &q.a, &q.w, q.x.rows() + q.i, q.j, Some(&mask))
}

/// `∂z_{N+i}/∂x_j` through the partial-attention path.
///
/// Row `j` of the memory depends on `x_j` alone, so the Jacobian factors into
/// the encoder-attention form over the memory times the feedforward Jacobian
/// `(I + W_P2ᵀ) Diag(1 − tanh²(u)) W_P1ᵀ`, `u = W_P1ᵀ x_j + b_P1`.
pub fn partial_attention_jacobian(q: &SensitivityQuery) -> Result<Matrix> {
    if q.mode != AttentionMode::Partial {
        return Err(LabError::InvalidArgument(format!("query mode is {:?}", q.mode)));
    }
    q.validate()?;
    let p = q.partial_params()?;
    let d = q.d();
    let n = q.x.rows();
    let concat = q.concatenation();
    let out = partial_attention_block(&concat, n, &p, &mut SeededRng::new(0), false)?;
    let inner_a = p.inner.bilinear().scale(1.0 / (d as f64).sqrt());
    let queries = concat.slice_rows(n, concat.rows());
    let outer = encoder_form(&out.memory, &queries, &inner_a, p.inner.w_v(), q.i, q.j)?;

    let x_j = q.x.slice_rows(q.j, q.j + 1);
    let u = x_j.matmul(&p.w_p1)?.add_row_broadcast(&p.b_p1)?;
    let slope: Vec<f64> = u.row(0).iter().map(|v| 1.0 - v.tanh().powi(2)).collect();
    let lhs = Matrix::identity(d).add(&p.w_p2.transpose())?;
    let ff = lhs.matmul(&Matrix::diag(&slope))?.matmul(&p.w_p1.transpose())?;
    outer.matmul(&ff)
}

/// Closed-form Jacobian for whichever mode the query carries.
pub fn closed_form_jacobian(q: &SensitivityQuery) -> Result<Matrix> {
    match q.mode {
        AttentionMode::EncoderAttention => encoder_attention_jacobian(q),
        AttentionMode::CrossUnidirectional => cross_attention_jacobian(q),
        AttentionMode::Partial => partial_attention_jacobian(q),
    }
}

/// Central-difference Jacobian of `z_i` with respect to `x_j`, using the executable attention.
pub fn numerical_jacobian(q: &SensitivityQuery, h: f64) -> Result<Matrix> {
    let d = q.d();
    let x0 = q.x.row(q.j).to_vec();
    finite_difference_jacobian(
        |xj| {
            let mut x = q.x.clone();
            x.row_mut(q.j).copy_from_slice(xj);
            q.output_row(&x)
        },
        &x0,
        h,
    )
    .inspect(|m| debug_assert_eq!(m.shape(), (d, d)))
}

/// `S_ij = ‖J_ij‖`.
pub fn sensitivity(j: &Matrix, norm: NormKind) -> Result<f64> {
    norm.apply(j)
}

/// `c3 · (1/(N+i) + √ln(1/δ))`; the encoder case is `i = 0`.
pub fn theorem_bound(n: usize, i: usize, delta: f64, c3: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(LabError::InvalidArgument(format!("delta {delta} not in (0, 1)")));
    }
    if n == 0 {
        return Err(LabError::InvalidArgument("N must be >= 1".into()));
    }
    if c3 <= 0.0 {
        return Err(LabError::InvalidArgument(format!("c3 {c3} must be positive")));
    }
    Ok(c3 * (1.0 / (n + i) as f64 + (1.0 / delta).ln().sqrt()))
}

/// Monte-Carlo check of `E[p_ij] = 1/d_X` for softmax attention over Gaussian
/// queries and keys. Returns the largest relative deviation over key columns.
pub fn expected_attention_check(rng: &mut SeededRng, d: usize, d_x: usize, trials: usize) -> Result<f64> {
    if trials < 1000 {
        return Err(LabError::InvalidArgument(format!("need at least 1000 trials, got {trials}")));
    }
    if d == 0 || d_x == 0 {
        return Err(LabError::InvalidArgument("d and d_X must be positive".into()));
    }
    let rows = d_x;
    let mut column_sums = vec![0.0; d_x];
    let scale = 1.0 / (d as f64).sqrt();
    for _ in 0..trials {
        let q = init_normal(rows, d, rng);
        let k = init_normal(d_x, d, rng);
        let p = softmax_rows(&q.matmul_t(&k)?.scale(scale))?;
        for r in 0..rows {
            for (s, v) in column_sums.iter_mut().zip(p.row(r)) {
                *s += v;
            }
        }
    }
    let target = 1.0 / d_x as f64;
    let samples = (rows * trials) as f64;
    Ok(column_sums.iter().map(|s| ((s / samples) - target).abs() / target).fold(0.0, f64::max))
}

/// Ratio `‖Δz_i‖ / ‖Δx_j‖` for one random perturbation of norm `eps`.
pub fn perturbation_ratio(q: &SensitivityQuery, eps: f64, rng: &mut SeededRng) -> Result<f64> {
    if eps <= 0.0 {
        return Err(LabError::InvalidArgument(format!("eps {eps} must be positive")));
    }
    let delta = rng.sphere(q.d(), eps);
    perturbation_ratio_along(q, &delta)
}

/// Ratio for a given perturbation direction.
pub fn perturbation_ratio_along(q: &SensitivityQuery, delta: &[f64]) -> Result<f64> {
    let base = q.output_row(&q.x)?;
    let mut x = q.x.clone();
    for (v, dv) in x.row_mut(q.j).iter_mut().zip(delta) {
        *v += dv;
    }
    let moved = q.output_row(&x)?;
    let num = base.iter().zip(&moved).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let den = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(num / den)
}

/// Settings for [`sensitivity_curve`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityConfig {
    pub d: usize,
    pub n: usize,
    pub i_max: usize,
    pub mode: AttentionMode,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub norm: NormKind,
    /// Perturbation norm for the ratio series.
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Confidence parameter used for the displayed bound.
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Entries of X, Y, A, W are drawn from U[-entry_bound, entry_bound].
    #[serde(default = "default_entry_bound")]
    pub entry_bound: f64,
}

fn default_eps() -> f64 {
    1e-4
}

fn default_delta() -> f64 {
    0.5
}

fn default_entry_bound() -> f64 {
    1.0
}

impl SensitivityConfig {
    pub fn new(d: usize, n: usize, i_max: usize, mode: AttentionMode, seeds: Vec<u64>) -> Self {
        Self {
            d,
            n,
            i_max,
            mode,
            seeds,
            norm: NormKind::Spectral,
            eps: default_eps(),
            delta: default_delta(),
            entry_bound: default_entry_bound(),
        }
    }
}

/// Per-step sensitivity statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub mode: AttentionMode,
    pub steps: Vec<usize>,
    pub mean_sensitivity: Vec<f64>,
    pub std_sensitivity: Vec<f64>,
    pub theorem_bound: Vec<f64>,
    pub perturbation_ratio: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Constant scaling the displayed bound so that it meets the step-1 mean.
    pub c3: f64,
}

pub const REPORT_CSV_HEADER: &str = "step,mean_sensitivity,std_sensitivity,bound,perturbation_ratio";

impl SensitivityReport {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Spearman correlation between the step number and the mean sensitivity.
    pub fn sensitivity_trend(&self) -> f64 {
        let steps: Vec<f64> = self.steps.iter().map(|&s| s as f64).collect();
        stats::spearman(&steps, &self.mean_sensitivity)
    }

    /// Spearman correlation between the step number and the perturbation ratio.
    pub fn ratio_trend(&self) -> f64 {
        let steps: Vec<f64> = self.steps.iter().map(|&s| s as f64).collect();
        stats::spearman(&steps, &self.perturbation_ratio)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_CSV_HEADER);
        out.push('\n');
        for k in 0..self.len() {
            writeln!(
                out,
                "{},{:.16e},{:.16e},{:.16e},{:.16e}",
                self.steps[k],
                self.mean_sensitivity[k],
                self.std_sensitivity[k],
                self.theorem_bound[k],
                self.perturbation_ratio[k]
            )
            .expect("writing to a String");
        }
        out
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// One parsed CSV row of a sensitivity report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub step: usize,
    pub mean_sensitivity: f64,
    pub std_sensitivity: f64,
    pub bound: f64,
    pub perturbation_ratio: f64,
}

/// Reads back a CSV written by [`SensitivityReport::to_csv`].
pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_CSV_HEADER) {
        return Err(LabError::Format("unexpected sensitivity CSV header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(LabError::Format(format!("bad row {line:?}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| LabError::Format(format!("{s:?}: {e}")));
            Ok(ReportRow {
                step: f[0].parse().map_err(|e| LabError::Format(format!("{:?}: {e}", f[0])))?,
                mean_sensitivity: num(f[1])?,
                std_sensitivity: num(f[2])?,
                bound: num(f[3])?,
                perturbation_ratio: num(f[4])?,
            })
        })
        .collect()
}

/// One random analysis instance (the draws of a single seed).
#[derive(Clone, Debug)]
pub struct Instance {
    pub x: Matrix,
    pub y: Matrix,
    pub a: Matrix,
    pub w: Matrix,
    pub partial: PartialAttentionParams,
}

impl Instance {
    /// Draws X (`n×d`), Y (`i_max×d`), A, W and the partial feedforward weights
    /// from `U[-bound, bound]`.
    pub fn random(d: usize, n: usize, i_max: usize, bound: f64, rng: &mut SeededRng) -> Self {
        let x = init_uniform(n, d, bound, rng);
        let y = init_uniform(i_max, d, bound, rng);
        let a = init_uniform(d, d, bound, rng);
        let w = init_uniform(d, d, bound, rng);
        let partial = PartialAttentionParams {
            w_p1: init_uniform(d, d, bound, rng),
            b_p1: init_uniform(1, d, bound, rng),
            w_p2: init_uniform(d, d, bound, rng),
            b_p2: init_uniform(1, d, bound, rng),
            inner: AttentionWeights::zeros(d),
            dropout_rate: 0.0,
        };
        Self { x, y, a, w, partial }
    }

    pub fn query(&self, i: usize, j: usize, mode: AttentionMode) -> Result<SensitivityQuery> {
        let q = SensitivityQuery::new(self.x.clone(), self.y.clone(), self.a.clone(), self.w.clone(), i, j, mode)?;
        if mode == AttentionMode::Partial {
            q.with_partial(self.partial.clone())
        } else {
            Ok(q)
        }
    }
}

/// Mean/std sensitivity and mean perturbation ratio per generation step,
/// averaged over every source row and seed with fresh random instances per seed.
pub fn sensitivity_curve(cfg: &SensitivityConfig) -> Result<SensitivityReport> {
    if cfg.i_max == 0 || cfg.n == 0 || cfg.d == 0 {
        return Err(LabError::InvalidArgument("d, N and i_max must be >= 1".into()));
    }
    if cfg.seeds.is_empty() {
        return Err(LabError::InvalidArgument("at least one seed is required".into()));
    }
    let mut samples = vec![Vec::new(); cfg.i_max];
    let mut ratios = vec![Vec::new(); cfg.i_max];
    for &seed in &cfg.seeds {
        let mut rng = SeededRng::new(seed);
        let inst = Instance::random(cfg.d, cfg.n, cfg.i_max, cfg.entry_bound, &mut rng);
        for i in 0..cfg.i_max {
            for j in 0..cfg.n {
                let q = inst.query(i, j, cfg.mode)?;
                let jac = closed_form_jacobian(&q)?;
                samples[i].push(sensitivity(&jac, cfg.norm)?);
                ratios[i].push(perturbation_ratio(&q, cfg.eps, &mut rng)?);
            }
        }
    }
    let mean_sensitivity: Vec<f64> = samples.iter().map(|s| stats::mean(s)).collect();
    let std_sensitivity = samples.iter().map(|s| stats::std_dev(s)).collect();
    let perturbation_ratio = ratios.iter().map(|r| stats::mean(r)).collect();
    // Keys seen by step i: N for encoder and partial attention, N + i for cross attention.
    let extra = |step: usize| if cfg.mode == AttentionMode::CrossUnidirectional { step } else { 0 };
    let shape_1 = theorem_bound(cfg.n, extra(1), cfg.delta, 1.0)?;
    let c3 = if mean_sensitivity[0] > 0.0 { mean_sensitivity[0] / shape_1 } else { 1.0 };
    let theorem_bound = (1..=cfg.i_max)
        .map(|step| theorem_bound(cfg.n, extra(step), cfg.delta, c3))
        .collect::<Result<_>>()?;
    Ok(SensitivityReport {
        mode: cfg.mode,
        steps: (1..=cfg.i_max).collect(),
        mean_sensitivity,
        std_sensitivity,
        theorem_bound,
        perturbation_ratio,
        seeds: cfg.seeds.clone(),
        c3,
    })
}

/// Largest relative Frobenius error between a closed form and central differences.
pub fn closed_form_error(q: &SensitivityQuery) -> Result<f64> {
    let exact = closed_form_jacobian(q)?;
    let numeric = numerical_jacobian(q, DEFAULT_STEP)?;
    let scale = crate::math::frobenius_norm(&exact).max(1e-12);
    Ok(crate::math::frobenius_norm(&exact.sub(&numeric)?) / scale)
}

/// Largest acceptable relative error between closed forms and central differences.
pub const CLOSED_FORM_TOL: f64 = 1e-6;

/// Upper limits for the random instance sizes of [`verify_closed_forms`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyDims {
    pub d: usize,
    pub n: usize,
    pub i: usize,
}

impl Default for VerifyDims {
    fn default() -> Self {
        Self { d: 8, n: 6, i: 4 }
    }
}

impl std::str::FromStr for VerifyDims {
    type Err = LabError;

    /// Parses `d=8,n=6,i=4`; omitted keys keep their defaults.
    fn from_str(s: &str) -> Result<Self> {
        let mut dims = VerifyDims::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| LabError::InvalidArgument(format!("expected key=value, got {part:?}")))?;
            let value: usize = value
                .trim()
                .parse()
                .map_err(|_| LabError::InvalidArgument(format!("bad value in {part:?}")))?;
            if value == 0 {
                return Err(LabError::InvalidArgument(format!("{key} must be >= 1")));
            }
            match key.trim().to_ascii_lowercase().as_str() {
                "d" => dims.d = value,
                "n" => dims.n = value,
                "i" => dims.i = value,
                other => return Err(LabError::InvalidArgument(format!("unknown dimension {other:?}"))),
            }
        }
        Ok(dims)
    }
}

/// Worst case found by [`verify_closed_forms`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub trials: usize,
    pub max_error: f64,
    /// Seed of the trial with the largest error; `Instance` draws are reproducible from it.
    pub worst_seed: u64,
    pub worst_mode: AttentionMode,
    /// Largest error per checked mode.
    pub per_mode: Vec<(AttentionMode, f64)>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.max_error <= CLOSED_FORM_TOL
    }
}

/// Random trial `seed`: sizes `d ≤ dims.d`, `N ≤ dims.n`, steps `≤ dims.i`, plus the
/// query indices `(i, j)`.
pub fn verify_trial(seed: u64, dims: VerifyDims) -> (Instance, usize, usize) {
    let mut rng = SeededRng::new(seed);
    let d = 1 + rng.below(dims.d);
    let n = 1 + rng.below(dims.n);
    let steps = 1 + rng.below(dims.i);
    let i = rng.below(steps);
    let j = rng.below(n);
    (Instance::random(d, n, steps, 1.0, &mut rng), i, j)
}

/// Compares every closed-form Jacobian in `modes` with central differences on
/// `trials` random instances seeded `base_seed, base_seed + 1, …`.
pub fn verify_closed_forms(trials: usize, dims: VerifyDims, modes: &[AttentionMode], base_seed: u64) -> Result<VerifyReport> {
    if trials == 0 || modes.is_empty() {
        return Err(LabError::InvalidArgument("need at least one trial and one mode".into()));
    }
    let mut per_mode: Vec<(AttentionMode, f64)> = modes.iter().map(|&m| (m, 0.0)).collect();
    let mut worst = (0.0, base_seed, modes[0]);
    for t in 0..trials as u64 {
        let seed = base_seed.wrapping_add(t);
        let (inst, i, j) = verify_trial(seed, dims);
        for (mode, best) in per_mode.iter_mut() {
            let err = closed_form_error(&inst.query(i, j, *mode)?)?;
            if !err.is_finite() {
                return Err(LabError::NonFinite(format!("closed-form check, seed {seed}")));
            }
            *best = best.max(err);
            if err > worst.0 {
                worst = (err, seed, *mode);
            }
        }
    }
    Ok(VerifyReport { trials, max_error: worst.0, worst_seed: worst.1, worst_mode: worst.2, per_mode })
}
