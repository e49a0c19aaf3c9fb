//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter as
//! leaves that borrow from the [`ModelParams`] store; `backward` walks the
//! tape in reverse and accumulates one gradient per parameter tensor, so a
//! tensor used in several places (shared encoder/decoder weights, tied output
//! embeddings) receives the sum of all its contributions.

use crate::attention::AttentionMask;
use crate::error::{LabError, Result};
use crate::math::{gemm, Matrix, SeededRng};

use super::params::{Gradients, ModelParams, ParamId};

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Var(usize);

enum Op {
    Param(ParamId),
    #[cfg_attr(not(test), allow(dead_code))]
    Input,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Matrix, inv_std: Vec<f64> },
    Softmax(Var),
    Rows(Var, usize),
    VStack(Vec<Var>),
    Cols(Var, usize, usize),
    HStack(Vec<Var>),
    Gather(Var, Vec<usize>),
    Dropout(Var, Matrix),
    Nll { logits: Var, targets: Vec<usize>, scale: f64, probs: Matrix },
}

struct Node {
    value: Option<Matrix>,
    op: Op,
}

pub(crate) struct Tape<'p> {
    params: &'p ModelParams,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        Self { params, nodes: Vec::with_capacity(256), param_vars: vec![None; params.len()] }
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.get(*id),
            (None, _) => unreachable!("non-leaf node without a value"),
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a parameter tensor; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id) });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    #[cfg(test)]
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Input)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.rows(), "tape matmul shape");
        let mut out = Matrix::zeros(av.rows(), bv.cols());
        gemm(1.0, av, false, bv, false, 0.0, &mut out);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "tape matmul_t shape");
        let mut out = Matrix::zeros(av.rows(), bv.rows());
        gemm(1.0, av, false, bv, true, 0.0, &mut out);
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b)).expect("tape add shape");
        self.push(out, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let out = self.value(a).add_row_broadcast(self.value(bias)).expect("tape bias shape");
        self.push(out, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).scale(k);
        self.push(out, Op::Scale(a, k))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a))
    }

    /// Row-wise layer normalisation with learned gain and bias (both `1×cols`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = xhat.clone();
        for r in 0..rows {
            for ((o, gc), bc) in out.row_mut(r).iter_mut().zip(g.row(0)).zip(b.row(0)) {
                *o = *o * gc + bc;
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    /// Row softmax; masked entries are exact zeros. `None` leaves every entry visible.
    pub fn softmax(&mut self, a: Var, mask: Option<&AttentionMask>) -> Result<Var> {
        let out = match mask {
            Some(m) => crate::math::masked_softmax_rows(self.value(a), |r, c| m.is_allowed(r, c))?,
            None => crate::math::softmax_rows(self.value(a))?,
        };
        Ok(self.push(out, Op::Softmax(a)))
    }

    pub fn rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice_rows(start, end);
        self.push(out, Op::Rows(a, start))
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|v| self.value(*v)).collect();
        let out = Matrix::vstack(&mats).expect("tape vstack widths");
        self.push(out, Op::VStack(parts.to_vec()))
    }

    pub fn cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice_cols(start, end);
        self.push(out, Op::Cols(a, start, end))
    }

    pub fn hstack(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|v| self.value(*v)).collect();
        let out = Matrix::hstack(&mats).expect("tape hstack heights");
        self.push(out, Op::HStack(parts.to_vec()))
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(out, Op::Gather(table, ids.to_vec()))
    }

    /// Inverted dropout; a no-op node is skipped entirely when `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: Option<&mut SeededRng>) -> Var {
        let Some(rng) = rng else { return a };
        if rate == 0.0 {
            return a;
        }
        let (rows, cols) = self.value(a).shape();
        let keep = 1.0 / (1.0 - rate);
        let mask = Matrix::from_fn(rows, cols, |_, _| if rng.uniform() < rate { 0.0 } else { keep });
        let out = self.value(a).hadamard(&mask).expect("same shape");
        self.push(out, Op::Dropout(a, mask))
    }

    /// Elementwise product with a constant matrix.
    #[cfg(test)]
    pub fn mul_const(&mut self, a: Var, m: Matrix) -> Var {
        let out = self.value(a).hadamard(&m).expect("same shape");
        self.push(out, Op::Dropout(a, m))
    }

    /// `scale · Σ_r −log softmax(logits_r)[targets_r]` as a 1×1 node.
    pub fn nll(&mut self, logits: Var, targets: &[usize], scale: f64) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "one target per logits row");
        let probs = crate::math::softmax_rows(lv).expect("finite logits");
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            total -= log_softmax_at(lv.row(r), t);
        }
        self.push(Matrix::filled(1, 1, scale * total), Op::Nll { logits, targets: targets.to_vec(), scale, probs })
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).get(0, 0)
    }

    /// Gradients of the 1×1 node `root` with respect to every parameter.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.shape() != (1, 1) {
            return Err(LabError::InvalidArgument("backward needs a scalar root".into()));
        }
        if !root_value.get(0, 0).is_finite() {
            return Err(LabError::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut out = Gradients::zeros_like(self.params);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Param(id) => out.get_mut(*id).add_scaled_assign(&g, 1.0),
                Op::Input => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = accumulate_into(&mut grads, *a, av.shape());
                    gemm(1.0, &g, false, bv, true, 1.0, da);
                    let db = accumulate_into(&mut grads, *b, bv.shape());
                    gemm(1.0, av, true, &g, false, 1.0, db);
                }
                Op::MatMulT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = accumulate_into(&mut grads, *a, av.shape());
                    gemm(1.0, &g, false, bv, false, 1.0, da);
                    let db = accumulate_into(&mut grads, *b, bv.shape());
                    gemm(1.0, &g, true, av, false, 1.0, db);
                }
                Op::Add(a, b) => {
                    accumulate_into(&mut grads, *a, g.shape()).add_scaled_assign(&g, 1.0);
                    accumulate_into(&mut grads, *b, g.shape()).add_scaled_assign(&g, 1.0);
                }
                Op::AddRow(a, bias) => {
                    let col_sums = Matrix::from_fn(1, g.cols(), |_, c| (0..g.rows()).map(|r| g.get(r, c)).sum());
                    accumulate_into(&mut grads, *bias, col_sums.shape()).add_scaled_assign(&col_sums, 1.0);
                    accumulate_into(&mut grads, *a, g.shape()).add_scaled_assign(&g, 1.0);
                }
                Op::Scale(a, k) => accumulate_into(&mut grads, *a, g.shape()).add_scaled_assign(&g, *k),
                Op::Tanh(a) => {
                    let y = self.nodes[idx].value.as_ref().expect("value");
                    let local = g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv));
                    accumulate_into(&mut grads, *a, g.shape()).add_scaled_assign(&local, 1.0);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let local = g.zip_map(x, |gv, xv| gv * gelu_grad(xv));
                    accumulate_into(&mut grads, *a, g.shape()).add_scaled_assign(&local, 1.0);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let gv = self.value(*gain);
                    let (rows, cols) = xhat.shape();
                    let mut dgain = Matrix::zeros(1, cols);
                    let mut dbias = Matrix::zeros(1, cols);
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..cols {
                            dgain.data_mut()[c] += gr[c] * xr[c];
                            dbias.data_mut()[c] += gr[c];
                            let dxhat = gr[c] * gv.get(0, c);
                            sum_d += dxhat;
                            sum_dx += dxhat * xr[c];
                        }
                        let n = cols as f64;
                        let row = dx.row_mut(r);
                        for c in 0..cols {
                            let dxhat = gr[c] * gv.get(0, c);
                            row[c] = inv_std[r] / n * (n * dxhat - sum_d - xr[c] * sum_dx);
                        }
                    }
                    accumulate_into(&mut grads, *gain, (1, cols)).add_scaled_assign(&dgain, 1.0);
                    accumulate_into(&mut grads, *bias, (1, cols)).add_scaled_assign(&dbias, 1.0);
                    accumulate_into(&mut grads, *x, (rows, cols)).add_scaled_assign(&dx, 1.0);
                }
                Op::Softmax(a) => {
                    let p = self.nodes[idx].value.as_ref().expect("value");
                    let mut local = Matrix::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let dot: f64 = g.row(r).iter().zip(p.row(r)).map(|(x, y)| x * y).sum();
                        for ((o, gv), pv) in local.row_mut(r).iter_mut().zip(g.row(r)).zip(p.row(r)) {
                            *o = pv * (gv - dot);
                        }
                    }
                    accumulate_into(&mut grads, *a, p.shape()).add_scaled_assign(&local, 1.0);
                }
                Op::Rows(a, start) => {
                    let shape = self.value(*a).shape();
                    let da = accumulate_into(&mut grads, *a, shape);
                    for r in 0..g.rows() {
                        for (o, v) in da.row_mut(start + r).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
                Op::VStack(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let shape = self.value(*p).shape();
                        let dp = accumulate_into(&mut grads, *p, shape);
                        for r in 0..shape.0 {
                            for (o, v) in dp.row_mut(r).iter_mut().zip(g.row(offset + r)) {
                                *o += v;
                            }
                        }
                        offset += shape.0;
                    }
                }
                Op::Cols(a, start, end) => {
                    let shape = self.value(*a).shape();
                    let da = accumulate_into(&mut grads, *a, shape);
                    for r in 0..g.rows() {
                        for (o, v) in da.row_mut(r)[*start..*end].iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
                Op::HStack(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let shape = self.value(*p).shape();
                        let dp = accumulate_into(&mut grads, *p, shape);
                        for r in 0..shape.0 {
                            for (o, v) in dp.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + shape.1]) {
                                *o += v;
                            }
                        }
                        offset += shape.1;
                    }
                }
                Op::Gather(table, ids) => {
                    let shape = self.value(*table).shape();
                    let dt = accumulate_into(&mut grads, *table, shape);
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
                Op::Dropout(a, mask) => {
                    let local = g.hadamard(mask).expect("same shape");
                    accumulate_into(&mut grads, *a, g.shape()).add_scaled_assign(&local, 1.0);
                }
                Op::Nll { logits, targets, scale, probs } => {
                    let k = g.get(0, 0) * scale;
                    let mut local = probs.scale(k);
                    for (r, &t) in targets.iter().enumerate() {
                        local.set(r, t, local.get(r, t) - k);
                    }
                    accumulate_into(&mut grads, *logits, probs.shape()).add_scaled_assign(&local, 1.0);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate_into(grads: &mut [Option<Matrix>], v: Var, shape: (usize, usize)) -> &mut Matrix {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

/// `log softmax(row)[target]`, computed stably.
pub(crate) fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[target] - lse
}
