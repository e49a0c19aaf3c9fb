//! Next-token losses, gradients and the finite-difference gradient check.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::math::SeededRng;

use super::config::{LossScope, ModelConfig, Token};
use super::forward::Logits;
use super::network::{build_graph, Model, Outputs};
use super::params::{Gradients, ParamId};
use super::tape::{log_softmax_at, Tape};

/// Mean next-token NLL over the loss scope and its split into target and source parts.
///
/// `decoder_nll` and `source_nll` are each part's share of the mean, so
/// `total = decoder_nll + source_nll`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub decoder_nll: f64,
    pub source_nll: f64,
    pub decoder_tokens: usize,
    pub source_tokens: usize,
}

impl LossBreakdown {
    fn from_sums(decoder_sum: f64, decoder_tokens: usize, source_sum: f64, source_tokens: usize) -> Result<Self> {
        let n = decoder_tokens + source_tokens;
        if n == 0 {
            return Err(LabError::EmptyScope);
        }
        let n = n as f64;
        Ok(Self {
            total: (decoder_sum + source_sum) / n,
            decoder_nll: decoder_sum / n,
            source_nll: source_sum / n,
            decoder_tokens,
            source_tokens,
        })
    }

    pub fn tokens(&self) -> usize {
        self.decoder_tokens + self.source_tokens
    }

    /// Token-weighted combination, i.e. the breakdown of the union of the scopes.
    pub fn combine(parts: &[LossBreakdown]) -> Result<Self> {
        let (mut ds, mut dn, mut ss, mut sn) = (0.0, 0, 0.0, 0);
        for p in parts {
            let n = p.tokens() as f64;
            ds += p.decoder_nll * n;
            ss += p.source_nll * n;
            dn += p.decoder_tokens;
            sn += p.source_tokens;
        }
        Self::from_sums(ds, dn, ss, sn)
    }
}

/// Prediction targets: `(source part, target part)`.
pub(crate) fn targets(config: &ModelConfig, s: &[Token], t: &[Token]) -> (Vec<usize>, Vec<usize>) {
    let source = s[1..].iter().copied().chain([config.vocab.sep]).map(|x| x as usize).collect();
    let target = t.iter().copied().chain([config.vocab.eos]).map(|x| x as usize).collect();
    (source, target)
}

fn includes_source(config: &ModelConfig) -> bool {
    config.loss_scope == LossScope::FullSequence
}

/// Loss of precomputed logits for the pair `(s, t)`.
pub fn compute_loss(logits: &Logits, config: &ModelConfig, s: &[Token], t: &[Token]) -> Result<LossBreakdown> {
    let (src_targets, tgt_targets) = targets(config, s, t);
    let nll = |m: &crate::math::Matrix, targets: &[usize]| -> Result<f64> {
        if m.rows() != targets.len() || m.cols() != config.vocab.size {
            return Err(LabError::DimensionMismatch {
                op: "compute_loss",
                detail: format!("logits {:?} for {} targets, vocab {}", m.shape(), targets.len(), config.vocab.size),
            });
        }
        Ok(targets.iter().enumerate().map(|(r, &y)| -log_softmax_at(m.row(r), y)).sum())
    };
    let decoder_sum = nll(&logits.target, &tgt_targets)?;
    let (source_sum, source_tokens) = if includes_source(config) {
        let src = logits
            .source
            .as_ref()
            .ok_or_else(|| LabError::InvalidArgument("full-sequence loss needs source logits".into()))?;
        (nll(src, &src_targets)?, src_targets.len())
    } else {
        (0.0, 0)
    };
    LossBreakdown::from_sums(decoder_sum, tgt_targets.len(), source_sum, source_tokens)
}

/// A training pair `(source, target)`.
pub type Pair = (Vec<Token>, Vec<Token>);

/// Mean loss over `batch` and its gradient with respect to every parameter tensor.
///
/// Dropout is active iff `dropout_rng` is given. Tensors shared between stacks
/// receive the sum of their contributions.
pub fn loss_and_gradients(
    model: &Model,
    batch: &[Pair],
    mut dropout_rng: Option<&mut SeededRng>,
) -> Result<(LossBreakdown, Gradients)> {
    let config = model.config();
    let with_source = includes_source(config);
    let tokens: usize = batch.iter().map(|(s, t)| t.len() + 1 + if with_source { s.len() } else { 0 }).sum();
    if tokens == 0 {
        return Err(LabError::EmptyScope);
    }
    let scale = 1.0 / tokens as f64;
    let mut grads = Gradients::zeros_like(model.params());
    let (mut ds, mut dn, mut ss, mut sn) = (0.0, 0, 0.0, 0);
    for (s, t) in batch {
        let mut tape = Tape::new(model.params());
        let out = build_graph(model, &mut tape, s, t, dropout_rng.as_deref_mut(), Outputs::All { with_source })?;
        let (src_targets, tgt_targets) = targets(config, s, t);
        let mut root = tape.nll(out.target, &tgt_targets, scale);
        ds += tape.scalar(root) / scale;
        dn += tgt_targets.len();
        if with_source {
            let src = out.source.expect("source logits requested");
            let src_nll = tape.nll(src, &src_targets, scale);
            ss += tape.scalar(src_nll) / scale;
            sn += src_targets.len();
            root = tape.add(root, src_nll);
        }
        let g = tape.backward(root)?;
        grads.add_assign(&g, 1.0);
    }
    Ok((LossBreakdown::from_sums(ds, dn, ss, sn)?, grads))
}

/// Mean loss over `batch` without gradients (dropout off).
pub fn batch_loss(model: &Model, batch: &[Pair]) -> Result<LossBreakdown> {
    let parts = batch
        .iter()
        .map(|(s, t)| compute_loss(&super::forward::forward(model, s, t, None)?, model.config(), s, t))
        .collect::<Result<Vec<_>>>()?;
    LossBreakdown::combine(&parts)
}

/// Largest number of scalar parameters compared by [`gradient_check`].
pub const GRADIENT_CHECK_SAMPLES: usize = 200;

/// Gradient magnitude below which errors are measured absolutely rather than relatively.
pub const GRADIENT_CHECK_FLOOR: f64 = 1e-4;

/// Outcome of [`gradient_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares analytic gradients with central differences of step `h` on up to
/// [`GRADIENT_CHECK_SAMPLES`] scalar parameters drawn with `seed`, dropout off.
///
/// The error of one scalar is `|a − n| / max(|a|, |n|, GRADIENT_CHECK_FLOOR)`.
pub fn gradient_check(model: &Model, batch: &[Pair], h: f64, seed: u64) -> Result<GradientCheck> {
    let (_, grads) = loss_and_gradients(model, batch, None)?;
    let mut slots: Vec<(ParamId, usize)> = model
        .params()
        .ids()
        .flat_map(|id| (0..model.params().get(id).data().len()).map(move |k| (id, k)))
        .collect();
    if slots.len() > GRADIENT_CHECK_SAMPLES {
        SeededRng::new(seed).shuffle(&mut slots);
        slots.truncate(GRADIENT_CHECK_SAMPLES);
    }
    let mut probe = model.clone();
    let mut best = GradientCheck {
        max_relative_error: 0.0,
        worst_parameter: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: slots.len(),
    };
    for &(id, k) in &slots {
        let x0 = model.params().get(id).data()[k];
        probe.params_mut().get_mut(id).data_mut()[k] = x0 + h;
        let plus = batch_loss(&probe, batch)?.total;
        probe.params_mut().get_mut(id).data_mut()[k] = x0 - h;
        let minus = batch_loss(&probe, batch)?.total;
        probe.params_mut().get_mut(id).data_mut()[k] = x0;
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads.get(id).data()[k];
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADIENT_CHECK_FLOOR);
        if err > best.max_relative_error || best.worst_parameter.is_empty() {
            best.max_relative_error = err;
            best.worst_parameter = model.params().name(id).to_string();
            best.worst_index = k;
            best.analytic = analytic;
            best.numeric = numeric;
        }
    }
    Ok(best)
}
