//! Forward passes returning logit matrices.

use crate::error::{LabError, Result};
use crate::math::{Matrix, SeededRng};

use super::config::{Architecture, LossScope, Token};
use super::network::{build_graph, Model, Outputs};
use super::tape::Tape;

/// Next-token logits of one `(s, t)` pair, split at the separator.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits {
    /// `|s|` rows predicting `s_2 … s_|s|, ⇒`; absent when the model has no source predictions.
    pub source: Option<Matrix>,
    /// `|t| + 1` rows predicting `t_1 … t_|t|, eos`.
    pub target: Matrix,
}

impl Logits {
    /// Source rows followed by target rows: for decoder-only models, one row per position of `a`.
    pub fn joint(&self) -> Matrix {
        match &self.source {
            Some(src) => Matrix::vstack(&[src, &self.target]).expect("same vocab width"),
            None => self.target.clone(),
        }
    }
}

/// Runs `model` on `(s, t)`. Dropout is applied iff `dropout_rng` is given.
pub fn forward(model: &Model, s: &[Token], t: &[Token], dropout_rng: Option<&mut SeededRng>) -> Result<Logits> {
    let with_source = model.config().architecture() != Architecture::EncoderDecoder
        || model.config().loss_scope == LossScope::FullSequence;
    let mut tape = Tape::new(model.params());
    let out = build_graph(model, &mut tape, s, t, dropout_rng, Outputs::All { with_source })?;
    Ok(Logits { source: out.source.map(|v| tape.value(v).clone()), target: tape.value(out.target).clone() })
}

fn require(model: &Model, arch: Architecture, op: &str) -> Result<()> {
    if model.config().architecture() == arch {
        Ok(())
    } else {
        Err(LabError::Config(format!("{op} called on a {} model", model.config().variant)))
    }
}

/// Decoder-only pass over `a = s ⧺ [⇒] ⧺ t`: one logit row per position of `a`.
pub fn forward_lm(model: &Model, s: &[Token], t: &[Token], dropout_rng: Option<&mut SeededRng>) -> Result<Matrix> {
    require(model, Architecture::DecoderOnly, "forward_lm")?;
    Ok(forward(model, s, t, dropout_rng)?.joint())
}

/// Decoder-only pass with partial attention enabled (PALM and LM-PA).
pub fn forward_palm(model: &Model, s: &[Token], t: &[Token], dropout_rng: Option<&mut SeededRng>) -> Result<Matrix> {
    if !model.config().partial_attention {
        return Err(LabError::Config("forward_palm needs partial_attention".into()));
    }
    forward_lm(model, s, t, dropout_rng)
}

/// Regularized encoder-decoder pass: `(encoder logits, decoder logits)`.
pub fn forward_red(
    model: &Model,
    s: &[Token],
    t: &[Token],
    dropout_rng: Option<&mut SeededRng>,
) -> Result<(Matrix, Matrix)> {
    require(model, Architecture::Regularized, "forward_red")?;
    let logits = forward(model, s, t, dropout_rng)?;
    Ok((logits.source.expect("RED produces encoder logits"), logits.target))
}

/// Encoder-decoder pass: decoder logits (`|t| + 1` rows).
pub fn forward_ed(model: &Model, s: &[Token], t: &[Token], dropout_rng: Option<&mut SeededRng>) -> Result<Matrix> {
    require(model, Architecture::EncoderDecoder, "forward_ed")?;
    Ok(forward(model, s, t, dropout_rng)?.target)
}

/// Logits of the prediction following the last token of `t`.
pub(crate) fn next_token_logits(model: &Model, s: &[Token], t: &[Token]) -> Result<Vec<f64>> {
    let mut tape = Tape::new(model.params());
    let out = build_graph(model, &mut tape, s, t, None, Outputs::LastTarget)?;
    Ok(tape.value(out.target).row(0).to_vec())
}
