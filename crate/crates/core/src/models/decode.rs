//! Greedy decoding.

use crate::error::Result;

use super::config::Token;
use super::forward::next_token_logits;
use super::network::Model;

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Generates up to `max_len` tokens by repeatedly appending the argmax prediction.
///
/// Stops at `eos` (not included in the output), at `max_len`, or when one more token
/// would make `s ⧺ [⇒] ⧺ t` exceed the position budget.
pub fn greedy_decode(model: &Model, s: &[Token], max_len: usize) -> Result<Vec<Token>> {
    let config = model.config();
    let mut t: Vec<Token> = Vec::new();
    while t.len() < max_len && s.len() + t.len() + 2 <= config.max_positions {
        let logits = next_token_logits(model, s, &t)?;
        let next = argmax(&logits) as Token;
        if next == config.vocab.eos {
            break;
        }
        t.push(next);
    }
    Ok(t)
}

/// Greedy outputs for every source, in order.
pub fn decode_all(model: &Model, sources: &[Vec<Token>], max_len: usize) -> Result<Vec<Vec<Token>>> {
    sources.iter().map(|s| greedy_decode(model, s, max_len)).collect()
}
