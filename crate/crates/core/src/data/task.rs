//! Synthetic sequence-to-sequence tasks.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::math::SeededRng;
use crate::models::{Token, Vocab, NUM_SPECIALS};

use super::corpus::ParallelCorpus;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    /// Token-wise substitution by a seeded bijection, then adjacent pairs swapped.
    LexiconTranslation,
}

/// Description of a synthetic corpus. Tokens are drawn uniformly from the non-special ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyTaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    /// Inclusive `[min, max]` source length.
    pub source_len_range: [usize; 2],
    /// Each target token is repeated so that targets are about this many times longer.
    #[serde(default = "default_multiplier")]
    pub target_len_multiplier: f64,
    pub pairs: usize,
    pub seed: u64,
}

fn default_multiplier() -> f64 {
    1.0
}

impl ToyTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let [min, max] = self.source_len_range;
        if min < 1 || min > max {
            return Err(LabError::Config(format!("source_len_range {:?} must satisfy 1 <= min <= max", self.source_len_range)));
        }
        if self.vocab_size <= NUM_SPECIALS {
            return Err(LabError::Config(format!("vocab_size must exceed the {NUM_SPECIALS} special tokens")));
        }
        if !(self.target_len_multiplier >= 1.0 && self.target_len_multiplier.is_finite()) {
            return Err(LabError::Config(format!("target_len_multiplier {} must be >= 1", self.target_len_multiplier)));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.vocab_size)
    }

    /// Longest possible target for this spec.
    pub fn max_target_len(&self) -> usize {
        repeat_counts(self.source_len_range[1], self.target_len_multiplier).iter().sum()
    }
}

/// Seeded bijection over the non-special ids; `table[token]` is the translation
/// (special ids map to themselves).
pub fn lexicon(vocab_size: usize, seed: u64) -> Vec<Token> {
    let mut rng = SeededRng::new(seed ^ 0x1e71_c0de);
    let mut image: Vec<Token> = (NUM_SPECIALS as Token..vocab_size as Token).collect();
    rng.shuffle(&mut image);
    (0..NUM_SPECIALS as Token).chain(image).collect()
}

/// `floor((k + 1)·m) − floor(k·m)` for `k = 0 … n−1`: integer repeat counts summing to `floor(n·m)`.
pub fn repeat_counts(n: usize, m: f64) -> Vec<usize> {
    (0..n).map(|k| ((k + 1) as f64 * m).floor() as usize - (k as f64 * m).floor() as usize).collect()
}

fn swap_adjacent_pairs(v: &mut [Token]) {
    for pair in v.chunks_exact_mut(2) {
        pair.swap(0, 1);
    }
}

/// Target of one source under the task, before length stretching.
pub fn transform(kind: TaskKind, s: &[Token], lexicon: &[Token]) -> Vec<Token> {
    match kind {
        TaskKind::Copy => s.to_vec(),
        TaskKind::Reverse => s.iter().rev().copied().collect(),
        TaskKind::LexiconTranslation => {
            let mut out: Vec<Token> = s.iter().map(|&t| lexicon[t as usize]).collect();
            swap_adjacent_pairs(&mut out);
            out
        }
    }
}

/// Inverse of [`transform`] for the lexicon task (without stretching).
pub fn untranslate(r: &[Token], lexicon: &[Token]) -> Vec<Token> {
    let mut inverse = vec![0; lexicon.len()];
    for (from, &to) in lexicon.iter().enumerate() {
        inverse[to as usize] = from as Token;
    }
    let mut out = r.to_vec();
    swap_adjacent_pairs(&mut out);
    out.iter().map(|&t| inverse[t as usize]).collect()
}

fn stretch(r: &[Token], m: f64) -> Vec<Token> {
    r.iter().zip(repeat_counts(r.len(), m)).flat_map(|(&t, c)| std::iter::repeat_n(t, c)).collect()
}

pub fn generate_dataset(spec: &ToyTaskSpec) -> Result<ParallelCorpus> {
    spec.validate()?;
    let table = lexicon(spec.vocab_size, spec.seed);
    let mut rng = SeededRng::new(spec.seed);
    let [min, max] = spec.source_len_range;
    let span = spec.vocab_size - NUM_SPECIALS;
    let pairs = (0..spec.pairs)
        .map(|_| {
            let len = min + rng.below(max - min + 1);
            let s: Vec<Token> = (0..len).map(|_| (NUM_SPECIALS + rng.below(span)) as Token).collect();
            let r = stretch(&transform(spec.kind, &s, &table), spec.target_len_multiplier);
            (s, r)
        })
        .collect();
    ParallelCorpus::new(pairs, spec.vocab()?)
}
