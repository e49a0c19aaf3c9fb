//! Parallel corpora and their line-oriented file format.
//!
//! One pair per line: source ids, a TAB, target ids; ids are decimal and
//! separated by single spaces.

use std::path::Path;

use crate::error::{LabError, Result};
use crate::models::{Pair, Token, Vocab};

#[derive(Clone, Debug, PartialEq)]
pub struct ParallelCorpus {
    pairs: Vec<Pair>,
    vocab: Vocab,
}

impl ParallelCorpus {
    /// Validates that every sequence is non-empty and in-vocabulary.
    pub fn new(pairs: Vec<Pair>, vocab: Vocab) -> Result<Self> {
        vocab.validate()?;
        for (k, (s, t)) in pairs.iter().enumerate() {
            if s.is_empty() || t.is_empty() {
                return Err(LabError::InvalidArgument(format!("pair {k} has an empty sequence")));
            }
            vocab.check(s)?;
            vocab.check(t)?;
        }
        Ok(Self { pairs, vocab })
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> Vec<Vec<Token>> {
        self.pairs.iter().map(|(s, _)| s.clone()).collect()
    }

    pub fn targets(&self) -> Vec<Vec<Token>> {
        self.pairs.iter().map(|(_, t)| t.clone()).collect()
    }

    /// `(first, last)` split with `round(len · fraction)` pairs in the last part.
    pub fn split_tail(&self, fraction: f64) -> Result<(ParallelCorpus, ParallelCorpus)> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(LabError::InvalidArgument(format!("split fraction {fraction} must be in [0, 1]")));
        }
        let tail = (self.len() as f64 * fraction).round() as usize;
        let cut = self.len() - tail;
        Ok((
            Self { pairs: self.pairs[..cut].to_vec(), vocab: self.vocab },
            Self { pairs: self.pairs[cut..].to_vec(), vocab: self.vocab },
        ))
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[Token]| v.iter().map(Token::to_string).collect::<Vec<_>>().join(" ");
        let mut out = String::new();
        for (s, t) in &self.pairs {
            out.push_str(&join(s));
            out.push('\t');
            out.push_str(&join(t));
            out.push('\n');
        }
        out
    }

    /// Parses the line format; blank lines are skipped.
    pub fn parse(text: &str, vocab: Vocab) -> Result<Self> {
        let parse_ids = |field: &str, line: usize| -> Result<Vec<Token>> {
            field
                .split(' ')
                .filter(|x| !x.is_empty())
                .map(|x| x.parse::<Token>().map_err(|_| LabError::Format(format!("line {line}: bad token id {x:?}"))))
                .collect()
        };
        let mut pairs = Vec::new();
        for (k, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (src, tgt) = line
                .split_once('\t')
                .ok_or_else(|| LabError::Format(format!("line {}: expected source TAB target", k + 1)))?;
            pairs.push((parse_ids(src, k + 1)?, parse_ids(tgt, k + 1)?));
        }
        Self::new(pairs, vocab)
    }

    pub fn load(path: &Path, vocab: Vocab) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::new(10).unwrap()
    }

    #[test]
    fn text_round_trip() {
        let c = ParallelCorpus::new(vec![(vec![3, 4], vec![5]), (vec![9], vec![8, 7, 6])], vocab()).unwrap();
        let text = c.to_text();
        assert_eq!(text, "3 4\t5\n9\t8 7 6\n");
        assert_eq!(ParallelCorpus::parse(&text, vocab()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ParallelCorpus::parse("3 4 5\n", vocab()).is_err());
        assert!(ParallelCorpus::parse("3 x\t4\n", vocab()).is_err());
        assert!(ParallelCorpus::parse("3\t\n", vocab()).is_err());
        assert!(matches!(ParallelCorpus::parse("3\t10\n", vocab()), Err(LabError::UnknownToken { token: 10, .. })));
    }

    #[test]
    fn split_tail_sizes() {
        let pairs = (0..10).map(|k| (vec![3 + k % 5], vec![4])).collect();
        let c = ParallelCorpus::new(pairs, vocab()).unwrap();
        let (a, b) = c.split_tail(0.2).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        assert_eq!(b.pairs()[0], c.pairs()[8]);
    }
}
