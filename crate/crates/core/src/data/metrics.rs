//! Generation metrics: stepwise precision, hallucination ratio, lengths, BLEU.
//!
//! Positions `i` are 1-based throughout. In every metric the first sequence
//! set is the model output and the second the references.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::models::Token;

use super::corpus::ParallelCorpus;

fn check_position(i: usize) -> Result<()> {
    if i == 0 {
        return Err(LabError::InvalidArgument("positions are 1-based".into()));
    }
    Ok(())
}

fn check_aligned(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(LabError::DimensionMismatch { op: "metrics", detail: format!("{a} outputs vs {b} {what}") });
    }
    Ok(())
}

/// `A_i`: fraction of outputs reaching position `i` whose `i`-th token occurs in their reference.
pub fn stepwise_precision(generated: &[Vec<Token>], references: &[Vec<Token>], i: usize) -> Result<f64> {
    check_position(i)?;
    check_aligned(generated.len(), references.len(), "references")?;
    let (mut hits, mut total) = (0usize, 0usize);
    for (g, r) in generated.iter().zip(references) {
        if g.len() >= i {
            total += 1;
            hits += usize::from(r.contains(&g[i - 1]));
        }
    }
    if total == 0 {
        return Err(LabError::EmptyPosition(i));
    }
    Ok(hits as f64 / total as f64)
}

/// Which target side the co-occurrence counts behind `C[p, q]` are taken from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CooccurrenceSource {
    /// Source sentences paired with their references.
    #[default]
    References,
    /// Source sentences paired with the model outputs being scored.
    Generated,
}

/// Shape of the alignment sigmoid and the origin of its counts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HallucinationConfig {
    pub alpha: f64,
    pub beta: f64,
    pub cooccurrence: CooccurrenceSource,
}

impl Default for HallucinationConfig {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0, cooccurrence: CooccurrenceSource::References }
    }
}

impl HallucinationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta.is_nan() || self.beta <= 0.0 || !self.alpha.is_finite() {
            return Err(LabError::Config(format!("beta {} must be > 0 and alpha finite", self.beta)));
        }
        Ok(())
    }

    /// `σ((count − α) / β)`
    pub fn score(&self, count: usize) -> f64 {
        1.0 / (1.0 + (-(count as f64 - self.alpha) / self.beta).exp())
    }
}

/// Sentence-level co-occurrence counts: `count(p, q) = #{j : p ∈ s_j and q ∈ t_j}`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AlignmentTable {
    counts: HashMap<(Token, Token), usize>,
}

impl AlignmentTable {
    pub fn new(sources: &[Vec<Token>], targets: &[Vec<Token>]) -> Result<Self> {
        check_aligned(sources.len(), targets.len(), "targets")?;
        let mut counts = HashMap::new();
        for (s, t) in sources.iter().zip(targets) {
            let s: HashSet<Token> = s.iter().copied().collect();
            let t: HashSet<Token> = t.iter().copied().collect();
            for &p in &s {
                for &q in &t {
                    *counts.entry((p, q)).or_insert(0) += 1;
                }
            }
        }
        Ok(Self { counts })
    }

    pub fn count(&self, p: Token, q: Token) -> usize {
        self.counts.get(&(p, q)).copied().unwrap_or(0)
    }

    /// Overrides one count (used to probe the metric's monotonicity).
    pub fn set_count(&mut self, p: Token, q: Token, count: usize) {
        self.counts.insert((p, q), count);
    }
}

/// `C[p, q]` with counts taken over `corpus`.
pub fn alignment_score(p: Token, q: Token, corpus: &ParallelCorpus, cfg: &HallucinationConfig) -> f64 {
    let count = corpus.pairs().iter().filter(|(s, t)| s.contains(&p) && t.contains(&q)).count();
    cfg.score(count)
}

/// `H_i = 1 − Σ_j max(1(g_ji ∈ r_j), max_k C[s_jk, g_ji]) / #{j : |g_j| ≥ i}`.
pub fn hallucination_ratio(
    sources: &[Vec<Token>],
    generated: &[Vec<Token>],
    references: &[Vec<Token>],
    table: &AlignmentTable,
    cfg: &HallucinationConfig,
    i: usize,
) -> Result<f64> {
    check_position(i)?;
    cfg.validate()?;
    check_aligned(generated.len(), references.len(), "references")?;
    check_aligned(generated.len(), sources.len(), "sources")?;
    let (mut supported, mut total) = (0.0, 0usize);
    for ((s, g), r) in sources.iter().zip(generated).zip(references) {
        if g.len() < i {
            continue;
        }
        total += 1;
        let q = g[i - 1];
        supported += if r.contains(&q) {
            1.0
        } else {
            s.iter().map(|&p| cfg.score(table.count(p, q))).fold(0.0, f64::max)
        };
    }
    if total == 0 {
        return Err(LabError::EmptyPosition(i));
    }
    Ok(1.0 - supported / total as f64)
}

/// Builds the alignment table selected by `cfg.cooccurrence`.
pub fn alignment_table(
    cfg: &HallucinationConfig,
    sources: &[Vec<Token>],
    generated: &[Vec<Token>],
    references: &[Vec<Token>],
) -> Result<AlignmentTable> {
    match cfg.cooccurrence {
        CooccurrenceSource::References => AlignmentTable::new(sources, references),
        CooccurrenceSource::Generated => AlignmentTable::new(sources, generated),
    }
}

/// Centered moving average with the window truncated at the ends.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let half = window.max(1) / 2;
    (0..values.len())
        .map(|k| {
            let lo = k.saturating_sub(half);
            let hi = (k + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

pub fn average_length(outputs: &[Vec<Token>]) -> Result<f64> {
    if outputs.is_empty() {
        return Err(LabError::InvalidArgument("no outputs".into()));
    }
    Ok(outputs.iter().map(Vec::len).sum::<usize>() as f64 / outputs.len() as f64)
}

/// Average output length per model and `ΔL = avg_len(PALM) − avg_len(LM)` when both are present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub avg_len: BTreeMap<String, f64>,
    pub delta_l: Option<f64>,
}

pub fn length_stats(outputs: &[(&str, &[Vec<Token>])]) -> Result<LengthStats> {
    let mut avg_len = BTreeMap::new();
    for (name, out) in outputs {
        avg_len.insert(name.to_string(), average_length(out)?);
    }
    let delta_l = match (avg_len.get("PALM"), avg_len.get("LM")) {
        (Some(p), Some(l)) => Some(p - l),
        _ => None,
    };
    Ok(LengthStats { avg_len, delta_l })
}

fn ngram_counts(tokens: &[Token], n: usize) -> HashMap<&[Token], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU with clipped n-gram precisions up to `max_n` and brevity penalty.
///
/// Unigram precision is unsmoothed; precisions for `n ≥ 2` use add-one
/// smoothing `(matches + 1) / (candidates + 1)`.
pub fn corpus_bleu(generated: &[Vec<Token>], references: &[Vec<Token>], max_n: usize) -> Result<f64> {
    check_aligned(generated.len(), references.len(), "references")?;
    if generated.is_empty() || max_n == 0 {
        return Err(LabError::InvalidArgument("BLEU needs a non-empty corpus and max_n >= 1".into()));
    }
    let mut matches = vec![0usize; max_n];
    let mut candidates = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (g, r) in generated.iter().zip(references) {
        hyp_len += g.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let ref_counts = ngram_counts(r, n);
            for (gram, c) in ngram_counts(g, n) {
                matches[n - 1] += c.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
            candidates[n - 1] += g.len().saturating_sub(n - 1);
        }
    }
    if matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = (matches[0] as f64 / candidates[0] as f64).ln();
    for n in 2..=max_n {
        log_sum += ((matches[n - 1] + 1) as f64 / (candidates[n - 1] + 1) as f64).ln();
    }
    let bp = if hyp_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / hyp_len as f64).exp() };
    Ok(bp * (log_sum / max_n as f64).exp())
}

/// Fraction of outputs equal to their reference.
pub fn sequence_accuracy(generated: &[Vec<Token>], references: &[Vec<Token>]) -> Result<f64> {
    check_aligned(generated.len(), references.len(), "references")?;
    if generated.is_empty() {
        return Err(LabError::InvalidArgument("no outputs".into()));
    }
    Ok(generated.iter().zip(references).filter(|(g, r)| g == r).count() as f64 / generated.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub i: usize,
    #[serde(rename = "A_i")]
    pub a_i: f64,
    #[serde(rename = "H_i")]
    pub h_i: f64,
}

/// Metrics report of one model on one corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub bleu: f64,
    pub seq_accuracy: f64,
    pub avg_len: f64,
    pub stepwise: Vec<StepMetrics>,
}

/// All metrics for one model; stepwise values cover every position some output reaches.
pub fn evaluate_outputs(
    model: &str,
    sources: &[Vec<Token>],
    generated: &[Vec<Token>],
    references: &[Vec<Token>],
    cfg: &HallucinationConfig,
) -> Result<MetricsReport> {
    let table = alignment_table(cfg, sources, generated, references)?;
    let longest = generated.iter().map(Vec::len).max().unwrap_or(0);
    let stepwise = (1..=longest)
        .map(|i| {
            Ok(StepMetrics {
                i,
                a_i: stepwise_precision(generated, references, i)?,
                h_i: hallucination_ratio(sources, generated, references, &table, cfg, i)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        model: model.to_string(),
        bleu: corpus_bleu(generated, references, 4)?,
        seq_accuracy: sequence_accuracy(generated, references)?,
        avg_len: average_length(generated)?,
        stepwise,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::SeededRng;
    use proptest::prelude::*;

    fn seqs(v: &[&[Token]]) -> Vec<Vec<Token>> {
        v.iter().map(|s| s.to_vec()).collect()
    }

    #[test]
    fn identical_outputs_are_perfect() {
        let refs = seqs(&[&[3, 4, 5], &[6, 7]]);
        let src = seqs(&[&[9], &[8]]);
        let cfg = HallucinationConfig::default();
        let table = AlignmentTable::new(&src, &refs).unwrap();
        for i in 1..=2 {
            assert_eq!(stepwise_precision(&refs, &refs, i).unwrap(), 1.0);
            assert_eq!(hallucination_ratio(&src, &refs, &refs, &table, &cfg, i).unwrap(), 0.0);
        }
        assert_eq!(corpus_bleu(&refs, &refs, 4).unwrap(), 1.0);
        assert!(matches!(stepwise_precision(&refs, &refs, 4), Err(LabError::EmptyPosition(4))));
    }

    #[test]
    fn disjoint_outputs() {
        let refs = seqs(&[&[3, 4, 5]]);
        let gen = seqs(&[&[6, 7, 8]]);
        assert_eq!(stepwise_precision(&gen, &refs, 1).unwrap(), 0.0);
        assert_eq!(corpus_bleu(&gen, &refs, 4).unwrap(), 0.0);
    }

    #[test]
    fn sigmoid_midpoint_and_saturation() {
        let cfg = HallucinationConfig { alpha: 2.0, beta: 0.5, ..Default::default() };
        assert_eq!(cfg.score(2), 0.5);
        assert!(cfg.score(60) > 1.0 - 1e-12);
        assert!(cfg.score(3) > cfg.score(2));
        let corpus = ParallelCorpus::new(
            vec![(vec![3, 4], vec![5]), (vec![3], vec![5, 6])],
            crate::models::Vocab::new(8).unwrap(),
        )
        .unwrap();
        assert_eq!(alignment_score(3, 5, &corpus, &cfg), 0.5);
    }

    #[test]
    fn hallucination_hand_oracle() {
        // Sentence 1: source {3, 4}, output [5, 6], reference [5, 7].
        // Sentence 2: source {3},    output [8],    reference [9].
        // Counts from (source, reference): (3,5)=1 (3,7)=1 (4,5)=1 (4,7)=1 (3,9)=1; all others 0.
        let src = seqs(&[&[3, 4], &[3]]);
        let gen = seqs(&[&[5, 6], &[8]]);
        let refs = seqs(&[&[5, 7], &[9]]);
        let cfg = HallucinationConfig { alpha: 1.0, beta: 1.0, ..Default::default() };
        let table = AlignmentTable::new(&src, &refs).unwrap();
        let s0 = 1.0 / (1.0 + 1f64.exp()); // σ(−1): count 0
        // i = 1: token 5 is in reference 1 (1.0); token 8 unsupported, best score σ(−1).
        let h1 = hallucination_ratio(&src, &gen, &refs, &table, &cfg, 1).unwrap();
        assert!((h1 - (1.0 - (1.0 + s0) / 2.0)).abs() < 1e-12);
        // i = 2: only sentence 1 reaches it; token 6 has count 0 with both source tokens.
        let h2 = hallucination_ratio(&src, &gen, &refs, &table, &cfg, 2).unwrap();
        assert!((h2 - (1.0 - s0)).abs() < 1e-12);
        assert!((stepwise_precision(&gen, &refs, 1).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn bleu_hand_oracle() {
        // Output [3 4 5 6] vs reference [3 4 5 7]; output [8 9] vs reference [8 9 10].
        // Unigram matches 3+2 = 5 of 6; bigrams 2+1 = 3 of 3+1 = 4; trigrams 1 of 2; 4-grams 0 of 1.
        // Lengths 6 vs 7 → BP = exp(1 − 7/6).
        let gen = seqs(&[&[3, 4, 5, 6], &[8, 9]]);
        let refs = seqs(&[&[3, 4, 5, 7], &[8, 9, 10]]);
        let p = [5.0 / 6.0, 4.0 / 5.0, 2.0 / 3.0, 1.0 / 2.0];
        let expected = (1.0 - 7.0 / 6.0f64).exp() * (p.iter().map(|x: &f64| x.ln()).sum::<f64>() / 4.0).exp();
        assert!((corpus_bleu(&gen, &refs, 4).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn clipping_counts_reference_multiplicity() {
        let gen = seqs(&[&[3, 3, 3]]);
        let refs = seqs(&[&[3, 4, 5]]);
        // Unigram clipped 1/3, bigrams (3,3)x2 vs none: (0+1)/(2+1); max_n = 2; BP = 1 (equal length).
        let expected = ((1.0f64 / 3.0).ln() / 2.0 + (1.0f64 / 3.0).ln() / 2.0).exp();
        assert!((corpus_bleu(&gen, &refs, 2).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn lengths_and_delta() {
        let lm = seqs(&[&[3], &[4, 5]]);
        let palm = seqs(&[&[3, 4], &[4, 5, 6]]);
        let stats = length_stats(&[("LM", &lm), ("PALM", &palm)]).unwrap();
        assert_eq!(stats.avg_len["LM"], 1.5);
        assert_eq!(stats.delta_l, Some(1.0));
        assert_eq!(length_stats(&[("LM", &lm), ("PALM", &lm)]).unwrap().delta_l, Some(0.0));
        assert!(average_length(&[]).is_err());
    }

    #[test]
    fn moving_average_window() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(moving_average(&v, 5), vec![2.0, 2.5, 3.0, 4.0, 4.5, 5.0]);
        assert_eq!(moving_average(&v, 1), v.to_vec());
    }

    #[test]
    fn report_json_field_names() {
        let refs = seqs(&[&[3, 4]]);
        let r = evaluate_outputs("LM", &refs, &refs, &refs, &HallucinationConfig::default()).unwrap();
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["stepwise"][0]["A_i"], 1.0);
        assert_eq!(json["stepwise"][1]["i"], 2);
        assert_eq!(json["seq_accuracy"], 1.0);
    }

    fn random_corpus(seed: u64, n: usize) -> (Vec<Vec<Token>>, Vec<Vec<Token>>, Vec<Vec<Token>>) {
        let mut rng = SeededRng::new(seed);
        let seq = |rng: &mut SeededRng| -> Vec<Token> {
            let len = 1 + rng.below(5);
            (0..len).map(|_| 3 + rng.below(6) as Token).collect()
        };
        let src = (0..n).map(|_| seq(&mut rng)).collect();
        let gen = (0..n).map(|_| seq(&mut rng)).collect();
        let refs = (0..n).map(|_| seq(&mut rng)).collect();
        (src, gen, refs)
    }

    proptest! {
        #[test]
        fn metrics_in_unit_interval(seed in any::<u64>(), n in 1usize..8) {
            let (src, gen, refs) = random_corpus(seed, n);
            let cfg = HallucinationConfig::default();
            let table = AlignmentTable::new(&src, &refs).unwrap();
            let longest = gen.iter().map(Vec::len).max().unwrap();
            for i in 1..=longest {
                let a = stepwise_precision(&gen, &refs, i).unwrap();
                let h = hallucination_ratio(&src, &gen, &refs, &table, &cfg, i).unwrap();
                prop_assert!((0.0..=1.0).contains(&a));
                prop_assert!((0.0..=1.0).contains(&h));
            }
        }

        #[test]
        fn raising_an_alignment_count_never_raises_h(seed in any::<u64>(), p in 3u32..9, q in 3u32..9, bump in 1usize..5) {
            let (src, gen, refs) = random_corpus(seed, 6);
            let cfg = HallucinationConfig::default();
            let table = AlignmentTable::new(&src, &refs).unwrap();
            let mut raised = table.clone();
            raised.set_count(p, q, table.count(p, q) + bump);
            for i in 1..=2 {
                if let (Ok(before), Ok(after)) = (
                    hallucination_ratio(&src, &gen, &refs, &table, &cfg, i),
                    hallucination_ratio(&src, &gen, &refs, &raised, &cfg, i),
                ) {
                    prop_assert!(after <= before + 1e-15);
                }
            }
        }

        #[test]
        fn bleu_is_order_invariant(seed in any::<u64>(), n in 2usize..8) {
            let (_, gen, refs) = random_corpus(seed, n);
            let base = corpus_bleu(&gen, &refs, 4).unwrap();
            let mut idx: Vec<usize> = (0..n).collect();
            SeededRng::new(seed ^ 1).shuffle(&mut idx);
            let g2: Vec<_> = idx.iter().map(|&k| gen[k].clone()).collect();
            let r2: Vec<_> = idx.iter().map(|&k| refs[k].clone()).collect();
            prop_assert!((corpus_bleu(&g2, &r2, 4).unwrap() - base).abs() < 1e-12);
        }
    }
}
