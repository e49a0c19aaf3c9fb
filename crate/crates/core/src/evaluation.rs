//! Decoding a corpus with a trained model and scoring the outputs.

use crate::data::{evaluate_outputs, HallucinationConfig, MetricsReport, ParallelCorpus};
use crate::error::{LabError, Result};
use crate::models::{decode_all, Model, Token};

/// Metrics of one model on one corpus together with the decoded outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub outputs: Vec<Vec<Token>>,
}

/// Default decoding budget: twice the longest reference, at least 1.
pub fn default_max_len(corpus: &ParallelCorpus) -> usize {
    2 * corpus.pairs().iter().map(|(_, r)| r.len()).max().unwrap_or(0).max(1)
}

/// Greedy-decodes every source of `corpus` and computes all metrics.
pub fn evaluate_model(
    model: &Model,
    name: &str,
    corpus: &ParallelCorpus,
    max_len: usize,
    hallucination: &HallucinationConfig,
) -> Result<Evaluation> {
    if corpus.is_empty() {
        return Err(LabError::InvalidArgument("evaluation corpus is empty".into()));
    }
    if corpus.vocab().size > model.config().vocab.size {
        return Err(LabError::Config(format!(
            "corpus vocabulary ({}) is larger than the model's ({})",
            corpus.vocab().size,
            model.config().vocab.size
        )));
    }
    let sources = corpus.sources();
    let references = corpus.targets();
    let outputs = decode_all(model, &sources, max_len)?;
    let report = evaluate_outputs(name, &sources, &outputs, &references, hallucination)?;
    Ok(Evaluation { report, outputs })
}
