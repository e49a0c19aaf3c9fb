//! Experiment configuration files.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use palm_lab_core::data::HallucinationConfig;
use palm_lab_core::models::{ModelConfig, ModelSpec, TrainConfig, Vocab, NUM_SPECIALS};
use palm_lab_core::{ParallelCorpus, ToyTaskSpec};
use serde::{Deserialize, Serialize};

/// Evaluation settings of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Fraction of the corpus (taken from the end) held out for evaluation by `compare`.
    pub split: f64,
    /// Greedy decoding budget; defaults to twice the longest reference.
    pub max_len: Option<usize>,
    pub hallucination: HallucinationConfig,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { split: 0.1, max_len: None, hallucination: HallucinationConfig::default() }
    }
}

/// One experiment: model, optional synthetic task, optimiser, seed and output location.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Label used in reports; defaults to the variant name.
    #[serde(default)]
    pub name: Option<String>,
    pub model: ModelSpec,
    /// Task the data was generated from; supplies the vocabulary when `model.vocab` is unset.
    #[serde(default)]
    pub task: Option<ToyTaskSpec>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub seed: u64,
    /// Directory for per-run artifacts of `compare`, relative to the config file.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub eval: EvalSettings,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).context("invalid experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Checks everything that can be checked without data.
    pub fn validate(&self) -> Result<()> {
        if self.model.variant.is_none() {
            bail!("model.variant is required");
        }
        if self.model.d.is_none() {
            bail!("model.d is required");
        }
        if let Some(task) = &self.task {
            task.validate()?;
        }
        self.train.validate()?;
        self.eval.hallucination.validate()?;
        if !(0.0..1.0).contains(&self.eval.split) {
            bail!("eval.split must be in [0, 1), got {}", self.eval.split);
        }
        if self.eval.max_len == Some(0) {
            bail!("eval.max_len must be >= 1");
        }
        if self.model.vocab.is_some() || self.task.is_some() {
            self.model_config(None)?;
        }
        Ok(())
    }

    /// Vocabulary from `model.vocab`, then `task.vocab_size`, then `fallback`.
    pub fn vocab(&self, fallback: Option<Vocab>) -> Result<Vocab> {
        if let Some(v) = self.model.vocab {
            return Ok(v);
        }
        if let Some(task) = &self.task {
            return Ok(task.vocab()?);
        }
        fallback.context("no vocabulary: set model.vocab or task")
    }

    pub fn model_config(&self, fallback: Option<Vocab>) -> Result<ModelConfig> {
        Ok(self.model.resolve(Some(self.vocab(fallback)?))?)
    }

    /// Report label.
    pub fn label(&self) -> String {
        match (&self.name, self.model.variant) {
            (Some(name), _) => name.clone(),
            (None, Some(v)) => v.name().to_string(),
            (None, None) => "model".to_string(),
        }
    }
}

/// Loads a corpus, taking the vocabulary from `vocab` or, if absent, from the largest id in the file.
pub fn load_corpus(path: &Path, vocab: Option<Vocab>) -> Result<ParallelCorpus> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let vocab = match vocab {
        Some(v) => v,
        None => Vocab::new(inferred_vocab_size(&text))?,
    };
    ParallelCorpus::parse(&text, vocab).with_context(|| format!("parsing {}", path.display()))
}

fn inferred_vocab_size(text: &str) -> usize {
    let largest = text
        .split(|c: char| c.is_whitespace())
        .filter_map(|x| x.parse::<u64>().ok())
        .max()
        .unwrap_or(0);
    usize::try_from(largest).map_or(usize::MAX, |m| m.saturating_add(1)).max(NUM_SPECIALS + 1)
}
