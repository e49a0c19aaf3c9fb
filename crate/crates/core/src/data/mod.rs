//! Synthetic tasks, parallel corpora and generation metrics.

mod corpus;
mod metrics;
mod task;

pub use corpus::ParallelCorpus;
pub use metrics::{
    alignment_score, alignment_table, average_length, corpus_bleu, evaluate_outputs, hallucination_ratio,
    length_stats, moving_average, sequence_accuracy, stepwise_precision, AlignmentTable, CooccurrenceSource,
    HallucinationConfig, LengthStats, MetricsReport, StepMetrics,
};
pub use task::{generate_dataset, lexicon, repeat_counts, transform, untranslate, TaskKind, ToyTaskSpec};
