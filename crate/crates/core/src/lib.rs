//! Evidence-level prediction toolkit.
//!
//! Compiles a multi-label dataset of abstracts from CIViC evidence items,
//! trains a tf-idf/logistic baseline and a compact encoder transformer
//! (masked-LM pretraining, positional context extension, multi-label
//! fine-tuning), calibrates per-class thresholds, scores support-weighted
//! F1, explains predictions with integrated gradients, and runs a few-shot
//! prompting harness against a pluggable chat-completion client.

pub mod attribution;
pub mod baseline;
pub mod error;
pub mod eval;
pub mod fewshot;
pub mod ingest;
pub mod labels;
pub mod neural;
pub mod synthetic;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use labels::{LabelVector, Level, NUM_LEVELS};
pub use eval::{MetricsReport, ThresholdSet};
pub use ingest::{DatasetSplit, EvidenceItem, RawEvidenceRecord};
pub use neural::{EncoderModel, ModelConfig};
pub use tokenizer::{TokenSequence, Vocab};
