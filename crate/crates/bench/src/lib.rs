//! Shared fixtures for the benchmarks in `benches/`.

use evidence_core::synthetic;
use evidence_core::tokenizer::train_vocab;
use evidence_core::{EncoderModel, EvidenceItem, ModelConfig, TokenSequence, Vocab};

/// Keyword-coded items plus a vocabulary trained on them.
pub fn corpus(n: usize) -> (Vec<EvidenceItem>, Vocab) {
    let items = synthetic::keyword_dataset(n, 60, 11);
    let texts: Vec<&str> = items.iter().map(|i| i.abstract_text.as_str()).collect();
    let vocab = train_vocab(&texts, 400).expect("vocabulary");
    (items, vocab)
}

/// Desk-scale encoder (two blocks, width 64) at the given context width.
pub fn toy_model(vocab: &Vocab, context_width: usize) -> EncoderModel {
    let config = ModelConfig {
        context_width,
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    };
    EncoderModel::init(config, 5).expect("valid config")
}

pub fn encode(vocab: &Vocab, items: &[EvidenceItem], width: usize) -> Vec<TokenSequence> {
    items
        .iter()
        .map(|i| vocab.encode(&i.abstract_text, width).expect("encodable"))
        .collect()
}
