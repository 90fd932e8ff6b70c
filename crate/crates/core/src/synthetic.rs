//! Generated data for desk-scale runs and tests: keyword-coded labelled
//! abstracts, a patterned masked-LM corpus and raw API-like records.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ingest::{EvidenceItem, EvidenceStatus, RawEvidenceRecord};
use crate::labels::{LabelVector, Level, NUM_LEVELS};
use crate::tokenizer::{Vocab, SPECIAL_TOKENS};

/// Overall label counts of the compiled CIViC dataset, used as class weights.
pub const CLASS_COUNTS: [usize; NUM_LEVELS] = [150, 1363, 1135, 948, 44];

const KEYWORDS: [[&str; 3]; NUM_LEVELS] = [
    ["guideline", "approved", "consensus"],
    ["trial", "cohort", "multicenter"],
    ["case", "report", "proband"],
    ["xenograft", "murine", "invitro"],
    ["inferred", "indirect", "surrogate"],
];

const FILLER: [&str; 48] = [
    "mutation", "variant", "tumor", "cancer", "gene", "expression", "response", "therapy", "resistance",
    "analysis", "sequencing", "protein", "kinase", "inhibitor", "survival", "outcome", "treatment",
    "signaling", "pathway", "amplification", "fusion", "deletion", "status", "samples", "observed",
    "associated", "increased", "reduced", "levels", "detected", "identified", "results", "showed",
    "significant", "study", "data", "activity", "sensitivity", "clinical", "molecular", "marker",
    "biomarker", "prognosis", "dose", "growth", "cells", "line", "profile",
];

/// Mostly single-label; the second label (if any) is another class.
pub const SECOND_LABEL_RATE: f64 = 0.1;

fn class_weights() -> WeightedIndex<usize> {
    WeightedIndex::new(CLASS_COUNTS).expect("positive weights")
}

fn draw_labels(rng: &mut ChaCha8Rng, weights: &WeightedIndex<usize>) -> LabelVector {
    let mut labels = LabelVector::empty();
    let first = weights.sample(rng);
    labels.0[first] = true;
    if rng.random::<f64>() < SECOND_LABEL_RATE {
        let second = weights.sample(rng);
        labels.0[second] = true;
    }
    labels
}

fn keyword_text(rng: &mut ChaCha8Rng, labels: &LabelVector, words: usize) -> String {
    let mut tokens: Vec<&str> = (0..words).map(|_| *FILLER.choose(rng).expect("non-empty")).collect();
    for level in labels.levels() {
        let kw = *KEYWORDS[level.index()].choose(rng).expect("non-empty");
        let at = rng.random_range(0..=tokens.len());
        tokens.insert(at, kw);
    }
    tokens.join(" ")
}

/// `n` abstracts whose labels are signalled by one class keyword each,
/// buried in random filler. Class frequencies follow [`CLASS_COUNTS`].
pub fn keyword_dataset(n: usize, words: usize, seed: u64) -> Vec<EvidenceItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = class_weights();
    (0..n)
        .map(|i| {
            let labels = draw_labels(&mut rng, &weights);
            EvidenceItem {
                abstract_text: keyword_text(&mut rng, &labels, words),
                pubmed_id: 1_000_000 + i as u64,
                labels,
                source_evidence_ids: vec![i as u64 + 1],
            }
        })
        .collect()
}

/// Every word the keyword generator can emit.
pub fn keyword_vocabulary() -> Vec<&'static str> {
    FILLER.iter().chain(KEYWORDS.iter().flatten()).copied().collect()
}

/// Whole-word vocabulary: special tokens followed by `words`.
pub fn word_vocab<S: AsRef<str>>(words: &[S]) -> Vocab {
    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(words.iter().map(|w| w.as_ref().to_owned()));
    Vocab::from_tokens(tokens).expect("distinct tokens")
}

/// Words `p00`, `p01`, ...
pub fn pattern_words(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("p{i:02}")).collect()
}

/// Documents that count upward through the pattern words (mod `k`) from a
/// random start, so every token follows from its neighbours.
pub fn patterned_corpus(docs: usize, len: usize, k: usize, seed: u64) -> Vec<String> {
    let words = pattern_words(k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..docs)
        .map(|_| {
            let start = rng.random_range(0..k);
            (0..len).map(|j| words[(start + j) % k].as_str()).collect::<Vec<_>>().join(" ")
        })
        .collect()
}

/// API-like records with noise the filters must remove: missing fields,
/// excluded statuses and duplicated tuples. About a tenth of abstracts
/// back two records with different levels.
pub fn raw_records(n: usize, seed: u64) -> Vec<RawEvidenceRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = class_weights();
    let diseases = ["Melanoma", "Lung Adenocarcinoma", "Colorectal Cancer", "Glioblastoma", "Breast Cancer"];
    let significance = ["SENSITIVITYRESPONSE", "RESISTANCE", "POOR_OUTCOME", "POSITIVE"];
    let mut out = Vec::with_capacity(n);
    let mut id = 0u64;
    while out.len() < n {
        id += 1;
        let level = Level::from_index(weights.sample(&mut rng)).expect("index in range");
        let labels = LabelVector::from_levels([level]);
        let text = keyword_text(&mut rng, &labels, 30);
        let mut rec = RawEvidenceRecord {
            evidence_id: id,
            abstract_text: text,
            pubmed_id: 20_000_000 + id,
            molecular_profile: Some(format!("GENE{} V{}E", rng.random_range(1..40), rng.random_range(100..900))),
            disease: Some(diseases.choose(&mut rng).expect("non-empty").to_string()),
            therapies: vec![format!("drug{}", rng.random_range(1..30))],
            significance: Some(significance.choose(&mut rng).expect("non-empty").to_string()),
            evidence_level: Some(level),
            status: if rng.random::<f64>() < 0.9 {
                EvidenceStatus::Accepted
            } else {
                EvidenceStatus::UnderReview
            },
        };
        let roll: f64 = rng.random();
        if roll < 0.03 {
            rec.abstract_text.clear();
        } else if roll < 0.05 {
            rec.evidence_level = None;
        } else if roll < 0.08 {
            rec.status = EvidenceStatus::Other;
        } else if roll < 0.18 && out.len() + 1 < n {
            let mut twin = rec.clone();
            id += 1;
            twin.evidence_id = id;
            let other = Level::from_index(weights.sample(&mut rng)).expect("index in range");
            twin.evidence_level = Some(other);
            twin.therapies = vec![format!("drug{}", 30 + rng.random_range(0..30))];
            out.push(rec);
            rec = twin;
        } else if roll < 0.20 && out.len() + 1 < n {
            let mut dup = rec.clone();
            id += 1;
            dup.evidence_id = id;
            out.push(rec);
            rec = dup;
        }
        out.push(rec);
    }
    out
}
