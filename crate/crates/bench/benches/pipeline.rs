use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use evidence_bench::{corpus, encode, toy_model};
use evidence_core::attribution::{explain, AttributionConfig, BaselineKind};
use evidence_core::baseline::{fit_tfidf, BaselineModel, DEFAULT_REG};
use evidence_core::eval;
use evidence_core::ingest::{stratified_split, DEFAULT_RATIOS};
use evidence_core::neural::Objective;
use evidence_core::training::{mask_tokens, MaskingPolicy};
use evidence_core::{LabelVector, Level};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn text_side(c: &mut Criterion) {
    let (items, vocab) = corpus(500);
    let texts: Vec<&str> = items.iter().map(|i| i.abstract_text.as_str()).collect();
    c.bench_function("tokenize 500 abstracts", |b| {
        b.iter(|| texts.iter().map(|t| vocab.tokenize(t).len()).sum::<usize>())
    });
    c.bench_function("fit tf-idf on 500 abstracts", |b| b.iter(|| fit_tfidf(&texts).unwrap()));
    let labels: Vec<LabelVector> = items.iter().map(|i| i.labels).collect();
    let mut g = c.benchmark_group("baseline");
    g.sample_size(10);
    g.bench_function("fit one-vs-rest on 500 abstracts", |b| {
        b.iter(|| BaselineModel::fit(&texts, &labels, DEFAULT_REG).unwrap())
    });
    g.finish();
    c.bench_function("stratified split of 500 items", |b| {
        b.iter(|| stratified_split(&items, DEFAULT_RATIOS, 3).unwrap())
    });
}

fn model_side(c: &mut Criterion) {
    let (items, vocab) = corpus(64);
    let model = toy_model(&vocab, 128);
    let batch = encode(&vocab, &items[..16], 128);
    let labels: Vec<LabelVector> = items[..16].iter().map(|i| i.labels).collect();
    let mut g = c.benchmark_group("encoder");
    g.sample_size(10);
    g.bench_function("forward 16 x 128", |b| b.iter(|| model.forward_encode(&batch).unwrap()));
    g.bench_function("forward+backward 16 x 128", |b| {
        b.iter(|| model.backward(&batch, Objective::Multilabel(&labels)).unwrap())
    });
    let config = AttributionConfig {
        baseline: BaselineKind::Pad,
        steps: 32,
        ..AttributionConfig::new(Level::B)
    };
    g.bench_function("integrated gradients, 32 steps", |b| {
        b.iter(|| explain(&model, &vocab, &batch[0], &config).unwrap())
    });
    g.finish();

    let policy = MaskingPolicy::default();
    c.bench_function("mask 16 sequences", |b| {
        b.iter_batched(
            || ChaCha8Rng::seed_from_u64(1),
            |mut rng| batch.iter().map(|s| mask_tokens(s, &policy, &vocab, &mut rng)).count(),
            BatchSize::SmallInput,
        )
    });
}

fn calibration(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let scores: Vec<[f64; 5]> = (0..2000).map(|_| std::array::from_fn(|_| rng.random())).collect();
    let gold: Vec<LabelVector> = scores
        .iter()
        .map(|s| LabelVector(std::array::from_fn(|c| s[c] + rng.random_range(-0.3..0.3) > 0.6)))
        .collect();
    c.bench_function("calibrate thresholds on 2000 items", |b| {
        b.iter(|| eval::calibrate_thresholds(&scores, &gold).unwrap())
    });
}

criterion_group!(benches, text_side, model_side, calibration);
criterion_main!(benches);
