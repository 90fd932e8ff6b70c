//! Masked-LM pretraining, context extension, multi-label fine-tuning with
//! early stopping, grid search and multi-seed runs.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, MetricsReport, SeedAggregate, ThresholdSet};
use crate::ingest::{DatasetSplit, EvidenceItem};
use crate::labels::{LabelVector, NUM_LEVELS};
use crate::neural::{EncoderModel, MlmTarget, Objective, Params};
use crate::tokenizer::{TokenSequence, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingPolicy {
    pub mask_rate: f64,
    /// Given selection, probability of a random regular token.
    pub random_rate: f64,
    /// Given selection, probability of keeping the original token.
    pub revert_rate: f64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        Self {
            mask_rate: 0.15,
            random_rate: 0.10,
            revert_rate: 0.10,
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.mask_rate) || !unit(self.random_rate) || !unit(self.revert_rate) {
            return Err(Error::invalid("masking rates must lie in [0, 1]"));
        }
        if self.random_rate + self.revert_rate > 1.0 {
            return Err(Error::invalid("random_rate + revert_rate exceeds 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskKind {
    Mask,
    Random,
    Revert,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    pub sequence: TokenSequence,
    pub target: MlmTarget,
    /// What happened at each entry of `target.positions`.
    pub kinds: Vec<MaskKind>,
}

/// Selects each content token (not bos, eos, mask or pad) independently
/// with `mask_rate`, then replaces it by `[MASK]`, a random regular token,
/// or leaves it as is.
pub fn mask_tokens<R: Rng + ?Sized>(
    seq: &TokenSequence,
    policy: &MaskingPolicy,
    vocab: &Vocab,
    rng: &mut R,
) -> MaskedSequence {
    let sp = vocab.special();
    let regular = vocab.regular_ids();
    let mut out = seq.clone();
    let mut target = MlmTarget::default();
    let mut kinds = Vec::new();
    for pos in 0..seq.attention_length {
        let id = seq.ids[pos];
        if id == sp.bos || id == sp.eos || id == sp.pad || id == sp.mask {
            continue;
        }
        if rng.random::<f64>() >= policy.mask_rate {
            continue;
        }
        target.positions.push(pos);
        target.targets.push(id);
        let u: f64 = rng.random();
        let kind = if u < policy.random_rate && !regular.is_empty() {
            out.ids[pos] = rng.random_range(regular.clone());
            MaskKind::Random
        } else if u < policy.random_rate + policy.revert_rate {
            MaskKind::Revert
        } else {
            out.ids[pos] = sp.mask;
            MaskKind::Mask
        };
        kinds.push(kind);
    }
    MaskedSequence {
        sequence: out,
        target,
        kinds,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decay {
    Constant,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub steps: usize,
    pub batch_size: usize,
    pub accumulation: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub decay: Decay,
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl TrainSchedule {
    /// Pretraining recipe at full scale (per-device batch 8 on two devices).
    pub fn pretraining() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            accumulation: 16,
            learning_rate: 3e-4,
            warmup_steps: 500,
            decay: Decay::Linear,
            max_grad_norm: Some(5.0),
            seed: 0,
            betas: (0.9, 0.999),
            eps: 1e-6,
        }
    }

    pub fn effective_batch_size(&self) -> usize {
        self.batch_size * self.accumulation
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.accumulation == 0 {
            return Err(Error::invalid("batch size and accumulation must be positive"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if matches!(self.max_grad_norm, Some(m) if !(m > 0.0)) {
            return Err(Error::invalid("max gradient norm must be positive"));
        }
        Ok(())
    }

    /// Learning rate for update `step` (0-based): linear ramp from zero over
    /// the warmup, then constant or linear decay reaching zero at `steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * step as f64 / self.warmup_steps as f64;
        }
        match self.decay {
            Decay::Constant => self.learning_rate,
            Decay::Linear => {
                let span = self.steps.saturating_sub(self.warmup_steps).max(1);
                let left = self.steps.saturating_sub(step);
                self.learning_rate * left as f64 / span as f64
            }
        }
    }
}

/// Adam without weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Params,
    v: Params,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(like: &Params, betas: (f64, f64), eps: f64) -> Self {
        Self {
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
            beta1: betas.0,
            beta2: betas.1,
            eps,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let p = params.tensors_mut();
        let g = grads.tensors();
        let m = self.m.tensors_mut();
        let v = self.v.tensors_mut();
        for (((p, g), m), v) in p.into_iter().zip(g).zip(m).zip(v) {
            for i in 0..p.1.len() {
                let gi = g.1[i];
                m.1[i] = b1 * m.1[i] + (1.0 - b1) * gi;
                v.1[i] = b2 * v.1[i] + (1.0 - b2) * gi * gi;
                let mh = m.1[i] / c1;
                let vh = v.1[i] / c2;
                p.1[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Rescales `grads` to norm `max_norm` if larger. Returns the norm before.
pub fn clip_grad_norm(grads: &mut Params, max_norm: f64) -> f64 {
    let norm = grads.l2_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Encodes texts unpadded, truncated to `width` tokens.
pub fn encode_corpus<S: AsRef<str>>(vocab: &Vocab, texts: &[S], width: usize) -> Result<Vec<TokenSequence>> {
    texts.iter().map(|t| vocab.encode(t.as_ref(), width)).collect()
}

/// Texts with at least `min_tokens` subword tokens (specials excluded).
pub fn long_documents<'a, S: AsRef<str>>(vocab: &Vocab, texts: &'a [S], min_tokens: usize) -> Vec<&'a str> {
    texts
        .iter()
        .map(AsRef::as_ref)
        .filter(|t| vocab.tokenize(t).len() >= min_tokens)
        .collect()
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: EncoderModel,
    /// Mean masked-token loss of each update.
    pub losses: Vec<f64>,
}

fn mask_batch(
    seqs: &[&TokenSequence],
    policy: &MaskingPolicy,
    vocab: &Vocab,
    rng: &mut ChaCha8Rng,
) -> (Vec<TokenSequence>, Vec<MlmTarget>) {
    // redraw until something is masked so the loss is defined
    for _ in 0..64 {
        let masked: Vec<MaskedSequence> = seqs.iter().map(|s| mask_tokens(s, policy, vocab, rng)).collect();
        if masked.iter().any(|m| !m.target.positions.is_empty()) {
            return masked.into_iter().map(|m| (m.sequence, m.target)).unzip();
        }
    }
    (seqs.iter().map(|s| (*s).clone()).collect(), vec![MlmTarget::default(); seqs.len()])
}

/// Adam on the masked-LM objective. Every update averages `accumulation`
/// micro-batches of `batch_size` sequences drawn with replacement.
pub fn pretrain_mlm(
    mut model: EncoderModel,
    corpus: &[TokenSequence],
    vocab: &Vocab,
    schedule: &TrainSchedule,
    policy: &MaskingPolicy,
) -> Result<PretrainOutcome> {
    schedule.validate()?;
    policy.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("empty pretraining corpus"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut adam = Adam::new(&model.params, schedule.betas, schedule.eps);
    let mut losses = Vec::with_capacity(schedule.steps);
    for step in 0..schedule.steps {
        let mut grads = model.params.zeros_like();
        let mut loss = 0.0;
        for _ in 0..schedule.accumulation {
            let picks: Vec<&TokenSequence> = (0..schedule.batch_size)
                .map(|_| &corpus[rng.random_range(0..corpus.len())])
                .collect();
            let (batch, targets) = mask_batch(&picks, policy, vocab, &mut rng);
            let (l, g) = model.backward(&batch, Objective::Mlm(&targets)).map_err(|e| match e {
                Error::NonFiniteGradient(_) => Error::Divergence {
                    step,
                    loss: f64::NAN,
                    trace: losses.clone(),
                },
                other => other,
            })?;
            loss += l / schedule.accumulation as f64;
            grads.add_scaled(&g, 1.0 / schedule.accumulation as f64);
        }
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss, trace: losses });
        }
        losses.push(loss);
        if let Some(max) = schedule.max_grad_norm {
            clip_grad_norm(&mut grads, max);
        }
        adam.step(&mut model.params, &grads, schedule.lr_at(step));
        if (step + 1) % 50 == 0 {
            log::info!("pretrain step {} loss {:.4}", step + 1, loss);
        }
    }
    Ok(PretrainOutcome { model, losses })
}

/// Mean masked-token loss with masking drawn from `seed`.
pub fn heldout_mlm_loss(
    model: &EncoderModel,
    heldout: &[TokenSequence],
    vocab: &Vocab,
    policy: &MaskingPolicy,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let refs: Vec<&TokenSequence> = heldout.iter().collect();
    let (batch, targets) = mask_batch(&refs, policy, vocab, &mut rng);
    model.loss(&batch, Objective::Mlm(&targets))
}

/// Positional table tiled to `new_width`; see [`EncoderModel::extend_context`].
pub fn extend_context(model: &EncoderModel, new_width: usize) -> Result<EncoderModel> {
    model.extend_context(new_width)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledSet {
    pub sequences: Vec<TokenSequence>,
    pub labels: Vec<LabelVector>,
}

impl LabeledSet {
    pub fn encode(vocab: &Vocab, items: &[EvidenceItem], width: usize) -> Result<Self> {
        Ok(Self {
            sequences: items
                .iter()
                .map(|it| vocab.encode(&it.abstract_text, width))
                .collect::<Result<_>>()?,
            labels: items.iter().map(|it| it.labels).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EncodedSplit {
    pub train: LabeledSet,
    pub validation: LabeledSet,
    pub test: LabeledSet,
}

impl EncodedSplit {
    pub fn encode(vocab: &Vocab, split: &DatasetSplit, width: usize) -> Result<Self> {
        Ok(Self {
            train: LabeledSet::encode(vocab, &split.train, width)?,
            validation: LabeledSet::encode(vocab, &split.validation, width)?,
            test: LabeledSet::encode(vocab, &split.test, width)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOptions {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl FinetuneOptions {
    pub fn new(learning_rate: f64, batch_size: usize, epochs: usize, seed: u64) -> Self {
        Self {
            learning_rate,
            batch_size,
            epochs,
            seed,
            betas: (0.9, 0.999),
            eps: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub best: EncoderModel,
    /// 0 means the initial model was never improved on.
    pub best_epoch: usize,
    /// Validation loss before training (index 0) and after each epoch.
    pub validation_losses: Vec<f64>,
    pub train_losses: Vec<f64>,
}

impl FinetuneOutcome {
    pub fn best_loss(&self) -> f64 {
        self.validation_losses[self.best_epoch]
    }
}

pub fn validation_loss(model: &EncoderModel, set: &LabeledSet) -> Result<f64> {
    model.loss(&set.sequences, Objective::Multilabel(&set.labels))
}

/// Multi-label BCE with constant learning rate and per-epoch shuffling;
/// keeps the checkpoint with the lowest validation loss.
pub fn finetune(
    model: EncoderModel,
    train: &LabeledSet,
    validation: &LabeledSet,
    opts: &FinetuneOptions,
) -> Result<FinetuneOutcome> {
    if validation.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    if train.is_empty() && opts.epochs > 0 {
        return Err(Error::Data("training set is empty".into()));
    }
    if opts.batch_size == 0 || !(opts.learning_rate > 0.0) {
        return Err(Error::invalid("batch size and learning rate must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = Adam::new(&model.params, opts.betas, opts.eps);
    let mut current = model;
    let mut best = current.clone();
    let mut best_epoch = 0;
    let mut validation_losses = vec![validation_loss(&current, validation)?];
    let mut train_losses = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut updates = 0;
    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            let seqs: Vec<TokenSequence> = chunk.iter().map(|&i| train.sequences[i].clone()).collect();
            let labels: Vec<LabelVector> = chunk.iter().map(|&i| train.labels[i]).collect();
            let (loss, grads) = current
                .backward(&seqs, Objective::Multilabel(&labels))
                .map_err(|e| match e {
                    Error::NonFiniteGradient(_) => Error::Divergence {
                        step: updates,
                        loss: f64::NAN,
                        trace: validation_losses.clone(),
                    },
                    other => other,
                })?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step: updates,
                    loss,
                    trace: validation_losses,
                });
            }
            epoch_loss += loss * chunk.len() as f64;
            adam.step(&mut current.params, &grads, opts.learning_rate);
            updates += 1;
        }
        train_losses.push(epoch_loss / train.len() as f64);
        let v = validation_loss(&current, validation)?;
        if !v.is_finite() {
            return Err(Error::Divergence {
                step: updates,
                loss: v,
                trace: validation_losses,
            });
        }
        log::info!("epoch {epoch} train {:.4} validation {v:.4}", train_losses[epoch - 1]);
        validation_losses.push(v);
        if v < validation_losses[best_epoch] {
            best_epoch = epoch;
            best = current.clone();
        }
    }
    Ok(FinetuneOutcome {
        best,
        best_epoch,
        validation_losses,
        train_losses,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneGrid {
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub epochs: usize,
    pub seeds_per_cell: usize,
    pub base_seed: u64,
}

impl Default for FinetuneGrid {
    fn default() -> Self {
        Self {
            learning_rates: vec![1e-6, 3e-6, 6e-6],
            batch_sizes: vec![16, 32],
            epochs: 20,
            seeds_per_cell: 3,
            base_seed: 0,
        }
    }
}

impl FinetuneGrid {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rates.is_empty() || self.batch_sizes.is_empty() || self.seeds_per_cell == 0 {
            return Err(Error::invalid("fine-tuning grid is empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Best validation loss per seed; infinite when the run diverged.
    pub losses: Vec<f64>,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
    pub best_learning_rate: f64,
    pub best_batch_size: usize,
}

impl GridResult {
    /// Batch sizes as column groups, learning rates within each group.
    pub fn table(&self) -> String {
        let mut batches: Vec<usize> = self.cells.iter().map(|c| c.batch_size).collect();
        batches.dedup();
        let mut head = String::from("batch size ");
        let mut lrs = String::from("lr         ");
        let mut row = String::from("mean loss  ");
        for c in &self.cells {
            let mark = if c.learning_rate == self.best_learning_rate && c.batch_size == self.best_batch_size {
                "*"
            } else {
                " "
            };
            let _ = write!(head, " {:>9}", c.batch_size);
            let _ = write!(lrs, " {:>9.0e}", c.learning_rate);
            let _ = write!(row, " {:>8.3}{mark}", c.mean_loss);
        }
        format!("{head}\n{lrs}\n{row}\n")
    }
}

/// Averages each cell's best validation loss over seeds and picks the
/// smallest mean. `factory(seed)` returns the starting model for one run.
pub fn hyperparam_search<F>(factory: F, train: &LabeledSet, validation: &LabeledSet, grid: &FinetuneGrid) -> Result<GridResult>
where
    F: Fn(u64) -> Result<EncoderModel>,
{
    grid.validate()?;
    let mut cells = Vec::new();
    for &batch_size in &grid.batch_sizes {
        for &lr in &grid.learning_rates {
            let mut losses = Vec::with_capacity(grid.seeds_per_cell);
            for k in 0..grid.seeds_per_cell {
                let seed = grid.base_seed + k as u64;
                let opts = FinetuneOptions::new(lr, batch_size, grid.epochs, seed);
                let loss = match finetune(factory(seed)?, train, validation, &opts) {
                    Ok(out) => out.best_loss(),
                    Err(Error::Divergence { step, .. }) => {
                        log::warn!("lr {lr:e} batch {batch_size} seed {seed} diverged at update {step}");
                        f64::INFINITY
                    }
                    Err(e) => return Err(e),
                };
                losses.push(loss);
            }
            let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
            cells.push(GridCell {
                learning_rate: lr,
                batch_size,
                losses,
                mean_loss,
            });
        }
    }
    let best = cells
        .iter()
        .min_by(|a, b| a.mean_loss.total_cmp(&b.mean_loss))
        .expect("grid is non-empty");
    Ok(GridResult {
        best_learning_rate: best.learning_rate,
        best_batch_size: best.batch_size,
        cells,
    })
}

/// Sigmoid class probabilities for each sequence.
pub fn predict_probabilities(model: &EncoderModel, seqs: &[TokenSequence]) -> Result<Vec<[f64; NUM_LEVELS]>> {
    seqs.par_iter()
        .map(|s| {
            let p = model.predict_proba(s)?;
            let mut out = [0.0; NUM_LEVELS];
            out.copy_from_slice(&p[..NUM_LEVELS]);
            Ok(out)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub model: EncoderModel,
    pub best_epoch: usize,
    pub validation_losses: Vec<f64>,
    pub thresholds: ThresholdSet,
    pub test_probabilities: Vec<[f64; NUM_LEVELS]>,
    pub report: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct MultiSeedOutcome {
    pub runs: Vec<SeedRun>,
    pub aggregate: SeedAggregate,
}

/// One fine-tune per seed, each calibrated on validation and scored on test.
pub fn multi_seed_run<F>(
    factory: F,
    split: &EncodedSplit,
    learning_rate: f64,
    batch_size: usize,
    epochs: usize,
    seeds: &[u64],
) -> Result<MultiSeedOutcome>
where
    F: Fn(u64) -> Result<EncoderModel>,
{
    if seeds.is_empty() {
        return Err(Error::invalid("at least one seed is required"));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let opts = FinetuneOptions::new(learning_rate, batch_size, epochs, seed);
        let out = finetune(factory(seed)?, &split.train, &split.validation, &opts)?;
        let val = predict_probabilities(&out.best, &split.validation.sequences)?;
        let thresholds = eval::calibrate_thresholds(&val, &split.validation.labels)?;
        let test_probabilities = predict_probabilities(&out.best, &split.test.sequences)?;
        let predictions = eval::apply_thresholds(&test_probabilities, &thresholds);
        let report = eval::compute_metrics(&predictions, &split.test.labels)?;
        log::info!("seed {seed}: weighted F1 {:.4}", report.weighted_f1);
        runs.push(SeedRun {
            seed,
            model: out.best,
            best_epoch: out.best_epoch,
            validation_losses: out.validation_losses,
            thresholds,
            test_probabilities,
            report,
        });
    }
    let reports: Vec<MetricsReport> = runs.iter().map(|r| r.report.clone()).collect();
    let aggregate = eval::aggregate_seeds(&reports)?;
    Ok(MultiSeedOutcome { runs, aggregate })
}
