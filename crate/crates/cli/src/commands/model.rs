use evidence_core::eval::{self, SeedAggregate};
use evidence_core::training::{self, EncodedSplit, FinetuneGrid, GridResult, LabeledSet};
use evidence_core::{EncoderModel, Level, Vocab};
use serde_json::json;

use super::write_metrics;
use crate::args::{ExtendArgs, FinetuneArgs, GridSearchArgs, ModelSource, PretrainArgs};
use crate::config::Config;
use crate::files::{self, csv_rows, json_bytes, prediction_rows, to_jsonl};
use crate::manifest::Run;
use crate::Usage;

const DEFAULT_LR: f64 = 1e-3;
const DEFAULT_BATCH: usize = 16;
const DEFAULT_EPOCHS: usize = 20;
const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

pub fn pretrain(cfg: &Config, a: &PretrainArgs) -> anyhow::Result<()> {
    let mut run = Run::in_dir("pretrain", &a.out)?;
    let vocab = files::read_vocab(&mut run, &a.vocab)?;
    let texts = files::corpus_texts(&mut run, &a.corpus)?;
    let min_tokens = a.min_tokens.or(cfg.pretrain.min_tokens).unwrap_or(0);
    let docs = training::long_documents(&vocab, &texts, min_tokens);
    log::info!("{} of {} documents have at least {min_tokens} tokens", docs.len(), texts.len());
    let schedule = cfg.schedule(a.steps, a.seed);
    let policy = cfg.masking();
    let model = match &a.init {
        Some(path) => files::read_model(&mut run, path)?,
        None => EncoderModel::init(cfg.model_config(vocab.len()), schedule.seed)?,
    };
    if model.config.vocab_size != vocab.len() {
        return Err(Usage(format!(
            "model expects {} tokens but the vocabulary has {}",
            model.config.vocab_size,
            vocab.len()
        ))
        .into());
    }
    let corpus = training::encode_corpus(&vocab, &docs, model.config.context_width)?;
    let config = model.config;
    let out = training::pretrain_mlm(model, &corpus, &vocab, &schedule, &policy)?;
    files::write_model(&mut run, &a.out.join("model.ckpt"), &out.model)?;
    run.write(
        &a.out.join("losses.csv"),
        &csv_rows("step,loss", out.losses.iter().enumerate().map(|(i, l)| format!("{},{l}", i + 1))),
    )?;
    run.set_config(&json!({ "model": config, "schedule": schedule, "masking": policy, "min_tokens": min_tokens }))?;
    run.add_seeds(&[schedule.seed]);
    run.finish()?;
    Ok(())
}

pub fn extend_context(a: &ExtendArgs) -> anyhow::Result<()> {
    if a.factor == 0 {
        return Err(Usage("--factor must be at least 1".into()).into());
    }
    let mut run = Run::beside("extend-context", &a.out)?;
    let model = files::read_model(&mut run, &a.input)?;
    let width = model.config.context_width * a.factor;
    let extended = training::extend_context(&model, width)?;
    files::write_model(&mut run, &a.out, &extended)?;
    run.set_config(&json!({ "factor": a.factor, "from_width": model.config.context_width, "to_width": width }))?;
    run.finish()?;
    Ok(())
}

/// Model factory keyed by seed: the pretrained checkpoint with a fresh
/// classification head, or a fresh model.
fn factory<'a>(
    cfg: &'a Config,
    vocab: &'a Vocab,
    base: Option<EncoderModel>,
) -> anyhow::Result<(usize, impl Fn(u64) -> evidence_core::Result<EncoderModel> + 'a)> {
    if let Some(m) = &base {
        if m.config.vocab_size != vocab.len() {
            return Err(Usage(format!(
                "checkpoint expects {} tokens but the vocabulary has {}",
                m.config.vocab_size,
                vocab.len()
            ))
            .into());
        }
    }
    let config = cfg.model_config(vocab.len());
    let width = base.as_ref().map_or(config.context_width, |m| m.config.context_width);
    Ok((width, move |seed| match &base {
        Some(m) => {
            let mut m = m.clone();
            m.reinit_cls_head(seed);
            Ok(m)
        }
        None => EncoderModel::init(config, seed),
    }))
}

fn load_sources(run: &mut Run, src: &ModelSource) -> anyhow::Result<(Vocab, Option<EncoderModel>)> {
    let vocab = files::read_vocab(run, &src.vocab)?;
    let base = src.init.as_ref().map(|p| files::read_model(run, p)).transpose()?;
    Ok((vocab, base))
}

fn grid_from(cfg: &Config, lrs: Option<&[f64]>, batches: Option<&[usize]>, epochs: usize, per_cell: Option<usize>) -> FinetuneGrid {
    let d = FinetuneGrid::default();
    let f = &cfg.finetune;
    FinetuneGrid {
        learning_rates: lrs.map(<[f64]>::to_vec).or(f.grid_learning_rates.clone()).unwrap_or(d.learning_rates),
        batch_sizes: batches.map(<[usize]>::to_vec).or(f.grid_batch_sizes.clone()).unwrap_or(d.batch_sizes),
        epochs,
        seeds_per_cell: per_cell.or(f.seeds_per_cell).unwrap_or(d.seeds_per_cell),
        base_seed: cfg.seed.unwrap_or(d.base_seed),
    }
}

fn write_grid(run: &mut Run, dir: &std::path::Path, result: &GridResult) -> anyhow::Result<()> {
    run.write(&dir.join("grid.txt"), result.table().as_bytes())?;
    run.write(&dir.join("grid.json"), &json_bytes(result)?)
}

pub fn grid_search(cfg: &Config, a: &GridSearchArgs) -> anyhow::Result<()> {
    let mut run = Run::in_dir("grid-search", &a.out)?;
    let split = files::read_split(&mut run, &a.data)?;
    let (vocab, base) = load_sources(&mut run, &a.model)?;
    let (width, make) = factory(cfg, &vocab, base)?;
    let train = LabeledSet::encode(&vocab, &split.train, width)?;
    let val = LabeledSet::encode(&vocab, &split.validation, width)?;
    let epochs = a.epochs.or(cfg.finetune.epochs).unwrap_or(DEFAULT_EPOCHS);
    let grid = grid_from(cfg, a.lrs.as_deref(), a.batches.as_deref(), epochs, a.seeds_per_cell);
    let result = training::hyperparam_search(make, &train, &val, &grid)?;
    print!("{}", result.table());
    write_grid(&mut run, &a.out, &result)?;
    run.set_config(&grid)?;
    run.finish()?;
    Ok(())
}

fn boxplot_csv(agg: &SeedAggregate) -> Vec<u8> {
    let mut rows: Vec<String> = Level::ALL
        .iter()
        .map(|l| {
            let s = agg.per_class_f1[l.index()];
            format!("F1_{l},{},{},{},{}", s.min, s.median, s.max, s.mean)
        })
        .collect();
    let w = agg.weighted_f1;
    rows.push(format!("F1,{},{},{},{}", w.min, w.median, w.max, w.mean));
    csv_rows("metric,min,median,max,mean", rows)
}

pub fn finetune(cfg: &Config, a: &FinetuneArgs) -> anyhow::Result<()> {
    let mut run = Run::in_dir("finetune", &a.out)?;
    let split = files::read_split(&mut run, &a.data)?;
    let (vocab, base) = load_sources(&mut run, &a.model)?;
    let (width, make) = factory(cfg, &vocab, base)?;
    let encoded = EncodedSplit::encode(&vocab, &split, width)?;
    let f = &cfg.finetune;
    let epochs = a.epochs.or(f.epochs).unwrap_or(DEFAULT_EPOCHS);
    let (lr, batch) = if a.grid {
        let grid = grid_from(cfg, None, None, epochs, None);
        let result = training::hyperparam_search(&make, &encoded.train, &encoded.validation, &grid)?;
        write_grid(&mut run, &a.out, &result)?;
        (result.best_learning_rate, result.best_batch_size)
    } else {
        (
            a.lr.or(f.learning_rate).unwrap_or(DEFAULT_LR),
            a.batch.or(f.batch_size).unwrap_or(DEFAULT_BATCH),
        )
    };
    let seeds = a.seeds.clone().or(f.seeds.clone()).unwrap_or(DEFAULT_SEEDS.to_vec());
    let outcome = training::multi_seed_run(&make, &encoded, lr, batch, epochs, &seeds)?;

    let mut rows = Vec::new();
    for r in &outcome.runs {
        let dir = a.out.join(format!("seed-{}", r.seed));
        files::write_model(&mut run, &dir.join("model.ckpt"), &r.model)?;
        run.write(&dir.join("thresholds.json"), &json_bytes(&r.thresholds)?)?;
        let val = training::predict_probabilities(&r.model, &encoded.validation.sequences)?;
        run.write(
            &dir.join("validation_predictions.jsonl"),
            &to_jsonl(&prediction_rows(&split.validation, &val, None))?,
        )?;
        let predicted = eval::apply_thresholds(&r.test_probabilities, &r.thresholds);
        run.write(
            &dir.join("test_predictions.jsonl"),
            &to_jsonl(&prediction_rows(&split.test, &r.test_probabilities, Some(&predicted)))?,
        )?;
        run.write(
            &dir.join("losses.csv"),
            &csv_rows(
                "epoch,validation_loss",
                r.validation_losses.iter().enumerate().map(|(e, l)| format!("{e},{l}")),
            ),
        )?;
        rows.push((format!("seed {}", r.seed), r.report.clone()));
    }
    rows.push(("mean".to_string(), outcome.aggregate.mean.clone()));
    write_metrics(&mut run, &a.out, &rows)?;
    run.write(&a.out.join("boxplot.csv"), &boxplot_csv(&outcome.aggregate))?;
    run.write(&a.out.join("aggregate.json"), &json_bytes(&outcome.aggregate)?)?;
    log::info!("mean weighted F1 {:.4} over {} seeds", outcome.aggregate.mean.weighted_f1, seeds.len());
    run.set_config(&json!({
        "learning_rate": lr,
        "batch_size": batch,
        "epochs": epochs,
        "context_width": width,
        "grid": a.grid,
    }))?;
    run.add_seeds(&seeds);
    run.finish()?;
    Ok(())
}
