use std::path::Path;

use evidence_core::baseline::{BaselineModel, DEFAULT_REG};
use evidence_core::eval::{self, MetricsReport};
use evidence_core::ingest::{self, SplitName, DEFAULT_RATIOS};
use evidence_core::tokenizer::train_vocab;
use evidence_core::{synthetic, DatasetSplit, Error, EvidenceItem, Level, NUM_LEVELS};
use serde_json::json;

use super::write_metrics;
use crate::args::{BaselineEvalArgs, BaselineTrainArgs, IngestArgs, SynthArgs, SynthKind, TokenizerTrainArgs};
use crate::config::Config;
use crate::files::{self, csv_rows, json_bytes, prediction_rows, to_jsonl};
use crate::manifest::Run;
use crate::Usage;

const DEFAULT_PAGE_SIZE: usize = 100;

fn split_bytes(split: &DatasetSplit) -> anyhow::Result<Vec<u8>> {
    let mut buf = Vec::new();
    split.write_jsonl(&mut buf)?;
    Ok(buf)
}

fn counts_csv(split: &DatasetSplit) -> Vec<u8> {
    let letters: Vec<String> = Level::ALL.iter().map(|l| l.to_string()).collect();
    csv_rows(
        &format!("split,items,{}", letters.join(",")),
        SplitName::ALL.iter().map(|&name| {
            let part = split.part(name);
            let counts = ingest::class_counts(part);
            let cells: Vec<String> = counts.iter().map(usize::to_string).collect();
            format!("{},{},{}", name.as_str(), part.len(), cells.join(","))
        }),
    )
}

pub fn ingest(cfg: &Config, a: &IngestArgs) -> anyhow::Result<()> {
    let mut run = Run::beside("ingest", &a.out)?;
    let seed = a.seed.or(cfg.seed).unwrap_or(0);
    let ratios = match a.ratios.as_deref() {
        Some(&[train, val, test]) => [train, val, test],
        Some(r) => return Err(Usage(format!("--ratios needs three values, got {}", r.len())).into()),
        None => cfg.ingest.ratios.unwrap_or(DEFAULT_RATIOS),
    };
    let page_size = a.page_size.or(cfg.ingest.page_size).unwrap_or(DEFAULT_PAGE_SIZE);
    let raw = match &a.from_fixture {
        Some(path) => ingest::read_records_json(run.read(path)?.as_slice())?,
        None => ingest::fetch_evidence(&a.endpoint, page_size)?,
    };
    let kept = ingest::filter_records(&raw);
    let items = ingest::compile_multilabel(&kept);
    log::info!("{} records, {} kept, {} items", raw.len(), kept.len(), items.len());
    if items.is_empty() {
        return Err(Error::Data("no evidence items survived filtering".into()).into());
    }
    let split = ingest::stratified_split(&items, ratios, seed)?;
    run.write(&a.out, &split_bytes(&split)?)?;
    run.write(&a.out.with_extension("counts.csv"), &counts_csv(&split))?;
    run.set_config(&json!({
        "source": a.from_fixture.as_ref().map_or(a.endpoint.clone(), |p| p.display().to_string()),
        "seed": seed,
        "ratios": ratios,
        "page_size": page_size,
        "raw_records": raw.len(),
        "items": items.len(),
    }))?;
    run.add_seeds(&[seed]);
    run.finish()?;
    Ok(())
}

pub fn tokenizer_train(a: &TokenizerTrainArgs) -> anyhow::Result<()> {
    let mut run = Run::beside("tokenizer train", &a.out)?;
    let texts = files::corpus_texts(&mut run, &a.corpus)?;
    let vocab = train_vocab(&texts, a.size)?;
    log::info!("vocabulary of {} tokens from {} documents", vocab.len(), texts.len());
    let mut buf = Vec::new();
    vocab.write(&mut buf)?;
    run.write(&a.out, &buf)?;
    run.set_config(&json!({ "size": a.size, "documents": texts.len() }))?;
    run.finish()?;
    Ok(())
}

pub fn baseline_train(a: &BaselineTrainArgs) -> anyhow::Result<()> {
    let mut run = Run::beside("baseline train", &a.out)?;
    let split = files::read_split(&mut run, &a.data)?;
    let texts: Vec<&str> = split.train.iter().map(|it| it.abstract_text.as_str()).collect();
    let labels: Vec<_> = split.train.iter().map(|it| it.labels).collect();
    let reg = a.c.unwrap_or(DEFAULT_REG);
    let model = BaselineModel::fit(&texts, &labels, reg)?;
    log::info!("{} tf-idf features", model.tfidf.dim());
    run.write(&a.out, model.to_json()?.as_bytes())?;
    run.set_config(&json!({ "c": reg, "train_items": texts.len() }))?;
    run.finish()?;
    Ok(())
}

fn baseline_scores(model: &BaselineModel, items: &[EvidenceItem]) -> anyhow::Result<Vec<[f64; NUM_LEVELS]>> {
    Ok(items
        .iter()
        .map(|it| model.predict_proba(&it.abstract_text))
        .collect::<evidence_core::Result<_>>()?)
}

pub fn baseline_eval(a: &BaselineEvalArgs) -> anyhow::Result<()> {
    let mut run = Run::in_dir("baseline eval", &a.out)?;
    let split = files::read_split(&mut run, &a.data)?;
    let model = BaselineModel::from_json(&run.read_string(&a.model)?)?;
    let val = baseline_scores(&model, &split.validation)?;
    let gold_val: Vec<_> = split.validation.iter().map(|it| it.labels).collect();
    let thresholds = eval::calibrate_thresholds(&val, &gold_val)?;
    let test = baseline_scores(&model, &split.test)?;
    let predicted = eval::apply_thresholds(&test, &thresholds);
    let gold: Vec<_> = split.test.iter().map(|it| it.labels).collect();
    let report = eval::compute_metrics(&predicted, &gold)?;
    log::info!("tf-idf weighted F1 {:.4}", report.weighted_f1);

    run.write(&a.out.join("thresholds.json"), &json_bytes(&thresholds)?)?;
    run.write(
        &a.out.join("validation_predictions.jsonl"),
        &to_jsonl(&prediction_rows(&split.validation, &val, None))?,
    )?;
    run.write(
        &a.out.join("test_predictions.jsonl"),
        &to_jsonl(&prediction_rows(&split.test, &test, Some(&predicted)))?,
    )?;
    write_metrics(&mut run, &a.out, &[("tf-idf".to_string(), report)])?;
    run.finish()?;
    Ok(())
}

pub fn synth(a: &SynthArgs) -> anyhow::Result<()> {
    let mut run = Run::beside("synth", &a.out)?;
    let bytes = match a.kind {
        SynthKind::Keyword => {
            let items = synthetic::keyword_dataset(a.n, 24, a.seed);
            split_bytes(&ingest::stratified_split(&items, DEFAULT_RATIOS, a.seed)?)?
        }
        SynthKind::Raw => serde_json::to_vec_pretty(&synthetic::raw_records(a.n, a.seed))?,
        SynthKind::Pattern => {
            let mut s = synthetic::patterned_corpus(a.n, 64, 40, a.seed).join("\n");
            s.push('\n');
            s.into_bytes()
        }
    };
    run.write(&a.out, &bytes)?;
    run.set_config(&json!({ "kind": format!("{:?}", a.kind).to_lowercase(), "n": a.n }))?;
    run.add_seeds(&[a.seed]);
    run.finish()?;
    Ok(())
}

/// Metrics file written by `evaluate`, `baseline eval` and `finetune`.
pub fn read_named_metrics(run: &mut Run, path: &Path) -> anyhow::Result<Vec<(String, MetricsReport)>> {
    let text = run.read_string(path)?;
    let rows: Vec<super::NamedReport> = serde_json::from_str(&text).map_err(Error::from)?;
    Ok(rows.into_iter().map(|r| (r.name, r.report)).collect())
}
