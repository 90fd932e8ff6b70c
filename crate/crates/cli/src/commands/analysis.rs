use std::collections::HashMap;

use evidence_core::attribution::{self, AttributionConfig, BaselineKind, Explanation};
use evidence_core::eval::{self, ThresholdSet};
use evidence_core::fewshot::{self, ConstantClient, FewShotConfig, HttpLlmClient, LlmClient, OracleClient};
use evidence_core::ingest::SplitName;
use evidence_core::{Error, LabelVector, Level, NUM_LEVELS};
use serde::Serialize;
use serde_json::json;

use super::{data::read_named_metrics, write_metrics};
use crate::args::{BaselineChoice, CalibrateArgs, ClientChoice, EvaluateArgs, ExplainArgs, FewshotArgs, ReportArgs, SplitChoice};
use crate::config::Config;
use crate::files::{self, csv_rows, json_bytes, to_jsonl, PredictionRow};
use crate::manifest::Run;
use crate::Usage;

const DEFAULT_IG_STEPS: usize = 256;
const DEFAULT_TOP: usize = 10;

fn scores_and_gold(rows: &[PredictionRow]) -> (Vec<[f64; NUM_LEVELS]>, Vec<LabelVector>) {
    (rows.iter().map(|r| r.scores).collect(), rows.iter().map(|r| r.gold).collect())
}

pub fn calibrate(a: &CalibrateArgs) -> anyhow::Result<()> {
    let mut run = Run::beside("calibrate", &a.out)?;
    let rows = files::read_predictions(&mut run, &a.predictions)?;
    let (scores, gold) = scores_and_gold(&rows);
    let thresholds = eval::calibrate_thresholds(&scores, &gold)?;
    for l in Level::ALL {
        println!("{l}\t{:.6}", thresholds.0[l.index()]);
    }
    run.write(&a.out, &json_bytes(&thresholds)?)?;
    run.finish()?;
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> anyhow::Result<()> {
    let mut run = Run::in_dir("evaluate", &a.out)?;
    let mut rows = files::read_predictions(&mut run, &a.predictions)?;
    let thresholds = match &a.thresholds {
        Some(p) => files::read_thresholds(&mut run, p)?,
        None => ThresholdSet::default(),
    };
    let (scores, gold) = scores_and_gold(&rows);
    let predicted = eval::apply_thresholds(&scores, &thresholds);
    let report = eval::compute_metrics(&predicted, &gold)?;
    for (row, p) in rows.iter_mut().zip(&predicted) {
        row.predicted = Some(*p);
    }
    let table = write_metrics(&mut run, &a.out, &[(a.name.clone(), report)])?;
    print!("{table}");
    run.write(&a.out.join("predictions.jsonl"), &to_jsonl(&rows)?)?;
    run.set_config(&json!({ "name": a.name, "thresholds": thresholds }))?;
    run.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct ExplanationRow<'a> {
    pubmed_id: u64,
    #[serde(flatten)]
    explanation: &'a Explanation,
}

fn baseline_kind(cfg: &Config, flag: Option<BaselineChoice>) -> anyhow::Result<BaselineKind> {
    Ok(match flag {
        Some(BaselineChoice::Zero) => BaselineKind::Zero,
        Some(BaselineChoice::Pad) => BaselineKind::Pad,
        None => match cfg.explain.baseline.as_deref() {
            None | Some("zero") => BaselineKind::Zero,
            Some("pad") => BaselineKind::Pad,
            Some(other) => return Err(Usage(format!("unknown attribution baseline `{other}`")).into()),
        },
    })
}

pub fn explain(cfg: &Config, a: &ExplainArgs) -> anyhow::Result<()> {
    let mut run = Run::beside("explain", &a.out)?;
    let split = files::read_split(&mut run, &a.data)?;
    let vocab = files::read_vocab(&mut run, &a.vocab)?;
    let model = files::read_model(&mut run, &a.ckpt)?;
    let targets: Vec<Level> = match a.class {
        Some(c) => vec![Level::from_letter(c).ok_or_else(|| Usage(format!("unknown level `{c}`")))?],
        None => Level::ALL.to_vec(),
    };
    let name = match a.split {
        SplitChoice::Train => SplitName::Train,
        SplitChoice::Validation => SplitName::Validation,
        SplitChoice::Test => SplitName::Test,
    };
    let items: Vec<_> = split
        .part(name)
        .iter()
        .filter(|it| targets.iter().any(|&t| it.labels.get(t)))
        .take(a.limit.unwrap_or(usize::MAX))
        .collect();
    let steps = a.steps.or(cfg.explain.steps).unwrap_or(DEFAULT_IG_STEPS);
    let top = a.top.or(cfg.explain.top).unwrap_or(DEFAULT_TOP);
    let baseline = baseline_kind(cfg, a.baseline)?;
    let special = vocab.special();

    let mut lines = Vec::new();
    let mut totals: Vec<HashMap<String, f64>> = vec![HashMap::new(); NUM_LEVELS];
    for &target in &targets {
        let config = AttributionConfig {
            baseline,
            steps,
            ..AttributionConfig::new(target)
        };
        for item in items.iter().filter(|it| it.labels.get(target)) {
            let seq = vocab.encode(&item.abstract_text, model.config.context_width)?;
            let e = attribution::explain(&model, &vocab, &seq, &config)?;
            for t in &e.tokens {
                if !special.contains(seq.ids[t.position]) {
                    *totals[target.index()].entry(t.token.clone()).or_default() += t.score;
                }
            }
            lines.push(to_jsonl(&[ExplanationRow {
                pubmed_id: item.pubmed_id,
                explanation: &e,
            }])?);
        }
    }
    if lines.is_empty() {
        return Err(Error::Data("no items carry the requested level".into()).into());
    }
    let lists: Vec<Vec<(String, f64)>> = totals.into_iter().map(|t| attribution::rank(t, top)).collect();
    let table = attribution::top_tokens_table(&lists);
    print!("{table}");
    run.write(&a.out, &lines.concat())?;
    run.write(&a.out.with_extension("txt"), table.as_bytes())?;
    run.set_config(&json!({
        "split": name.as_str(),
        "items": items.len(),
        "targets": targets.iter().map(|l| l.to_string()).collect::<Vec<_>>(),
        "steps": steps,
        "baseline": baseline,
        "top": top,
    }))?;
    run.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct ResponseRow<'a> {
    shots: usize,
    repetition: usize,
    pubmed_id: u64,
    response: &'a str,
    predicted: LabelVector,
}

pub fn fewshot(cfg: &Config, a: &FewshotArgs) -> anyhow::Result<()> {
    let mut run = Run::in_dir("fewshot", &a.out)?;
    let split = files::read_split(&mut run, &a.data)?;
    let f = &cfg.fewshot;
    let seed = a.seed.or(cfg.seed).unwrap_or(0);
    let per_level = a.per_level.or(f.per_level).unwrap_or(fewshot::ITEMS_PER_LEVEL);
    let reduced = fewshot::reduced_test_set(&split.test, per_level, seed)?;
    let client: Box<dyn LlmClient> = match (a.client, &a.mock_response) {
        (ClientChoice::Live, _) => Box::new(HttpLlmClient::from_env()?),
        (ClientChoice::Mock, Some(text)) => Box::new(ConstantClient(text.clone())),
        (ClientChoice::Mock, None) => Box::new(OracleClient::new(&reduced)),
    };
    let config = FewShotConfig {
        shots: a.shots.clone().or(f.shots.clone()).unwrap_or(fewshot::DEFAULT_SHOTS.to_vec()),
        repetitions: a.repetitions.or(f.repetitions).unwrap_or(fewshot::DEFAULT_REPETITIONS),
        seed,
        token_budget: a.token_budget.or(f.token_budget),
    };
    let results = fewshot::evaluate_fewshot(client.as_ref(), &split.train, &reduced, &config)?;

    let mut responses = Vec::new();
    for r in &results {
        for rep in &r.repetitions {
            for ((item, text), p) in reduced.iter().zip(&rep.responses).zip(&rep.predictions) {
                responses.push(ResponseRow {
                    shots: r.shots,
                    repetition: rep.index,
                    pubmed_id: item.pubmed_id,
                    response: text,
                    predicted: *p,
                });
            }
        }
    }
    let rows: Vec<_> = results
        .iter()
        .filter_map(|r| r.mean.clone().map(|m| (format!("{}-shot", r.shots), m)))
        .collect();
    if rows.is_empty() {
        return Err(Error::Llm("every repetition failed".into()).into());
    }
    let table = write_metrics(&mut run, &a.out, &rows)?;
    print!("{table}");
    run.write(&a.out.join("responses.jsonl"), &to_jsonl(&responses)?)?;
    run.write(&a.out.join("results.json"), &json_bytes(&results)?)?;
    run.set_config(&json!({
        "client": match a.client { ClientChoice::Live => "live", ClientChoice::Mock => "mock" },
        "mock_response": a.mock_response,
        "shots": config.shots,
        "repetitions": config.repetitions,
        "per_level": per_level,
        "token_budget": config.token_budget,
        "prompt_template_version": fewshot::PROMPT_TEMPLATE_VERSION,
    }))?;
    run.add_seeds(&[seed]);
    run.finish()?;
    Ok(())
}

pub fn report(a: &ReportArgs) -> anyhow::Result<()> {
    if a.compare.is_empty() && a.metrics.is_empty() {
        return Err(Usage("report needs --compare or --metrics".into()).into());
    }
    let mut run = Run::in_dir("report", &a.out)?;
    if !a.metrics.is_empty() {
        let mut rows = Vec::new();
        for p in &a.metrics {
            rows.extend(read_named_metrics(&mut run, p)?);
        }
        print!("{}", write_metrics(&mut run, &a.out, &rows)?);
    }
    if !a.compare.is_empty() {
        if a.compare.len() < 2 {
            return Err(Usage("--compare needs at least two prediction files".into()).into());
        }
        let mut gold: Option<Vec<(u64, LabelVector)>> = None;
        let mut models = Vec::new();
        for p in &a.compare {
            let rows = files::read_predictions(&mut run, p)?;
            let keys: Vec<(u64, LabelVector)> = rows.iter().map(|r| (r.pubmed_id, r.gold)).collect();
            match &gold {
                None => gold = Some(keys),
                Some(g) if *g != keys => {
                    return Err(Error::Data(format!("{} covers a different item set", p.display())).into());
                }
                Some(_) => {}
            }
            let predicted = rows
                .iter()
                .map(|r| r.predicted)
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| Error::Data(format!("{} has no thresholded predictions", p.display())))?;
            models.push((p.display().to_string(), predicted));
        }
        let gold: Vec<LabelVector> = gold.unwrap_or_default().into_iter().map(|(_, l)| l).collect();
        let analysis = eval::misclassification_analysis(&models, &gold)?;
        let table = eval::analysis_table(&analysis);
        print!("{table}");
        let header = std::iter::once("model".to_string())
            .chain(analysis.models.iter().map(|m| eval::csv_field(m)))
            .collect::<Vec<_>>()
            .join(",");
        let overlap = analysis.models.iter().zip(&analysis.overlap).map(|(m, row)| {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.1}")).collect();
            format!("{},{}", eval::csv_field(m), cells.join(","))
        });
        run.write(&a.out.join("overlap.csv"), &csv_rows(&header, overlap))?;
        run.write(
            &a.out.join("correct_models.csv"),
            &csv_rows(
                "models_correct,items",
                analysis.histogram.iter().enumerate().map(|(k, n)| format!("{k},{n}")),
            ),
        )?;
        run.write(&a.out.join("analysis.txt"), table.as_bytes())?;
        run.write(&a.out.join("analysis.json"), &json_bytes(&analysis)?)?;
    }
    run.finish()?;
    Ok(())
}
