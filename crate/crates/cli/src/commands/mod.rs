use std::path::Path;

use evidence_core::eval::{self, MetricsReport};
use serde::{Deserialize, Serialize};

use crate::args::{BaselineCommand, Command, TokenizerCommand};
use crate::config::Config;
use crate::files::json_bytes;
use crate::manifest::Run;

mod analysis;
mod data;
mod model;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedReport {
    pub name: String,
    pub report: MetricsReport,
}

/// `metrics.csv`, `metrics.txt` and `metrics.json` in `dir`; returns the table.
pub fn write_metrics(run: &mut Run, dir: &Path, rows: &[(String, MetricsReport)]) -> anyhow::Result<String> {
    let table = eval::reports_table(rows);
    run.write(&dir.join("metrics.csv"), eval::reports_csv(rows).as_bytes())?;
    run.write(&dir.join("metrics.txt"), table.as_bytes())?;
    let named: Vec<NamedReport> = rows
        .iter()
        .map(|(name, report)| NamedReport {
            name: name.clone(),
            report: report.clone(),
        })
        .collect();
    run.write(&dir.join("metrics.json"), &json_bytes(&named)?)?;
    Ok(table)
}

pub fn run(cfg: &Config, command: &Command) -> anyhow::Result<()> {
    match command {
        Command::Ingest(a) => data::ingest(cfg, a),
        Command::Tokenizer(TokenizerCommand::Train(a)) => data::tokenizer_train(a),
        Command::Baseline(BaselineCommand::Train(a)) => data::baseline_train(a),
        Command::Baseline(BaselineCommand::Eval(a)) => data::baseline_eval(a),
        Command::Pretrain(a) => model::pretrain(cfg, a),
        Command::ExtendContext(a) => model::extend_context(a),
        Command::Finetune(a) => model::finetune(cfg, a),
        Command::GridSearch(a) => model::grid_search(cfg, a),
        Command::Calibrate(a) => analysis::calibrate(a),
        Command::Evaluate(a) => analysis::evaluate(a),
        Command::Explain(a) => analysis::explain(cfg, a),
        Command::Fewshot(a) => analysis::fewshot(cfg, a),
        Command::Report(a) => analysis::report(a),
        Command::Synth(a) => data::synth(a),
    }
}
