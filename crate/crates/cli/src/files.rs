//! On-disk formats shared by several commands.

use std::io::BufReader;
use std::path::Path;

use anyhow::Context;
use evidence_core::eval::ThresholdSet;
use evidence_core::neural::{read_checkpoint, write_checkpoint};
use evidence_core::{DatasetSplit, EncoderModel, Error, EvidenceItem, LabelVector, Vocab, NUM_LEVELS};
use serde::{Deserialize, Serialize};

use crate::args::CorpusArgs;
use crate::manifest::Run;

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub pubmed_id: u64,
    pub scores: [f64; NUM_LEVELS],
    pub gold: LabelVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted: Option<LabelVector>,
}

pub fn prediction_rows(items: &[EvidenceItem], scores: &[[f64; NUM_LEVELS]], predicted: Option<&[LabelVector]>) -> Vec<PredictionRow> {
    items
        .iter()
        .zip(scores)
        .enumerate()
        .map(|(i, (it, s))| PredictionRow {
            pubmed_id: it.pubmed_id,
            scores: *s,
            gold: it.labels,
            predicted: predicted.map(|p| p[i]),
        })
        .collect()
}

pub fn to_jsonl<T: Serialize>(rows: &[T]) -> anyhow::Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn from_jsonl<T: for<'de> Deserialize<'de>>(text: &str, what: &Path) -> anyhow::Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::parse(format!("{} line {}", what.display(), n + 1), e.to_string()).into())
        })
        .collect()
}

pub fn read_predictions(run: &mut Run, path: &Path) -> anyhow::Result<Vec<PredictionRow>> {
    let text = run.read_string(path)?;
    let rows: Vec<PredictionRow> = from_jsonl(&text, path)?;
    if rows.is_empty() {
        return Err(Error::Data(format!("{} holds no predictions", path.display())).into());
    }
    Ok(rows)
}

pub fn read_split(run: &mut Run, path: &Path) -> anyhow::Result<DatasetSplit> {
    let data = run.read(path)?;
    Ok(DatasetSplit::read_jsonl(BufReader::new(data.as_slice()))?)
}

pub fn read_vocab(run: &mut Run, path: &Path) -> anyhow::Result<Vocab> {
    let data = run.read(path)?;
    Ok(Vocab::read(BufReader::new(data.as_slice()))?)
}

pub fn read_model(run: &mut Run, path: &Path) -> anyhow::Result<EncoderModel> {
    let data = run.read(path)?;
    read_checkpoint(BufReader::new(data.as_slice())).with_context(|| format!("loading {}", path.display()))
}

pub fn write_model(run: &mut Run, path: &Path, model: &EncoderModel) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    run.write(path, &buf)
}

pub fn read_thresholds(run: &mut Run, path: &Path) -> anyhow::Result<ThresholdSet> {
    let text = run.read_string(path)?;
    Ok(serde_json::from_str(&text).map_err(Error::from)?)
}

pub fn json_bytes<T: Serialize>(value: &T) -> anyhow::Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s.into_bytes())
}

/// Documents from a plain-text corpus (one per line) or the training
/// abstracts of a split.
pub fn corpus_texts(run: &mut Run, args: &CorpusArgs) -> anyhow::Result<Vec<String>> {
    let texts: Vec<String> = match (&args.corpus, &args.data) {
        (Some(path), _) => run
            .read_string(path)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        (None, Some(path)) => read_split(run, path)?.train.into_iter().map(|it| it.abstract_text).collect(),
        (None, None) => unreachable!("clap requires one corpus source"),
    };
    if texts.is_empty() {
        return Err(Error::Data("corpus is empty".into()).into());
    }
    Ok(texts)
}

pub fn csv_rows(header: &str, rows: impl IntoIterator<Item = String>) -> Vec<u8> {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s.into_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;
    use evidence_core::Level;

    #[test]
    fn prediction_row_round_trip() {
        let row = PredictionRow {
            pubmed_id: 7,
            scores: [0.1, 0.9, 0.0, 0.0, 0.5],
            gold: LabelVector::from_levels([Level::B]),
            predicted: None,
        };
        let bytes = to_jsonl(&[row.clone()]).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert!(!text.contains("predicted"));
        let back: Vec<PredictionRow> = from_jsonl(&text, Path::new("x")).unwrap();
        assert_eq!(back, vec![row]);
    }

    #[test]
    fn bad_line_is_parse_error() {
        let err = from_jsonl::<PredictionRow>("{}\n", Path::new("p.jsonl")).unwrap_err();
        assert!(matches!(err.downcast_ref::<Error>(), Some(Error::Parse { .. })));
    }
}
