//! N-shot prompting of a chat-completion model and evaluation of its
//! label predictions.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::time::Duration;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::eval::{self, MetricsReport};
use crate::ingest::EvidenceItem;
use crate::labels::{LabelVector, Level};
use crate::tokenizer::pretokenize;

/// Bumped whenever the prompt wording changes.
pub const PROMPT_TEMPLATE_VERSION: u32 = 1;
pub const DEFAULT_SHOTS: [usize; 7] = [0, 1, 2, 3, 4, 5, 10];
pub const DEFAULT_REPETITIONS: usize = 3;
pub const ITEMS_PER_LEVEL: usize = 4;
/// Line that precedes the abstract to classify.
pub const TARGET_MARKER: &str = "Abstract to classify:";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelDefinition {
    pub level: Level,
    pub name: &'static str,
    pub definition: &'static str,
    pub description: &'static str,
}

pub const LEVEL_DEFINITIONS: [LevelDefinition; 5] = [
    LevelDefinition {
        level: Level::A,
        name: "Validated association",
        definition: "Proven/consensus association in human medicine",
        description: "Validated associations are often in routine clinical practice already or are the subject of major clinical trial efforts.",
    },
    LevelDefinition {
        level: Level::B,
        name: "Clinical evidence",
        definition: "Clinical trial or other primary patient data supports association",
        description: "The evidence should be supported by observations in multiple patients. Additional support from functional data is desirable but not required.",
    },
    LevelDefinition {
        level: Level::C,
        name: "Case study",
        definition: "Individual case reports from clinical journals",
        description: "The study may have involved a large number of patients, but the statement was supported by only a single patient. In some cases, observations from just a handful of patients (e.g. 2-3) or a single family may also be considered a case study/report.",
    },
    LevelDefinition {
        level: Level::D,
        name: "Preclinical evidence",
        definition: "In vivo or in vitro models support association",
        description: "The study may have involved some patient data, but support for this statement was limited to in vivo or in vitro models (e.g. mouse studies, cell lines, molecular assays, etc.).",
    },
    LevelDefinition {
        level: Level::E,
        name: "Inferential association",
        definition: "Indirect evidence",
        description: "The assertion is at least one step removed from a direct association between a molecular profile (variant) and clinical relevance.",
    },
];

const PREAMBLE: &str = "You label abstracts of biomedical publications with CIViC levels of clinical evidence. \
An abstract can carry more than one level.";
const INSTRUCTION: &str = "Answer with the applicable levels as comma-separated letters only, for example \"B\" or \"B,D\".";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub abstract_text: String,
    pub labels: LabelVector,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PromptSpec {
    pub examples: Vec<Example>,
    pub target: String,
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Approximate prompt size: words plus punctuation marks.
pub fn prompt_tokens(text: &str) -> usize {
    pretokenize(text).len()
}

/// Preamble, level definitions, example blocks, target and instruction.
/// Fails when the prompt exceeds `budget` tokens.
pub fn build_prompt(spec: &PromptSpec, budget: Option<usize>) -> Result<String> {
    let mut s = format!("{PREAMBLE}\n\nLevels of clinical evidence:\n");
    for d in &LEVEL_DEFINITIONS {
        let _ = writeln!(s, "{} - {}: {}. {}", d.level, d.name, d.definition, d.description);
    }
    if !spec.examples.is_empty() {
        s.push_str("\nExamples:\n");
        for ex in &spec.examples {
            let _ = write!(s, "\nAbstract: {}\nLevels: {}\n", one_line(&ex.abstract_text), ex.labels);
        }
    }
    let _ = write!(s, "\n{TARGET_MARKER}\n{}\n\n{INSTRUCTION}\n", one_line(&spec.target));
    if let Some(budget) = budget {
        let tokens = prompt_tokens(&s);
        if tokens > budget {
            return Err(Error::PromptTooLong { tokens, budget });
        }
    }
    Ok(s)
}

/// `n` distinct training items per level, levels in order, no item used
/// twice within one call.
pub fn sample_examples(train: &[EvidenceItem], n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Example>> {
    let mut used = HashSet::new();
    let mut out = Vec::with_capacity(5 * n);
    if n == 0 {
        return Ok(out);
    }
    for level in Level::ALL {
        let pool: Vec<usize> = (0..train.len())
            .filter(|i| train[*i].labels.get(level) && !used.contains(i))
            .collect();
        if pool.len() < n {
            return Err(Error::InsufficientExamples(level.letter()));
        }
        for &i in pool.choose_multiple(rng, n) {
            used.insert(i);
            out.push(Example {
                abstract_text: train[i].abstract_text.clone(),
                labels: train[i].labels,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub labels: LabelVector,
    pub parseable: bool,
}

/// Standalone letters A-E. Lower-case letters count only when the reply
/// consists of nothing but single letters, so articles like "a" in prose
/// are not read as labels.
pub fn parse_response(text: &str) -> ParsedResponse {
    let words: Vec<&str> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect();
    let terse = words.iter().all(|w| w.chars().count() == 1);
    let mut labels = LabelVector::empty();
    for w in &words {
        let mut chars = w.chars();
        let (Some(c), None) = (chars.next(), chars.next()) else {
            continue;
        };
        if !c.is_ascii_uppercase() && !terse {
            continue;
        }
        if let Some(level) = Level::from_letter(c.to_ascii_uppercase()) {
            labels.set(level, true);
        }
    }
    ParsedResponse {
        parseable: !labels.is_empty(),
        labels,
    }
}

pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

/// OpenAI-style chat-completion endpoint.
pub struct HttpLlmClient {
    endpoint: String,
    model: String,
    api_key: String,
    client: reqwest::blocking::Client,
}

impl HttpLlmClient {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key: impl Into<String>) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| Error::Llm(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: api_key.into(),
            client,
        })
    }

    /// Reads `LLM_ENDPOINT`, `LLM_MODEL` and `LLM_API_KEY`.
    pub fn from_env() -> Result<Self> {
        let var = |k: &str| std::env::var(k).map_err(|_| Error::Llm(format!("{k} is not set")));
        Self::new(var("LLM_ENDPOINT")?, var("LLM_MODEL")?, var("LLM_API_KEY")?)
    }
}

pub fn chat_request(model: &str, prompt: &str) -> Value {
    json!({
        "model": model,
        "temperature": 0,
        "messages": [{ "role": "user", "content": prompt }],
    })
}

pub fn chat_content(body: &Value) -> Result<String> {
    body.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_owned)
        .ok_or_else(|| Error::Llm("response has no choices[0].message.content".into()))
}

impl LlmClient for HttpLlmClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        let err = |e: reqwest::Error| Error::Llm(e.to_string());
        let resp = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&chat_request(&self.model, prompt))
            .send()
            .map_err(err)?
            .error_for_status()
            .map_err(err)?;
        let body: Value = resp.json().map_err(err)?;
        chat_content(&body)
    }
}

/// Answers with the gold labels of the target abstract.
pub struct OracleClient {
    gold: HashMap<String, LabelVector>,
}

impl OracleClient {
    pub fn new(items: &[EvidenceItem]) -> Self {
        Self {
            gold: items
                .iter()
                .map(|it| (one_line(&it.abstract_text), it.labels))
                .collect(),
        }
    }
}

impl LlmClient for OracleClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        let target = prompt
            .split_once(TARGET_MARKER)
            .and_then(|(_, rest)| rest.trim_start_matches('\n').lines().next())
            .ok_or_else(|| Error::Llm("prompt has no target abstract".into()))?;
        self.gold
            .get(target)
            .map(|l| l.to_string())
            .ok_or_else(|| Error::Llm("unknown target abstract".into()))
    }
}

/// Always returns the same text.
pub struct ConstantClient(pub String);

impl LlmClient for ConstantClient {
    fn complete(&self, _prompt: &str) -> Result<String> {
        Ok(self.0.clone())
    }
}

/// Always fails.
pub struct FailingClient;

impl LlmClient for FailingClient {
    fn complete(&self, _prompt: &str) -> Result<String> {
        Err(Error::Llm("unavailable".into()))
    }
}

/// `per_level` distinct items for each level, levels in order.
pub fn reduced_test_set(test: &[EvidenceItem], per_level: usize, seed: u64) -> Result<Vec<EvidenceItem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = HashSet::new();
    let mut out = Vec::with_capacity(5 * per_level);
    for level in Level::ALL {
        let mut pool: Vec<usize> = (0..test.len())
            .filter(|i| test[*i].labels.get(level) && !used.contains(i))
            .collect();
        if pool.len() < per_level {
            return Err(Error::InsufficientExamples(level.letter()));
        }
        pool.shuffle(&mut rng);
        for &i in &pool[..per_level] {
            used.insert(i);
            out.push(test[i].clone());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Repetition {
    pub index: usize,
    pub predictions: Vec<LabelVector>,
    pub responses: Vec<String>,
    pub unparseable: usize,
    /// Set when any call failed; the repetition is then left out of the mean.
    pub failed: bool,
    pub report: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotResult {
    pub shots: usize,
    pub repetitions: Vec<Repetition>,
    /// Mean over successful repetitions; `None` when all failed.
    pub mean: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotConfig {
    pub shots: Vec<usize>,
    pub repetitions: usize,
    pub seed: u64,
    pub token_budget: Option<usize>,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self {
            shots: DEFAULT_SHOTS.to_vec(),
            repetitions: DEFAULT_REPETITIONS,
            seed: 0,
            token_budget: None,
        }
    }
}

fn run_repetition(
    client: &dyn LlmClient,
    train: &[EvidenceItem],
    test: &[EvidenceItem],
    shots: usize,
    index: usize,
    config: &FewShotConfig,
) -> Result<Repetition> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream((shots as u64) << 16 | index as u64);
    let mut rep = Repetition {
        index,
        predictions: Vec::with_capacity(test.len()),
        responses: Vec::with_capacity(test.len()),
        unparseable: 0,
        failed: false,
        report: None,
    };
    for item in test {
        let spec = PromptSpec {
            examples: sample_examples(train, shots, &mut rng)?,
            target: item.abstract_text.clone(),
        };
        let prompt = build_prompt(&spec, config.token_budget)?;
        match client.complete(&prompt) {
            Ok(text) => {
                let parsed = parse_response(&text);
                if !parsed.parseable {
                    rep.unparseable += 1;
                }
                rep.predictions.push(parsed.labels);
                rep.responses.push(text);
            }
            Err(e) => {
                log::warn!("{shots}-shot repetition {index}: call failed: {e}");
                rep.failed = true;
                return Ok(rep);
            }
        }
    }
    let gold: Vec<LabelVector> = test.iter().map(|it| it.labels).collect();
    rep.report = Some(eval::compute_metrics(&rep.predictions, &gold)?);
    Ok(rep)
}

/// Every shot count, `repetitions` times, with fresh examples per call.
pub fn evaluate_fewshot(
    client: &dyn LlmClient,
    train: &[EvidenceItem],
    reduced_test: &[EvidenceItem],
    config: &FewShotConfig,
) -> Result<Vec<ShotResult>> {
    if reduced_test.is_empty() {
        return Err(Error::invalid("reduced test set is empty"));
    }
    let mut out = Vec::with_capacity(config.shots.len());
    for &shots in &config.shots {
        let repetitions = (0..config.repetitions)
            .map(|i| run_repetition(client, train, reduced_test, shots, i, config))
            .collect::<Result<Vec<_>>>()?;
        let ok: Vec<MetricsReport> = repetitions.iter().filter_map(|r| r.report.clone()).collect();
        if ok.len() < repetitions.len() {
            log::warn!("{shots}-shot: {} of {} repetitions failed", repetitions.len() - ok.len(), repetitions.len());
        }
        let mean = if ok.is_empty() {
            None
        } else {
            Some(eval::aggregate_seeds(&ok)?.mean)
        };
        out.push(ShotResult {
            shots,
            repetitions,
            mean,
        });
    }
    Ok(out)
}
