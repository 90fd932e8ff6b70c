//! Evidence retrieval from the CIViC GraphQL API, record filtering,
//! multi-label compilation and the stratified train/validation/test split.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::labels::{LabelVector, Level, NUM_LEVELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvidenceStatus {
    Accepted,
    UnderReview,
    Other,
}

impl EvidenceStatus {
    /// Maps API enum values. The public schema calls items awaiting review
    /// `SUBMITTED`.
    pub fn from_api(s: &str) -> Self {
        match s.trim().to_ascii_uppercase().replace([' ', '-'], "_").as_str() {
            "ACCEPTED" => EvidenceStatus::Accepted,
            "SUBMITTED" | "UNDER_REVIEW" | "UNDERREVIEW" => EvidenceStatus::UnderReview,
            _ => EvidenceStatus::Other,
        }
    }

    pub fn is_included(self) -> bool {
        matches!(self, EvidenceStatus::Accepted | EvidenceStatus::UnderReview)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEvidenceRecord {
    pub evidence_id: u64,
    #[serde(default, rename = "abstract")]
    pub abstract_text: String,
    #[serde(default)]
    pub pubmed_id: u64,
    #[serde(default)]
    pub molecular_profile: Option<String>,
    #[serde(default)]
    pub disease: Option<String>,
    #[serde(default)]
    pub therapies: Vec<String>,
    #[serde(default)]
    pub significance: Option<String>,
    #[serde(default)]
    pub evidence_level: Option<Level>,
    pub status: EvidenceStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    pub pubmed_id: u64,
    pub labels: LabelVector,
    #[serde(rename = "evidence_ids")]
    pub source_evidence_ids: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Validation, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<EvidenceItem>,
    pub validation: Vec<EvidenceItem>,
    pub test: Vec<EvidenceItem>,
    pub split_seed: u64,
    pub ratios: [f64; 3],
}

pub const DEFAULT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

impl DatasetSplit {
    pub fn part(&self, name: SplitName) -> &[EvidenceItem] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Validation => &self.validation,
            SplitName::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes all three parts as JSONL, train first, each line tagged with
    /// its split.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for name in SplitName::ALL {
            for item in self.part(name) {
                let line = JsonlRow { item: item.clone(), split: name };
                serde_json::to_writer(&mut out, &line)?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    /// Reads JSONL written by [`DatasetSplit::write_jsonl`]. Seed and ratios
    /// are not stored in the rows; ratios are recomputed from part sizes.
    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut split = DatasetSplit {
            train: vec![],
            validation: vec![],
            test: vec![],
            split_seed: 0,
            ratios: DEFAULT_RATIOS,
        };
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: JsonlRow = serde_json::from_str(&line)
                .map_err(|e| Error::parse(format!("line {}", n + 1), e.to_string()))?;
            match row.split {
                SplitName::Train => split.train.push(row.item),
                SplitName::Validation => split.validation.push(row.item),
                SplitName::Test => split.test.push(row.item),
            }
        }
        let total = split.len() as f64;
        if total > 0.0 {
            split.ratios = [
                split.train.len() as f64 / total,
                split.validation.len() as f64 / total,
                split.test.len() as f64 / total,
            ];
        }
        Ok(split)
    }
}

#[derive(Serialize, Deserialize)]
struct JsonlRow {
    #[serde(flatten)]
    item: EvidenceItem,
    split: SplitName,
}

// ---------------------------------------------------------------------------
// Fetching

pub const EVIDENCE_QUERY: &str = "query EvidenceItems($first: Int!, $after: String) {
  evidenceItems(first: $first, after: $after) {
    pageInfo { hasNextPage endCursor }
    nodes {
      id
      status
      evidenceLevel
      significance
      description
      molecularProfile { name }
      disease { name }
      therapies { name }
      source { citationId abstract }
    }
  }
}";

/// Executes one GraphQL request and returns the decoded JSON response body.
pub trait GraphqlTransport {
    fn execute(&self, query: &str, variables: Value) -> Result<Value>;
}

pub struct HttpTransport {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(endpoint: impl Into<String>) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| Error::Network {
                cursor: None,
                message: e.to_string(),
            })?;
        Ok(Self {
            endpoint: endpoint.into(),
            client,
        })
    }
}

impl GraphqlTransport for HttpTransport {
    fn execute(&self, query: &str, variables: Value) -> Result<Value> {
        let cursor = variables
            .get("after")
            .and_then(|v| v.as_str())
            .map(str::to_owned);
        let net = |e: reqwest::Error| Error::Network {
            cursor: cursor.clone(),
            message: e.to_string(),
        };
        let resp = self
            .client
            .post(&self.endpoint)
            .json(&json!({ "query": query, "variables": variables }))
            .send()
            .map_err(net)?;
        let resp = resp.error_for_status().map_err(net)?;
        let text = resp.text().map_err(net)?;
        serde_json::from_str(&text).map_err(|e| Error::parse("<body>", e.to_string()))
    }
}

const MAX_ATTEMPTS: usize = 3;

/// Fetches every evidence record from `endpoint_url` via cursor pagination.
pub fn fetch_evidence(endpoint_url: &str, page_size: usize) -> Result<Vec<RawEvidenceRecord>> {
    let transport = HttpTransport::new(endpoint_url)?;
    fetch_evidence_with(&transport, page_size)
}

/// Pages through `evidenceItems` until `hasNextPage` is false. Records come
/// back sorted by id; a repeated id keeps its first occurrence.
pub fn fetch_evidence_with<T: GraphqlTransport + ?Sized>(
    transport: &T,
    page_size: usize,
) -> Result<Vec<RawEvidenceRecord>> {
    if page_size == 0 {
        return Err(Error::invalid("page_size must be at least 1"));
    }
    let mut records = Vec::new();
    let mut cursor: Option<String> = None;
    loop {
        let vars = json!({ "first": page_size, "after": cursor });
        let body = execute_with_retry(transport, &vars, &cursor)?;
        let page = parse_page(&body)?;
        records.extend(page.records);
        if !page.has_next {
            break;
        }
        match page.end_cursor {
            Some(c) if Some(&c) != cursor.as_ref() => cursor = Some(c),
            _ => {
                return Err(Error::parse(
                    "evidenceItems.pageInfo.endCursor",
                    "hasNextPage is true but the cursor did not advance",
                ))
            }
        }
    }
    records.sort_by_key(|r| r.evidence_id);
    records.dedup_by_key(|r| r.evidence_id);
    Ok(records)
}

fn execute_with_retry<T: GraphqlTransport + ?Sized>(
    transport: &T,
    vars: &Value,
    cursor: &Option<String>,
) -> Result<Value> {
    let mut last = None;
    for attempt in 0..MAX_ATTEMPTS {
        match transport.execute(EVIDENCE_QUERY, vars.clone()) {
            Ok(v) => return Ok(v),
            Err(e) if e.is_retryable() => {
                log::warn!("page fetch failed (attempt {}): {e}", attempt + 1);
                last = Some(e);
                if attempt + 1 < MAX_ATTEMPTS {
                    std::thread::sleep(Duration::from_millis(200 << attempt));
                }
            }
            Err(e) => return Err(e),
        }
    }
    let message = last.map(|e| e.to_string()).unwrap_or_default();
    Err(Error::Network {
        cursor: cursor.clone(),
        message,
    })
}

#[derive(Debug)]
struct Page {
    records: Vec<RawEvidenceRecord>,
    has_next: bool,
    end_cursor: Option<String>,
}

fn parse_page(body: &Value) -> Result<Page> {
    if let Some(errors) = body.get("errors").filter(|e| !e.is_null()) {
        return Err(Error::parse("errors", errors.to_string()));
    }
    let items = body
        .get("data")
        .and_then(|d| d.get("evidenceItems"))
        .ok_or_else(|| Error::parse("data.evidenceItems", "missing"))?;
    let page_info = items
        .get("pageInfo")
        .ok_or_else(|| Error::parse("evidenceItems.pageInfo", "missing"))?;
    let has_next = page_info
        .get("hasNextPage")
        .and_then(Value::as_bool)
        .ok_or_else(|| Error::parse("evidenceItems.pageInfo.hasNextPage", "expected boolean"))?;
    let end_cursor = page_info
        .get("endCursor")
        .and_then(Value::as_str)
        .map(str::to_owned);
    let nodes = items
        .get("nodes")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::parse("evidenceItems.nodes", "expected array"))?;
    let records = nodes
        .iter()
        .enumerate()
        .map(|(i, n)| parse_node(n, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Page {
        records,
        has_next,
        end_cursor,
    })
}

fn opt_str(node: &Value, path: &[&str]) -> Option<String> {
    let mut cur = node;
    for key in path {
        cur = cur.get(*key)?;
    }
    cur.as_str().map(str::to_owned)
}

fn parse_int(v: &Value) -> Option<u64> {
    match v {
        Value::Number(n) => n.as_u64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn parse_node(node: &Value, index: usize) -> Result<RawEvidenceRecord> {
    let field = |name: &str| format!("nodes[{index}].{name}");
    let evidence_id = node
        .get("id")
        .and_then(parse_int)
        .ok_or_else(|| Error::parse(field("id"), "expected integer"))?;
    let status = node
        .get("status")
        .and_then(Value::as_str)
        .map(EvidenceStatus::from_api)
        .ok_or_else(|| Error::parse(field("status"), "expected string"))?;
    let evidence_level = match node.get("evidenceLevel") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(
            s.parse::<Level>()
                .map_err(|_| Error::parse(field("evidenceLevel"), format!("unknown level `{s}`")))?,
        ),
        Some(_) => return Err(Error::parse(field("evidenceLevel"), "expected string")),
    };
    let therapies = match node.get("therapies") {
        None | Some(Value::Null) => vec![],
        Some(Value::Array(ts)) => ts
            .iter()
            .enumerate()
            .map(|(j, t)| {
                opt_str(t, &["name"])
                    .ok_or_else(|| Error::parse(field(&format!("therapies[{j}].name")), "expected string"))
            })
            .collect::<Result<Vec<_>>>()?,
        Some(_) => return Err(Error::parse(field("therapies"), "expected array")),
    };
    let pubmed_id = match node.get("source").and_then(|s| s.get("citationId")) {
        None | Some(Value::Null) => 0,
        Some(v) => parse_int(v).ok_or_else(|| Error::parse(field("source.citationId"), "expected integer"))?,
    };
    Ok(RawEvidenceRecord {
        evidence_id,
        abstract_text: opt_str(node, &["source", "abstract"]).unwrap_or_default(),
        pubmed_id,
        molecular_profile: opt_str(node, &["molecularProfile", "name"]),
        disease: opt_str(node, &["disease", "name"]),
        therapies,
        significance: opt_str(node, &["significance"]),
        evidence_level,
        status,
    })
}

// ---------------------------------------------------------------------------
// Filtering and compilation

fn populated(s: &Option<String>) -> bool {
    s.as_deref().is_some_and(|s| !s.trim().is_empty())
}

type DedupKey = (String, String, String, String, Vec<String>);

fn dedup_key(r: &RawEvidenceRecord) -> DedupKey {
    let t = |s: &Option<String>| s.as_deref().unwrap_or("").trim().to_owned();
    let mut therapies: Vec<String> = r.therapies.iter().map(|s| s.trim().to_owned()).collect();
    therapies.sort();
    (
        r.abstract_text.trim().to_owned(),
        t(&r.disease),
        t(&r.significance),
        t(&r.molecular_profile),
        therapies,
    )
}

/// Keeps accepted and under-review records, then drops any record that
/// lacks an abstract or level, lacks disease/significance/profile/therapies,
/// or whose (abstract, disease, significance, profile, therapies) tuple
/// occurs more than once among the included records. All copies of a
/// duplicated tuple are removed.
pub fn filter_records(records: &[RawEvidenceRecord]) -> Vec<RawEvidenceRecord> {
    let included: Vec<&RawEvidenceRecord> = records.iter().filter(|r| r.status.is_included()).collect();
    let mut counts: HashMap<DedupKey, usize> = HashMap::new();
    for r in &included {
        *counts.entry(dedup_key(r)).or_default() += 1;
    }
    included
        .into_iter()
        .filter(|r| {
            !r.abstract_text.trim().is_empty()
                && r.evidence_level.is_some()
                && populated(&r.disease)
                && populated(&r.significance)
                && populated(&r.molecular_profile)
                && !r.therapies.is_empty()
                && r.therapies.iter().all(|t| !t.trim().is_empty())
                && counts[&dedup_key(r)] == 1
        })
        .cloned()
        .collect()
}

/// Groups records by abstract text. Output order follows the smallest
/// evidence id of each group.
pub fn compile_multilabel(records: &[RawEvidenceRecord]) -> Vec<EvidenceItem> {
    let mut sorted: Vec<&RawEvidenceRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.evidence_id);
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut items: Vec<EvidenceItem> = Vec::new();
    for r in sorted {
        let key = r.abstract_text.trim();
        let slot = *index.entry(key).or_insert_with(|| {
            items.push(EvidenceItem {
                abstract_text: key.to_owned(),
                pubmed_id: r.pubmed_id,
                labels: LabelVector::empty(),
                source_evidence_ids: vec![],
            });
            items.len() - 1
        });
        let item = &mut items[slot];
        if let Some(level) = r.evidence_level {
            item.labels.set(level, true);
        }
        item.source_evidence_ids.push(r.evidence_id);
    }
    items
}

// ---------------------------------------------------------------------------
// Stratified split

/// Splits largest-remainder style so the integer counts sum to `total`.
fn apportion(total: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let raw: Vec<f64> = ratios.iter().map(|r| r * total as f64).collect();
    let mut out = [0usize; 3];
    for i in 0..3 {
        out[i] = raw[i].floor() as usize;
    }
    let mut rest: Vec<usize> = (0..3).collect();
    rest.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut left = total - out.iter().sum::<usize>();
    for i in rest {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

/// Seeded iterative proportional assignment. Items are shuffled, then
/// processed rarest-label first; each goes to the split (with room left)
/// with the largest summed relative deficit over the item's labels.
pub fn stratified_split(items: &[EvidenceItem], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios {ratios:?} must be fractions summing to 1")));
    }
    let mut seen = HashSet::new();
    let mut unique: Vec<&EvidenceItem> = Vec::with_capacity(items.len());
    for item in items {
        if seen.insert(item.abstract_text.as_str()) {
            unique.push(item);
        }
    }
    if unique.len() < items.len() {
        log::warn!("{} items with repeated abstracts dropped before splitting", items.len() - unique.len());
    }
    let capacity = apportion(unique.len(), &ratios);
    for (s, (&cap, &r)) in capacity.iter().zip(ratios.iter()).enumerate() {
        if r > 0.0 && cap == 0 {
            return Err(Error::Data(format!(
                "{} items are too few to populate split {:?}",
                unique.len(),
                SplitName::ALL[s]
            )));
        }
    }

    let mut class_totals = [0usize; NUM_LEVELS];
    for item in &unique {
        for l in item.labels.levels() {
            class_totals[l.index()] += 1;
        }
    }
    let mut desired = [[0.0f64; NUM_LEVELS]; 3];
    for s in 0..3 {
        for c in 0..NUM_LEVELS {
            desired[s][c] = ratios[s] * class_totals[c] as f64;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..unique.len()).collect();
    order.shuffle(&mut rng);
    let rarity = |i: usize| {
        unique[i]
            .labels
            .levels()
            .map(|l| class_totals[l.index()])
            .min()
            .unwrap_or(usize::MAX)
    };
    // stable: ties keep the shuffled order
    order.sort_by_key(|&i| rarity(i));

    let mut current = [[0usize; NUM_LEVELS]; 3];
    let mut filled = [0usize; 3];
    let mut assignment: BTreeMap<usize, usize> = BTreeMap::new();
    for i in order {
        let labels = unique[i].labels;
        let mut best: Option<(usize, f64, f64)> = None;
        for s in 0..3 {
            if filled[s] >= capacity[s] {
                continue;
            }
            let deficit: f64 = labels
                .levels()
                .map(|l| {
                    let c = l.index();
                    (desired[s][c] - current[s][c] as f64) / desired[s][c].max(1e-9)
                })
                .sum();
            let room = capacity[s] as f64 - filled[s] as f64;
            let better = match best {
                None => true,
                Some((_, d, r)) => deficit > d + 1e-12 || ((deficit - d).abs() <= 1e-12 && room > r),
            };
            if better {
                best = Some((s, deficit, room));
            }
        }
        let (s, _, _) = best.expect("capacities sum to item count");
        filled[s] += 1;
        for l in labels.levels() {
            current[s][l.index()] += 1;
        }
        assignment.insert(i, s);
    }

    let mut parts: [Vec<EvidenceItem>; 3] = [vec![], vec![], vec![]];
    // keep the input order inside each part
    for (i, s) in assignment {
        parts[s].push(unique[i].clone());
    }
    let [train, validation, test] = parts;
    Ok(DatasetSplit {
        train,
        validation,
        test,
        split_seed: seed,
        ratios,
    })
}

/// Per-class occurrence fraction (occurrences / item count) of a set of items.
pub fn class_fractions(items: &[EvidenceItem]) -> [f64; NUM_LEVELS] {
    let mut out = [0.0; NUM_LEVELS];
    if items.is_empty() {
        return out;
    }
    for item in items {
        for l in item.labels.levels() {
            out[l.index()] += 1.0;
        }
    }
    out.map(|c| c / items.len() as f64)
}

/// Per-class occurrence counts.
pub fn class_counts(items: &[EvidenceItem]) -> [usize; NUM_LEVELS] {
    let mut out = [0; NUM_LEVELS];
    for item in items {
        for l in item.labels.levels() {
            out[l.index()] += 1;
        }
    }
    out
}

pub fn read_records_json<R: std::io::Read>(input: R) -> Result<Vec<RawEvidenceRecord>> {
    Ok(serde_json::from_reader(input)?)
}
