//! WordPiece-style subword vocabulary: trained by iterative pair merging on
//! lowercased words, applied by greedy longest-match with `##` continuation
//! pieces.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";
pub const MASK: &str = "[MASK]";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const SPECIAL_TOKENS: [&str; 5] = [BOS, EOS, MASK, PAD, UNK];
pub const CONTINUATION: &str = "##";

/// Words longer than this many characters encode as a single unk.
const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub bos: u32,
    pub eos: u32,
    pub mask: u32,
    pub pad: u32,
    pub unk: u32,
}

impl SpecialIds {
    pub fn contains(&self, id: u32) -> bool {
        id == self.bos || id == self.eos || id == self.mask || id == self.pad || id == self.unk
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    special: SpecialIds,
}

/// Token ids of one sequence: `[bos, content.., eos, pad..]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Number of leading non-pad positions.
    pub attention_length: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Appends pads up to `len`. Never truncates.
    pub fn pad_to(&mut self, len: usize, pad_id: u32) {
        if self.ids.len() < len {
            self.ids.resize(len, pad_id);
        }
    }

    pub fn padded(mut self, len: usize, pad_id: u32) -> Self {
        self.pad_to(len, pad_id);
        self
    }

    /// The non-pad prefix.
    pub fn active(&self) -> &[u32] {
        &self.ids[..self.attention_length]
    }
}

/// Lowercases and splits on whitespace; every punctuation or symbol
/// character becomes its own word.
pub fn pretokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() && !ch.is_control() {
                out.push(ch.to_lowercase().collect());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Whitespace/case normalization under which `decode(encode(t))` is the
/// identity (for untruncated text without unknown characters).
pub fn normalize(text: &str) -> String {
    pretokenize(text).join(" ")
}

impl Vocab {
    /// Builds a vocabulary from an explicit token list whose first five
    /// entries are the special tokens in `[BOS, EOS, MASK, PAD, UNK]` order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len() {
            return Err(Error::invalid("vocabulary must start with the five special tokens"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::invalid(format!("invalid token {t:?} at line {}", i + 1)));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::invalid(format!("duplicate token {t:?}")));
            }
        }
        let special = SpecialIds {
            bos: 0,
            eos: 1,
            mask: 2,
            pad: 3,
            unk: 4,
        };
        Ok(Self { tokens, index, special })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn special(&self) -> SpecialIds {
        self.special
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Ids that are not special tokens (targets for random replacement).
    pub fn regular_ids(&self) -> std::ops::Range<u32> {
        SPECIAL_TOKENS.len() as u32..self.tokens.len() as u32
    }

    /// One token per line, line number = id.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        for t in &self.tokens {
            writeln!(out, "{t}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        let tokens = input
            .lines()
            .map(|l| l.map(|s| s.trim_end_matches('\r').to_owned()))
            .collect::<std::io::Result<Vec<_>>>()?;
        let tokens: Vec<String> = match tokens.iter().rposition(|t| !t.is_empty()) {
            Some(last) => tokens[..=last].to_vec(),
            None => vec![],
        };
        Self::from_tokens(tokens)
    }

    /// Subword pieces of a single pretokenized word.
    pub fn word_pieces(&self, word: &str) -> Vec<u32> {
        let chars: Vec<(usize, char)> = word.char_indices().collect();
        if chars.is_empty() {
            return vec![];
        }
        if chars.len() > MAX_WORD_CHARS {
            return vec![self.special.unk];
        }
        let byte_at = |i: usize| if i == chars.len() { word.len() } else { chars[i].0 };
        let mut pieces = Vec::new();
        let mut start = 0;
        let mut buf = String::new();
        while start < chars.len() {
            let mut found = None;
            let mut end = chars.len();
            while end > start {
                buf.clear();
                if start > 0 {
                    buf.push_str(CONTINUATION);
                }
                buf.push_str(&word[byte_at(start)..byte_at(end)]);
                if let Some(&id) = self.index.get(buf.as_str()) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => return vec![self.special.unk],
            }
        }
        pieces
    }

    /// Content token ids without special tokens.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        pretokenize(text).iter().flat_map(|w| self.word_pieces(w)).collect()
    }

    /// `[bos] content [eos]`, content truncated so the total length is at
    /// most `max_len`. Not padded; see [`TokenSequence::pad_to`].
    pub fn encode(&self, text: &str, max_len: usize) -> Result<TokenSequence> {
        if max_len < 2 {
            return Err(Error::invalid("max_len must be at least 2"));
        }
        let mut content = self.tokenize(text);
        content.truncate(max_len - 2);
        let mut ids = Vec::with_capacity(content.len() + 2);
        ids.push(self.special.bos);
        ids.extend(content);
        ids.push(self.special.eos);
        let attention_length = ids.len();
        Ok(TokenSequence { ids, attention_length })
    }

    /// Encodes and pads to exactly `max_len`.
    pub fn encode_padded(&self, text: &str, max_len: usize) -> Result<TokenSequence> {
        Ok(self.encode(text, max_len)?.padded(max_len, self.special.pad))
    }

    /// Joins pieces back into space-separated words, skipping special tokens.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or(Error::TokenOutOfRange {
                id,
                size: self.tokens.len(),
            })?;
            if self.special.contains(id) {
                continue;
            }
            match tok.strip_prefix(CONTINUATION) {
                Some(rest) if !rest.is_empty() => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        Ok(out)
    }

    pub fn decode_sequence(&self, seq: &TokenSequence) -> Result<String> {
        self.decode(&seq.ids)
    }

    /// Number of texts whose wrapped encoding exceeds `limit` tokens.
    pub fn count_long(&self, texts: &[&str], limit: usize) -> usize {
        texts.iter().filter(|t| self.tokenize(t).len() + 2 > limit).count()
    }
}

fn initial_symbols(word: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, c)| if i == 0 { c.to_string() } else { format!("{CONTINUATION}{c}") })
        .collect()
}

fn merged(a: &str, b: &str) -> String {
    format!("{a}{}", b.strip_prefix(CONTINUATION).unwrap_or(b))
}

/// Trains a vocabulary of at most `target_size` tokens. Starts from the
/// special tokens plus every character (word-initial and continuation
/// forms), then repeatedly merges the most frequent adjacent symbol pair,
/// ties broken by the lexicographically smallest pair.
pub fn train_vocab<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::invalid("tokenizer corpus is empty"));
    }
    let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
    for text in corpus {
        for w in pretokenize(text.as_ref()) {
            if w.chars().count() <= MAX_WORD_CHARS {
                *word_counts.entry(w).or_default() += 1;
            }
        }
    }

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    let mut base: Vec<String> = word_counts
        .keys()
        .flat_map(|w| initial_symbols(w))
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    base.sort();
    if target_size <= SPECIAL_TOKENS.len() + base.len() {
        return Err(Error::invalid(format!(
            "target size {target_size} must exceed {} special tokens + {} base symbols",
            SPECIAL_TOKENS.len(),
            base.len()
        )));
    }
    tokens.extend(base);
    let mut index: HashMap<String, u32> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();

    let mut words: Vec<(Vec<u32>, u64)> = word_counts
        .iter()
        .map(|(w, &c)| (initial_symbols(w).iter().map(|s| index[s]).collect(), c))
        .collect();

    type Pair = (u32, u32);
    let mut pair_counts: HashMap<Pair, u64> = HashMap::new();
    let mut where_: HashMap<Pair, HashSet<usize>> = HashMap::new();
    for (wi, (syms, c)) in words.iter().enumerate() {
        for p in syms.windows(2) {
            let pair = (p[0], p[1]);
            *pair_counts.entry(pair).or_default() += c;
            where_.entry(pair).or_default().insert(wi);
        }
    }
    let key = |tokens: &[String], pair: Pair, count: u64| {
        (count, Reverse((tokens[pair.0 as usize].clone(), tokens[pair.1 as usize].clone())), pair)
    };
    let mut heap: BinaryHeap<(u64, Reverse<(String, String)>, Pair)> =
        pair_counts.iter().map(|(&p, &c)| key(&tokens, p, c)).collect();

    while tokens.len() < target_size {
        let Some((count, _, pair)) = heap.pop() else { break };
        if pair_counts.get(&pair).copied().unwrap_or(0) != count || count == 0 {
            continue; // stale heap entry
        }
        let new_tok = merged(&tokens[pair.0 as usize], &tokens[pair.1 as usize]);
        let new_id = match index.get(&new_tok) {
            Some(&id) => id,
            None => {
                let id = tokens.len() as u32;
                index.insert(new_tok.clone(), id);
                tokens.push(new_tok);
                id
            }
        };
        let mut affected: Vec<usize> = where_.remove(&pair).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        let mut touched: HashSet<Pair> = HashSet::new();
        for wi in affected {
            let (syms, c) = &mut words[wi];
            for p in syms.windows(2) {
                let pr = (p[0], p[1]);
                if let Some(v) = pair_counts.get_mut(&pr) {
                    *v -= *c;
                }
                if let Some(set) = where_.get_mut(&pr) {
                    set.remove(&wi);
                }
                touched.insert(pr);
            }
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && (syms[i], syms[i + 1]) == pair {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(syms[i]);
                    i += 1;
                }
            }
            *syms = out;
            for p in syms.windows(2) {
                let pr = (p[0], p[1]);
                *pair_counts.entry(pr).or_default() += *c;
                where_.entry(pr).or_default().insert(wi);
                touched.insert(pr);
            }
        }
        pair_counts.remove(&pair);
        let mut touched: Vec<Pair> = touched.into_iter().collect();
        touched.sort_unstable();
        for pr in touched {
            match pair_counts.get(&pr).copied() {
                Some(0) => {
                    pair_counts.remove(&pr);
                    where_.remove(&pr);
                }
                Some(c) => heap.push(key(&tokens, pr, c)),
                None => {}
            }
        }
    }
    Vocab::from_tokens(tokens)
}
