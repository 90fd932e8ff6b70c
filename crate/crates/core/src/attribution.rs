//! Integrated-gradients attribution of class logits to input tokens.

use std::collections::HashMap;
use std::fmt::Write as _;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::EvidenceItem;
use crate::labels::{Level, NUM_LEVELS};
use crate::neural::{gelu, gelu_grad, EncoderModel};
use crate::tokenizer::{TokenSequence, Vocab};

/// A scalar function of a matrix input with its gradient.
pub trait Differentiable: Sync {
    fn value(&self, x: &Array2<f64>) -> f64;
    fn value_and_grad(&self, x: &Array2<f64>) -> (f64, Array2<f64>);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum QuadratureRule {
    /// Nodes at `(k - 0.5) / m`.
    #[default]
    Midpoint,
    /// Nodes at `(k - 1) / m`.
    Left,
}

impl QuadratureRule {
    pub fn node(self, k: usize, m: usize) -> f64 {
        match self {
            QuadratureRule::Midpoint => (k as f64 + 0.5) / m as f64,
            QuadratureRule::Left => k as f64 / m as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IgResult {
    /// Same shape as the input.
    pub attributions: Array2<f64>,
    pub value: f64,
    pub baseline_value: f64,
}

impl IgResult {
    pub fn total(&self) -> f64 {
        self.attributions.sum()
    }

    /// `|sum(ig) - (F(x) - F(x'))|`.
    pub fn residual(&self) -> f64 {
        (self.total() - (self.value - self.baseline_value)).abs()
    }

    pub fn relative_residual(&self) -> f64 {
        self.residual() / (self.value - self.baseline_value).abs()
    }
}

/// `(x - x') * mean_k dF(x' + a_k (x - x'))` with `m` quadrature nodes.
pub fn integrated_gradients<F: Differentiable + ?Sized>(
    f: &F,
    x: &Array2<f64>,
    baseline: &Array2<f64>,
    steps: usize,
    rule: QuadratureRule,
) -> Result<IgResult> {
    if steps == 0 {
        return Err(Error::invalid("integration steps must be at least 1"));
    }
    if x.dim() != baseline.dim() {
        return Err(Error::invalid("input and baseline shapes differ"));
    }
    let diff = x - baseline;
    let grads: Vec<Array2<f64>> = (0..steps)
        .into_par_iter()
        .map(|k| {
            let point = baseline + &(&diff * rule.node(k, steps));
            f.value_and_grad(&point).1
        })
        .collect();
    let mut sum = Array2::zeros(x.dim());
    for g in &grads {
        sum += g;
    }
    if sum.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient("integrated gradients".into()));
    }
    Ok(IgResult {
        attributions: diff * (sum / steps as f64),
        value: f.value(x),
        baseline_value: f.value(baseline),
    })
}

/// `F(x) = sum(w * x) + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFunction {
    pub weights: Array2<f64>,
    pub bias: f64,
}

impl Differentiable for LinearFunction {
    fn value(&self, x: &Array2<f64>) -> f64 {
        (&self.weights * x).sum() + self.bias
    }

    fn value_and_grad(&self, x: &Array2<f64>) -> (f64, Array2<f64>) {
        (self.value(x), self.weights.clone())
    }
}

/// `F(x) = w2 . gelu(x W1 + b1) + b2` for a `1 x d` input.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerNet {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
}

impl TwoLayerNet {
    pub fn random(inputs: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |_| rng.random_range(-1.0..1.0);
        Self {
            w1: Array2::from_shape_fn((inputs, hidden), |i| draw(i.0)),
            b1: Array1::from_shape_fn(hidden, &mut draw),
            w2: Array1::from_shape_fn(hidden, &mut draw),
            b2: 0.3,
        }
    }

    /// Same function with hidden units reordered: unit `j` of the result is
    /// unit `perm[j]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            w1: self.w1.select(Axis(1), perm),
            b1: self.b1.select(Axis(0), perm),
            w2: self.w2.select(Axis(0), perm),
            b2: self.b2,
        }
    }

    fn pre(&self, x: &Array2<f64>) -> Array1<f64> {
        x.row(0).dot(&self.w1) + &self.b1
    }
}

impl Differentiable for TwoLayerNet {
    fn value(&self, x: &Array2<f64>) -> f64 {
        self.pre(x).mapv(gelu).dot(&self.w2) + self.b2
    }

    fn value_and_grad(&self, x: &Array2<f64>) -> (f64, Array2<f64>) {
        let u = self.pre(x);
        let value = u.mapv(gelu).dot(&self.w2) + self.b2;
        let du = u.mapv(gelu_grad) * &self.w2;
        let g = self.w1.dot(&du).insert_axis(Axis(0));
        (value, g)
    }
}

/// Target-class logit of the transformer as a function of its embedded
/// input (token embedding plus positional encoding).
pub struct ClassLogit<'a> {
    pub model: &'a EncoderModel,
    pub active: usize,
    pub class: usize,
}

impl Differentiable for ClassLogit<'_> {
    fn value(&self, x: &Array2<f64>) -> f64 {
        self.model.class_logit(x, self.active, self.class)
    }

    fn value_and_grad(&self, x: &Array2<f64>) -> (f64, Array2<f64>) {
        self.model.class_logit_input_grad(x, self.active, self.class)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    /// All-zero embedded input.
    #[default]
    Zero,
    /// `[BOS] [PAD].. [EOS]` of the same length, embedded.
    Pad,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributionConfig {
    pub baseline: BaselineKind,
    pub steps: usize,
    pub target: Level,
    pub rule: QuadratureRule,
}

impl AttributionConfig {
    pub fn new(target: Level) -> Self {
        Self {
            baseline: BaselineKind::Zero,
            steps: 256,
            target,
            rule: QuadratureRule::Midpoint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenAttribution {
    pub position: usize,
    pub token: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub target: Level,
    pub tokens: Vec<TokenAttribution>,
    pub logit: f64,
    pub baseline_logit: f64,
    pub residual: f64,
}

/// Row sums over the embedding dimension.
pub fn token_scores(attributions: &Array2<f64>) -> Vec<f64> {
    attributions.sum_axis(Axis(1)).to_vec()
}

/// Baseline ids for the active prefix of `seq`.
pub fn pad_baseline_ids(seq: &TokenSequence, vocab: &Vocab) -> Vec<u32> {
    let sp = vocab.special();
    let n = seq.attention_length;
    (0..n)
        .map(|i| match i {
            0 => sp.bos,
            i if i + 1 == n => sp.eos,
            _ => sp.pad,
        })
        .collect()
}

/// Integrated gradients of the target logit over the active positions.
pub fn explain(model: &EncoderModel, vocab: &Vocab, seq: &TokenSequence, config: &AttributionConfig) -> Result<Explanation> {
    let ids = seq.active();
    let x = model.embed(ids)?;
    let baseline = match config.baseline {
        BaselineKind::Zero => Array2::zeros(x.dim()),
        BaselineKind::Pad => model.embed(&pad_baseline_ids(seq, vocab))?,
    };
    let f = ClassLogit {
        model,
        active: ids.len(),
        class: config.target.index(),
    };
    let ig = integrated_gradients(&f, &x, &baseline, config.steps, config.rule)?;
    let tokens = token_scores(&ig.attributions)
        .into_iter()
        .enumerate()
        .map(|(position, score)| TokenAttribution {
            position,
            token: vocab.token(ids[position]).unwrap_or("[UNK]").to_owned(),
            score,
        })
        .collect();
    Ok(Explanation {
        target: config.target,
        tokens,
        logit: ig.value,
        baseline_logit: ig.baseline_value,
        residual: ig.residual(),
    })
}

/// Per class, token scores summed over the items labelled with that class
/// (special tokens skipped), ranked descending, at most `k` entries.
pub fn top_tokens_per_class(
    model: &EncoderModel,
    vocab: &Vocab,
    items: &[EvidenceItem],
    k: usize,
    config: &AttributionConfig,
) -> Result<Vec<Vec<(String, f64)>>> {
    if items.is_empty() {
        return Err(Error::invalid("no items to explain"));
    }
    let sp = vocab.special();
    let mut out = Vec::with_capacity(NUM_LEVELS);
    for level in Level::ALL {
        let mut totals: HashMap<String, f64> = HashMap::new();
        for item in items.iter().filter(|it| it.labels.get(level)) {
            let seq = vocab.encode(&item.abstract_text, model.config.context_width)?;
            let cfg = AttributionConfig { target: level, ..*config };
            let exp = explain(model, vocab, &seq, &cfg)?;
            for (t, &id) in exp.tokens.iter().zip(seq.active()) {
                if !sp.contains(id) {
                    *totals.entry(t.token.clone()).or_default() += t.score;
                }
            }
        }
        out.push(rank(totals, k));
    }
    Ok(out)
}

/// Descending by score, ties by token; at most `k` entries.
pub fn rank(totals: HashMap<String, f64>, k: usize) -> Vec<(String, f64)> {
    let mut v: Vec<(String, f64)> = totals.into_iter().collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v.truncate(k);
    v
}

/// Rank rows, one column per class.
pub fn top_tokens_table(lists: &[Vec<(String, f64)>]) -> String {
    let rows = lists.iter().map(Vec::len).max().unwrap_or(0);
    let w = lists
        .iter()
        .flatten()
        .map(|(t, _)| t.chars().count())
        .max()
        .unwrap_or(0)
        .max(6);
    let mut s = String::from("rank");
    for level in Level::ALL.iter().take(lists.len()) {
        let _ = write!(s, "  {:<w$}", level.letter());
    }
    s.push('\n');
    for r in 0..rows {
        let _ = write!(s, "{:>4}", r + 1);
        for list in lists {
            let cell = list.get(r).map(|(t, _)| t.as_str()).unwrap_or("");
            let _ = write!(s, "  {cell:<w$}");
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxiomReport {
    /// Attribution of the single differing feature (must be nonzero).
    pub sensitivity_a: f64,
    /// Largest attribution on an ignored feature (must be ~0).
    pub sensitivity_b: f64,
    /// Largest attribution difference between permuted twins.
    pub invariance: f64,
}

impl AxiomReport {
    pub fn passed(&self) -> bool {
        self.sensitivity_a.abs() > 0.0 && self.sensitivity_b <= 1e-10 && self.invariance <= 1e-8
    }
}

/// Checks the three attribution axioms on small random networks.
pub fn axiom_suite(seed: u64, steps: usize) -> Result<AxiomReport> {
    let d = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Array2<f64> = Array2::from_shape_fn((1, d), |_| rng.random_range(-1.0..1.0));

    let lin = LinearFunction {
        weights: Array2::from_shape_fn((1, d), |_| rng.random_range(0.5..1.5)),
        bias: 0.1,
    };
    let mut near = Array2::zeros((1, d));
    near[[0, 2]] = x[[0, 2]].abs() + 0.5;
    let base = Array2::zeros((1, d));
    let a = integrated_gradients(&lin, &near, &base, steps, QuadratureRule::Midpoint)?;
    let sensitivity_a = a.attributions[[0, 2]];

    let mut dead = TwoLayerNet::random(d, 8, seed ^ 0x5eed);
    dead.w1.row_mut(3).fill(0.0);
    let b = integrated_gradients(&dead, &x, &base, steps, QuadratureRule::Midpoint)?;
    let sensitivity_b = b.attributions[[0, 3]].abs();

    let net = TwoLayerNet::random(d, 8, seed.wrapping_add(1));
    let mut perm: Vec<usize> = (0..8).collect();
    perm.reverse();
    perm.swap(0, 3);
    let twin = net.permuted(&perm);
    let p = integrated_gradients(&net, &x, &base, steps, QuadratureRule::Midpoint)?;
    let q = integrated_gradients(&twin, &x, &base, steps, QuadratureRule::Midpoint)?;
    let invariance = (&p.attributions - &q.attributions)
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));

    Ok(AxiomReport {
        sensitivity_a,
        sensitivity_b,
        invariance,
    })
}
