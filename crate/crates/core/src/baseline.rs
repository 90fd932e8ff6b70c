//! Unigram+bigram tf-idf features with one-vs-rest L2-regularized logistic
//! regression per evidence level.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelVector, NUM_LEVELS};
use crate::tokenizer::pretokenize;

/// Inverse of the usual `C = 1` regularization setting.
pub const DEFAULT_REG: f64 = 1.0;

/// Sparse feature vector with strictly increasing indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseVector {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseVector {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, dense: &[f64]) -> f64 {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(&i, &v)| dense[i as usize] * v)
            .sum()
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i as usize] = v;
        }
        out
    }
}

/// Lowercased word unigrams and adjacent-word bigrams. Punctuation-only
/// pieces are dropped.
pub fn ngram_terms(text: &str) -> Vec<String> {
    let words: Vec<String> = pretokenize(text)
        .into_iter()
        .filter(|w| w.chars().any(char::is_alphanumeric))
        .collect();
    let mut terms = words.clone();
    terms.extend(words.windows(2).map(|w| format!("{} {}", w[0], w[1])));
    terms
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfidfModel {
    pub features: Vec<String>,
    pub document_frequency: Vec<u64>,
    pub doc_count: u64,
    pub idf: Vec<f64>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl TfidfModel {
    pub fn dim(&self) -> usize {
        self.features.len()
    }

    pub fn feature_index(&self, term: &str) -> Option<u32> {
        self.index.get(term).copied()
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .features
            .iter()
            .enumerate()
            .map(|(i, f)| (f.clone(), i as u32))
            .collect();
    }

    /// Term counts times idf, L2-normalized; unseen terms are dropped.
    pub fn transform(&self, text: &str) -> SparseVector {
        let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
        for t in ngram_terms(text) {
            if let Some(i) = self.feature_index(&t) {
                *counts.entry(i).or_default() += 1.0;
            }
        }
        let mut v = SparseVector {
            indices: counts.keys().copied().collect(),
            values: counts.iter().map(|(&i, &c)| c * self.idf[i as usize]).collect(),
        };
        let norm = v.norm();
        if norm > 0.0 {
            v.values.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }

    pub fn transform_all<S: AsRef<str>>(&self, texts: &[S]) -> Vec<SparseVector> {
        texts.iter().map(|t| self.transform(t.as_ref())).collect()
    }
}

/// Smoothed idf: `ln((1 + D) / (1 + df)) + 1`.
pub fn smoothed_idf(doc_count: u64, df: u64) -> f64 {
    ((1.0 + doc_count as f64) / (1.0 + df as f64)).ln() + 1.0
}

pub fn fit_tfidf<S: AsRef<str>>(train_texts: &[S]) -> Result<TfidfModel> {
    if train_texts.is_empty() {
        return Err(Error::invalid("tf-idf corpus is empty"));
    }
    let mut df: BTreeMap<String, u64> = BTreeMap::new();
    for text in train_texts {
        let uniq: BTreeSet<String> = ngram_terms(text.as_ref()).into_iter().collect();
        for t in uniq {
            *df.entry(t).or_default() += 1;
        }
    }
    let doc_count = train_texts.len() as u64;
    let features: Vec<String> = df.keys().cloned().collect();
    let document_frequency: Vec<u64> = df.values().copied().collect();
    let idf = document_frequency.iter().map(|&d| smoothed_idf(doc_count, d)).collect();
    let mut model = TfidfModel {
        features,
        document_frequency,
        doc_count,
        idf,
        index: HashMap::new(),
    };
    model.rebuild_index();
    Ok(model)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OvrLogisticModel {
    /// One weight vector per level, each of the feature dimension.
    pub weights: Vec<Vec<f64>>,
    pub biases: [f64; NUM_LEVELS],
    pub reg: f64,
}

impl OvrLogisticModel {
    pub fn dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn predict_proba(&self, x: &SparseVector) -> Result<[f64; NUM_LEVELS]> {
        if let Some(&max) = x.indices.last() {
            if max as usize >= self.dim() {
                return Err(Error::invalid(format!(
                    "feature index {max} out of range for dimension {}",
                    self.dim()
                )));
            }
        }
        let mut out = [0.0; NUM_LEVELS];
        for c in 0..NUM_LEVELS {
            out[c] = sigmoid(x.dot(&self.weights[c]) + self.biases[c]);
        }
        Ok(out)
    }

    pub fn predict_dense(&self, x: &[f64]) -> Result<[f64; NUM_LEVELS]> {
        if x.len() != self.dim() {
            return Err(Error::invalid(format!("expected {} features, got {}", self.dim(), x.len())));
        }
        let mut out = [0.0; NUM_LEVELS];
        for c in 0..NUM_LEVELS {
            let z: f64 = self.weights[c].iter().zip(x).map(|(w, v)| w * v).sum();
            out[c] = sigmoid(z + self.biases[c]);
        }
        Ok(out)
    }
}

/// Optimizer settings for the per-class logistic fits.
#[derive(Debug, Clone, Copy)]
pub struct LogisticFitOptions {
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for LogisticFitOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-6,
            max_iter: 20_000,
        }
    }
}

/// Result of one binary fit: parameters plus the objective after every
/// accepted step.
#[derive(Debug, Clone)]
pub struct BinaryFit {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub loss_trace: Vec<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
}

fn objective(features: &[SparseVector], y: &[f64], w: &[f64], b: f64, reg: f64) -> f64 {
    let data: f64 = features
        .iter()
        .zip(y)
        .map(|(x, &yi)| {
            let z = x.dot(w) + b;
            softplus(z) - yi * z
        })
        .sum();
    data + 0.5 * reg * w.iter().map(|v| v * v).sum::<f64>()
}

fn gradient(features: &[SparseVector], y: &[f64], w: &[f64], b: f64, reg: f64) -> (Vec<f64>, f64) {
    let mut gw: Vec<f64> = w.iter().map(|v| reg * v).collect();
    let mut gb = 0.0;
    for (x, &yi) in features.iter().zip(y) {
        let r = sigmoid(x.dot(w) + b) - yi;
        gb += r;
        for (&i, &v) in x.indices.iter().zip(&x.values) {
            gw[i as usize] += r * v;
        }
    }
    (gw, gb)
}

/// Minimizes `sum_i logloss_i + reg/2 |w|^2` (bias unpenalized) by
/// full-batch gradient descent. Step sizes start from the Barzilai-Borwein
/// estimate and are backtracked until the Armijo condition holds, so the
/// objective never increases.
pub fn fit_binary(
    features: &[SparseVector],
    y: &[f64],
    dim: usize,
    reg: f64,
    opts: LogisticFitOptions,
) -> BinaryFit {
    let n = features.len() as f64;
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut f = objective(features, y, &w, b, reg);
    let (mut gw, mut gb) = gradient(features, y, &w, b, reg);
    let gnorm = |gw: &[f64], gb: f64| (gw.iter().map(|v| v * v).sum::<f64>() + gb * gb).sqrt();
    let mut norm = gnorm(&gw, gb);
    let mut trace = vec![f];
    let mut step = 1.0 / (0.5 * n + reg).max(1e-12);
    let mut iterations = 0;
    while norm > opts.grad_tol && iterations < opts.max_iter {
        iterations += 1;
        let g2 = norm * norm;
        let mut t = step;
        let (nw, nb, nf) = loop {
            let nw: Vec<f64> = w.iter().zip(&gw).map(|(a, g)| a - t * g).collect();
            let nb = b - t * gb;
            let nf = objective(features, y, &nw, nb, reg);
            if nf <= f - 1e-4 * t * g2 || t < 1e-20 {
                break (nw, nb, nf);
            }
            t *= 0.5;
        };
        if nf > f {
            break; // line search exhausted at machine precision
        }
        let (ngw, ngb) = gradient(features, y, &nw, nb, reg);
        // Barzilai-Borwein step for the next iteration
        let mut ss = (nb - b) * (nb - b);
        let mut sy = (nb - b) * (ngb - gb);
        for i in 0..dim {
            let s = nw[i] - w[i];
            ss += s * s;
            sy += s * (ngw[i] - gw[i]);
        }
        step = if sy > 0.0 { (ss / sy).clamp(1e-10, 1e10) } else { t };
        w = nw;
        b = nb;
        f = nf;
        gw = ngw;
        gb = ngb;
        norm = gnorm(&gw, gb);
        trace.push(f);
    }
    if norm > opts.grad_tol {
        log::warn!("logistic fit stopped after {iterations} iterations with gradient norm {norm:.3e}");
    }
    BinaryFit {
        weights: w,
        bias: b,
        loss_trace: trace,
        grad_norm: norm,
        iterations,
    }
}

pub fn train_ovr(
    features: &[SparseVector],
    labels: &[LabelVector],
    dim: usize,
    reg: f64,
) -> Result<OvrLogisticModel> {
    train_ovr_with(features, labels, dim, reg, LogisticFitOptions::default())
}

pub fn train_ovr_with(
    features: &[SparseVector],
    labels: &[LabelVector],
    dim: usize,
    reg: f64,
    opts: LogisticFitOptions,
) -> Result<OvrLogisticModel> {
    if features.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} feature rows but {} label vectors",
            features.len(),
            labels.len()
        )));
    }
    if !(reg > 0.0) {
        return Err(Error::invalid("regularization strength must be positive"));
    }
    let mut weights = Vec::with_capacity(NUM_LEVELS);
    let mut biases = [0.0; NUM_LEVELS];
    for c in 0..NUM_LEVELS {
        let y: Vec<f64> = labels.iter().map(|l| if l.0[c] { 1.0 } else { 0.0 }).collect();
        let pos = y.iter().filter(|v| **v > 0.5).count();
        if pos == 0 || pos == y.len() {
            log::warn!("class {} is degenerate in training data ({pos}/{} positive)", c, y.len());
        }
        let fit = fit_binary(features, &y, dim, reg, opts);
        weights.push(fit.weights);
        biases[c] = fit.bias;
    }
    Ok(OvrLogisticModel { weights, biases, reg })
}

/// Fitted tf-idf transform plus classifier, persisted together as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineModel {
    pub tfidf: TfidfModel,
    pub classifier: OvrLogisticModel,
}

impl BaselineModel {
    pub fn fit<S: AsRef<str>>(texts: &[S], labels: &[LabelVector], reg: f64) -> Result<Self> {
        let tfidf = fit_tfidf(texts)?;
        let x = tfidf.transform_all(texts);
        let classifier = train_ovr(&x, labels, tfidf.dim(), reg)?;
        Ok(Self { tfidf, classifier })
    }

    pub fn predict_proba(&self, text: &str) -> Result<[f64; NUM_LEVELS]> {
        self.classifier.predict_proba(&self.tfidf.transform(text))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut m: BaselineModel = serde_json::from_str(s)?;
        m.tfidf.rebuild_index();
        if m.classifier.weights.len() != NUM_LEVELS || m.classifier.dim() != m.tfidf.dim() {
            return Err(Error::invalid("classifier shape does not match feature space"));
        }
        Ok(m)
    }
}
