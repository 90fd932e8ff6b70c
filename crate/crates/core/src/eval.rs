//! Threshold calibration on precision-recall curves, per-class and
//! support-weighted F1, multi-seed aggregation and error-overlap analysis.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelVector, Level, NUM_LEVELS};

/// Threshold used when a class has no validation positives.
pub const FALLBACK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Zero when nothing was predicted positive.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// Zero when there are no positives.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Harmonic mean of precision and recall; zero when both are zero.
    pub fn f1(&self) -> f64 {
        f1_from(self.precision(), self.recall())
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_from(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub per_class: [ClassCounts; NUM_LEVELS],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet(pub [f64; NUM_LEVELS]);

impl Default for ThresholdSet {
    fn default() -> Self {
        ThresholdSet([FALLBACK_THRESHOLD; NUM_LEVELS])
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: [ClassMetrics; NUM_LEVELS],
    pub weights: [f64; NUM_LEVELS],
    pub weighted_f1: f64,
    pub items: usize,
}

impl MetricsReport {
    pub fn f1(&self, level: Level) -> f64 {
        self.per_class[level.index()].f1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    Ok(())
}

/// One point per distinct score, ascending by threshold. At threshold `t`
/// an item is predicted positive iff its score is strictly greater than `t`.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<PrPoint>> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::invalid("pr_curve needs at least one item and aligned labels"));
    }
    check_scores(scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let positives = labels.iter().filter(|b| **b).count();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        let counts = ClassCounts {
            tp,
            fp,
            fn_: positives - tp,
            tn: 0,
        };
        points.push(PrPoint {
            threshold: t,
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
        });
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
    }
    points.reverse();
    Ok(points)
}

/// Per-class counts at a given threshold (strict `>`).
pub fn counts_at(scores: &[f64], labels: &[bool], threshold: f64) -> ClassCounts {
    let mut c = ClassCounts::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s > threshold, y) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

/// Best-F1 threshold among the distinct scores and 0.5, ties toward the
/// larger threshold. `None` when there are no positives.
pub fn calibrate_class(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    if !labels.iter().any(|b| *b) {
        return Ok(None);
    }
    let mut points = pr_curve(scores, labels)?;
    if !points.iter().any(|p| p.threshold == FALLBACK_THRESHOLD) {
        let c = counts_at(scores, labels, FALLBACK_THRESHOLD);
        points.push(PrPoint {
            threshold: FALLBACK_THRESHOLD,
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
        });
    }
    let best = points
        .iter()
        .max_by(|a, b| a.f1.total_cmp(&b.f1).then(a.threshold.total_cmp(&b.threshold)))
        .expect("non-empty curve");
    Ok(Some(best.threshold))
}

/// Calibrates each class on validation scores (`[n][5]` probabilities).
pub fn calibrate_thresholds(val_scores: &[[f64; NUM_LEVELS]], val_labels: &[LabelVector]) -> Result<ThresholdSet> {
    if val_scores.len() != val_labels.len() || val_scores.is_empty() {
        return Err(Error::invalid("calibration needs aligned, non-empty scores and labels"));
    }
    let mut out = ThresholdSet::default();
    for level in Level::ALL {
        let c = level.index();
        let scores: Vec<f64> = val_scores.iter().map(|s| s[c]).collect();
        let labels: Vec<bool> = val_labels.iter().map(|l| l.0[c]).collect();
        match calibrate_class(&scores, &labels)? {
            Some(t) => out.0[c] = t,
            None => {
                log::warn!("class {level} has no validation positives; using threshold {FALLBACK_THRESHOLD}");
                out.0[c] = FALLBACK_THRESHOLD;
            }
        }
    }
    Ok(out)
}

/// Positive iff probability > threshold.
pub fn apply_thresholds(scores: &[[f64; NUM_LEVELS]], thresholds: &ThresholdSet) -> Vec<LabelVector> {
    scores
        .iter()
        .map(|s| {
            let mut v = LabelVector::empty();
            for c in 0..NUM_LEVELS {
                v.0[c] = s[c] > thresholds.0[c];
            }
            v
        })
        .collect()
}

pub fn confusion(predictions: &[LabelVector], gold: &[LabelVector]) -> Result<ConfusionCounts> {
    if predictions.len() != gold.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} gold items",
            predictions.len(),
            gold.len()
        )));
    }
    let mut out = ConfusionCounts::default();
    for (p, g) in predictions.iter().zip(gold) {
        for c in 0..NUM_LEVELS {
            let k = &mut out.per_class[c];
            match (p.0[c], g.0[c]) {
                (true, true) => k.tp += 1,
                (true, false) => k.fp += 1,
                (false, true) => k.fn_ += 1,
                (false, false) => k.tn += 1,
            }
        }
    }
    Ok(out)
}

/// `sum_c w_c F1_c` with `w_c = support(c) / sum_k support(k)`; zero when
/// the total support is zero.
pub fn weighted_f1(per_class_f1: &[f64; NUM_LEVELS], supports: &[usize; NUM_LEVELS]) -> f64 {
    let w = support_weights(supports);
    per_class_f1.iter().zip(w.iter()).map(|(f, w)| f * w).sum()
}

pub fn support_weights(supports: &[usize; NUM_LEVELS]) -> [f64; NUM_LEVELS] {
    let total: usize = supports.iter().sum();
    if total == 0 {
        return [0.0; NUM_LEVELS];
    }
    supports.map(|s| s as f64 / total as f64)
}

pub fn compute_metrics(predictions: &[LabelVector], gold: &[LabelVector]) -> Result<MetricsReport> {
    let counts = confusion(predictions, gold)?;
    let mut per_class = [ClassMetrics::default(); NUM_LEVELS];
    let mut supports = [0usize; NUM_LEVELS];
    for c in 0..NUM_LEVELS {
        let k = counts.per_class[c];
        supports[c] = k.tp + k.fn_;
        per_class[c] = ClassMetrics {
            precision: k.precision(),
            recall: k.recall(),
            f1: k.f1(),
            support: supports[c],
        };
    }
    if supports.iter().sum::<usize>() == 0 {
        log::warn!("evaluated set has no positive labels; weighted F1 is 0");
    }
    let f1s = per_class.map(|m| m.f1);
    Ok(MetricsReport {
        per_class,
        weights: support_weights(&supports),
        weighted_f1: weighted_f1(&f1s, &supports),
        items: gold.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub mean: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        Summary {
            min: v[0],
            median,
            max: v[n - 1],
            mean: v.iter().sum::<f64>() / n as f64,
        }
    }
}

/// Mean report over seeds plus min/median/max for box plots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub mean: MetricsReport,
    pub weighted_f1: Summary,
    pub per_class_f1: [Summary; NUM_LEVELS],
    pub weighted_f1_values: Vec<f64>,
}

pub fn aggregate_seeds(reports: &[MetricsReport]) -> Result<SeedAggregate> {
    if reports.is_empty() {
        return Err(Error::invalid("no reports to aggregate"));
    }
    let n = reports.len() as f64;
    let mean_of = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let mut per_class = [ClassMetrics::default(); NUM_LEVELS];
    let mut weights = [0.0; NUM_LEVELS];
    for c in 0..NUM_LEVELS {
        per_class[c] = ClassMetrics {
            precision: mean_of(&|r| r.per_class[c].precision),
            recall: mean_of(&|r| r.per_class[c].recall),
            f1: mean_of(&|r| r.per_class[c].f1),
            support: reports[0].per_class[c].support,
        };
        weights[c] = mean_of(&|r| r.weights[c]);
    }
    let weighted: Vec<f64> = reports.iter().map(|r| r.weighted_f1).collect();
    let per_class_f1 = std::array::from_fn(|c| {
        let v: Vec<f64> = reports.iter().map(|r| r.per_class[c].f1).collect();
        Summary::of(&v)
    });
    Ok(SeedAggregate {
        mean: MetricsReport {
            per_class,
            weights,
            weighted_f1: mean_of(&|r| r.weighted_f1),
            items: reports[0].items,
        },
        weighted_f1: Summary::of(&weighted),
        per_class_f1,
        weighted_f1_values: weighted,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisclassificationAnalysis {
    pub models: Vec<String>,
    /// Percent overlap of error sets (intersection over union); 100 when
    /// both models make no errors.
    pub overlap: Vec<Vec<f64>>,
    /// `histogram[k]` = items fully correct for exactly `k` models.
    pub histogram: Vec<usize>,
    /// Per item, the number of models predicting all five slots correctly.
    pub correct_models: Vec<usize>,
}

pub fn misclassification_analysis(
    models: &[(String, Vec<LabelVector>)],
    gold: &[LabelVector],
) -> Result<MisclassificationAnalysis> {
    if models.len() < 2 {
        return Err(Error::invalid("misclassification analysis needs at least two models"));
    }
    if let Some((name, _)) = models.iter().find(|(_, p)| p.len() != gold.len()) {
        return Err(Error::invalid(format!("predictions of `{name}` cover a different item set")));
    }
    let errors: Vec<Vec<bool>> = models
        .iter()
        .map(|(_, p)| p.iter().zip(gold).map(|(a, b)| a != b).collect())
        .collect();
    let m = models.len();
    let mut overlap = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in 0..m {
            let both = errors[i].iter().zip(&errors[j]).filter(|(a, b)| **a && **b).count();
            let either = errors[i].iter().zip(&errors[j]).filter(|(a, b)| **a || **b).count();
            overlap[i][j] = if either == 0 { 100.0 } else { 100.0 * both as f64 / either as f64 };
        }
    }
    let correct_models: Vec<usize> = (0..gold.len())
        .map(|k| errors.iter().filter(|e| !e[k]).count())
        .collect();
    let mut histogram = vec![0; m + 1];
    for &c in &correct_models {
        histogram[c] += 1;
    }
    Ok(MisclassificationAnalysis {
        models: models.iter().map(|(n, _)| n.clone()).collect(),
        overlap,
        histogram,
        correct_models,
    })
}

const COLUMNS: [&str; 6] = ["F1_A", "F1_B", "F1_C", "F1_D", "F1_E", "F1"];

fn percent_row(r: &MetricsReport) -> [f64; 6] {
    let mut out = [0.0; 6];
    for c in 0..NUM_LEVELS {
        out[c] = 100.0 * r.per_class[c].f1;
    }
    out[5] = 100.0 * r.weighted_f1;
    out
}

/// CSV with columns `model,F1_A,..,F1_E,F1` (percent, one decimal).
pub fn reports_csv(rows: &[(String, MetricsReport)]) -> String {
    let mut s = format!("model,{}\n", COLUMNS.join(","));
    for (name, r) in rows {
        let vals: Vec<String> = percent_row(r).iter().map(|v| format!("{v:.1}")).collect();
        let _ = writeln!(s, "{},{}", csv_field(name), vals.join(","));
    }
    s
}

/// Quotes a CSV cell when needed.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// Aligned text version of [`reports_csv`].
pub fn reports_table(rows: &[(String, MetricsReport)]) -> String {
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let mut s = format!("{:<name_w$}", "");
    for c in COLUMNS {
        let _ = write!(s, "  {c:>6}");
    }
    s.push('\n');
    for (name, r) in rows {
        let _ = write!(s, "{name:<name_w$}");
        for v in percent_row(r) {
            let _ = write!(s, "  {v:>6.1}");
        }
        s.push('\n');
    }
    s
}

/// Overlap matrix and correct-model histogram as aligned text.
pub fn analysis_table(a: &MisclassificationAnalysis) -> String {
    let w = a.models.iter().map(String::len).max().unwrap_or(0).max(6);
    let mut s = format!("{:<w$}", "");
    for m in &a.models {
        let _ = write!(s, "  {m:>w$}");
    }
    s.push('\n');
    for (i, m) in a.models.iter().enumerate() {
        let _ = write!(s, "{m:<w$}");
        for v in &a.overlap[i] {
            let _ = write!(s, "  {v:>w$.1}");
        }
        s.push('\n');
    }
    s.push_str("\ncorrect models  items\n");
    for (k, n) in a.histogram.iter().enumerate() {
        let _ = writeln!(s, "{k:>14}  {n:>5}");
    }
    s
}
