//! Bag-level classification metrics and score distributions.
//!
//! AUROC is the Mann–Whitney statistic over exact ranks (ties count one
//! half). AUPRC is average precision: the step-wise sum of precision times
//! recall increment over distinct thresholds, no interpolation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_classes: usize,
    pub n_bags: usize,
    pub accuracy: f64,
    /// Unweighted mean F1 over classes present in the labels.
    pub macro_f1: f64,
    pub per_class_f1: Vec<Option<f64>>,
    /// One-vs-rest AUROC per class; `None` when the class is absent.
    pub auroc: Vec<Option<f64>>,
    pub auprc: Vec<Option<f64>>,
    pub macro_auroc: Option<f64>,
    pub macro_auprc: Option<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Scores predicted labels and per-class scores against true labels.
///
/// `class_scores[i][c]` is bag `i`'s score for class `c` (e.g. a softmax
/// probability); curve metrics are computed one-vs-rest from it.
pub fn evaluate(
    predictions: &[usize],
    labels: &[usize],
    class_scores: &[Vec<f64>],
    n_classes: usize,
) -> Result<EvalReport> {
    let n = labels.len();
    if predictions.len() != n || class_scores.len() != n {
        return Err(Error::dim(
            "evaluate",
            format!(
                "{} predictions, {} labels, {} score rows",
                predictions.len(),
                n,
                class_scores.len()
            ),
        ));
    }
    if n == 0 {
        return Err(Error::Contract("cannot evaluate zero bags".into()));
    }
    if let Some(row) = class_scores.iter().find(|r| r.len() != n_classes) {
        return Err(Error::dim(
            "evaluate",
            format!("score row has {} entries for {n_classes} classes", row.len()),
        ));
    }
    if let Some(&bad) = labels.iter().chain(predictions).find(|&&l| l >= n_classes) {
        return Err(Error::Contract(format!("label {bad} out of range")));
    }

    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&y, &p) in labels.iter().zip(predictions) {
        confusion[y][p] += 1;
    }
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let accuracy = correct as f64 / n as f64;

    let mut per_class_f1 = Vec::with_capacity(n_classes);
    let mut auroc_c = Vec::with_capacity(n_classes);
    let mut auprc_c = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let support: usize = confusion[c].iter().sum();
        if support == 0 {
            log::warn!("class {c} has no bags in the evaluation set; its metrics are undefined");
            per_class_f1.push(None);
            auroc_c.push(None);
            auprc_c.push(None);
            continue;
        }
        let tp = confusion[c][c] as f64;
        let predicted: usize = (0..n_classes).map(|r| confusion[r][c]).sum();
        let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
        let recall = tp / support as f64;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class_f1.push(Some(f1));

        let scores: Vec<f64> = class_scores.iter().map(|r| r[c]).collect();
        let positive: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        auroc_c.push(auroc(&scores, &positive));
        auprc_c.push(average_precision(&scores, &positive));
    }

    Ok(EvalReport {
        n_classes,
        n_bags: n,
        accuracy,
        macro_f1: mean_defined(&per_class_f1).unwrap_or(0.0),
        macro_auroc: mean_defined(&auroc_c),
        macro_auprc: mean_defined(&auprc_c),
        per_class_f1,
        auroc: auroc_c,
        auprc: auprc_c,
        confusion,
    })
}

/// Indices of `scores` sorted ascending, plus the average 1-based rank of
/// every entry (tied entries share the mean of their ranks).
fn average_ranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Area under the ROC curve from exact ranks; `None` unless both classes
/// are present.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    debug_assert_eq!(scores.len(), positive.len());
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(positive)
        .filter(|(_, &p)| p)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Average precision; `None` when there are no positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    debug_assert_eq!(scores.len(), positive.len());
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

/// AUROC treating `unseen` scores as positives and `control` as negatives.
pub fn anomaly_separation(unseen: &[f64], control: &[f64]) -> Result<f64> {
    if unseen.is_empty() || control.is_empty() {
        return Err(Error::Contract(
            "anomaly separation needs both unseen and control scores".into(),
        ));
    }
    let scores: Vec<f64> = unseen.iter().chain(control).copied().collect();
    let positive: Vec<bool> = (0..scores.len()).map(|i| i < unseen.len()).collect();
    Ok(auroc(&scores, &positive).expect("both sides are non-empty"))
}

/// Per-class binned counts over shared edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges. Bins are `[e_i, e_{i+1})`, the last one closed.
    pub edges: Vec<f64>,
    /// `counts[class][bin]`.
    pub counts: Vec<Vec<usize>>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }
}

/// Bins `values` (with class `classes[i]`) into `bins` equal-width bins over
/// `range`, or over the data's min/max when `range` is `None`. Values outside
/// an explicit range are clamped into the end bins.
pub fn histogram(
    values: &[f64],
    classes: &[usize],
    n_classes: usize,
    bins: usize,
    range: Option<(f64, f64)>,
) -> Result<Histogram> {
    if bins < 2 {
        return Err(Error::config("bins", "need at least 2 bins"));
    }
    if values.len() != classes.len() {
        return Err(Error::dim("histogram", "one class per value is required"));
    }
    if let Some(&bad) = classes.iter().find(|&&c| c >= n_classes) {
        return Err(Error::Contract(format!("class {bad} out of range")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("histogram input is not finite".into()));
    }
    let (lo, hi) = match range {
        Some((lo, hi)) if lo < hi => (lo, hi),
        Some(_) => return Err(Error::config("range", "lower bound must be below upper bound")),
        None if values.is_empty() => (0.0, 1.0),
        None => values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        }),
    };
    let width = hi - lo;
    let edges: Vec<f64> = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + width * i as f64 / bins as f64 })
        .collect();
    let mut counts = vec![vec![0usize; bins]; n_classes];
    for (&v, &c) in values.iter().zip(classes) {
        let b = if width > 0.0 {
            let pos = ((v - lo) * bins as f64 / width).floor();
            if pos < 0.0 {
                0
            } else {
                (pos as usize).min(bins - 1)
            }
        } else {
            0
        };
        counts[c][b] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// Distributions of the three per-instance scores, per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    pub attention: Histogram,
    pub anomaly: Histogram,
    pub pooling: Histogram,
}

/// Population mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<MeanStd> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(MeanStd {
            mean,
            std: var.sqrt(),
        })
    }
}
