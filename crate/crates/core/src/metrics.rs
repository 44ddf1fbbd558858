//! AUC, accuracy, sensitivity and specificity, with one-vs-one macro
//! averaging for more than two classes.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mann-Whitney AUC: the probability that a random positive outscores a
/// random negative, ties counting one half. `labels` are 1 for positive and
/// 0 for negative.
pub fn auc_binary(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::data(format!("binary AUC got label {bad}")));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs at least one positive and one negative sample".into(),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::data("NaN score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    // Twice the rank sum of positives, with tied groups sharing their mean rank.
    let mut doubled_rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let doubled_mid = (start + 1 + end) as f64;
        let pos_in_group = order[start..end].iter().filter(|&&i| labels[i] == 1).count();
        doubled_rank_sum += doubled_mid * pos_in_group as f64;
        start = end;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    let doubled_u = doubled_rank_sum - np * (np + 1.0);
    Ok(doubled_u / (2.0 * np * nn))
}

/// `(accuracy, sensitivity, specificity)` of binary predictions.
pub fn acc_sen_spe(preds: &[usize], labels: &[usize]) -> Result<(f64, f64, f64)> {
    if preds.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &y) in preds.iter().zip(labels) {
        match (p, y) {
            (1, 1) => tp += 1,
            (0, 0) => tn += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => return Err(Error::data(format!("non-binary prediction/label ({p}, {y})"))),
        }
    }
    if tp + fn_ == 0 {
        return Err(Error::UndefinedMetric("sensitivity: no positive labels".into()));
    }
    if tn + fp == 0 {
        return Err(Error::UndefinedMetric("specificity: no negative labels".into()));
    }
    let acc = (tp + tn) as f64 / preds.len() as f64;
    let sen = tp as f64 / (tp + fn_) as f64;
    let spe = tn as f64 / (tn + fp) as f64;
    Ok((acc, sen, spe))
}

/// Index of the largest score; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `k x k` counts, rows indexed by true label and columns by prediction.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], k: usize) -> Result<Vec<Vec<u64>>> {
    let mut m = vec![vec![0u64; k]; k];
    for (&p, &y) in preds.iter().zip(labels) {
        if p >= k || y >= k {
            return Err(Error::data(format!("class index outside 0..{k}")));
        }
        m[y][p] += 1;
    }
    Ok(m)
}

/// Binary metrics of one ordered class pair, `positive` against `negative`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub positive: usize,
    pub negative: usize,
    pub auc: f64,
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split: String,
    pub epoch: usize,
    pub auc: f64,
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
    pub confusion: Vec<Vec<u64>>,
    pub samples: usize,
    /// Decision rule used for ACC/SEN/SPE.
    pub threshold: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pairs: Vec<PairMetrics>,
}

impl MetricReport {
    /// One line of JSON.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::data(format!("bad metric record: {e}")))
    }
}

fn check_scores(scores: &[Vec<f64>], labels: &[usize]) -> Result<usize> {
    if scores.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} score rows for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let k = scores.first().map_or(0, Vec::len);
    if k < 2 || scores.iter().any(|r| r.len() != k) {
        return Err(Error::contract("score rows must share a width of at least 2"));
    }
    Ok(k)
}

/// Metrics of class-probability rows `scores: [M][2]`; class 1 is positive and
/// predictions are the argmax (equivalently a 0.5 threshold).
pub fn binary_report(scores: &[Vec<f64>], labels: &[usize]) -> Result<MetricReport> {
    let k = check_scores(scores, labels)?;
    if k != 2 {
        return Err(Error::contract(format!("binary report on {k} classes")));
    }
    let positive: Vec<f64> = scores.iter().map(|r| r[1]).collect();
    let preds: Vec<usize> = scores.iter().map(|r| argmax(r)).collect();
    let auc = auc_binary(&positive, labels)?;
    let (acc, sen, spe) = acc_sen_spe(&preds, labels)?;
    Ok(MetricReport {
        split: String::new(),
        epoch: 0,
        auc,
        acc,
        sen,
        spe,
        confusion: confusion_matrix(&preds, labels, 2)?,
        samples: labels.len(),
        threshold: "argmax".into(),
        pairs: Vec::new(),
    })
}

/// One-vs-one macro averages over every ordered class pair `(i, j)`: samples
/// of classes `i` and `j` are scored by `scores[.][i]` for AUC and predicted
/// `i` when `scores[.][i] > scores[.][j]`. Two classes fall back to
/// [`binary_report`].
pub fn macro_one_vs_one(scores: &[Vec<f64>], labels: &[usize]) -> Result<MetricReport> {
    let k = check_scores(scores, labels)?;
    if k == 2 {
        return binary_report(scores, labels);
    }
    for c in 0..k {
        if !labels.contains(&c) {
            return Err(Error::UndefinedMetric(format!("class {c} has no samples")));
        }
    }
    let mut pairs = Vec::with_capacity(k * (k - 1));
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let idx: Vec<usize> = (0..labels.len()).filter(|&m| labels[m] == i || labels[m] == j).collect();
            let bin_labels: Vec<usize> = idx.iter().map(|&m| usize::from(labels[m] == i)).collect();
            let pair_scores: Vec<f64> = idx.iter().map(|&m| scores[m][i]).collect();
            let preds: Vec<usize> = idx
                .iter()
                .map(|&m| usize::from(scores[m][i] > scores[m][j]))
                .collect();
            let auc = auc_binary(&pair_scores, &bin_labels)?;
            let (acc, sen, spe) = acc_sen_spe(&preds, &bin_labels)?;
            pairs.push(PairMetrics {
                positive: i,
                negative: j,
                auc,
                acc,
                sen,
                spe,
            });
        }
    }
    let n = pairs.len() as f64;
    let mean = |f: fn(&PairMetrics) -> f64| pairs.iter().map(f).sum::<f64>() / n;
    let preds: Vec<usize> = scores.iter().map(|r| argmax(r)).collect();
    Ok(MetricReport {
        split: String::new(),
        epoch: 0,
        auc: mean(|p| p.auc),
        acc: mean(|p| p.acc),
        sen: mean(|p| p.sen),
        spe: mean(|p| p.spe),
        confusion: confusion_matrix(&preds, labels, k)?,
        samples: labels.len(),
        threshold: "argmax".into(),
        pairs,
    })
}
