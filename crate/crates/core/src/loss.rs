//! Softmax cross-entropy and its class-prior-adjusted (balanced) variant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Training-set class frequencies with the prior temperature `tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    counts: Vec<u64>,
    tau: f64,
}

impl ClassCounts {
    pub fn new(counts: Vec<u64>, tau: f64) -> Result<Self> {
        if counts.len() < 2 {
            return Err(Error::config("class counts need at least two classes"));
        }
        if let Some(i) = counts.iter().position(|&c| c == 0) {
            return Err(Error::config(format!(
                "class {i} has zero training samples; balanced loss needs every count >= 1"
            )));
        }
        if !(tau >= 0.0) || !tau.is_finite() {
            return Err(Error::config(format!("tau must be finite and >= 0, got {tau}")));
        }
        Ok(Self { counts, tau })
    }

    /// Tallies `labels` into `num_classes` bins.
    pub fn from_labels(labels: impl IntoIterator<Item = usize>, num_classes: usize, tau: f64) -> Result<Self> {
        let mut counts = vec![0u64; num_classes];
        for y in labels {
            *counts
                .get_mut(y)
                .ok_or_else(|| Error::data(format!("label {y} outside 0..{num_classes}")))? += 1;
        }
        Self::new(counts, tau)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    /// `tau * ln(n_j)` for every class.
    pub fn log_prior(&self) -> Vec<f64> {
        self.counts.iter().map(|&n| self.tau * (n as f64).ln()).collect()
    }
}

fn check_targets(g: &Graph, logits: Var, targets: &[usize]) -> Result<(usize, usize)> {
    let shape = g.shape(logits);
    let [m, k]: [usize; 2] = shape
        .try_into()
        .map_err(|_| Error::contract(format!("logits must be [M, k], got {shape:?}")))?;
    if targets.len() != m {
        return Err(Error::shape("cross entropy", shape, &[targets.len()]));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::data(format!("target {bad} outside 0..{k}")));
    }
    Ok((m, k))
}

/// Mean over rows of `-log_softmax(logits + offset)[target]`.
fn softmax_nll(g: &mut Graph, logits: Var, targets: &[usize], offset: Option<Vec<f64>>) -> Result<Var> {
    let (m, k) = check_targets(g, logits, targets)?;
    let adjusted = match offset {
        Some(off) => {
            let off = g.constant(Tensor::new(vec![k], off)?);
            g.add(logits, off)?
        }
        None => logits,
    };
    let log_probs = g.log_softmax(adjusted, 1)?;
    let one_hot = Tensor::from_fn(&[m, k], |i| if targets[i / k] == i % k { 1.0 } else { 0.0 });
    let one_hot = g.constant(one_hot);
    let picked = g.mul(log_probs, one_hot)?;
    let total = g.sum_all(picked);
    Ok(g.scale(total, -1.0 / m as f64))
}

/// Standard softmax cross-entropy, mean over rows of `logits: [M, k]`.
pub fn cross_entropy(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    softmax_nll(g, logits, targets, None)
}

/// Balanced softmax cross-entropy: class `j` is weighted by `n_j^tau` inside
/// the softmax, evaluated in log space as `logits + tau * ln(n)`.
pub fn balanced_softmax_ce(
    g: &mut Graph,
    logits: Var,
    targets: &[usize],
    counts: &ClassCounts,
) -> Result<Var> {
    let k = g.shape(logits).last().copied().unwrap_or(0);
    if k != counts.num_classes() {
        return Err(Error::config(format!(
            "{} class counts for {k} logits",
            counts.num_classes()
        )));
    }
    softmax_nll(g, logits, targets, Some(counts.log_prior()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Balanced,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ce" | "cross_entropy" => Ok(LossKind::Ce),
            "balanced" | "bsce" | "balanced_softmax" => Ok(LossKind::Balanced),
            other => Err(Error::config(format!("unknown loss kind `{other}`"))),
        }
    }
}
