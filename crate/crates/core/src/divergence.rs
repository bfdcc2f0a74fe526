//! Divergences between discrete class distributions.
//!
//! These operate on plain probability vectors; the differentiable batch
//! versions used in training live on the tape (`Tape::jsd`, `Tape::kl_div`).

use crate::autodiff::ops::PROB_FLOOR;
use crate::error::{Error, Result};

const SUM_TOLERANCE: f64 = 1e-9;

/// A validated probability vector over `K` classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Distribution(Vec<f64>);

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Data("distribution has no classes".into()));
        }
        if let Some((i, p)) = probs.iter().enumerate().find(|(_, p)| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::Data(format!("probability {p} at class {i} is not a nonnegative number")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Data(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Distribution(probs))
    }

    /// Softmax of a logit vector.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        Distribution::new(exps.into_iter().map(|e| e / z).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }
}

fn same_classes(dists: &[&Distribution]) -> Result<usize> {
    let k = dists[0].classes();
    for (j, d) in dists.iter().enumerate() {
        if d.classes() != k {
            return Err(Error::Dimension {
                op: "divergence",
                axis: format!("classes of distribution {j}"),
                expected: k,
                actual: d.classes(),
            });
        }
    }
    Ok(k)
}

/// `sum_k p_k ln(p_k / q_k)` with `0 ln(0 / q) = 0`. Both arguments are
/// floored at 1e-12 inside the logarithm, so a zero in `q` opposite mass in
/// `p` yields a large finite value instead of infinity.
pub fn kl_div(p: &Distribution, q: &Distribution) -> Result<f64> {
    same_classes(&[p, q])?;
    Ok(p.0
        .iter()
        .zip(&q.0)
        .filter(|(pk, _)| **pk > 0.0)
        .map(|(pk, qk)| pk * (pk.max(PROB_FLOOR).ln() - qk.max(PROB_FLOOR).ln()))
        .sum())
}

/// Element-wise arithmetic mean of two or more distributions.
pub fn mean_distribution(dists: &[&Distribution]) -> Result<Distribution> {
    if dists.len() < 2 {
        return Err(Error::Usage(format!("need at least two distributions, got {}", dists.len())));
    }
    let k = same_classes(dists)?;
    let m = dists.len() as f64;
    let mean = (0..k).map(|c| dists.iter().map(|d| d.0[c]).sum::<f64>() / m).collect();
    Ok(Distribution(mean))
}

/// Jensen-Shannon divergence of `m >= 2` distributions:
/// `(1/m) sum_j KL(p_j || M)`, `M` their mean. Lies in `[0, ln m]`.
pub fn jsd(dists: &[&Distribution]) -> Result<f64> {
    let mean = mean_distribution(dists)?;
    let mut total = 0.0;
    for d in dists {
        total += kl_div(d, &mean)?;
    }
    Ok(total / dists.len() as f64)
}
