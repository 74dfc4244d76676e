//! Evaluation metrics: accuracy, recall@K, expected calibration error, and
//! the toy caption attribute F1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Expected calibration error over equal-width confidence bins.
///
/// `Σ_b (|B_b|/N) · |acc(B_b) − conf(B_b)|`; empty bins contribute nothing.
/// Confidence 1.0 lands in the last bin.
pub fn ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    if confidences.len() != correct.len() {
        return Err(Error::ShapeMismatch {
            context: "ece",
            expected: format!("{} flags", confidences.len()),
            got: format!("{}", correct.len()),
        });
    }
    if bins == 0 {
        return Err(Error::invalid("ece needs at least one bin"));
    }
    if confidences.is_empty() {
        return Ok(0.0);
    }
    for &c in confidences {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::invalid(format!("confidence {c} outside [0, 1]")));
        }
    }
    let n = confidences.len() as f64;
    let mut sum_conf = vec![0.0; bins];
    let mut sum_acc = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = ((c * bins as f64) as usize).min(bins - 1);
        sum_conf[b] += c;
        sum_acc[b] += if ok { 1.0 } else { 0.0 };
        count[b] += 1;
    }
    let mut total = 0.0;
    for b in 0..bins {
        if count[b] == 0 {
            continue;
        }
        let w = count[b] as f64 / n;
        let acc = sum_acc[b] / count[b] as f64;
        let conf = sum_conf[b] / count[b] as f64;
        total += w * (acc - conf).abs();
    }
    Ok(total)
}

/// Fraction of queries whose truth index appears in the top `k` of its ranking.
pub fn recall_at_k(rankings: &[Vec<usize>], truths: &[usize], k: usize) -> f64 {
    assert_eq!(rankings.len(), truths.len(), "one truth per ranking");
    if rankings.is_empty() || k == 0 {
        return 0.0;
    }
    let hits = rankings
        .iter()
        .zip(truths)
        .filter(|(ranking, truth)| ranking.iter().take(k).any(|i| i == *truth))
        .count();
    hits as f64 / rankings.len() as f64
}

/// F1 between the set of attribute tokens in a caption and the reference set.
pub fn caption_attribute_f1(predicted: &[usize], reference: &[usize]) -> f64 {
    let mut pred: Vec<usize> = predicted.to_vec();
    pred.sort_unstable();
    pred.dedup();
    let mut refr: Vec<usize> = reference.to_vec();
    refr.sort_unstable();
    refr.dedup();
    if pred.is_empty() && refr.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let inter = pred.iter().filter(|p| refr.binary_search(p).is_ok()).count() as f64;
    if inter == 0.0 {
        return 0.0;
    }
    let precision = inter / pred.len() as f64;
    let recall = inter / refr.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// One row of an experiment's results table. Fields not applicable to the
/// task stay `None` and print as `-`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub objective: String,
    pub samples: usize,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub ece: Option<f64>,
    pub recall_at_1: Option<f64>,
    pub recall_at_5: Option<f64>,
    pub recall_at_10: Option<f64>,
    pub mean_reward_gain: Option<f64>,
    pub caption_f1: Option<f64>,
    pub mean_caption_reward: Option<f64>,
    /// Mean wall-clock per sample. Reported separately from the deterministic
    /// results table.
    pub mean_wall_ms: f64,
}

impl MetricsReport {
    pub fn new(objective: &str, samples: usize) -> Self {
        Self { objective: objective.to_string(), samples, ..Default::default() }
    }

    /// All populated rates must live in `[0, 1]` and the ordered metric
    /// families must be monotone (top5 ≥ top1, R@10 ≥ R@5 ≥ R@1).
    pub fn check_invariants(&self) -> Result<()> {
        for (name, v) in [
            ("top1", self.top1),
            ("top5", self.top5),
            ("ece", self.ece),
            ("recall_at_1", self.recall_at_1),
            ("recall_at_5", self.recall_at_5),
            ("recall_at_10", self.recall_at_10),
            ("caption_f1", self.caption_f1),
        ] {
            if let Some(x) = v {
                if !(0.0..=1.0).contains(&x) {
                    return Err(Error::invalid(format!("{name}={x} outside [0, 1]")));
                }
            }
        }
        if let (Some(t1), Some(t5)) = (self.top1, self.top5) {
            if t5 < t1 - 1e-12 {
                return Err(Error::invalid("top5 below top1"));
            }
        }
        if let (Some(r1), Some(r5)) = (self.recall_at_1, self.recall_at_5) {
            if r5 < r1 - 1e-12 {
                return Err(Error::invalid("recall@5 below recall@1"));
            }
        }
        if let (Some(r5), Some(r10)) = (self.recall_at_5, self.recall_at_10) {
            if r10 < r5 - 1e-12 {
                return Err(Error::invalid("recall@10 below recall@5"));
            }
        }
        Ok(())
    }
}
