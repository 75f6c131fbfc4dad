//! Ranking and calibration metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability that a random positive outranks a random negative, ties
/// counted one half. Rank-sum form, `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Numeric(format!("score {i} is NaN")));
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "auc needs both classes ({n_pos} positives, {n_neg} negatives)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j share their mean.
        let rank = (i + j + 1) as f64 / 2.0;
        let pos = order[i..j].iter().filter(|&&k| labels[k]).count();
        pos_rank_sum += rank * pos as f64;
        i = j;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UaucWeighting {
    /// Every qualifying user counts once.
    #[default]
    Unweighted,
    /// Users weighted by their impression count.
    Impressions,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Uauc {
    pub value: f64,
    /// Users with both classes.
    pub n_users: usize,
}

/// Mean of per-user AUC over users that have both positive and negative
/// labels.
pub fn uauc(scores: &[f64], labels: &[bool], user_ids: &[u32], weighting: UaucWeighting) -> Result<Uauc> {
    if scores.len() != labels.len() || scores.len() != user_ids.len() {
        return Err(Error::Shape("scores, labels and user ids differ in length".into()));
    }
    let mut groups: BTreeMap<u32, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for ((&s, &y), &u) in scores.iter().zip(labels).zip(user_ids) {
        let g = groups.entry(u).or_default();
        g.0.push(s);
        g.1.push(y);
    }
    let (mut total, mut weight, mut n_users) = (0.0, 0.0, 0);
    for (s, y) in groups.values() {
        let pos = y.iter().filter(|&&v| v).count();
        if pos == 0 || pos == y.len() {
            continue;
        }
        let w = match weighting {
            UaucWeighting::Unweighted => 1.0,
            UaucWeighting::Impressions => y.len() as f64,
        };
        total += w * auc(s, y)?;
        weight += w;
        n_users += 1;
    }
    if n_users == 0 {
        return Err(Error::UndefinedMetric("no user has both positive and negative labels".into()));
    }
    Ok(Uauc { value: total / weight, n_users })
}

/// Mean binary cross-entropy of probabilities, clamped away from 0 and 1.
pub fn log_loss(probs: &[f64], labels: &[bool]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::Shape(format!("{} probabilities for {} labels", probs.len(), labels.len())));
    }
    let sum: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(1e-15, 1.0 - 1e-15);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(sum / probs.len() as f64)
}

/// Per-task holdout metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub auc: Vec<f64>,
    pub uauc: Vec<f64>,
    /// Users counted in each task's UAUC.
    pub n_users: Vec<usize>,
    /// Mean over impressions and tasks.
    pub log_loss: f64,
}

/// `variant − base` for every metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub auc: Vec<f64>,
    pub uauc: Vec<f64>,
    pub log_loss: f64,
}

impl MetricSummary {
    pub fn delta_from(&self, base: &MetricSummary) -> MetricDelta {
        let sub = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect();
        MetricDelta {
            auc: sub(&self.auc, &base.auc),
            uauc: sub(&self.uauc, &base.uauc),
            log_loss: self.log_loss - base.log_loss,
        }
    }

    pub fn mean_auc(&self) -> f64 {
        self.auc.iter().sum::<f64>() / self.auc.len() as f64
    }
}
