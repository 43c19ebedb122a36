//! Fairness and accuracy measurement: relaxed gaps, thresholded averages,
//! and average precision.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty group a={0}")]
    EmptyGroup(u8),
    #[error("empty cell (a={a}, y={y})")]
    EmptyCell { a: u8, y: u8 },
    #[error("scores, labels, and attributes must have equal length")]
    LengthMismatch,
    #[error("thresholds must be strictly increasing inside (0,1)")]
    BadThresholds,
    #[error("average precision needs at least one positive label")]
    NoPositives,
}

/// Which group-fairness constraint a gap refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    Dp,
    Eo,
}

impl std::fmt::Display for Constraint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Constraint::Dp => write!(f, "dp"),
            Constraint::Eo => write!(f, "eo"),
        }
    }
}

/// Scores and labels partitioned by the sensitive attribute.
#[derive(Debug, Clone)]
pub struct GroupedScores<S> {
    scores: [Vec<S>; 2],
    labels: [Vec<u8>; 2],
}

impl<S: Scalar> GroupedScores<S> {
    pub fn new(scores: &[S], labels: &[u8], attrs: &[u8]) -> Result<Self, MetricsError> {
        if scores.len() != labels.len() || labels.len() != attrs.len() {
            return Err(MetricsError::LengthMismatch);
        }
        let mut g = GroupedScores { scores: [Vec::new(), Vec::new()], labels: [Vec::new(), Vec::new()] };
        for ((&s, &y), &a) in scores.iter().zip(labels).zip(attrs) {
            let a = (a != 0) as usize;
            g.scores[a].push(s);
            g.labels[a].push(if y != 0 { 1 } else { 0 });
        }
        Ok(g)
    }

    /// Build from per-group score lists when labels are irrelevant (DP only).
    pub fn from_group_scores(scores0: Vec<S>, scores1: Vec<S>) -> Self {
        let l0 = vec![0u8; scores0.len()];
        let l1 = vec![0u8; scores1.len()];
        GroupedScores { scores: [scores0, scores1], labels: [l0, l1] }
    }

    pub fn group(&self, a: u8) -> &[S] {
        &self.scores[(a != 0) as usize]
    }

    fn group_mean(&self, a: u8) -> Result<S, MetricsError> {
        let s = self.group(a);
        if s.is_empty() {
            return Err(MetricsError::EmptyGroup(a));
        }
        Ok(mean(s))
    }

    fn cell(&self, a: u8, y: u8) -> Vec<S> {
        let idx = (a != 0) as usize;
        self.scores[idx]
            .iter()
            .zip(self.labels[idx].iter())
            .filter(|&(_, &l)| l == y)
            .map(|(&s, _)| s)
            .collect()
    }

    fn cell_mean(&self, a: u8, y: u8) -> Result<S, MetricsError> {
        let c = self.cell(a, y);
        if c.is_empty() {
            return Err(MetricsError::EmptyCell { a, y });
        }
        Ok(mean(&c))
    }

    fn binarized(&self, threshold: S) -> Self {
        let bin = |v: &[S]| {
            v.iter()
                .map(|&s| if s >= threshold { S::one() } else { S::zero() })
                .collect::<Vec<S>>()
        };
        GroupedScores {
            scores: [bin(&self.scores[0]), bin(&self.scores[1])],
            labels: self.labels.clone(),
        }
    }
}

fn mean<S: Scalar>(v: &[S]) -> S {
    v.iter().fold(S::zero(), |a, &b| a + b) / S::from_usize(v.len()).unwrap()
}

/// |E_{P0} f - E_{P1} f|.
pub fn delta_dp<S: Scalar>(grouped: &GroupedScores<S>) -> Result<S, MetricsError> {
    Ok((grouped.group_mean(0)? - grouped.group_mean(1)?).abs())
}

/// Sum over y of |E_{P0^y} f - E_{P1^y} f|; range [0, 2].
pub fn delta_eo<S: Scalar>(grouped: &GroupedScores<S>) -> Result<S, MetricsError> {
    let mut total = S::zero();
    for y in [0u8, 1] {
        total = total + (grouped.cell_mean(0, y)? - grouped.cell_mean(1, y)?).abs();
    }
    Ok(total)
}

/// Ordered thresholds in (0,1).
#[derive(Debug, Clone)]
pub struct ThresholdSet<S>(Vec<S>);

impl<S: Scalar> ThresholdSet<S> {
    pub fn new(thresholds: Vec<S>) -> Result<Self, MetricsError> {
        if thresholds.is_empty() {
            return Err(MetricsError::BadThresholds);
        }
        for w in thresholds.windows(2) {
            if w[0] >= w[1] {
                return Err(MetricsError::BadThresholds);
            }
        }
        if thresholds[0] <= S::zero() || *thresholds.last().unwrap() >= S::one() {
            return Err(MetricsError::BadThresholds);
        }
        Ok(ThresholdSet(thresholds))
    }

    /// The grid {0.1, 0.2, ..., 0.9}.
    pub fn default_grid() -> Self {
        ThresholdSet((1..=9).map(|k| S::c(k as f64 / 10.0)).collect())
    }

    pub fn values(&self) -> &[S] {
        &self.0
    }
}

/// Mean over thresholds of delta_dp on binarized scores.
pub fn mean_thresholded_dp<S: Scalar>(
    grouped: &GroupedScores<S>,
    thresholds: &ThresholdSet<S>,
) -> Result<S, MetricsError> {
    let mut acc = S::zero();
    for &t in thresholds.values() {
        acc = acc + delta_dp(&grouped.binarized(t))?;
    }
    Ok(acc / S::from_usize(thresholds.values().len()).unwrap())
}

/// Mean over thresholds of delta_eo on binarized scores.
pub fn mean_thresholded_eo<S: Scalar>(
    grouped: &GroupedScores<S>,
    thresholds: &ThresholdSet<S>,
) -> Result<S, MetricsError> {
    let mut acc = S::zero();
    for &t in thresholds.values() {
        acc = acc + delta_eo(&grouped.binarized(t))?;
    }
    Ok(acc / S::from_usize(thresholds.values().len()).unwrap())
}

/// Average precision with descending-score ordering; ties keep original
/// index order (stable sort), which makes the value deterministic.
pub fn average_precision<S: Scalar>(scores: &[S], labels: &[u8]) -> Result<S, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch);
    }
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    if n_pos == 0 {
        return Err(MetricsError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap());
    let mut hits = 0usize;
    let mut acc = S::zero();
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] != 0 {
            hits += 1;
            acc = acc + S::from_usize(hits).unwrap() / S::from_usize(rank + 1).unwrap();
        }
    }
    Ok(acc / S::from_usize(n_pos).unwrap())
}
