//! Accuracy, F1 and ROC AUC for binary relevance predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query: String,
    pub score: f64,
    pub pred: bool,
    pub label: bool,
}

impl EvalRecord {
    pub fn new(query: impl Into<String>, score: f64, label: bool) -> Self {
        Self {
            query: query.into(),
            score,
            pred: score >= 0.5,
            label,
        }
    }
}

pub fn accuracy(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("accuracy needs at least one record"));
    }
    let correct = records.iter().filter(|r| r.pred == r.label).count();
    Ok(correct as f64 / records.len() as f64)
}

/// F1 of the positive class; 0 when precision or recall is undefined.
pub fn f1(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("f1 needs at least one record"));
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for r in records {
        match (r.pred, r.label) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fp == 0 || tp + fn_ == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Mann-Whitney AUC via rank sums with average ranks for ties.
///
/// Ranks are kept doubled (integers) so the result is exact for inputs
/// with ties: `U = R2/2 - n_pos(n_pos+1)/2` where `R2` is the sum of doubled
/// ranks over positives.
pub fn auc(records: &[EvalRecord]) -> Result<f64> {
    let scored: Vec<(f64, bool)> = records.iter().map(|r| (r.score, r.label)).collect();
    auc_scores(&scored)
}

pub fn auc_scores(scored: &[(f64, bool)]) -> Result<f64> {
    let n_pos = scored.iter().filter(|(_, l)| *l).count() as u128;
    let n_neg = scored.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::AucUndefined);
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[a].0.total_cmp(&scored[b].0));

    // Doubled rank of a tie group spanning 1-based ranks [lo, hi] is lo + hi.
    let mut doubled_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scored[order[j + 1]].0 == scored[order[i]].0 {
            j += 1;
        }
        let doubled = (i + 1 + j + 1) as u128;
        let positives = order[i..=j].iter().filter(|&&k| scored[k].1).count() as u128;
        doubled_rank_sum += doubled * positives;
        i = j + 1;
    }
    // 2U = R2 - n_pos(n_pos+1)
    let twice_u = doubled_rank_sum - n_pos * (n_pos + 1);
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketAuc {
    pub lo: usize,
    /// Inclusive upper bound; `None` for the open last bucket.
    pub hi: Option<usize>,
    pub count: usize,
    pub auc: Option<f64>,
}

pub const DEFAULT_BUCKET_EDGES: [usize; 3] = [5, 10, 15];

pub fn query_length(query: &str) -> usize {
    crate::corpus::normalize_text(query).chars().count()
}

/// Splits by query character length at `edges` (inclusive upper bounds)
/// and computes AUC per bucket; a bucket lacking either class has `auc: None`.
pub fn bucketed_auc(records: &[EvalRecord], edges: &[usize]) -> Result<Vec<BucketAuc>> {
    if edges.windows(2).any(|w| w[0] >= w[1]) || edges.first() == Some(&0) {
        return Err(Error::Config("bucket edges must be positive and strictly increasing".into()));
    }
    let mut buckets: Vec<BucketAuc> = Vec::with_capacity(edges.len() + 1);
    let mut lo = 1;
    for &e in edges {
        buckets.push(BucketAuc { lo, hi: Some(e), count: 0, auc: None });
        lo = e + 1;
    }
    buckets.push(BucketAuc { lo, hi: None, count: 0, auc: None });

    let mut members: Vec<Vec<(f64, bool)>> = vec![Vec::new(); buckets.len()];
    for r in records {
        let len = query_length(&r.query);
        let idx = edges.iter().position(|&e| len <= e).unwrap_or(edges.len());
        members[idx].push((r.score, r.label));
    }
    for (bucket, scored) in buckets.iter_mut().zip(members) {
        bucket.count = scored.len();
        bucket.auc = auc_scores(&scored).ok();
    }
    Ok(buckets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc: f64,
    pub f1: f64,
    pub auc: f64,
    pub buckets: Vec<BucketAuc>,
}

pub fn evaluate(records: &[EvalRecord], edges: &[usize]) -> Result<EvalReport> {
    Ok(EvalReport {
        acc: accuracy(records)?,
        f1: f1(records)?,
        auc: auc(records)?,
        buckets: bucketed_auc(records, edges)?,
    })
}
