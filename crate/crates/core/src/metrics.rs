//! Evaluation metrics for cost estimation, plan selection and explanation.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::cmp::Ordering;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::plan::PlanTree;

pub fn q_error(est: f64, act: f64) -> Result<f64> {
    if !(est > 0.0) || !(act > 0.0) {
        return Err(Error::Label(alloc::format!(
            "q-error needs positive inputs, got {est} and {act}"
        )));
    }
    Ok(est.max(act) / est.min(act))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = alloc::vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(est: &[f64], act: &[f64]) -> Result<f64> {
    if est.len() != act.len() {
        return Err(Error::LengthMismatch {
            left: est.len(),
            right: act.len(),
        });
    }
    if est.len() < 2 {
        return Err(Error::Empty("spearman needs at least two values"));
    }
    let (a, b) = (average_ranks(est), average_ranks(act));
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(&b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Undefined("spearman of a constant sequence"));
    }
    Ok((sab / math::sqrt(saa * sbb)).clamp(-1.0, 1.0))
}

fn check_selection(selected: &[f64], optimal: &[f64]) -> Result<()> {
    if selected.len() != optimal.len() {
        return Err(Error::LengthMismatch {
            left: selected.len(),
            right: optimal.len(),
        });
    }
    if selected.is_empty() {
        return Err(Error::Empty("no queries"));
    }
    for (i, (&s, &o)) in selected.iter().zip(optimal).enumerate() {
        if !(o > 0.0) || s < o {
            return Err(Error::DataIntegrity(alloc::format!(
                "query {i}: selected {s} ms is below optimal {o} ms or optimal is not positive"
            )));
        }
    }
    Ok(())
}

pub fn total_runtime_ratio(selected: &[f64], optimal: &[f64]) -> Result<f64> {
    check_selection(selected, optimal)?;
    Ok(selected.iter().sum::<f64>() / optimal.iter().sum::<f64>())
}

/// Per-query `selected / optimal`.
pub fn plan_suboptimality(selected: &[f64], optimal: &[f64]) -> Result<Vec<f64>> {
    check_selection(selected, optimal)?;
    Ok(selected.iter().zip(optimal).map(|(s, o)| s / o).collect())
}

/// Linearly interpolated percentile, `p` in `[0, 100]`.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("percentile of no values"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (p.clamp(0.0, 100.0) / 100.0) * (v.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(v.len() - 1);
    Ok(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub median: f64,
    pub mean: f64,
    pub p90: f64,
    pub p95: f64,
    pub p99: f64,
    pub max: f64,
}

impl Percentiles {
    pub fn of(values: &[f64]) -> Result<Self> {
        Ok(Self {
            median: percentile(values, 50.0)?,
            mean: values.iter().sum::<f64>() / values.len() as f64,
            p90: percentile(values, 90.0)?,
            p95: percentile(values, 95.0)?,
            p99: percentile(values, 99.0)?,
            max: percentile(values, 100.0)?,
        })
    }
}

/// `(agreeing, compared)` pairs: pairs ordered the same way by `est` and
/// `act`, counting only pairs whose actual values differ by at least
/// `min_rel_gap` of the smaller one.
pub fn pairwise_counts(est: &[f64], act: &[f64], min_rel_gap: f64) -> Result<(usize, usize)> {
    if est.len() != act.len() {
        return Err(Error::LengthMismatch {
            left: est.len(),
            right: act.len(),
        });
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for i in 0..act.len() {
        for j in i + 1..act.len() {
            let (lo, hi) = (act[i].min(act[j]), act[i].max(act[j]));
            if hi == lo || hi - lo < min_rel_gap * lo.abs() {
                continue;
            }
            total += 1;
            if (est[i] - est[j]) * (act[i] - act[j]) > 0.0 {
                hit += 1;
            }
        }
    }
    Ok((hit, total))
}

/// Fraction form of [`pairwise_counts`]; `None` when no pair qualifies.
pub fn pairwise_accuracy(est: &[f64], act: &[f64], min_rel_gap: f64) -> Result<Option<f64>> {
    let (hit, total) = pairwise_counts(est, act, min_rel_gap)?;
    Ok((total > 0).then(|| hit as f64 / total as f64))
}

/// A parent plus its leaf children; non-leaf children start their own group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subgraph {
    pub root: usize,
    /// Sorted ascending.
    pub members: Vec<usize>,
}

/// Minimal non-overlapping subgraphs of `tree`, ordered by root id.
pub fn partition_min_subgraphs(tree: &PlanTree) -> Vec<Subgraph> {
    let mut out: Vec<Subgraph> = (0..tree.len())
        .filter(|&v| v == tree.root() || !tree.node(v).is_leaf())
        .map(|v| {
            let mut members = alloc::vec![v];
            members.extend(
                tree.children(v)
                    .iter()
                    .copied()
                    .filter(|&c| tree.node(c).is_leaf()),
            );
            members.sort_unstable();
            Subgraph { root: v, members }
        })
        .collect();
    out.sort_by_key(|s| s.root);
    out
}

/// Contribution of each partition subgraph (keyed by root id) from closed
/// subtree contributions: the root's value minus those of its non-leaf
/// children. Equals the sum of per-operator contributions of its members, so
/// only non-leaf subtree values are needed.
pub fn subgraph_contributions(
    tree: &PlanTree,
    subtree_values: &BTreeMap<usize, f64>,
) -> Result<BTreeMap<usize, f64>> {
    let value = |id: usize| subtree_values.get(&id).copied().ok_or(Error::Coverage(id));
    partition_min_subgraphs(tree)
        .into_iter()
        .map(|s| {
            let mut v = value(s.root)?;
            for &c in tree.children(s.root) {
                if !tree.node(c).is_leaf() {
                    v -= value(c)?;
                }
            }
            Ok((s.root, v))
        })
        .collect()
}

/// Keys ordered by value descending, ties by key ascending.
fn ranked(contrib: &BTreeMap<usize, f64>) -> Vec<usize> {
    let mut keys: Vec<usize> = contrib.keys().copied().collect();
    keys.sort_by(|a, b| match contrib[b].total_cmp(&contrib[a]) {
        Ordering::Equal => a.cmp(b),
        o => o,
    });
    keys
}

fn check_topk(pred: &BTreeMap<usize, f64>, actual: &BTreeMap<usize, f64>, k: usize) -> Result<()> {
    if !pred.keys().eq(actual.keys()) {
        return Err(Error::DataIntegrity(
            "predicted and actual contributions cover different subgraphs".into(),
        ));
    }
    if k == 0 || k > pred.len() {
        return Err(Error::Config(alloc::format!(
            "top-{k} requested over {} subgraphs",
            pred.len()
        )));
    }
    Ok(())
}

/// Whether the top-`k` subgraphs match position by position.
pub fn topk_subgraph_accuracy(
    pred: &BTreeMap<usize, f64>,
    actual: &BTreeMap<usize, f64>,
    k: usize,
) -> Result<bool> {
    check_topk(pred, actual, k)?;
    Ok(ranked(pred)[..k] == ranked(actual)[..k])
}

/// Actual contribution captured by the predicted top-`k` over the best possible.
pub fn topk_influence_ratio(
    pred: &BTreeMap<usize, f64>,
    actual: &BTreeMap<usize, f64>,
    k: usize,
) -> Result<f64> {
    check_topk(pred, actual, k)?;
    let best: f64 = ranked(actual)[..k].iter().map(|s| actual[s]).sum();
    if !(best > 0.0) {
        return Err(Error::Undefined(
            "actual top-k contribution is not positive",
        ));
    }
    let got: f64 = ranked(pred)[..k].iter().map(|s| actual[s]).sum();
    Ok((got / best).clamp(0.0, 1.0))
}

/// Predicted top-1 is among the actual top two.
pub fn top1_or_2(pred: &BTreeMap<usize, f64>, actual: &BTreeMap<usize, f64>) -> Result<bool> {
    check_topk(pred, actual, 1)?;
    let a = ranked(actual);
    let p = ranked(pred)[0];
    Ok(a.iter().take(2).any(|&s| s == p))
}

/// Predicted top two equal the actual top two, in order.
pub fn top1_and_2(pred: &BTreeMap<usize, f64>, actual: &BTreeMap<usize, f64>) -> Result<bool> {
    topk_subgraph_accuracy(pred, actual, 2)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ExplanationScores {
    pub plans: usize,
    pub top1_accuracy: f64,
    pub top2_accuracy: f64,
    pub top1_or_2_accuracy: f64,
    pub top1_influence: f64,
    pub top2_influence: f64,
    /// Mean `|AC - EC|` over labeled subtrees.
    pub mean_abs_contribution_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub queries: usize,
    pub plans: usize,
    pub q_error: Percentiles,
    pub spearman: f64,
    pub pairwise_accuracy: Option<f64>,
    pub total_runtime_ratio: f64,
    pub plan_suboptimality: Percentiles,
    pub explanation: Option<ExplanationScores>,
}
