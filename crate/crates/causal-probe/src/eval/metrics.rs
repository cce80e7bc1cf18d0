//! Edge-probability metrics computed from scratch with exact tie handling.
//!
//! Both metrics treat tied scores as a single operating point: ROC AUC counts
//! tied positive/negative pairs as 1/2 via average ranks, and average
//! precision lets a whole tie block enter the precision/recall curve at once.
//! That makes both metrics invariant under any simultaneous permutation of
//! (scores, labels) — there is no hidden dependence on input order.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scm::Dag;

/// Flatten the off-diagonal cells of a prediction and its ground truth into
/// score/label lists in row-major order.
pub fn edge_lists(probs: &Array2<f64>, truth: &Dag) -> Result<(Vec<f64>, Vec<u8>)> {
    let f = truth.f();
    if probs.dim() != (f, f) {
        return Err(Error::Contract(format!(
            "prediction shape {:?} does not match f={f}",
            probs.dim()
        )));
    }
    let mut scores = Vec::with_capacity(f * (f - 1));
    let mut labels = Vec::with_capacity(f * (f - 1));
    for i in 0..f {
        for j in 0..f {
            if i != j {
                scores.push(probs[(i, j)]);
                labels.push(u8::from(truth.edge(i, j)));
            }
        }
    }
    Ok((scores, labels))
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "metric inputs: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("metric scores".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Contract("labels must be 0 or 1".into()));
    }
    Ok(())
}

/// Sorted index order; ascending when `ascending`, else descending. Stable,
/// so equal scores keep their original relative order (which neither metric
/// depends on — see the module docs).
fn score_order(scores: &[f64], ascending: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    if ascending {
        order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    } else {
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    }
    order
}

/// Tie-aware ROC AUC: the Mann–Whitney probability that a uniformly random
/// positive is scored above a uniformly random negative, tied pairs counted
/// 1/2. Ranks are accumulated as doubled integers, so the result equals the
/// brute-force all-pairs count exactly, not just within rounding.
///
/// Errors with `UndefinedMetric` when either class is absent.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n = scores.len();
    let n_pos: u64 = labels.iter().map(|&l| u64::from(l)).sum();
    let n_neg = n as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "ROC AUC needs both classes, got {n_pos} positives and {n_neg} negatives"
        )));
    }
    let order = score_order(scores, true);
    // Each member of an ascending tie group gets the group's average 1-based
    // rank; doubling keeps every quantity integral.
    let mut doubled_pos_rank_sum: u64 = 0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let doubled_rank = (i as u64 + 1) + (j as u64 + 1);
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                doubled_pos_rank_sum += doubled_rank;
            }
        }
        i = j + 1;
    }
    // 2U = 2·R⁺ − n⁺(n⁺+1); AUC = U / (n⁺·n⁻).
    let doubled_u = doubled_pos_rank_sum - n_pos * (n_pos + 1);
    Ok(doubled_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// Average precision: `Σ (recall − prev_recall) · precision` over the
/// descending-score precision/recall curve, whose operating points are the
/// distinct score values (a tie block enters as one point).
///
/// Errors with `UndefinedMetric` when there are no positive labels.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos: u64 = labels.iter().map(|&l| u64::from(l)).sum();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs at least one positive".into(),
        ));
    }
    let order = score_order(scores, false);
    let (mut tp, mut seen) = (0u64, 0u64);
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let block_tp = order[i..=j].iter().filter(|&&idx| labels[idx] == 1).count() as u64;
        tp += block_tp;
        seen += (j - i + 1) as u64;
        if block_tp > 0 {
            ap += (block_tp as f64 / n_pos as f64) * (tp as f64 / seen as f64);
        }
        i = j + 1;
    }
    Ok(ap)
}
