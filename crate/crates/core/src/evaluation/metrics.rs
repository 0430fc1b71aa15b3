use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What recall divides the hit count by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecallDenominator {
    /// `|relevant|`
    #[default]
    Relevant,
    /// `min(|relevant|, k)`
    MinK,
}

fn check(relevant: &HashSet<usize>, k: usize) -> Result<()> {
    if relevant.is_empty() {
        return Err(Error::Contract("relevant set is empty".into()));
    }
    if k == 0 {
        return Err(Error::Contract("k must be at least 1".into()));
    }
    Ok(())
}

pub fn recall_at_k(
    ranked: &[usize],
    relevant: &HashSet<usize>,
    k: usize,
    denom: RecallDenominator,
) -> Result<f64> {
    check(relevant, k)?;
    let hits = ranked
        .iter()
        .take(k)
        .filter(|id| relevant.contains(id))
        .count();
    let d = match denom {
        RecallDenominator::Relevant => relevant.len(),
        RecallDenominator::MinK => relevant.len().min(k),
    };
    Ok(hits as f64 / d as f64)
}

/// Binary-relevance NDCG with `1 / log2(rank + 1)` discounts.
pub fn ndcg_at_k(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> Result<f64> {
    check(relevant, k)?;
    let discount = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, id)| relevant.contains(id))
        .map(|(i, _)| discount(i))
        .sum();
    let ideal: f64 = (0..relevant.len().min(k)).map(discount).sum();
    Ok(dcg / ideal)
}

/// Candidate ids by descending score; equal scores keep ascending id order.
pub fn rank_candidates(candidates: &[usize], scores: &[f64]) -> Result<Vec<usize>> {
    if candidates.len() != scores.len() {
        return Err(Error::dim(
            "rank_candidates",
            &[candidates.len()],
            &[scores.len()],
        ));
    }
    let mut order: Vec<(usize, f64)> = candidates
        .iter()
        .copied()
        .zip(scores.iter().copied())
        .collect();
    order.sort_by(|a, b| match b.1.total_cmp(&a.1) {
        Ordering::Equal => a.0.cmp(&b.0),
        o => o,
    });
    Ok(order.into_iter().map(|(id, _)| id).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: &[usize]) -> HashSet<usize> {
        ids.iter().copied().collect()
    }

    const A: usize = 1;
    const B: usize = 2;
    const C: usize = 3;
    const D: usize = 4;

    #[test]
    fn recall_examples() {
        let r = |ranked: &[usize], rel: &[usize], k| {
            recall_at_k(ranked, &set(rel), k, RecallDenominator::Relevant).unwrap()
        };
        assert_eq!(r(&[A, B, C], &[A], 1), 1.0);
        assert_eq!(r(&[B, C, A], &[A], 2), 0.0);
        assert_eq!(r(&[A, B, C, D], &[A, D], 3), 0.5);
        assert_eq!(
            recall_at_k(&[A, B], &set(&[A, B, C]), 1, RecallDenominator::MinK).unwrap(),
            1.0
        );
        assert!(recall_at_k(&[A], &set(&[]), 1, RecallDenominator::Relevant).is_err());
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&[A, B], &set(&[A]), 1).unwrap(), 1.0);
        let v = ndcg_at_k(&[B, A], &set(&[A]), 2).unwrap();
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((v - 0.6309).abs() < 1e-4);
        assert_eq!(ndcg_at_k(&[B, C, A], &set(&[A]), 2).unwrap(), 0.0);
    }

    #[test]
    fn ranking_rules() {
        assert_eq!(rank_candidates(&[5, 9], &[0.1, 0.9]).unwrap(), vec![9, 5]);
        assert_eq!(
            rank_candidates(&[9, 5, 7], &[0.5, 0.5, 0.5]).unwrap(),
            vec![5, 7, 9]
        );
    }
}
