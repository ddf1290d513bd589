//! Test metrics: ROC-AUC by rank statistic and mean absolute error.

use crate::error::{Error, Result};

/// Area under the ROC curve via the Mann-Whitney statistic, with tied
/// scores sharing their average rank. `None` unless both classes occur.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Evaluation("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of 1-based ranks of positives, doubled to stay integral
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 average to (i+j+2)/2
        let avg2 = (i + j + 2) as u64;
        let pos = order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        rank_sum2 += avg2 * pos;
        i = j + 1;
    }
    let np = n_pos as u64;
    let u2 = rank_sum2 - np * (np + 1);
    Ok(Some(u2 as f64 / (2 * np * n_neg as u64) as f64))
}

/// Mean of `|p − y|`.
pub fn mean_absolute_error(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Shape("prediction and target lengths differ".into()));
    }
    if pred.is_empty() {
        return Err(Error::Evaluation("no values to score".into()));
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, y)| (p - y).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn worked_example() {
        let a = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!(a, Some(0.75));
    }

    #[test]
    fn perfect_and_single_class() {
        assert_eq!(roc_auc(&[0.1, 0.9], &[false, true]).unwrap(), Some(1.0));
        assert_eq!(roc_auc(&[0.1, 0.9], &[true, true]).unwrap(), None);
        assert_eq!(roc_auc(&[0.5, 0.5], &[false, true]).unwrap(), Some(0.5));
    }

    #[test]
    fn matches_pairwise_count_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let n = rng.random_range(2..12);
            let scores: Vec<f64> = (0..n)
                .map(|_| rng.random_range(0..4) as f64 / 4.0)
                .collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.random()).collect();
            if let Some(a) = roc_auc(&scores, &labels).unwrap() {
                assert_eq!(a, brute(&scores, &labels));
            }
        }
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mean_absolute_error(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mean_absolute_error(&[1.0, 2.0], &[0.0, 4.0]).unwrap(), 1.5);
        assert!(mean_absolute_error(&[], &[]).is_err());
    }
}
