//! Scalar metrics: ROC AUC, repair success, rank correlation.

use crate::error::{Error, Result};

/// ROC AUC of separating backdoored from clean score populations: the
/// probability that a random backdoored score exceeds a random clean score,
/// ties counted one half.
///
/// Computed from the Mann-Whitney U statistic with average ranks, which is
/// algebraically identical to exhaustive pair counting.
pub fn roc_auc(scores_backdoored: &[f64], scores_clean: &[f64]) -> Result<f64> {
    if scores_backdoored.is_empty() || scores_clean.is_empty() {
        return Err(Error::EmptyInput("roc_auc score list"));
    }
    let n_pos = scores_backdoored.len();
    let n_neg = scores_clean.len();
    let mut all: Vec<(f64, bool)> = scores_backdoored
        .iter()
        .map(|&s| (s, true))
        .chain(scores_clean.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("scores must not be NaN"));

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks are 1-based; tie group shares the average rank
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Expected repair success over game outcomes: the mean of `cda - asr`.
pub fn succ_repair(outcomes: &[(f64, f64)]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::EmptyInput("succ_repair outcomes"));
    }
    Ok(outcomes.iter().map(|(cda, asr)| cda - asr).sum::<f64>() / outcomes.len() as f64)
}

/// Spearman rank correlation between two equally long sequences.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} values", xs.len()),
            got: format!("{}", ys.len()),
        });
    }
    if xs.len() < 2 {
        return Err(Error::EmptyInput("spearman needs at least two points"));
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry)
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("NaN in ranks"));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            out[idx] = avg;
        }
        i = j;
    }
    out
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::InvalidArg("rank correlation undefined for constant sequence".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Sample mean and standard deviation (n - 1 in the denominator; 0 for a
/// single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force pair-counting oracle for the AUC definition.
    fn auc_pair_counting(pos: &[f64], neg: &[f64]) -> f64 {
        let mut total = 0.0;
        for p in pos {
            for n in neg {
                total += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        total / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn perfectly_separated_is_one() {
        assert_eq!(roc_auc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
    }

    #[test]
    fn constant_scores_are_half() {
        assert_eq!(roc_auc(&[0.5, 0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.5);
    }

    #[test]
    fn matches_pair_counting_oracle() {
        let pos = [0.7, 0.4, 0.9];
        let neg = [0.5, 0.6, 0.3];
        let expected = auc_pair_counting(&pos, &neg);
        assert!((roc_auc(&pos, &neg).unwrap() - expected).abs() < 1e-12);
        // pinned value from the 9-pair count: wins {0.7>0.5,0.7>0.6,0.7>0.3,
        // 0.4>0.3, 0.9>all three} = 7 of 9
        assert!((expected - 7.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn empty_lists_error() {
        assert!(roc_auc(&[], &[0.1]).is_err());
        assert!(roc_auc(&[0.1], &[]).is_err());
    }

    #[test]
    fn auc_of_list_against_itself_is_half() {
        let s = [0.2, 0.9, 0.9, 0.4, 0.11];
        assert!((roc_auc(&s, &s).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn monotone_transform_invariance() {
        let pos = [0.7, 0.4, 0.9, 0.55];
        let neg = [0.5, 0.6, 0.3];
        let f = |v: f64| (3.0 * v).exp() + 1.0;
        let tp: Vec<f64> = pos.iter().map(|&v| f(v)).collect();
        let tn: Vec<f64> = neg.iter().map(|&v| f(v)).collect();
        assert!((roc_auc(&pos, &neg).unwrap() - roc_auc(&tp, &tn).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn succ_repair_examples() {
        assert!((succ_repair(&[(0.9, 0.1)]).unwrap() - 0.8).abs() < 1e-12);
        assert!((succ_repair(&[(1.0, 1.0), (1.0, -1.0)]).unwrap() - 1.0).abs() < 1e-12);
        assert!(succ_repair(&[]).is_err());
        // independent summation over a handful of outcomes
        let outcomes = [(0.95, 0.12), (0.88, 0.4), (0.91, 0.02), (0.7, 0.65), (0.99, 1.0)];
        let by_hand: f64 = ((0.95 - 0.12)
            + (0.88 - 0.4)
            + (0.91 - 0.02)
            + (0.7 - 0.65)
            + (0.99 - 1.0))
            / 5.0;
        assert!((succ_repair(&outcomes).unwrap() - by_hand).abs() < 1e-12);
    }

    #[test]
    fn spearman_detects_monotone_trend() {
        let xs = [0.0, 10.0, 40.0, 160.0];
        let ys = [0.01, 0.4, 0.8, 0.95];
        assert!((spearman(&xs, &ys).unwrap() - 1.0).abs() < 1e-12);
        let flipped = [0.95, 0.8, 0.4, 0.01];
        assert!((spearman(&xs, &flipped).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_std_small_cases() {
        let (m, s) = mean_std(&[2.0, 4.0]);
        assert_eq!(m, 3.0);
        assert!((s - std::f64::consts::SQRT_2).abs() < 1e-12);
        assert_eq!(mean_std(&[5.0]).1, 0.0);
    }
}
