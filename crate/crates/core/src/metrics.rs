//! Loss and evaluation metrics over label/probability buffers.
//!
//! Class order everywhere is [`crate::CLASS_NAMES`]: any hemorrhage first,
//! then the five subtypes alphabetically. Labels are 0.0/1.0, predictions
//! are probabilities in `[0,1]`.

use crate::{Error, Result, NUM_CLASSES};

/// Probabilities are clamped to this band before any logarithm so that
/// confident-and-wrong predictions stay finite.
pub const PROB_CLAMP_LO: f64 = 1e-7;
pub const PROB_CLAMP_HI: f64 = 1.0 - 1e-7;

/// Per-sample label vector, entries 0.0 or 1.0.
pub type LabelVec = [f64; NUM_CLASSES];
/// Per-sample probability vector.
pub type PredVec = [f64; NUM_CLASSES];
/// Per-class loss weights; non-negative, not all zero.
pub type ClassWeights = [f64; NUM_CLASSES];

/// Competition-style weighting: the `any` class counts double.
pub const DEFAULT_CLASS_WEIGHTS: ClassWeights = [2.0, 1.0, 1.0, 1.0, 1.0, 1.0];

/// Single clamped binary cross-entropy term, natural log.
pub fn bce(y: f64, p: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP_LO, PROB_CLAMP_HI);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Multi-label binary cross-entropy: the sum of per-class BCE terms.
pub fn multi_bce(labels: &[f64], preds: &[f64]) -> Result<f64> {
    if labels.len() != preds.len() {
        return Err(Error::Invalid(format!(
            "multi_bce: {} labels vs {} predictions",
            labels.len(),
            preds.len()
        )));
    }
    for (&y, &p) in labels.iter().zip(preds) {
        if y != 0.0 && y != 1.0 {
            return Err(Error::Invalid(format!("multi_bce: label {y} is not binary")));
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Invalid(format!("multi_bce: probability {p} outside [0,1]")));
        }
    }
    Ok(labels.iter().zip(preds).map(|(&y, &p)| bce(y, p)).sum())
}

/// Weighted mean log loss over a set of samples: the mean over all
/// (sample, class) pairs of per-class BCE, each class weighted by `w`,
/// normalized by `N * sum(w)`.
pub fn weighted_mean_log_loss(
    labels: &[LabelVec],
    preds: &[PredVec],
    weights: &ClassWeights,
) -> Result<f64> {
    if labels.len() != preds.len() {
        return Err(Error::Invalid(format!(
            "weighted_mean_log_loss: {} label rows vs {} prediction rows",
            labels.len(),
            preds.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Invalid("weighted_mean_log_loss: no samples".into()));
    }
    let wsum: f64 = weights.iter().sum();
    if weights.iter().any(|&w| w < 0.0) || wsum <= 0.0 {
        return Err(Error::Invalid(
            "weighted_mean_log_loss: weights must be non-negative and not all zero".into(),
        ));
    }
    let mut total = 0.0;
    for (y, p) in labels.iter().zip(preds) {
        multi_bce(y, p)?; // validates ranges
        for t in 0..NUM_CLASSES {
            total += weights[t] * bce(y[t], p[t]);
        }
    }
    Ok(total / (labels.len() as f64 * wsum))
}

/// Accuracy/sensitivity/specificity at a fixed threshold. A prediction is
/// positive when `p >= threshold`. Sensitivity is `None` when the set has
/// no positives, specificity when it has no negatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdMetrics {
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

pub fn threshold_metrics(labels: &[f64], preds: &[f64], threshold: f64) -> Result<ThresholdMetrics> {
    if labels.len() != preds.len() || labels.is_empty() {
        return Err(Error::Invalid(format!(
            "threshold_metrics: {} labels vs {} predictions",
            labels.len(),
            preds.len()
        )));
    }
    let (mut tp, mut tn, mut fp, mut fnn) = (0u64, 0u64, 0u64, 0u64);
    for (&y, &p) in labels.iter().zip(preds) {
        let pos = p >= threshold;
        match (y != 0.0, pos) {
            (true, true) => tp += 1,
            (true, false) => fnn += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
    }
    let n = labels.len() as f64;
    Ok(ThresholdMetrics {
        accuracy: (tp + tn) as f64 / n,
        sensitivity: (tp + fnn > 0).then(|| tp as f64 / (tp + fnn) as f64),
        specificity: (tn + fp > 0).then(|| tn as f64 / (tn + fp) as f64),
    })
}

/// ROC AUC by the Mann-Whitney statistic with midranks, so tied scores get
/// half credit. Errors when only one class is present.
pub fn roc_auc(labels: &[f64], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() || labels.is_empty() {
        return Err(Error::Invalid(format!(
            "roc_auc: {} labels vs {} scores",
            labels.len(),
            scores.len()
        )));
    }
    let pos = labels.iter().filter(|&&y| y != 0.0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Invalid(
            "roc_auc: needs at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // Midranks: tied scores share the average of their rank range.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 average to:
        let midrank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] != 0.0 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Scan-level prediction: per-class max over the scan's slice predictions.
pub fn scan_aggregate(slice_preds: &[PredVec]) -> Result<PredVec> {
    if slice_preds.is_empty() {
        return Err(Error::Invalid("scan_aggregate: empty scan".into()));
    }
    let mut out = [0.0f64; NUM_CLASSES];
    for p in slice_preds {
        for t in 0..NUM_CLASSES {
            out[t] = out[t].max(p[t]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// O(pos*neg) pairwise AUC: ties get half credit. The independent
    /// oracle for `roc_auc`.
    pub(crate) fn pairwise_auc(labels: &[f64], scores: &[f64]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &yi) in labels.iter().enumerate() {
            if yi == 0.0 {
                continue;
            }
            for (j, &yj) in labels.iter().enumerate() {
                if yj != 0.0 {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn multi_bce_all_half_is_six_ln_two() {
        let y = [0.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        let p = [0.5; 6];
        let l = multi_bce(&y, &p).unwrap();
        assert!((l - 6.0 * std::f64::consts::LN_2).abs() < 1e-12, "{l}");
        assert!((l - 4.158_883_083_359_672).abs() < 1e-9);
    }

    #[test]
    fn multi_bce_frozen_second_example() {
        let y = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let p = [0.9, 0.1, 0.1, 0.1, 0.1, 0.1];
        let l = multi_bce(&y, &p).unwrap();
        // -ln(0.9) - 5 ln(0.9) = -6 ln(0.9)
        assert!((l - 0.632_163_0).abs() < 1e-6, "{l}");
    }

    #[test]
    fn multi_bce_rejects_bad_inputs() {
        assert!(multi_bce(&[0.5], &[0.5]).is_err());
        assert!(multi_bce(&[1.0], &[1.5]).is_err());
        assert!(multi_bce(&[1.0, 0.0], &[0.5]).is_err());
    }

    #[test]
    fn clamp_keeps_confident_wrong_finite() {
        let l = multi_bce(&[1.0], &[0.0]).unwrap();
        assert!(l.is_finite());
        assert!((l - (-PROB_CLAMP_LO.ln())).abs() < 1e-9);
    }

    #[test]
    fn weighted_loss_uniform_weights_matches_mean_bce() {
        let labels = [[1.0, 0.0, 0.0, 1.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0, 0.0, 1.0]];
        let preds = [[0.8, 0.2, 0.3, 0.7, 0.1, 0.4], [0.3, 0.6, 0.2, 0.1, 0.5, 0.9]];
        let w = [1.0; 6];
        let got = weighted_mean_log_loss(&labels, &preds, &w).unwrap();
        let mean: f64 = labels
            .iter()
            .zip(&preds)
            .map(|(y, p)| multi_bce(y, p).unwrap())
            .sum::<f64>()
            / (2.0 * 6.0);
        assert!((got - mean).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_loss_is_tiny() {
        let labels = [[1.0, 0.0, 1.0, 0.0, 0.0, 0.0]];
        let preds = [[1.0, 0.0, 1.0, 0.0, 0.0, 0.0]];
        let l = weighted_mean_log_loss(&labels, &preds, &DEFAULT_CLASS_WEIGHTS).unwrap();
        assert!(l < 1e-6, "{l}");
    }

    #[test]
    fn threshold_metrics_hand_case() {
        let m = threshold_metrics(&[1.0, 1.0], &[0.6, 0.4], 0.5).unwrap();
        assert_eq!(m.sensitivity, Some(0.5));
        assert_eq!(m.specificity, None);
        assert_eq!(m.accuracy, 0.5);
    }

    #[test]
    fn sensitivity_absent_without_positives() {
        let m = threshold_metrics(&[0.0, 0.0, 0.0], &[0.1, 0.9, 0.2], 0.5).unwrap();
        assert_eq!(m.sensitivity, None);
        assert_eq!(m.specificity, Some(2.0 / 3.0));
    }

    #[test]
    fn auc_frozen_example() {
        let labels = [0.0, 0.0, 1.0, 1.0];
        let scores = [0.1, 0.4, 0.35, 0.8];
        let auc = roc_auc(&labels, &scores).unwrap();
        assert!((auc - 0.75).abs() < 1e-12, "{auc}");
    }

    #[test]
    fn auc_ties_get_half_credit() {
        let labels = [0.0, 1.0, 0.0, 1.0];
        let scores = [0.5, 0.5, 0.2, 0.9];
        let auc = roc_auc(&labels, &scores).unwrap();
        assert!((auc - pairwise_auc(&labels, &scores)).abs() < 1e-12);
        // pairs: (1 vs 0.5-tie: 0.5) + (1 vs 0.2: 1) + (0.9 vs both: 2) = 3.5 of 4
        assert!((auc - 3.5 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn auc_single_class_is_an_error() {
        assert!(roc_auc(&[1.0, 1.0], &[0.1, 0.2]).is_err());
        assert!(roc_auc(&[0.0, 0.0], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn auc_matches_pairwise_oracle_on_random_data() {
        use rand::{Rng as _, SeedableRng};
        let mut rng = crate::Rng::seed_from_u64(42);
        for _ in 0..50 {
            let n = rng.gen_range(2..40);
            let labels: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..2))).collect();
            // Quantized scores so ties actually occur.
            let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..8)) / 8.0).collect();
            let pos = labels.iter().sum::<f64>();
            if pos == 0.0 || pos == n as f64 {
                continue;
            }
            let fast = roc_auc(&labels, &scores).unwrap();
            let slow = pairwise_auc(&labels, &scores);
            assert!((fast - slow).abs() < 1e-10, "{fast} vs {slow}");
        }
    }

    #[test]
    fn scan_aggregate_takes_per_class_max() {
        let slices = [
            [0.1, 0.9, 0.0, 0.3, 0.2, 0.1],
            [0.8, 0.2, 0.1, 0.4, 0.1, 0.0],
        ];
        let agg = scan_aggregate(&slices).unwrap();
        assert_eq!(agg, [0.8, 0.9, 0.1, 0.4, 0.2, 0.1]);
        assert!(scan_aggregate(&[]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn loss_positive_and_monotone(p in 0.01f64..0.99) {
                // Moving a positive class's probability down increases loss.
                let y = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
                let hi = [p, 0.5, 0.5, 0.5, 0.5, 0.5];
                let lo = [p * 0.5, 0.5, 0.5, 0.5, 0.5, 0.5];
                let lhi = multi_bce(&y, &hi).unwrap();
                let llo = multi_bce(&y, &lo).unwrap();
                prop_assert!(lhi > 0.0);
                prop_assert!(llo > lhi);
            }

            #[test]
            fn auc_invariant_under_monotone_transform(
                scores in proptest::collection::vec(0.0f64..1.0, 8..40),
                seed in 0u64..1000,
            ) {
                use rand::{Rng as _, SeedableRng};
                let mut rng = crate::Rng::seed_from_u64(seed);
                let labels: Vec<f64> =
                    (0..scores.len()).map(|_| f64::from(rng.gen_range(0..2))).collect();
                let pos = labels.iter().sum::<f64>();
                prop_assume!(pos > 0.0 && pos < scores.len() as f64);
                let base = roc_auc(&labels, &scores).unwrap();
                // Strictly increasing map keeps the ranking, hence the AUC.
                let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s + 1.0).exp()).collect();
                let same = roc_auc(&labels, &warped).unwrap();
                prop_assert!((base - same).abs() < 1e-9);
            }

            #[test]
            fn auc_flips_when_labels_complement(
                scores in proptest::collection::vec(0.0f64..1.0, 8..40),
                seed in 0u64..1000,
            ) {
                use rand::{Rng as _, SeedableRng};
                let mut rng = crate::Rng::seed_from_u64(seed);
                let labels: Vec<f64> =
                    (0..scores.len()).map(|_| f64::from(rng.gen_range(0..2))).collect();
                let pos = labels.iter().sum::<f64>();
                prop_assume!(pos > 0.0 && pos < scores.len() as f64);
                let base = roc_auc(&labels, &scores).unwrap();
                let flipped: Vec<f64> = labels.iter().map(|y| 1.0 - y).collect();
                let comp = roc_auc(&flipped, &scores).unwrap();
                prop_assert!((base - (1.0 - comp)).abs() < 1e-9);
            }

            #[test]
            fn weighted_loss_invariant_under_weight_scaling(c in 0.1f64..10.0) {
                let labels = [[1.0, 0.0, 0.0, 1.0, 0.0, 0.0], [0.0, 1.0, 1.0, 0.0, 0.0, 1.0]];
                let preds = [[0.7, 0.2, 0.4, 0.6, 0.1, 0.3], [0.2, 0.8, 0.6, 0.3, 0.4, 0.7]];
                let base =
                    weighted_mean_log_loss(&labels, &preds, &DEFAULT_CLASS_WEIGHTS).unwrap();
                let scaled: ClassWeights =
                    std::array::from_fn(|i| DEFAULT_CLASS_WEIGHTS[i] * c);
                let got = weighted_mean_log_loss(&labels, &preds, &scaled).unwrap();
                prop_assert!((base - got).abs() < 1e-12);
            }

            #[test]
            fn scan_aggregate_idempotent_and_order_free(
                rows in proptest::collection::vec(
                    proptest::array::uniform6(0.0f64..1.0), 1..12),
            ) {
                let agg = scan_aggregate(&rows).unwrap();
                let again = scan_aggregate(&[agg]).unwrap();
                prop_assert_eq!(agg, again);
                let mut rev = rows.clone();
                rev.reverse();
                prop_assert_eq!(agg, scan_aggregate(&rev).unwrap());
            }
        }
    }
}
