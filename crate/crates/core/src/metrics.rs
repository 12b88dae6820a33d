//! ROC analysis and thresholded classification rates.

use thiserror::Error;

use crate::tensor::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{scores} scores but {labels} labels")]
    Length { scores: usize, labels: usize },
    #[error("ROC analysis needs both classes (positives: {positives}, negatives: {negatives})")]
    SingleClass { positives: usize, negatives: usize },
    #[error("score {0} is not finite")]
    NonFinite(Scalar),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// Distinct scores in descending order; point `i + 1` classifies every
    /// score `>= thresholds[i]` as positive.
    pub thresholds: Vec<Scalar>,
    /// `(fpr, tpr)` pairs from (0,0) to (1,1).
    pub points: Vec<(Scalar, Scalar)>,
    pub auc: Scalar,
}

impl RocCurve {
    /// `threshold,fpr,tpr` rows (the origin row has threshold `inf`), then a
    /// comment line carrying the AUC.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for (i, (fpr, tpr)) in self.points.iter().enumerate() {
            let t = if i == 0 { Scalar::INFINITY } else { self.thresholds[i - 1] };
            out.push_str(&format!("{t},{fpr},{tpr}\n"));
        }
        out.push_str(&format!("# auc,{}\n", self.auc));
        out
    }
}

fn check(scores: &[Scalar], labels: &[u8]) -> Result<(usize, usize), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::Length {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(&s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(MetricsError::NonFinite(s));
    }
    let positives = labels.iter().filter(|&&l| l != 0).count();
    Ok((positives, labels.len() - positives))
}

/// ROC curve over the distinct score thresholds. Equal scores form a single
/// step, so the trapezoidal area counts ties as one half. The area is
/// accumulated as an exact integer before the final division.
pub fn roc_auc(scores: &[Scalar], labels: &[u8]) -> Result<RocCurve, MetricsError> {
    let (p, n) = check(scores, labels)?;
    if p == 0 || n == 0 {
        return Err(MetricsError::SingleClass {
            positives: p,
            negatives: n,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut thresholds = Vec::new();
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    // Twice the area in units of 1/(P·N).
    let mut area2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += (fp - fp0) as u128 * (tp + tp0) as u128;
        thresholds.push(s);
        points.push((fp as Scalar / n as Scalar, tp as Scalar / p as Scalar));
    }
    Ok(RocCurve {
        thresholds,
        points,
        auc: area2 as Scalar / (2 * p as u128 * n as u128) as Scalar,
    })
}

/// `(concordant + ties/2) / (P·N)` by explicit enumeration of all pairs.
pub fn pair_counting_auc(scores: &[Scalar], labels: &[u8]) -> Result<Scalar, MetricsError> {
    let (p, n) = check(scores, labels)?;
    if p == 0 || n == 0 {
        return Err(MetricsError::SingleClass {
            positives: p,
            negatives: n,
        });
    }
    let mut twice: u128 = 0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] == 0 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            twice += if si > sj {
                2
            } else if si == sj {
                1
            } else {
                0
            };
        }
    }
    Ok(twice as Scalar / (2 * p as u128 * n as u128) as Scalar)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdMetrics {
    pub accuracy: Scalar,
    /// `TP / (TP + FN)`; NaN without positives.
    pub sensitivity: Scalar,
    /// `TN / (TN + FP)`; NaN without negatives.
    pub specificity: Scalar,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

/// Confusion-matrix rates with `score >= threshold` predicted positive.
pub fn threshold_metrics(scores: &[Scalar], labels: &[u8], threshold: Scalar) -> Result<ThresholdMetrics, MetricsError> {
    check(scores, labels)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| a as Scalar / b as Scalar;
    Ok(ThresholdMetrics {
        accuracy: ratio(tp + tn, scores.len()),
        sensitivity: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
        tp,
        fp,
        tn,
        fn_,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_separation() {
        let roc = roc_auc(&[0.9, 0.8, 0.3, 0.1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(roc.auc, 1.0);
        assert_eq!(roc.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(roc.points.last(), Some(&(1.0, 1.0)));
    }

    #[test]
    fn all_tied_is_one_half() {
        let roc = roc_auc(&[0.5; 6], &[1, 0, 0, 1, 0, 0]).unwrap();
        assert_eq!(roc.auc, 0.5);
        assert_eq!(roc.points, vec![(0.0, 0.0), (1.0, 1.0)]);
    }

    #[test]
    fn inverted_scores() {
        assert_eq!(roc_auc(&[0.1, 0.9], &[1, 0]).unwrap().auc, 0.0);
    }

    #[test]
    fn single_class_rejected() {
        assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(MetricsError::SingleClass { .. })));
        assert!(matches!(roc_auc(&[0.1], &[1, 0]), Err(MetricsError::Length { .. })));
    }

    #[test]
    fn threshold_hand_cases() {
        let m = threshold_metrics(&[0.9, 0.1], &[1, 0], 0.5).unwrap();
        assert_eq!((m.accuracy, m.sensitivity, m.specificity), (1.0, 1.0, 1.0));

        let labels: Vec<u8> = (0..10).map(|i| u8::from(i < 2)).collect();
        let m = threshold_metrics(&[0.0; 10], &labels, 0.5).unwrap();
        assert_eq!((m.accuracy, m.sensitivity, m.specificity), (0.8, 0.0, 1.0));

        // TP=3, FN=2, FP=1, TN=4
        let scores = [0.9, 0.9, 0.9, 0.1, 0.1, 0.9, 0.1, 0.1, 0.1, 0.1];
        let labels = [1, 1, 1, 1, 1, 0, 0, 0, 0, 0];
        let m = threshold_metrics(&scores, &labels, 0.5).unwrap();
        assert_eq!((m.tp, m.fn_, m.fp, m.tn), (3, 2, 1, 4));
        assert!((m.accuracy - 0.7).abs() < 1e-15);
        assert!((m.sensitivity - 0.6).abs() < 1e-15);
        assert!((m.specificity - 0.8).abs() < 1e-15);
    }

    #[test]
    fn csv_rows() {
        let roc = roc_auc(&[0.9, 0.1], &[1, 0]).unwrap();
        assert_eq!(roc.to_csv(), "threshold,fpr,tpr\ninf,0,0\n0.9,0,1\n0.1,1,1\n# auc,1\n");
    }
}
