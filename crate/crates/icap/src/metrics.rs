//! Classification metrics: confusion counts, accuracy / precision / recall /
//! sensitivity / specificity / F1, and ROC curves with trapezoidal AUC.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction and label lists differ in length: {pred} vs {truth}")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("metrics require at least one sample")]
    Empty,
    #[error("ROC requires both classes present in the labels")]
    SingleClass,
    #[error("scores and labels differ in length: {scores} vs {labels}")]
    ScoreLengthMismatch { scores: usize, labels: usize },
}

/// One-vs-rest counts for a single class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub true_pos: u64,
    pub true_neg: u64,
    pub false_pos: u64,
    pub false_neg: u64,
}

/// Full confusion matrix plus the derived one-vs-rest counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub n_classes: usize,
    /// `matrix[true][pred]`.
    pub matrix: Vec<Vec<u64>>,
    pub per_class: Vec<ClassCounts>,
    pub total: u64,
}

/// Build confusion counts from predicted and true labels.
pub fn confusion_counts(
    pred: &[usize],
    truth: &[usize],
    n_classes: usize,
) -> Result<ConfusionCounts, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch { pred: pred.len(), truth: truth.len() });
    }
    let mut matrix = vec![vec![0u64; n_classes]; n_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= n_classes {
            return Err(MetricsError::LabelOutOfRange { label: p, n_classes });
        }
        if t >= n_classes {
            return Err(MetricsError::LabelOutOfRange { label: t, n_classes });
        }
        matrix[t][p] += 1;
    }
    let total = pred.len() as u64;
    let per_class = (0..n_classes)
        .map(|c| {
            let tp = matrix[c][c];
            let row: u64 = matrix[c].iter().sum();
            let col: u64 = matrix.iter().map(|r| r[c]).sum();
            ClassCounts {
                true_pos: tp,
                false_neg: row - tp,
                false_pos: col - tp,
                true_neg: total - row - col + tp,
            }
        })
        .collect();
    Ok(ConfusionCounts { n_classes, matrix, per_class, total })
}

/// Per-class metric values, all in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
}

/// A ROC curve: threshold-sweep points from (0,0) to (1,1) plus the
/// trapezoidal area under it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// (false positive rate, true positive rate) pairs.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Fraction of the confusion-matrix diagonal: correct / total.
    pub accuracy: f64,
    /// Macro averages over classes.
    pub precision: f64,
    pub recall: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: Vec<Vec<u64>>,
    /// One-vs-rest ROC per class; `None` when the class is absent from the
    /// labels and its curve is undefined.
    pub roc: Vec<Option<RocCurve>>,
    /// Macro average of the defined per-class AUCs.
    pub auc: Option<f64>,
    /// Metrics whose denominator was zero and were reported as 0.
    pub zero_division: Vec<String>,
}

fn ratio(num: u64, den: u64, name: String, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(name);
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Derive the metric suite from confusion counts. ROC fields start empty;
/// attach curves with [`MetricsReport::attach_roc`].
pub fn compute_metrics(counts: &ConfusionCounts) -> Result<MetricsReport, MetricsError> {
    if counts.total == 0 {
        return Err(MetricsError::Empty);
    }
    let mut zero_division = Vec::new();
    let mut per_class = Vec::with_capacity(counts.n_classes);
    for (c, k) in counts.per_class.iter().enumerate() {
        let precision = ratio(
            k.true_pos,
            k.true_pos + k.false_pos,
            format!("class{c}.precision"),
            &mut zero_division,
        );
        let recall = ratio(
            k.true_pos,
            k.true_pos + k.false_neg,
            format!("class{c}.recall"),
            &mut zero_division,
        );
        let specificity = ratio(
            k.true_neg,
            k.true_neg + k.false_pos,
            format!("class{c}.specificity"),
            &mut zero_division,
        );
        let f1 = if precision + recall == 0.0 {
            zero_division.push(format!("class{c}.f1"));
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics {
            accuracy: (k.true_pos + k.true_neg) as f64 / counts.total as f64,
            precision,
            recall,
            sensitivity: recall,
            specificity,
            f1,
        });
    }
    let n = counts.n_classes as f64;
    let macro_of = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / n;
    let diagonal: u64 = (0..counts.n_classes).map(|c| counts.matrix[c][c]).sum();
    Ok(MetricsReport {
        accuracy: diagonal as f64 / counts.total as f64,
        precision: macro_of(|m| m.precision),
        recall: macro_of(|m| m.recall),
        sensitivity: macro_of(|m| m.sensitivity),
        specificity: macro_of(|m| m.specificity),
        f1: macro_of(|m| m.f1),
        per_class,
        confusion: counts.matrix.clone(),
        roc: Vec::new(),
        auc: None,
        zero_division,
    })
}

impl MetricsReport {
    /// Attach per-class ROC curves and set the macro AUC over defined classes.
    pub fn attach_roc(&mut self, roc: Vec<Option<RocCurve>>) {
        let defined: Vec<f64> = roc.iter().flatten().map(|c| c.auc).collect();
        self.auc = if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        };
        self.roc = roc;
    }
}

/// ROC curve and AUC for binary labels via a threshold sweep over the sorted
/// unique scores, ties grouped, trapezoidal area.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<RocCurve, MetricsError> {
    if scores.len() != positive.len() {
        return Err(MetricsError::ScoreLengthMismatch {
            scores: scores.len(),
            labels: positive.len(),
        });
    }
    let pos = positive.iter().filter(|&&p| p).count();
    let neg = positive.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut idx = 0;
    while idx < order.len() {
        let threshold = scores[order[idx]];
        // consume the whole tie group before emitting a point
        while idx < order.len() && scores[order[idx]] == threshold {
            if positive[order[idx]] {
                tp += 1;
            } else {
                fp += 1;
            }
            idx += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    let mut auc = 0.0;
    for w in points.windows(2) {
        let (x1, y1) = w[0];
        let (x2, y2) = w[1];
        auc += (x2 - x1) * (y1 + y2) / 2.0;
    }
    Ok(RocCurve { points, auc })
}

/// One-vs-rest ROC per class, scoring each class by its probability column
/// of `probs: [samples, n]`. Absent classes get `None`.
pub fn one_vs_rest_roc(
    probs: &Tensor,
    truth: &[usize],
) -> Result<Vec<Option<RocCurve>>, MetricsError> {
    let shape = probs.shape();
    if shape.len() != 2 || shape[0] != truth.len() {
        return Err(MetricsError::ScoreLengthMismatch {
            scores: if shape.is_empty() { 0 } else { shape[0] },
            labels: truth.len(),
        });
    }
    let (samples, n) = (shape[0], shape[1]);
    for &t in truth {
        if t >= n {
            return Err(MetricsError::LabelOutOfRange { label: t, n_classes: n });
        }
    }
    let mut out = Vec::with_capacity(n);
    for c in 0..n {
        let scores: Vec<f64> = (0..samples).map(|s| probs.data()[s * n + c]).collect();
        let labels: Vec<bool> = truth.iter().map(|&t| t == c).collect();
        match roc_auc(&scores, &labels) {
            Ok(curve) => out.push(Some(curve)),
            Err(MetricsError::SingleClass) => out.push(None),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_predictions_are_diagonal() {
        let labels = [0usize, 1, 2, 1, 0];
        let counts = confusion_counts(&labels, &labels, 3).unwrap();
        for c in 0..3 {
            for p in 0..3 {
                if c != p {
                    assert_eq!(counts.matrix[c][p], 0);
                }
            }
            assert_eq!(counts.per_class[c].false_pos, 0);
            assert_eq!(counts.per_class[c].false_neg, 0);
        }
        let report = compute_metrics(&counts).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.precision, 1.0);
        assert_eq!(report.f1, 1.0);
    }

    #[test]
    fn empty_input_counts_are_zero() {
        let counts = confusion_counts(&[], &[], 3).unwrap();
        assert_eq!(counts.total, 0);
        assert!(counts.matrix.iter().flatten().all(|&v| v == 0));
        assert!(matches!(compute_metrics(&counts), Err(MetricsError::Empty)));
    }

    #[test]
    fn counts_match_direct_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for &n in &[2usize, 5, 8] {
            let pred: Vec<usize> = (0..1000).map(|_| rng.gen_range(0..n)).collect();
            let truth: Vec<usize> = (0..1000).map(|_| rng.gen_range(0..n)).collect();
            let counts = confusion_counts(&pred, &truth, n).unwrap();
            for c in 0..n {
                let tp = pred.iter().zip(&truth).filter(|&(&p, &t)| p == c && t == c).count();
                let fp = pred.iter().zip(&truth).filter(|&(&p, &t)| p == c && t != c).count();
                let fn_ = pred.iter().zip(&truth).filter(|&(&p, &t)| p != c && t == c).count();
                let tn = pred.iter().zip(&truth).filter(|&(&p, &t)| p != c && t != c).count();
                assert_eq!(counts.per_class[c].true_pos, tp as u64);
                assert_eq!(counts.per_class[c].false_pos, fp as u64);
                assert_eq!(counts.per_class[c].false_neg, fn_ as u64);
                assert_eq!(counts.per_class[c].true_neg, tn as u64);
                assert_eq!(
                    counts.per_class[c].true_pos
                        + counts.per_class[c].true_neg
                        + counts.per_class[c].false_pos
                        + counts.per_class[c].false_neg,
                    1000
                );
                let row_sum: u64 = counts.matrix[c].iter().sum();
                assert_eq!(row_sum, truth.iter().filter(|&&t| t == c).count() as u64);
            }
        }
    }

    #[test]
    fn counts_validate_inputs() {
        assert!(matches!(
            confusion_counts(&[0, 1], &[0], 2),
            Err(MetricsError::LengthMismatch { .. })
        ));
        assert!(matches!(
            confusion_counts(&[0, 2], &[0, 1], 2),
            Err(MetricsError::LabelOutOfRange { label: 2, .. })
        ));
    }

    #[test]
    fn metrics_worked_example() {
        // binary: class 0 has TP=50, TN=40, FP=5, FN=5
        let mut matrix = vec![vec![0u64; 2]; 2];
        matrix[0][0] = 50;
        matrix[0][1] = 5;
        matrix[1][0] = 5;
        matrix[1][1] = 40;
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        for (t, row) in matrix.iter().enumerate() {
            for (p, &count) in row.iter().enumerate() {
                for _ in 0..count {
                    pred.push(p);
                    truth.push(t);
                }
            }
        }
        let counts = confusion_counts(&pred, &truth, 2).unwrap();
        let report = compute_metrics(&counts).unwrap();
        let c0 = &report.per_class[0];
        assert!((c0.accuracy - 0.90).abs() < 1e-12);
        assert!((c0.precision - 50.0 / 55.0).abs() < 1e-12);
        assert!((c0.recall - 50.0 / 55.0).abs() < 1e-12);
        assert!((c0.specificity - 40.0 / 45.0).abs() < 1e-12);
        assert!((report.accuracy - 0.90).abs() < 1e-12);
    }

    #[test]
    fn recall_always_equals_sensitivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let n = rng.gen_range(2..6);
            let pred: Vec<usize> = (0..200).map(|_| rng.gen_range(0..n)).collect();
            let truth: Vec<usize> = (0..200).map(|_| rng.gen_range(0..n)).collect();
            let report =
                compute_metrics(&confusion_counts(&pred, &truth, n).unwrap()).unwrap();
            assert_eq!(report.recall, report.sensitivity);
            for c in &report.per_class {
                assert_eq!(c.recall, c.sensitivity);
            }
        }
    }

    #[test]
    fn macro_values_are_means_of_per_class() {
        let pred = [0usize, 0, 1, 2, 2, 1, 0, 2];
        let truth = [0usize, 1, 1, 2, 0, 1, 0, 2];
        let report = compute_metrics(&confusion_counts(&pred, &truth, 3).unwrap()).unwrap();
        let n = report.per_class.len() as f64;
        let mean = |f: fn(&ClassMetrics) -> f64| {
            report.per_class.iter().map(f).sum::<f64>() / n
        };
        assert!((report.precision - mean(|m| m.precision)).abs() < 1e-15);
        assert!((report.recall - mean(|m| m.recall)).abs() < 1e-15);
        assert!((report.specificity - mean(|m| m.specificity)).abs() < 1e-15);
    }

    #[test]
    fn accuracy_is_diagonal_mass() {
        let pred = [0usize, 1, 1, 2, 0, 1];
        let truth = [0usize, 1, 2, 2, 1, 1];
        let counts = confusion_counts(&pred, &truth, 3).unwrap();
        let report = compute_metrics(&counts).unwrap();
        let diag: u64 = (0..3).map(|c| counts.matrix[c][c]).sum();
        assert_eq!(report.accuracy, diag as f64 / counts.total as f64);
    }

    #[test]
    fn zero_division_flagged() {
        // class 1 never predicted and never true positive
        let pred = [0usize, 0, 0];
        let truth = [0usize, 0, 1];
        let report = compute_metrics(&confusion_counts(&pred, &truth, 2).unwrap()).unwrap();
        assert!(report.zero_division.iter().any(|f| f == "class1.precision"));
        assert_eq!(report.per_class[1].precision, 0.0);
    }

    #[test]
    fn roc_perfectly_separated() {
        let scores = [0.9, 0.8, 0.7, 0.2, 0.1];
        let labels = [true, true, true, false, false];
        let curve = roc_auc(&scores, &labels).unwrap();
        assert_eq!(curve.auc, 1.0);
        assert_eq!(*curve.points.first().unwrap(), (0.0, 0.0));
        assert_eq!(*curve.points.last().unwrap(), (1.0, 1.0));
    }

    #[test]
    fn roc_all_tied_scores() {
        let scores = [0.5; 6];
        let labels = [true, false, true, false, true, false];
        let curve = roc_auc(&scores, &labels).unwrap();
        assert_eq!(curve.points, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(curve.auc, 0.5);
    }

    #[test]
    fn roc_requires_both_classes() {
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[true, true]),
            Err(MetricsError::SingleClass)
        ));
    }

    #[test]
    fn roc_points_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let scores: Vec<f64> = (0..500).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels: Vec<bool> = (0..500).map(|_| rng.gen_bool(0.4)).collect();
        let curve = roc_auc(&scores, &labels).unwrap();
        for w in curve.points.windows(2) {
            assert!(w[1].0 >= w[0].0);
            assert!(w[1].1 >= w[0].1);
        }
        assert_eq!(*curve.points.first().unwrap(), (0.0, 0.0));
        assert_eq!(*curve.points.last().unwrap(), (1.0, 1.0));
    }

    #[test]
    fn one_vs_rest_perfect_and_missing_class() {
        // perfect one-hot probabilities
        let truth = [0usize, 1, 2, 0, 1, 2];
        let mut probs = Tensor::zeros(vec![6, 3]);
        for (s, &t) in truth.iter().enumerate() {
            probs.data_mut()[s * 3 + t] = 1.0;
        }
        let rocs = one_vs_rest_roc(&probs, &truth).unwrap();
        for curve in &rocs {
            assert_eq!(curve.as_ref().unwrap().auc, 1.0);
        }

        // class 2 absent
        let truth = [0usize, 1, 0, 1];
        let mut probs = Tensor::zeros(vec![4, 3]);
        for (s, &t) in truth.iter().enumerate() {
            probs.data_mut()[s * 3 + t] = 1.0;
        }
        let rocs = one_vs_rest_roc(&probs, &truth).unwrap();
        assert!(rocs[0].is_some());
        assert!(rocs[1].is_some());
        assert!(rocs[2].is_none());
    }

    #[test]
    fn one_vs_rest_matches_binary_when_two_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let truth: Vec<usize> = (0..100).map(|_| rng.gen_range(0..2)).collect();
        let mut probs = Tensor::zeros(vec![100, 2]);
        for s in 0..100 {
            let p1: f64 = rng.gen_range(0.0..1.0);
            probs.data_mut()[s * 2] = 1.0 - p1;
            probs.data_mut()[s * 2 + 1] = p1;
        }
        let rocs = one_vs_rest_roc(&probs, &truth).unwrap();
        let scores: Vec<f64> = (0..100).map(|s| probs.data()[s * 2 + 1]).collect();
        let labels: Vec<bool> = truth.iter().map(|&t| t == 1).collect();
        let direct = roc_auc(&scores, &labels).unwrap();
        assert!((rocs[1].as_ref().unwrap().auc - direct.auc).abs() < 1e-15);
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let scores: Vec<f64> = (0..300).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels: Vec<bool> = (0..300).map(|_| rng.gen_bool(0.5)).collect();
        let base = roc_auc(&scores, &labels).unwrap();
        let monotone: Vec<f64> = scores.iter().map(|&s| (0.8 * s).exp() + 3.0).collect();
        let transformed = roc_auc(&monotone, &labels).unwrap();
        assert!((base.auc - transformed.auc).abs() < 1e-12);
    }

    #[test]
    fn shuffled_labels_near_half_auc() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let scores: Vec<f64> = (0..10_000).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels: Vec<bool> = (0..10_000).map(|_| rng.gen_bool(0.5)).collect();
        let curve = roc_auc(&scores, &labels).unwrap();
        assert!((0.45..=0.55).contains(&curve.auc), "auc {}", curve.auc);
    }
}
