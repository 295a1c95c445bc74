//! Confusion matrix, per-class precision/recall/F1 and macro-F1.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};

/// `K×K` counts with rows indexed by the true class and columns by the
/// predicted class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        let k = self.classes;
        if truth >= k || pred >= k {
            return Err(Error::Input(format!(
                "label out of range for {k} classes (true {truth}, predicted {pred})"
            )));
        }
        self.counts[truth * k + pred] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn true_positives(&self, k: usize) -> u64 {
        self.get(k, k)
    }

    /// Predicted `k` but truly something else.
    pub fn false_positives(&self, k: usize) -> u64 {
        (0..self.classes).filter(|&t| t != k).map(|t| self.get(t, k)).sum()
    }

    /// Truly `k` but predicted something else.
    pub fn false_negatives(&self, k: usize) -> u64 {
        (0..self.classes).filter(|&p| p != k).map(|p| self.get(k, p)).sum()
    }

    pub fn support(&self, k: usize) -> u64 {
        (0..self.classes).map(|p| self.get(k, p)).sum()
    }
}

pub fn confusion(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Input(format!(
            "label lists differ in length ({} true, {} predicted)",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (i, (&t, &p)) in y_true.iter().zip(y_pred).enumerate() {
        cm.add(t, p).map_err(|e| Error::Input(format!("record {i}: {e}")))?;
    }
    Ok(cm)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `2PR / (P + R)`, zero when `P + R = 0`.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub total: u64,
    pub confusion: Vec<Vec<u64>>,
    pub zero_support_included: bool,
}

/// Which classes enter the macro mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ZeroSupport {
    /// Every class counts, including ones absent from the truth labels.
    #[default]
    Include,
    Exclude,
}

pub fn macro_f1(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    macro_f1_with(cm, ZeroSupport::Include)
}

pub fn macro_f1_with(cm: &ConfusionMatrix, policy: ZeroSupport) -> Result<MetricsReport> {
    let k = cm.classes();
    if k == 0 {
        return Err(Error::Usage("metrics need at least one class".into()));
    }
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = cm.true_positives(c);
            let precision = ratio(tp, tp + cm.false_positives(c));
            let recall = ratio(tp, tp + cm.false_negatives(c));
            ClassMetrics {
                precision,
                recall,
                f1: f1_score(precision, recall),
                support: cm.support(c),
            }
        })
        .collect();

    let counted: Vec<&ClassMetrics> = per_class
        .iter()
        .filter(|m| policy == ZeroSupport::Include || m.support > 0)
        .collect();
    let macro_f1 = if counted.is_empty() {
        0.0
    } else {
        counted.iter().map(|m| m.f1).sum::<f64>() / counted.len() as f64
    };

    let total = cm.total();
    let correct: u64 = (0..k).map(|c| cm.true_positives(c)).sum();
    let accuracy = ratio(correct, total);
    let weighted_f1 = if total == 0 {
        0.0
    } else {
        per_class.iter().map(|m| m.f1 * m.support as f64).sum::<f64>() / total as f64
    };

    Ok(MetricsReport {
        per_class,
        macro_f1,
        // Single-label: micro precision, recall and F1 all equal accuracy.
        micro_f1: accuracy,
        weighted_f1,
        accuracy,
        total,
        confusion: cm.rows(),
        zero_support_included: policy == ZeroSupport::Include,
    })
}

/// Convenience: confusion then macro-F1.
pub fn evaluate(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<MetricsReport> {
    macro_f1(&confusion(y_true, y_pred, classes)?)
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }

    /// Aligned plain-text table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:>8} {:>10} {:>10} {:>10} {:>8}", "class", "precision", "recall", "f1", "support");
        for (k, m) in self.per_class.iter().enumerate() {
            let _ = writeln!(
                out,
                "{:>8} {:>10.4} {:>10.4} {:>10.4} {:>8}",
                k, m.precision, m.recall, m.f1, m.support
            );
        }
        let _ = writeln!(out, "{:>8} {:>10} {:>10} {:>10.4} {:>8}", "macro", "", "", self.macro_f1, self.total);
        let _ = writeln!(out, "{:>8} {:>10} {:>10} {:>10.4} {:>8}", "weighted", "", "", self.weighted_f1, self.total);
        let _ = writeln!(out, "{:>8} {:>10} {:>10} {:>10.4} {:>8}", "accuracy", "", "", self.accuracy, self.total);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_counted_three_class_case() {
        let cm = confusion(&[0, 0, 1, 1, 2, 2], &[0, 1, 1, 1, 2, 0], 3).unwrap();
        assert_eq!(cm.rows(), vec![vec![1, 1, 0], vec![0, 2, 0], vec![1, 0, 1]]);
        let r = macro_f1(&cm).unwrap();
        let f1: Vec<f64> = r.per_class.iter().map(|m| m.f1).collect();
        assert!((f1[0] - 0.5).abs() < 1e-12);
        assert!((f1[1] - 0.8).abs() < 1e-12);
        assert!((f1[2] - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.macro_f1 - (0.5 + 0.8 + 2.0 / 3.0) / 3.0).abs() < 1e-12);
        assert!((r.macro_f1 - 0.6556).abs() < 1e-4);
    }

    #[test]
    fn trivial_cases() {
        let perfect = evaluate(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(perfect.macro_f1, 1.0);
        assert_eq!(perfect.confusion, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);

        let empty = confusion(&[], &[], 3).unwrap();
        assert_eq!(empty.total(), 0);
        assert_eq!(macro_f1(&empty).unwrap().macro_f1, 0.0);

        assert_eq!(evaluate(&[0, 1, 0], &[1, 0, 1], 2).unwrap().macro_f1, 0.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(confusion(&[0], &[], 2), Err(Error::Input(_))));
        assert!(matches!(confusion(&[2], &[0], 2), Err(Error::Input(_))));
        assert!(matches!(macro_f1(&ConfusionMatrix::new(0)), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_support_policy() {
        // Class 2 never occurs and is never predicted.
        let cm = confusion(&[0, 1], &[0, 1], 3).unwrap();
        assert!((macro_f1(&cm).unwrap().macro_f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(macro_f1_with(&cm, ZeroSupport::Exclude).unwrap().macro_f1, 1.0);
    }

    #[test]
    fn report_formats() {
        let r = evaluate(&[0, 1], &[0, 0], 2).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["per_class"][0]["support"], 1);
        let table = r.table();
        assert_eq!(table.lines().count(), 6);
        let widths: Vec<usize> = table.lines().map(str::len).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]));
    }

    fn labels() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
        (1usize..=4).prop_flat_map(|k| (Just(k), prop::collection::vec((0..k, 0..k), 0..=20)))
    }

    proptest! {
        #[test]
        fn bounded_and_permutation_invariant((k, pairs) in labels(), seed in any::<u64>()) {
            let (t, p): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let base = evaluate(&t, &p, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&base.macro_f1));

            let mut perm: Vec<usize> = (0..k).collect();
            crate::rng::Rng::new(seed).shuffle(&mut perm);
            let t2: Vec<usize> = t.iter().map(|&x| perm[x]).collect();
            let p2: Vec<usize> = p.iter().map(|&x| perm[x]).collect();
            let moved = evaluate(&t2, &p2, k).unwrap();
            // Summation order changes with the permutation.
            prop_assert!((base.macro_f1 - moved.macro_f1).abs() < 1e-15);
        }
    }
}
