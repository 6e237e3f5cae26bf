//! Confusion matrix and the classification scores derived from it.
//!
//! Degenerate cases (a zero denominator) score 0 and are flagged instead of
//! returning an error, so a report over an untrained model still completes.

use serde::{Deserialize, Serialize};

use crate::error::{LeafError, Result};

/// Counts indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
    class_names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self { counts: vec![vec![0; k]; k], class_names: (0..k).map(|i| format!("class{i}")).collect() }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if k == 0 || counts.iter().any(|row| row.len() != k) {
            return Err(LeafError::Shape(format!("confusion matrix must be square and non-empty, got {k} rows")));
        }
        let mut cm = Self::new(k);
        cm.counts = counts;
        Ok(cm)
    }

    pub fn with_class_names<S: AsRef<str>>(mut self, names: &[S]) -> Result<Self> {
        if names.len() != self.k() {
            return Err(LeafError::Shape(format!("{} class names for {} classes", names.len(), self.k())));
        }
        self.class_names = names.iter().map(|s| s.as_ref().to_string()).collect();
        Ok(self)
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let classes = self.k();
        for label in [truth, predicted] {
            if label >= classes {
                return Err(LeafError::Label { label, classes });
            }
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }

    /// Row sums: samples whose true class is `k`.
    pub fn true_counts(&self) -> Vec<u64> {
        self.counts.iter().map(|row| row.iter().sum()).collect()
    }

    /// Column sums: samples predicted as class `k`.
    pub fn predicted_counts(&self) -> Vec<u64> {
        (0..self.k()).map(|j| self.counts.iter().map(|row| row[j]).sum()).collect()
    }

    /// Relabels classes so that new class `i` is old class `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let k = self.k();
        let mut seen = vec![false; k];
        if perm.len() != k || perm.iter().any(|&p| p >= k || std::mem::replace(&mut seen[p], true)) {
            return Err(LeafError::Shape(format!("{perm:?} is not a permutation of 0..{k}")));
        }
        let counts = perm.iter().map(|&r| perm.iter().map(|&c| self.counts[r][c]).collect()).collect();
        let names: Vec<&String> = perm.iter().map(|&p| &self.class_names[p]).collect();
        Self::from_counts(counts)?.with_class_names(&names)
    }
}

/// Tallies `(truth, predicted)` pairs into a `k`-class matrix.
pub fn confusion(truth: &[usize], predicted: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(LeafError::Shape(format!(
            "{} true labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(k);
    for (&t, &p) in truth.iter().zip(predicted) {
        cm.add(t, p)?;
    }
    Ok(cm)
}

/// One-vs-rest scores for a single class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// A denominator was zero and the affected score was set to 0.
    pub degenerate: bool,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 { (0.0, true) } else { (num as f64 / den as f64, false) }
}

pub fn per_class_prf(cm: &ConfusionMatrix) -> Vec<ClassScores> {
    let scores = class_scores(cm);
    for (s, name) in scores.iter().zip(cm.class_names()) {
        if s.degenerate {
            log::warn!("class {name} has a zero denominator; degenerate scores set to 0");
        }
    }
    scores
}

fn class_scores(cm: &ConfusionMatrix) -> Vec<ClassScores> {
    let truth = cm.true_counts();
    let predicted = cm.predicted_counts();
    (0..cm.k())
        .map(|c| {
            let tp = cm.get(c, c);
            let (precision, dp) = ratio(tp, predicted[c]);
            let (recall, dr) = ratio(tp, truth[c]);
            // 2·TP / (2·TP + FP + FN), equal to the harmonic mean of p and r
            let (f1, df) = ratio(2 * tp, predicted[c] + truth[c]);
            ClassScores { precision, recall, f1, support: truth[c], degenerate: dp || dr || df }
        })
        .collect()
}

/// Support-weighted mean of the per-class F1 scores.
pub fn weighted_f1(cm: &ConfusionMatrix) -> f64 {
    let total = cm.total();
    if total == 0 {
        log::warn!("weighted F1 of an empty confusion matrix set to 0");
        return 0.0;
    }
    support_weighted_f1(&per_class_prf(cm), total)
}

fn support_weighted_f1(scores: &[ClassScores], total: u64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    scores.iter().map(|s| s.f1 * s.support as f64).sum::<f64>() / total as f64
}

pub fn accuracy(cm: &ConfusionMatrix) -> f64 {
    ratio(cm.trace(), cm.total()).0
}

/// Matthews correlation coefficient of a binary outcome table.
pub fn mcc_binary(tp: u64, tn: u64, fp: u64, fn_: u64) -> f64 {
    let num = tp as i128 * tn as i128 - fp as i128 * fn_ as i128;
    let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
    if factors.contains(&0) {
        log::warn!("binary MCC has a zero marginal; set to 0");
        return 0.0;
    }
    let den = factors.iter().map(|&f| f as u128).product::<u128>() as f64;
    num as f64 / den.sqrt()
}

/// Multiclass correlation coefficient
/// `(c·s − Σ pₖtₖ) / √((s² − Σ pₖ²)(s² − Σ tₖ²))`.
pub fn mcc_multiclass(cm: &ConfusionMatrix) -> f64 {
    let (mcc, degenerate) = mcc_flagged(cm);
    if degenerate {
        log::warn!("multiclass MCC has a degenerate denominator; set to 0");
    }
    mcc
}

fn mcc_flagged(cm: &ConfusionMatrix) -> (f64, bool) {
    let c = cm.trace() as i128;
    let s = cm.total() as i128;
    let p: Vec<i128> = cm.predicted_counts().into_iter().map(i128::from).collect();
    let t: Vec<i128> = cm.true_counts().into_iter().map(i128::from).collect();
    let num = c * s - p.iter().zip(&t).map(|(a, b)| a * b).sum::<i128>();
    let dp = s * s - p.iter().map(|a| a * a).sum::<i128>();
    let dt = s * s - t.iter().map(|a| a * a).sum::<i128>();
    if dp == 0 || dt == 0 {
        return (0.0, true);
    }
    (num as f64 / ((dp * dt) as f64).sqrt(), false)
}

/// Fraction to a percentage rounded to two decimals.
pub fn percent(x: f64) -> f64 {
    (x * 10_000.0).round() / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Serializable summary; all scores are percentages with two decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: u64,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub mcc: f64,
    pub per_class: Vec<ClassReport>,
    pub confusion: Vec<Vec<u64>>,
    pub warnings: Vec<String>,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        let scores = class_scores(cm);
        let mut warnings: Vec<String> = scores
            .iter()
            .zip(cm.class_names())
            .filter(|(s, _)| s.degenerate)
            .map(|(_, name)| format!("{name}: zero denominator, degenerate scores set to 0"))
            .collect();
        let (mcc, degenerate) = mcc_flagged(cm);
        if degenerate {
            warnings.push("mcc: degenerate denominator, set to 0".into());
        }
        Self {
            samples: cm.total(),
            accuracy: percent(accuracy(cm)),
            weighted_f1: percent(support_weighted_f1(&scores, cm.total())),
            mcc: percent(mcc),
            per_class: scores
                .iter()
                .zip(cm.class_names())
                .map(|(s, name)| ClassReport {
                    name: name.clone(),
                    precision: percent(s.precision),
                    recall: percent(s.recall),
                    f1: percent(s.f1),
                    support: s.support,
                })
                .collect(),
            confusion: cm.counts().to_vec(),
            warnings,
        }
    }
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "samples      {}", self.samples)?;
        writeln!(f, "accuracy     {:.2}%", self.accuracy)?;
        writeln!(f, "weighted F1  {:.2}%", self.weighted_f1)?;
        writeln!(f, "MCC          {:.2}%", self.mcc)?;
        let width = self.per_class.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
        writeln!(f, "{:width$}  precision  recall     f1  support", "class")?;
        for c in &self.per_class {
            writeln!(
                f,
                "{:width$}  {:>8.2}%  {:>6.2}%  {:>5.2}%  {:>7}",
                c.name, c.precision, c.recall, c.f1, c.support
            )?;
        }
        writeln!(f, "confusion (rows = true, columns = predicted)")?;
        for (name, row) in self.per_class.iter().zip(&self.confusion) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:>5}")).collect();
            writeln!(f, "{:width$} {}", name.name, cells.join(""))?;
        }
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_counts_and_errors() {
        let cm = confusion(&[0, 1, 2], &[2, 1, 0], 3).unwrap();
        assert_eq!(cm.counts(), &[vec![0, 0, 1], vec![0, 1, 0], vec![1, 0, 0]]);
        let empty = confusion(&[], &[], 3).unwrap();
        assert_eq!(empty.total(), 0);
        assert!(matches!(confusion(&[0, 3], &[0, 1], 3), Err(LeafError::Label { label: 3, classes: 3 })));
        assert!(matches!(confusion(&[0], &[0, 1], 3), Err(LeafError::Shape(_))));
    }

    #[test]
    fn perfect_predictions() {
        let cm = confusion(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap();
        assert_eq!(cm.counts(), &[vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 2]]);
        for s in per_class_prf(&cm) {
            assert_eq!((s.precision, s.recall, s.f1, s.degenerate), (1.0, 1.0, 1.0, false));
        }
        assert_eq!(weighted_f1(&cm), 1.0);
        assert_eq!(mcc_multiclass(&cm), 1.0);
    }

    #[test]
    fn empty_class_is_flagged() {
        let cm = ConfusionMatrix::from_counts(vec![vec![3, 1, 0], vec![2, 4, 0], vec![0, 0, 0]]).unwrap();
        let s = per_class_prf(&cm)[2];
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        assert!(s.degenerate);
        assert!(!MetricsReport::from_confusion(&cm).warnings.is_empty());
    }

    #[test]
    fn binary_mcc_cases() {
        assert_eq!(mcc_binary(5, 5, 0, 0), 1.0);
        assert_eq!(mcc_binary(0, 0, 5, 5), -1.0);
        assert_eq!(mcc_binary(1, 1, 1, 1), 0.0);
        assert_eq!(mcc_binary(0, 7, 0, 0), 0.0);
    }

    #[test]
    fn single_class_weighted_f1_is_that_class() {
        let cm = ConfusionMatrix::from_counts(vec![vec![0, 0], vec![1, 3]]).unwrap();
        assert!((weighted_f1(&cm) - per_class_prf(&cm)[1].f1).abs() < 1e-15);
    }

    #[test]
    fn percent_rounding() {
        assert_eq!(percent(184.0 / 195.0), 94.36);
        assert_eq!(percent(1.0), 100.0);
    }
}
