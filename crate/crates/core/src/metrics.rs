//! Accuracy and quadratic weighted kappa.

use crate::error::{Error, Result};

/// `counts[i][j]` = number of samples with true class `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_predictions(preds: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        check_lengths(preds, labels)?;
        let mut m = Self::new(classes);
        for (&p, &t) in preds.iter().zip(labels) {
            m.record(t, p)?;
        }
        Ok(m)
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(Error::Validation(format!(
                "class pair ({truth}, {pred}) outside [0, {})",
                self.classes
            )));
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.chunks(self.classes).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.classes)
            .map(|j| (0..self.classes).map(|i| self.get(i, j)).sum())
            .collect()
    }

    /// Quadratic weighted kappa of this matrix.
    pub fn qwk(&self) -> f64 {
        let c = self.classes;
        let n = self.total() as f64;
        if c < 2 || n == 0.0 {
            return 0.0;
        }
        let rows = self.row_sums();
        let cols = self.col_sums();
        let scale = ((c - 1) * (c - 1)) as f64;
        let mut observed = 0.0;
        let mut expected = 0.0;
        for i in 0..c {
            for j in 0..c {
                let w = ((i as f64 - j as f64).powi(2)) / scale;
                observed += w * self.get(i, j) as f64;
                expected += w * rows[i] as f64 * cols[j] as f64 / n;
            }
        }
        if expected == 0.0 {
            return 0.0;
        }
        1.0 - observed / expected
    }
}

fn check_lengths(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Validation("metrics need at least one sample".into()));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let correct = preds.iter().zip(labels).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Quadratic weighted kappa with weights `(i-j)²/(c-1)²`. Returns 0 when
/// the expected weighted disagreement is 0.
pub fn qwk(preds: &[usize], labels: &[usize], classes: usize) -> Result<f64> {
    Ok(ConfusionMatrix::from_predictions(preds, labels, classes)?.qwk())
}
