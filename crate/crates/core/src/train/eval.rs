use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: usize,
    pub correct: usize,
    /// Overall accuracy in `[0, 1]`.
    pub oa: f64,
    /// `None` for classes absent from the set.
    pub per_class: Vec<Option<f64>>,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn from_predictions(truth: &[usize], pred: &[usize], num_classes: usize) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::invalid("cannot evaluate an empty sample set"));
        }
        if truth.len() != pred.len() {
            return Err(Error::dim("predictions and labels differ in length"));
        }
        let mut confusion = vec![vec![0; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= num_classes || p >= num_classes {
                return Err(Error::invalid(format!("class out of range: {t} / {p}")));
            }
            confusion[t][p] += 1;
        }
        let correct = (0..num_classes).map(|k| confusion[k][k]).sum();
        let per_class = confusion
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[k] as f64 / n as f64)
            })
            .collect();
        Ok(EvalReport {
            total: truth.len(),
            correct,
            oa: correct as f64 / truth.len() as f64,
            per_class,
            confusion,
        })
    }
}

/// Row-wise argmax with ties to the lowest index.
pub fn argmax_rows(logits: &[f64], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
