use log::warn;
use serde::{Deserialize, Serialize};

use super::svm::{svm_predict, SvmModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEval {
    /// Mean of the per-class accuracies over classes present in the test set.
    pub accuracy: f64,
    /// `None` for classes without test samples.
    pub per_class: Vec<Option<f64>>,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn confusion_matrix(truth: &[usize], pred: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    if truth.len() != pred.len() {
        return Err(Error::dims(truth.len(), pred.len()));
    }
    let mut m = vec![vec![0; classes]; classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= classes || p >= classes {
            return Err(Error::invalid(format!("label pair ({t}, {p}) out of range for {classes} classes")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Fraction of correct predictions over all samples.
pub fn overall_accuracy(truth: &[usize], pred: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    truth.iter().zip(pred).filter(|(t, p)| t == p).count() as f64 / truth.len() as f64
}

impl SceneEval {
    pub fn from_predictions(truth: &[usize], pred: &[usize], classes: usize) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::invalid("empty test set"));
        }
        let confusion = confusion_matrix(truth, pred, classes)?;
        let per_class: Vec<Option<f64>> = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: usize = row.iter().sum();
                if n == 0 {
                    warn!("class {c} has no test samples; excluded from the average");
                    None
                } else {
                    Some(row[c] as f64 / n as f64)
                }
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let accuracy = present.iter().sum::<f64>() / present.len() as f64;
        Ok(Self { accuracy, per_class, confusion })
    }
}

/// Average class accuracy of `model` on labeled test vectors.
pub fn evaluate_scene<P: AsRef<[f32]>>(model: &SvmModel, xs: &[P], y: &[usize]) -> Result<SceneEval> {
    let pred = xs.iter().map(|x| svm_predict(model, x.as_ref())).collect::<Result<Vec<_>>>()?;
    SceneEval::from_predictions(y, &pred, model.classes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect() {
        let e = SceneEval::from_predictions(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(e.accuracy, 1.0);
    }

    #[test]
    fn macro_average_ignores_class_sizes() {
        let truth = [0, 0, 0, 0, 0, 0, 0, 0, 0, 1];
        let pred = [0, 0, 0, 0, 0, 0, 0, 0, 0, 0];
        let e = SceneEval::from_predictions(&truth, &pred, 2).unwrap();
        assert_eq!(e.accuracy, 0.5);
        assert_eq!(overall_accuracy(&truth, &pred), 0.9);
    }

    #[test]
    fn hand_confusion_matrix() {
        let truth = [0, 0, 1, 1, 1, 2];
        let pred = [0, 1, 1, 1, 2, 0];
        let e = SceneEval::from_predictions(&truth, &pred, 3).unwrap();
        assert_eq!(e.confusion, vec![vec![1, 1, 0], vec![0, 2, 1], vec![1, 0, 0]]);
        assert!((e.accuracy - (0.5 + 2.0 / 3.0 + 0.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn absent_class_is_excluded() {
        let e = SceneEval::from_predictions(&[0, 1], &[0, 0], 3).unwrap();
        assert_eq!(e.per_class, vec![Some(1.0), Some(0.0), None]);
        assert_eq!(e.accuracy, 0.5);
    }

    #[test]
    fn empty_test_set() {
        assert!(SceneEval::from_predictions(&[], &[], 2).is_err());
    }
}
