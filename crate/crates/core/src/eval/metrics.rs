use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Confusion matrix (rows: true class, columns: predicted) and the recall
/// summaries derived from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion: Vec<Vec<usize>>,
    /// Weighted average recall: overall accuracy.
    pub war: f64,
    /// Unweighted average recall over classes that occur in the labels.
    pub uar: f64,
    /// `None` for classes with no true sample.
    pub per_class_recall: Vec<Option<f64>>,
    pub samples: usize,
}

pub fn compute_metrics(predictions: &[usize], labels: &[usize], classes: usize) -> Result<MetricsReport> {
    if predictions.is_empty() {
        return Err(Error::Contract("metrics need at least one sample".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = predictions.iter().chain(labels).find(|&&c| c >= classes) {
        return Err(Error::Index(format!("class {bad} with {classes} classes")));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        confusion[y][p] += 1;
    }
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let per_class_recall: Vec<Option<f64>> = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row[c] as f64 / total as f64)
        })
        .collect();
    let present: Vec<f64> = per_class_recall.iter().flatten().copied().collect();
    Ok(MetricsReport {
        war: correct as f64 / labels.len() as f64,
        uar: present.iter().sum::<f64>() / present.len() as f64,
        per_class_recall,
        confusion,
        samples: labels.len(),
    })
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect() {
        let m = compute_metrics(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!((m.war, m.uar), (1.0, 1.0));
    }

    #[test]
    fn hand_computed_case() {
        // class 0: 3 of 4 right, class 1: 1 of 2 right
        let labels = [0, 0, 0, 0, 1, 1];
        let preds = [0, 0, 0, 1, 1, 0];
        let m = compute_metrics(&preds, &labels, 2).unwrap();
        assert!((m.uar - 0.625).abs() < 1e-12);
        assert!((m.war - 4.0 / 6.0).abs() < 1e-12);
        assert_eq!(m.confusion, vec![vec![3, 1], vec![1, 1]]);
    }

    #[test]
    fn constant_predictor_on_balanced_data() {
        let m = compute_metrics(&[1, 1, 1, 1], &[0, 1, 0, 1], 2).unwrap();
        assert_eq!((m.war, m.uar), (0.5, 0.5));
    }

    #[test]
    fn absent_class_excluded_from_uar() {
        let m = compute_metrics(&[0, 0, 1], &[0, 0, 0], 3).unwrap();
        assert_eq!(m.per_class_recall, vec![Some(2.0 / 3.0), None, None]);
        assert_eq!(m.uar, 2.0 / 3.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(compute_metrics(&[], &[], 2), Err(Error::Contract(_))));
        assert!(compute_metrics(&[0], &[0, 1], 2).is_err());
        assert!(matches!(compute_metrics(&[2], &[0], 2), Err(Error::Index(_))));
    }
}
