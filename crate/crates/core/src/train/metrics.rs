//! Pixel accuracy, IoU and the confusion matrix.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub pixel_acc: f64,
    pub miou: f64,
    /// `None` for classes absent from both truth and prediction.
    pub per_class_iou: Vec<Option<f64>>,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn confusion_matrix(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    if truth.len() != predicted.len() {
        return Err(Error::Contract(format!(
            "{} truths for {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut m = vec![vec![0; classes]; classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= classes || p >= classes {
            return Err(Error::Contract(format!("class id outside 0..{classes}")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Mean IoU is taken over the classes present in `truth`.
pub fn compute_metrics(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Metrics> {
    if truth.is_empty() {
        return Err(Error::Contract("evaluation split is empty".into()));
    }
    let confusion = confusion_matrix(truth, predicted, classes)?;
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let mut per_class_iou = Vec::with_capacity(classes);
    let mut present = Vec::new();
    for c in 0..classes {
        let tp = confusion[c][c];
        let fn_: usize = confusion[c].iter().sum::<usize>() - tp;
        let fp: usize = (0..classes).map(|r| confusion[r][c]).sum::<usize>() - tp;
        let denom = tp + fp + fn_;
        let iou = (denom > 0).then(|| tp as f64 / denom as f64);
        if tp + fn_ > 0 {
            present.push(iou.unwrap_or(0.0));
        }
        per_class_iou.push(iou);
    }
    Ok(Metrics {
        pixel_acc: correct as f64 / truth.len() as f64,
        miou: present.iter().sum::<f64>() / present.len() as f64,
        per_class_iou,
        confusion,
    })
}
