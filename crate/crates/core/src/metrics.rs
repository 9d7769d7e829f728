//! Classification accuracy and the pixel f-score used for segmentation.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

/// `2tp / (2tp + fp + fn)`, or 0 when nothing positive was predicted or present.
pub fn f_score(c: &ConfusionCounts) -> f64 {
    let den = 2 * c.tp + c.fp + c.fn_;
    if den == 0 {
        0.0
    } else {
        (2 * c.tp) as f64 / den as f64
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise argmax of a flat `[rows, classes]` buffer.
pub fn argmax_rows<T: Scalar>(probs: &[T], classes: usize) -> Vec<usize> {
    probs.chunks(classes).map(argmax).collect()
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Contract("accuracy of an empty prediction set".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / preds.len() as f64)
}

fn confusion_one(pred: &[u8], truth: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::Contract(format!(
            "mask sizes differ: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            _ => {
                return Err(Error::Contract(format!(
                    "masks must be binary, found values {p} and {t}"
                )))
            }
        }
    }
    Ok(c)
}

/// Pixel counts summed over every mask pair.
pub fn segmentation_confusion<M: AsRef<[u8]>>(pred: &[M], truth: &[M]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::Contract(format!(
            "{} predicted masks for {} ground-truth masks",
            pred.len(),
            truth.len()
        )));
    }
    let mut total = ConfusionCounts::default();
    for (p, t) in pred.iter().zip(truth) {
        total.merge(&confusion_one(p.as_ref(), t.as_ref())?);
    }
    Ok(total)
}

/// Mean of per-image f-scores; secondary to the micro-aggregated score.
pub fn mean_image_f_score<M: AsRef<[u8]>>(pred: &[M], truth: &[M]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::Contract(format!(
            "{} predicted masks for {} ground-truth masks",
            pred.len(),
            truth.len()
        )));
    }
    let mut sum = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        sum += f_score(&confusion_one(p.as_ref(), t.as_ref())?);
    }
    Ok(sum / pred.len() as f64)
}

/// Ordered `metric<TAB>value` pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub entries: Vec<(String, f64)>,
}

impl MetricsReport {
    pub fn push(&mut self, name: impl Into<String>, value: f64) {
        self.entries.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == name).map(|e| e.1)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (name, v) in &self.entries {
            writeln!(s, "{name}\t{v:.6}").unwrap();
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cc(tp: u64, fp: u64, fn_: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, fn_, tn: 0 }
    }

    #[test]
    fn f_score_cases() {
        assert_eq!(f_score(&cc(1, 0, 0)), 1.0);
        assert_eq!(f_score(&cc(0, 3, 1)), 0.0);
        assert!((f_score(&cc(2, 1, 1)) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f_score(&ConfusionCounts { tn: 9, ..Default::default() }), 0.0);
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1], &[1, 0]).unwrap(), 0.0);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn argmax_tie_goes_low() {
        assert_eq!(argmax(&[0.5f32, 0.5]), 0);
        assert_eq!(argmax(&[0.1f64, 0.7, 0.7]), 1);
        assert_eq!(argmax_rows(&[0.2f64, 0.8, 0.9, 0.1], 2), vec![1, 0]);
    }

    #[test]
    fn segmentation_counts() {
        let ones = vec![1u8; 4096];
        let zeros = vec![0u8; 4096];
        let c = segmentation_confusion(std::slice::from_ref(&ones), std::slice::from_ref(&zeros)).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (0, 4096, 0, 0));
        let c = segmentation_confusion(std::slice::from_ref(&ones), std::slice::from_ref(&ones)).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        assert!(segmentation_confusion(&[vec![2u8]], &[vec![0u8]]).is_err());
    }

    #[test]
    fn report_format() {
        let mut r = MetricsReport::default();
        r.push("accuracy", 0.96);
        r.push("f_score", 2.0 / 3.0);
        assert_eq!(r.render(), "accuracy\t0.960000\nf_score\t0.666667\n");
    }
}
