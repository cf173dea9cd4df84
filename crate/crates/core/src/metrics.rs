//! Macro-averaged segmentation metrics computed from a pixel confusion matrix.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::LabelMask;

/// `counts[i][j]` = pixels of true class `i` predicted as `j`.
///
/// Pixels predicted as unlabelled are tallied per true class in a separate overflow
/// column: they count as missed pixels of their true class and credit no prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    class_count: usize,
    counts: Vec<u64>,
    unlabelled: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(class_count: usize) -> Self {
        Self {
            class_count,
            counts: vec![0; class_count * class_count],
            unlabelled: vec![0; class_count],
        }
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.class_count + pred]
    }

    /// Pixels of true class `truth` left unlabelled by the prediction.
    pub fn overflow(&self, truth: usize) -> u64 {
        self.unlabelled[truth]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.unlabelled.iter().sum::<u64>()
    }

    /// `Σ_j n_ij` including the overflow column: all pixels of true class `i`.
    pub fn truth_total(&self, class: usize) -> u64 {
        let row = &self.counts[class * self.class_count..(class + 1) * self.class_count];
        row.iter().sum::<u64>() + self.unlabelled[class]
    }

    /// `Σ_i n_ij`: pixels predicted as class `j`.
    pub fn predicted_total(&self, class: usize) -> u64 {
        (0..self.class_count).map(|i| self.count(i, class)).sum()
    }

    pub fn record(&mut self, truth: u8, pred: Option<u8>) {
        let t = usize::from(truth);
        match pred {
            Some(p) => self.counts[t * self.class_count + usize::from(p)] += 1,
            None => self.unlabelled[t] += 1,
        }
    }

    /// Adds another matrix's counts; pooling over a test set is a sequence of merges.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.class_count != self.class_count {
            return Err(Error::DimensionMismatch(format!(
                "cannot merge {}-class and {}-class confusion matrices",
                self.class_count, other.class_count
            )));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        self.unlabelled.iter_mut().zip(&other.unlabelled).for_each(|(a, b)| *a += b);
        Ok(())
    }

    fn iou(&self, class: usize) -> Option<f64> {
        let tp = self.count(class, class);
        let union = self.truth_total(class) + self.predicted_total(class) - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    fn recall(&self, class: usize) -> Option<f64> {
        let t = self.truth_total(class);
        (t > 0).then(|| self.count(class, class) as f64 / t as f64)
    }

    fn precision(&self, class: usize) -> Option<f64> {
        let p = self.predicted_total(class);
        (p > 0).then(|| self.count(class, class) as f64 / p as f64)
    }
}

/// Tallies `pred` against a fully labelled `truth`.
pub fn confusion(pred: &LabelMask, truth: &LabelMask) -> Result<ConfusionMatrix> {
    pred.ensure_same_size(truth, "prediction vs ground truth")?;
    if pred.class_count() != truth.class_count() {
        return Err(Error::DimensionMismatch(format!(
            "prediction has {} classes, ground truth {}",
            pred.class_count(),
            truth.class_count()
        )));
    }
    let mut cm = ConfusionMatrix::new(truth.class_count());
    for (p, t) in pred.labels().iter().zip(truth.labels()) {
        let t = t.ok_or_else(|| {
            Error::InvalidArgument("ground truth contains unlabelled pixels".into())
        })?;
        cm.record(t, *p);
    }
    Ok(cm)
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Mean intersection-over-union over the classes with a non-empty union.
pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total() == 0 {
        return Err(Error::InvalidArgument("empty confusion matrix".into()));
    }
    Ok(mean_of((0..cm.class_count).map(|c| cm.iou(c))).unwrap_or(0.0))
}

/// `(mRec, mPrec)`: recall skips classes absent from the truth, precision skips classes never predicted.
pub fn macro_recall_precision(cm: &ConfusionMatrix) -> (f64, f64) {
    let rec = mean_of((0..cm.class_count).map(|c| cm.recall(c))).unwrap_or(0.0);
    let prec = mean_of((0..cm.class_count).map(|c| cm.precision(c))).unwrap_or(0.0);
    (rec, prec)
}

pub fn f1(mrec: f64, mprec: f64) -> f64 {
    if mrec + mprec == 0.0 {
        0.0
    } else {
        2.0 * mprec * mrec / (mprec + mrec)
    }
}

/// mIOU of a weak annotation (scribbles or pseudo-mask) against the full mask.
pub fn wmiou(weak: &LabelMask, full: &LabelMask) -> Result<f64> {
    miou(&confusion(weak, full)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub iou: Option<f64>,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
}

/// Serializable summary: `{miou, mrec, mprec, f1, wmiou?, per_class}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub miou: f64,
    pub mrec: f64,
    pub mprec: f64,
    pub f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wmiou: Option<f64>,
    pub per_class: BTreeMap<String, ClassMetrics>,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        let miou = miou(cm)?;
        let (mrec, mprec) = macro_recall_precision(cm);
        let per_class = (0..cm.class_count)
            .map(|c| {
                (
                    c.to_string(),
                    ClassMetrics {
                        iou: cm.iou(c),
                        recall: cm.recall(c),
                        precision: cm.precision(c),
                    },
                )
            })
            .collect();
        Ok(Self {
            miou,
            mrec,
            mprec,
            f1: f1(mrec, mprec),
            wmiou: None,
            per_class,
        })
    }
}
