//! Classification and segmentation metrics.
//!
//! AUC is the Mann-Whitney statistic computed from average ranks, which equals
//! the pair-counting definition exactly (ties count one half). Hausdorff
//! distance is exact over all foreground pixels via a squared distance
//! transform, so no boundary extraction or approximation is involved.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::raster::{squared_edt, BinaryMask};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("AUC is undefined: need both classes (positives {positives}, negatives {negatives})")]
    SingleClass { positives: usize, negatives: usize },
    #[error("Hausdorff distance is undefined for an empty mask")]
    EmptyMask,
    #[error("confusion counts are all zero")]
    NoSamples,
    #[error("dimension mismatch: {0}")]
    Dims(String),
    #[error("non-finite score at index {0}")]
    NonFinite(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn from_predictions(predicted: &[bool], truth: &[bool]) -> Result<Self, MetricsError> {
        if predicted.len() != truth.len() {
            return Err(MetricsError::Dims(format!(
                "{} predictions vs {} labels",
                predicted.len(),
                truth.len()
            )));
        }
        let mut c = Self::default();
        for (&p, &t) in predicted.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Rates derived from a confusion matrix. A rate whose denominator is zero is
/// `None`, never 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn classification_metrics(cc: &ConfusionCounts) -> Result<ClassificationMetrics, MetricsError> {
    let total = cc.total();
    if total == 0 {
        return Err(MetricsError::NoSamples);
    }
    let precision = ratio(cc.tp, cc.tp + cc.fp);
    let recall = ratio(cc.tp, cc.tp + cc.fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    Ok(ClassificationMetrics {
        accuracy: (cc.tp + cc.tn) as f64 / total as f64,
        precision,
        recall,
        f1,
    })
}

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<(usize, usize), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::Dims(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricsError::NonFinite(i));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::SingleClass { positives, negatives });
    }
    Ok((positives, negatives))
}

/// Area under the ROC curve as the Mann-Whitney rank statistic.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    let (np, nn) = check_scores(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Doubled ranks keep tie averages integral.
    let mut pos_rank2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 average to (i+j+2)/2.
        let avg2 = (i + j + 2) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        pos_rank2 += avg2 * pos_in_group;
        i = j + 1;
    }
    let np = np as u128;
    let u2 = pos_rank2 - np * (np + 1);
    Ok(u2 as f64 / (2 * np * nn as u128) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// ROC curve: starts at `(0, 0, +inf)`, then one point per distinct score
/// (predict positive iff score >= threshold, descending), ending with
/// `(1, 1, -inf)`.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>, MetricsError> {
    let (np, nn) = check_scores(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push(RocPoint {
            fpr: fp as f64 / nn as f64,
            tpr: tp as f64 / np as f64,
            threshold: t,
        });
    }
    pts.push(RocPoint {
        fpr: 1.0,
        tpr: 1.0,
        threshold: f64::NEG_INFINITY,
    });
    Ok(pts)
}

pub fn trapezoid_area(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
        .sum()
}

fn fmt_f64(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        v.to_string()
    }
}

/// Writes the ROC curve as CSV with header `fpr,tpr,threshold`.
pub fn roc_csv(scores: &[f64], labels: &[bool], path: impl AsRef<Path>) -> Result<Vec<RocPoint>, MetricsError> {
    let pts = roc_curve(scores, labels)?;
    let mut out = String::from("fpr,tpr,threshold\n");
    for p in &pts {
        out.push_str(&format!("{},{},{}\n", fmt_f64(p.fpr), fmt_f64(p.tpr), fmt_f64(p.threshold)));
    }
    std::fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(pts)
}

/// Parses a CSV written by [`roc_csv`].
pub fn read_roc_csv(path: impl AsRef<Path>) -> Result<Vec<RocPoint>, MetricsError> {
    let text = std::fs::read_to_string(path)?;
    let bad = |l: &str| MetricsError::Dims(format!("bad ROC row `{l}`"));
    let mut lines = text.lines();
    if lines.next() != Some("fpr,tpr,threshold") {
        return Err(MetricsError::Dims("missing ROC header".into()));
    }
    lines
        .map(|l| {
            let f: Vec<f64> = l
                .split(',')
                .map(|s| s.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| bad(l))?;
            match f[..] {
                [fpr, tpr, threshold] => Ok(RocPoint { fpr, tpr, threshold }),
                _ => Err(bad(l)),
            }
        })
        .collect()
}

fn same_dims(a: &BinaryMask, b: &BinaryMask) -> Result<(), MetricsError> {
    if a.dims() != b.dims() {
        return Err(MetricsError::Dims(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Dice coefficient `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
pub fn dsc(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MetricsError> {
    same_dims(a, b)?;
    let (mut inter, mut sa, mut sb) = (0u64, 0u64, 0u64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x != 0, y != 0);
        inter += u64::from(x && y);
        sa += u64::from(x);
        sb += u64::from(y);
    }
    if sa + sb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (sa + sb) as f64)
}

/// Fraction of pixels on which the masks agree.
pub fn pixel_accuracy(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MetricsError> {
    same_dims(a, b)?;
    let n = a.data().len();
    if n == 0 {
        return Err(MetricsError::Dims("empty raster".into()));
    }
    let agree = a.data().iter().zip(b.data()).filter(|(x, y)| (**x != 0) == (**y != 0)).count();
    Ok(agree as f64 / n as f64)
}

fn directed_sq(from: &BinaryMask, to: &BinaryMask) -> f64 {
    let d = squared_edt(to.height(), to.width(), |i| to.data()[i] != 0);
    from.data()
        .iter()
        .zip(&d)
        .filter(|(v, _)| **v != 0)
        .map(|(_, &d)| d)
        .fold(0.0, f64::max)
}

/// Symmetric Hausdorff distance between the foreground pixel sets.
pub fn hausdorff(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MetricsError> {
    same_dims(a, b)?;
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptyMask);
    }
    Ok(directed_sq(a, b).max(directed_sq(b, a)).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub n_samples: usize,
    pub n_positive: usize,
    pub threshold: f64,
    pub counts: ConfusionCounts,
    #[serde(flatten)]
    pub metrics: ClassificationMetrics,
    pub auc: Option<f64>,
}

/// Thresholds `scores` (positive iff `score >= threshold`) and summarises.
/// AUC is `None` when only one class is present.
pub fn classification_report(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ClassificationReport, MetricsError> {
    let predicted: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
    let counts = ConfusionCounts::from_predictions(&predicted, labels)?;
    let auc = match auc(scores, labels) {
        Ok(a) => Some(a),
        Err(MetricsError::SingleClass { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(ClassificationReport {
        n_samples: labels.len(),
        n_positive: labels.iter().filter(|&&l| l).count(),
        threshold,
        counts,
        metrics: classification_metrics(&counts)?,
        auc,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskMetrics {
    pub id: String,
    pub dsc: f64,
    /// `None` when either mask is empty.
    pub hd: Option<f64>,
    pub pixel_accuracy: f64,
}

pub fn mask_metrics(id: impl Into<String>, pred: &BinaryMask, truth: &BinaryMask) -> Result<MaskMetrics, MetricsError> {
    let hd = match hausdorff(pred, truth) {
        Ok(h) => Some(h),
        Err(MetricsError::EmptyMask) => None,
        Err(e) => return Err(e),
    };
    Ok(MaskMetrics {
        id: id.into(),
        dsc: dsc(pred, truth)?,
        hd,
        pixel_accuracy: pixel_accuracy(pred, truth)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSummary {
    pub dsc: f64,
    /// Over images where HD is defined; `None` if there are none.
    pub hd: Option<f64>,
    pub pixel_accuracy: f64,
}

/// Per-image mask metrics with their mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub per_image: Vec<MaskMetrics>,
    pub mean: MaskSummary,
    pub std: MaskSummary,
}

fn mean_std(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    Some((m, var.sqrt()))
}

impl SegmentationReport {
    pub fn new(per_image: Vec<MaskMetrics>) -> Result<Self, MetricsError> {
        let col = |f: fn(&MaskMetrics) -> Option<f64>| -> Vec<f64> { per_image.iter().filter_map(f).collect() };
        let (dm, ds) = mean_std(&col(|m| Some(m.dsc))).ok_or(MetricsError::NoSamples)?;
        let (am, as_) = mean_std(&col(|m| Some(m.pixel_accuracy))).ok_or(MetricsError::NoSamples)?;
        let hd = mean_std(&col(|m| m.hd));
        Ok(Self {
            mean: MaskSummary {
                dsc: dm,
                hd: hd.map(|h| h.0),
                pixel_accuracy: am,
            },
            std: MaskSummary {
                dsc: ds,
                hd: hd.map(|h| h.1),
                pixel_accuracy: as_,
            },
            per_image,
        })
    }
}
