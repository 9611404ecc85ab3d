//! Classification and regression metrics.
//!
//! The positive class is always label 1. A metric whose denominator is zero
//! is reported as `None` (serialized as `null`), never as NaN.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::RankVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Actual positives, `tp + fn`.
    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    /// Actual negatives, `tn + fp`.
    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }
}

pub fn confusion(y_true: &[u8], y_pred: &[u8]) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::LengthMismatch {
            left: y_true.len(),
            right: y_pred.len(),
        });
    }
    if y_true.is_empty() {
        return Err(Error::InvalidArgument("empty label vectors".into()));
    }
    let mut cm = ConfusionMatrix {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for (i, (&t, &p)) in y_true.iter().zip(y_pred).enumerate() {
        match (t, p) {
            (1, 1) => cm.tp += 1,
            (0, 1) => cm.fp += 1,
            (0, 0) => cm.tn += 1,
            (1, 0) => cm.fn_ += 1,
            _ => {
                return Err(Error::LabelOutOfRange {
                    row: i + 1,
                    value: format!("{t}/{p}"),
                })
            }
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasicMetrics {
    pub accuracy: f64,
    /// TP / (TP + FP)
    pub precision: Option<f64>,
    /// TP / (TP + FN), sensitivity
    pub recall: Option<f64>,
    /// TN / (TN + FP), specificity
    pub neg_recall: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn basic_metrics(cm: &ConfusionMatrix) -> Result<BasicMetrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidArgument("empty confusion matrix".into()));
    }
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let recall = ratio(cm.tp, cm.tp + cm.fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        // tp = 0 with both error kinds present: harmonic mean of 0 and 0
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    Ok(BasicMetrics {
        accuracy: (cm.tp + cm.tn) as f64 / total as f64,
        precision,
        recall,
        neg_recall: ratio(cm.tn, cm.tn + cm.fp),
        f1,
    })
}

fn check_scores(y_true: &[u8], scores: &[f64]) -> Result<(usize, usize)> {
    if y_true.len() != scores.len() {
        return Err(Error::LengthMismatch {
            left: y_true.len(),
            right: scores.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite score at position {i}")));
    }
    let mut counts = [0usize; 2];
    for (i, &y) in y_true.iter().enumerate() {
        if y > 1 {
            return Err(Error::LabelOutOfRange {
                row: i + 1,
                value: y.to_string(),
            });
        }
        counts[y as usize] += 1;
    }
    match counts {
        [0, _] => Err(Error::SingleClass(1)),
        [_, 0] => Err(Error::SingleClass(0)),
        [neg, pos] => Ok((neg, pos)),
    }
}

/// Area under the ROC curve from the Mann-Whitney statistic:
/// `P(s+ > s-) + 0.5 * P(s+ = s-)`, computed from average ranks.
pub fn auc_roc(y_true: &[u8], scores: &[f64]) -> Result<f64> {
    let (neg, pos) = check_scores(y_true, scores)?;
    let ranks = RankVector::from_values(scores);
    let rank_sum: f64 = ranks
        .ranks()
        .iter()
        .zip(y_true)
        .filter(|&(_, &y)| y == 1)
        .map(|(r, _)| r)
        .sum();
    let pos_f = pos as f64;
    let u = rank_sum - pos_f * (pos_f + 1.0) / 2.0;
    Ok(u / (pos_f * neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC operating points for "predict positive when score >= threshold",
/// one per distinct score in decreasing order, preceded by `(0, 0)` at
/// `threshold = +inf` (serialized as `null`).
pub fn roc_points(y_true: &[u8], scores: &[f64]) -> Result<Vec<RocPoint>> {
    let (neg, pos) = check_scores(y_true, scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if y_true[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(points)
}

/// Trapezoidal area under a ROC polyline.
pub fn trapezoid_auc(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

pub fn roc_points_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in points {
        if p.threshold.is_finite() {
            out.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
        } else {
            out.push_str(&format!("inf,{},{}\n", p.fpr, p.tpr));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub rmse: f64,
    pub mae: f64,
    /// `None` when `y_true` is constant.
    pub r2: Option<f64>,
}

pub fn regression_metrics(y_true: &[f64], y_hat: &[f64]) -> Result<RegressionMetrics> {
    if y_true.len() != y_hat.len() {
        return Err(Error::LengthMismatch {
            left: y_true.len(),
            right: y_hat.len(),
        });
    }
    let n = y_true.len();
    if n < 2 {
        return Err(Error::InvalidArgument("regression metrics need at least two values".into()));
    }
    let nf = n as f64;
    let ss_res: f64 = y_true.iter().zip(y_hat).map(|(y, f)| (y - f).powi(2)).sum();
    let abs: f64 = y_true.iter().zip(y_hat).map(|(y, f)| (y - f).abs()).sum();
    let mean = y_true.iter().sum::<f64>() / nf;
    let ss_tot: f64 = y_true.iter().map(|y| (y - mean).powi(2)).sum();
    Ok(RegressionMetrics {
        rmse: (ss_res / nf).sqrt(),
        mae: abs / nf,
        r2: (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n: u64,
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub neg_recall: Option<f64>,
    pub f1: Option<f64>,
    /// Present when scores were supplied and both classes occur.
    pub auc: Option<f64>,
    pub rmse: f64,
    pub mae: f64,
    pub r2: Option<f64>,
}

/// Full metric suite. Regression metrics use `scores` when given and the
/// hard predictions otherwise.
pub fn evaluate(y_true: &[u8], y_pred: &[u8], scores: Option<&[f64]>) -> Result<EvaluationReport> {
    let cm = confusion(y_true, y_pred)?;
    let basic = basic_metrics(&cm)?;
    let truth: Vec<f64> = y_true.iter().map(|&y| f64::from(y)).collect();
    let fitted: Vec<f64> = match scores {
        Some(s) => s.to_vec(),
        None => y_pred.iter().map(|&y| f64::from(y)).collect(),
    };
    let auc = match scores {
        Some(s) if cm.positives() > 0 && cm.negatives() > 0 => Some(auc_roc(y_true, s)?),
        Some(s) if s.len() != y_true.len() => {
            return Err(Error::LengthMismatch {
                left: y_true.len(),
                right: s.len(),
            })
        }
        _ => None,
    };
    let reg = regression_metrics(&truth, &fitted)?;
    Ok(EvaluationReport {
        n: cm.total(),
        confusion: cm,
        accuracy: basic.accuracy,
        precision: basic.precision,
        recall: basic.recall,
        neg_recall: basic.neg_recall,
        f1: basic.f1,
        auc,
        rmse: reg.rmse,
        mae: reg.mae,
        r2: reg.r2,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_owned(), |x| format!("{:.2}%", 100.0 * x))
}

fn num(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_owned(), |x| format!("{x:.5}"))
}

impl EvaluationReport {
    /// Aligned text: a metric summary row followed by the confusion matrix
    /// with actual classes as rows and predictions as columns.
    pub fn to_text(&self) -> String {
        let c = &self.confusion;
        let mut out = String::new();
        out.push_str(&format!(
            "{:<10} {:>10} {:>10} {:>12} {:>12} {:>10}\n",
            "accuracy", "precision", "f1", "sensitivity", "specificity", "auc"
        ));
        out.push_str(&format!(
            "{:<10} {:>10} {:>10} {:>12} {:>12} {:>10}\n",
            pct(Some(self.accuracy)),
            pct(self.precision),
            pct(self.f1),
            pct(self.recall),
            pct(self.neg_recall),
            num(self.auc)
        ));
        out.push_str(&format!(
            "rmse {:.5}  mae {:.5}  r2 {}\n\n",
            self.rmse,
            self.mae,
            num(self.r2)
        ));
        out.push_str(&format!(
            "{:<18} {:>20} {:>20}\n",
            "", "positive (pred)", "negative (pred)"
        ));
        out.push_str(&format!("{:<18} {:>20} {:>20}\n", "positive (actual)", c.tp, c.fn_));
        out.push_str(&format!("{:<18} {:>20} {:>20}\n", "negative (actual)", c.fp, c.tn));
        out
    }
}
