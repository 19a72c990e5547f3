//! Binary classification metrics, Dice overlap and multi-seed summaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::LabelMask;

/// Binary confusion matrix; positive = progressive disease.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ConfusionCounts {
    pub fn new(true_pos: u64, false_pos: u64, false_neg: u64, true_neg: u64) -> Self {
        Self {
            true_pos,
            false_pos,
            false_neg,
            true_neg,
        }
    }

    pub fn from_predictions(predicted: &[bool], actual: &[bool]) -> Result<Self> {
        if predicted.len() != actual.len() {
            return Err(Error::Shape(format!(
                "{} predictions for {} labels",
                predicted.len(),
                actual.len()
            )));
        }
        let mut c = Self::default();
        for (&p, &a) in predicted.iter().zip(actual) {
            match (p, a) {
                (true, true) => c.true_pos += 1,
                (true, false) => c.false_pos += 1,
                (false, true) => c.false_neg += 1,
                (false, false) => c.true_neg += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }
}

/// Matthews correlation coefficient; 0 when any marginal is empty.
pub fn mcc(c: &ConfusionCounts) -> Result<f64> {
    if c.total() == 0 {
        return Err(Error::EmptyInput);
    }
    let (tp, fp, fneg, tn) = (
        c.true_pos as f64,
        c.false_pos as f64,
        c.false_neg as f64,
        c.true_neg as f64,
    );
    let denom = (tp + fp) * (tp + fneg) * (tn + fp) * (tn + fneg);
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((tp * tn - fp * fneg) / denom.sqrt())
}

pub fn accuracy(c: &ConfusionCounts) -> Result<f64> {
    if c.total() == 0 {
        return Err(Error::EmptyInput);
    }
    Ok((c.true_pos + c.true_neg) as f64 / c.total() as f64)
}

/// Area under the ROC curve as the Mann–Whitney statistic
/// `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)`, computed from mid-ranks in `O(n log n)`.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the positive rank sum keeps mid-ranks integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share the mid-rank (i+j+2)/2
        let positives = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        rank_sum2 += positives * (i + j + 2) as u128;
        i = j + 1;
    }
    let (np, nn) = (n_pos as u128, n_neg as u128);
    // U·2 = 2·R − n⁺(n⁺+1)
    let u2 = rank_sum2 - np * (np + 1);
    Ok(u2 as f64 / (2 * np * nn) as f64)
}

/// Dice overlap of one class; 1 when the class is absent from both masks.
pub fn dice(pred: &LabelMask, truth: &LabelMask, class_id: u8) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::Shape(format!(
            "dice on {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.data.iter().zip(truth.data.iter()) {
        let (ip, it) = (p == class_id, t == class_id);
        a += ip as usize;
        b += it as usize;
        both += (ip && it) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

/// Mean and sample standard deviation of one metric across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator).
    pub std: f64,
}

impl MetricSummary {
    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn summarize_runs(values: &[f64]) -> Result<MetricSummary> {
    if values.len() < 2 {
        return Err(Error::InsufficientRuns(values.len()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(MetricSummary {
        values: values.to_vec(),
        mean,
        std: var.sqrt(),
    })
}

/// The three reported metrics for one evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub mcc: f64,
    pub accuracy: f64,
    pub auc_roc: f64,
}

/// Scores for probabilities thresholded at `threshold`.
///
/// AUC is reported as NaN when the evaluation set holds a single class.
pub fn score_predictions(probabilities: &[f64], labels: &[bool], threshold: f64) -> Result<Scores> {
    let predicted: Vec<bool> = probabilities.iter().map(|&p| p >= threshold).collect();
    let c = ConfusionCounts::from_predictions(&predicted, labels)?;
    let auc = match auc_roc(probabilities, labels) {
        Ok(v) => v,
        Err(Error::UndefinedMetric(_)) => f64::NAN,
        Err(e) => return Err(e),
    };
    Ok(Scores {
        mcc: mcc(&c)?,
        accuracy: accuracy(&c)?,
        auc_roc: auc,
    })
}

/// Per-metric summaries across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mcc: MetricSummary,
    pub accuracy: MetricSummary,
    pub auc_roc: MetricSummary,
}

impl RunSummary {
    pub fn from_scores(runs: &[Scores]) -> Result<Self> {
        let pick = |f: fn(&Scores) -> f64| runs.iter().map(f).collect::<Vec<_>>();
        Ok(Self {
            mcc: summarize_runs(&pick(|s| s.mcc))?,
            accuracy: summarize_runs(&pick(|s| s.accuracy))?,
            auc_roc: summarize_runs(&pick(|s| s.auc_roc))?,
        })
    }
}
