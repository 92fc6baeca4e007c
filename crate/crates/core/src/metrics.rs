//! Pixel confusion counts and the derived evaluation metrics (accuracy,
//! precision, recall, false positive/negative rates, F1, 11-point AP).
//!
//! A metric whose denominator is zero is reported as `None` ("undefined"),
//! never as zero.

use std::fmt::Write as _;
use std::iter::Sum;
use std::ops::{Add, AddAssign};

use num_rational::BigRational;
use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        ConfusionCounts { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn tally(&mut self, predicted: bool, truth: bool) {
        match (predicted, truth) {
            (true, true) => self.tp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
        }
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts::new(self.tp + o.tp, self.tn + o.tn, self.fp + o.fp, self.fn_ + o.fn_)
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(ConfusionCounts::default(), Add::add)
    }
}

/// Mask values at or above one half count as street.
pub(crate) fn is_street(v: f64) -> bool {
    v >= 0.5
}

/// Per-pixel tally of `predicted` against `truth`; street is the positive class.
pub fn confusion(predicted: &Tensor, truth: &Tensor) -> Result<ConfusionCounts> {
    if predicted.shape() != truth.shape() {
        return Err(Error::Dimension(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            predicted.shape(),
            truth.shape()
        )));
    }
    let mut counts = ConfusionCounts::default();
    for (&p, &t) in predicted.data().iter().zip(truth.data()) {
        counts.tally(is_street(p), is_street(t));
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc: Option<f64>,
    pub pre: Option<f64>,
    pub rec: Option<f64>,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    pub f1: Option<f64>,
    pub ap: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Accuracy, precision, recall, FPR, FNR and F1 from confusion counts.
/// `ap` is left undefined.
pub fn basic_metrics(c: &ConfusionCounts) -> Result<MetricReport> {
    if c.total() == 0 {
        return Err(Error::Argument("metrics of zero evaluated pixels".into()));
    }
    Ok(MetricReport {
        acc: ratio(c.tp + c.tn, c.total()),
        pre: ratio(c.tp, c.tp + c.fp),
        rec: ratio(c.tp, c.tp + c.fn_),
        fpr: ratio(c.fp, c.fp + c.tn),
        fnr: ratio(c.fn_, c.tp + c.fn_),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        ap: None,
    })
}

/// F1 from precision and recall (harmonic mean).
pub fn f1_from_precision_recall(pre: f64, rec: f64) -> Option<f64> {
    (pre + rec > 0.0).then(|| 2.0 * pre * rec / (pre + rec))
}

/// Micro-average: counts are pooled over all images before computing metrics.
pub fn aggregate(per_image: &[ConfusionCounts]) -> Result<MetricReport> {
    if per_image.is_empty() {
        return Err(Error::Argument("no images to aggregate".into()));
    }
    basic_metrics(&per_image.iter().copied().sum())
}

/// Which measured recalls count towards the precision maximum at grid
/// recall `r` of the 11-point average precision.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApRule {
    /// Strictly greater recalls only; the `r = 1` term is always zero.
    Strict,
    /// Strictly greater recalls, except that the `r = 1` term uses recalls
    /// equal to one.
    #[default]
    StrictFullRecall,
    /// Recalls greater than or equal to `r` at every grid point.
    Inclusive,
}

/// One point of the precision/recall curve: everything scored at or above
/// `threshold` is predicted positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub tp: u64,
    pub fp: u64,
}

/// Precision/recall points traced by lowering the threshold through every
/// distinct score, and the number of positive items.
pub fn pr_curve(scores: &[(f64, bool)]) -> Result<(Vec<PrPoint>, u64)> {
    if let Some((s, _)) = scores.iter().find(|(s, _)| s.is_nan()) {
        return Err(Error::Numeric(format!("score {s} is not a number")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let positives = sorted.iter().filter(|(_, t)| *t).count() as u64;
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == threshold {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(PrPoint { threshold, tp, fp });
    }
    Ok((points, positives))
}

/// For each grid recall `k/10`, the `(tp, tp + fp)` of the curve point with
/// the highest precision among the admissible recalls, or `None` when no
/// measured recall is admissible.
pub fn interpolated_precisions(
    points: &[PrPoint],
    positives: u64,
    rule: ApRule,
) -> [Option<(u64, u64)>; 11] {
    let mut terms = [None; 11];
    for (k, term) in terms.iter_mut().enumerate() {
        let k = k as u64;
        // recall tp/P compared against k/10 in integers
        let admissible = |p: &PrPoint| match rule {
            ApRule::Inclusive => 10 * p.tp >= k * positives,
            ApRule::Strict => 10 * p.tp > k * positives,
            ApRule::StrictFullRecall if k == 10 => p.tp == positives,
            ApRule::StrictFullRecall => 10 * p.tp > k * positives,
        };
        let mut best: Option<(u64, u64)> = None;
        for p in points.iter().filter(|p| admissible(p)) {
            let cand = (p.tp, p.tp + p.fp);
            // a/b > c/d  <=>  a·d > c·b
            if best.is_none_or(|(a, b)| (cand.0 as u128) * (b as u128) > (a as u128) * (cand.1 as u128)) {
                best = Some(cand);
            }
        }
        *term = best;
    }
    terms
}

/// 11-point interpolated average precision over `(score, is_street)` items.
/// Undefined when no item is positive.
pub fn average_precision(scores: &[(f64, bool)], rule: ApRule) -> Result<Option<f64>> {
    let (points, positives) = pr_curve(scores)?;
    if positives == 0 {
        return Ok(None);
    }
    // exact rational sum, rounded once
    let sum: BigRational = interpolated_precisions(&points, positives, rule)
        .iter()
        .flatten()
        .map(|&(n, d)| BigRational::new(n.into(), d.into()))
        .sum();
    let ap = (sum / BigRational::from_integer(11.into())).to_f64().expect("finite ratio");
    Ok(Some(ap))
}

/// Pairs each probability with its ground-truth bit.
pub fn score_pairs(probabilities: &Tensor, truth: &Tensor) -> Result<Vec<(f64, bool)>> {
    if probabilities.shape() != truth.shape() {
        return Err(Error::Dimension(format!(
            "probabilities {:?} and ground truth {:?} differ in shape",
            probabilities.shape(),
            truth.shape()
        )));
    }
    Ok(probabilities
        .data()
        .iter()
        .zip(truth.data())
        .map(|(&p, &t)| (p, is_street(t)))
        .collect())
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "undef".to_string(), |v| format!("{:.1}%", v * 100.0))
}

/// Aligned text table with the columns F1, TN, FP, FN, TP, ACC, where TN/FP
/// are rates over the true negatives and FN/TP over the true positives.
pub fn format_table(rows: &[(String, ConfusionCounts)]) -> Result<String> {
    let header = ["Model", "F1", "TN", "FP", "FN", "TP", "ACC"];
    let mut table: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for (name, c) in rows {
        let m = basic_metrics(c)?;
        table.push(vec![
            name.clone(),
            pct(m.f1),
            pct(m.fpr.map(|v| 1.0 - v)),
            pct(m.fpr),
            pct(m.fnr),
            pct(m.rec),
            pct(m.acc),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|j| table.iter().map(|r| r[j].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in table.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(j, (cell, &w))| if j == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
            .collect();
        writeln!(out, "{}", cells.join("  ").trim_end()).expect("write to string");
        if i == 0 {
            let rule: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            writeln!(out, "{}", "-".repeat(rule)).expect("write to string");
        }
    }
    Ok(out)
}
