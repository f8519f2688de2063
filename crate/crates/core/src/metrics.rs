//! Ranking metrics with OOD as the positive class, plus per-class summary
//! statistics of probability vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oodscores::{argmax, ue_score};

/// OOD (positive) and ID (negative) scores, higher meaning more OOD.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryScoreSet {
    pos: Vec<f64>,
    neg: Vec<f64>,
}

impl BinaryScoreSet {
    pub fn new(pos: Vec<f64>, neg: Vec<f64>) -> Result<Self> {
        if pos.is_empty() || neg.is_empty() {
            return Err(Error::invalid(format!(
                "ranking metrics need both sides non-empty ({} positive, {} negative)",
                pos.len(),
                neg.len()
            )));
        }
        if pos.iter().chain(&neg).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("binary score set".into()));
        }
        Ok(BinaryScoreSet { pos, neg })
    }

    pub fn pos(&self) -> &[f64] {
        &self.pos
    }

    pub fn neg(&self) -> &[f64] {
        &self.neg
    }
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Number of entries of the ascending slice `s` that are `< x` and `== x`.
fn count_below_equal(s: &[f64], x: f64) -> (usize, usize) {
    let lo = s.partition_point(|&v| v < x);
    let hi = s.partition_point(|&v| v <= x);
    (lo, hi - lo)
}

/// `P(pos > neg) + ½·P(pos = neg)`.
pub fn auroc(s: &BinaryScoreSet) -> f64 {
    let neg = sorted(&s.neg);
    // twice the Mann-Whitney U, kept integral until the final division
    let twice_u: u64 = s
        .pos
        .iter()
        .map(|&p| {
            let (below, equal) = count_below_equal(&neg, p);
            (2 * below + equal) as u64
        })
        .sum();
    twice_u as f64 / (2 * s.pos.len() * s.neg.len()) as f64
}

/// Step-wise area under the precision-recall curve:
/// `Σ_k (R_k − R_{k−1}) · P_k` over distinct thresholds in descending order.
pub fn aupr(s: &BinaryScoreSet) -> f64 {
    let curve = pr_curve(s);
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for pt in &curve {
        area += (pt.recall - prev_recall) * pt.precision;
        prev_recall = pt.recall;
    }
    area
}

/// FPR at the largest threshold whose TPR (scores `>=` threshold flagged) is
/// at least 95%. Equal scores always flip together.
pub fn fpr_at_95_tpr(s: &BinaryScoreSet) -> f64 {
    let np = s.pos.len();
    let neg = sorted(&s.neg);
    let pos = sorted(&s.pos);
    // scanning positives from the top: threshold = pos[i] flags every positive >= pos[i]
    for i in (0..np).rev() {
        let theta = pos[i];
        let tp = np - pos.partition_point(|&v| v < theta);
        if 20 * tp >= 19 * np {
            let fp = neg.len() - neg.partition_point(|&v| v < theta);
            return fp as f64 / neg.len() as f64;
        }
    }
    unreachable!("the smallest positive score yields TPR = 1")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Operating points at every distinct score, thresholds descending.
pub fn operating_points(s: &BinaryScoreSet) -> Vec<CurvePoint> {
    let mut all: Vec<(f64, bool)> = s
        .pos
        .iter()
        .map(|&v| (v, true))
        .chain(s.neg.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (np, nn) = (s.pos.len() as f64, s.neg.len() as f64);
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let theta = all[i].0;
        while i < all.len() && all[i].0 == theta {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push(CurvePoint {
            threshold: theta,
            tpr: tp as f64 / np,
            fpr: fp as f64 / nn,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / np,
        });
    }
    out
}

pub fn roc_curve(s: &BinaryScoreSet) -> Vec<CurvePoint> {
    operating_points(s)
}

pub fn pr_curve(s: &BinaryScoreSet) -> Vec<CurvePoint> {
    operating_points(s)
}

/// Ranking metrics computed together for report tables.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub auroc: f64,
    pub aupr: f64,
    pub fpr_at_95_tpr: f64,
}

impl DetectionSummary {
    pub fn of(s: &BinaryScoreSet) -> Self {
        DetectionSummary {
            auroc: auroc(s),
            aupr: aupr(s),
            fpr_at_95_tpr: fpr_at_95_tpr(s),
        }
    }
}

/// Averages of simple confidence statistics for one class at one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetricRow {
    pub epoch: usize,
    pub class: usize,
    pub count: usize,
    pub entropy: f64,
    pub confidence: f64,
    pub margin: f64,
    pub ue: f64,
}

/// Shannon entropy in nats, with `0·log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Top-1 minus top-2 probability.
pub fn margin(p: &[f64]) -> f64 {
    let top = argmax(p);
    let second = p
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, &v)| v)
        .fold(0.0, f64::max);
    p[top] - second
}

#[derive(Clone, Copy, Debug, Default)]
struct Acc {
    n: usize,
    entropy: f64,
    confidence: f64,
    margin: f64,
    ue: f64,
}

impl Acc {
    fn push(&mut self, p: &[f64]) -> Result<()> {
        self.n += 1;
        self.entropy += entropy(p);
        self.confidence += p[argmax(p)];
        self.margin += margin(p);
        self.ue += ue_score(p)?;
        Ok(())
    }

    fn row(&self, epoch: usize, class: usize) -> EpochMetricRow {
        let n = self.n.max(1) as f64;
        EpochMetricRow {
            epoch,
            class,
            count: self.n,
            entropy: self.entropy / n,
            confidence: self.confidence / n,
            margin: self.margin / n,
            ue: self.ue / n,
        }
    }
}

/// Per-class means over the rows of `probs` grouped by `classes`; classes
/// with no rows are omitted. Output is ordered by class index.
pub fn epoch_sample_metrics(
    epoch: usize,
    probs: &[Vec<f64>],
    classes: &[usize],
) -> Result<Vec<EpochMetricRow>> {
    if probs.len() != classes.len() {
        return Err(Error::invalid("probability rows and class labels differ in length"));
    }
    let k = classes.iter().copied().max().map_or(0, |m| m + 1);
    let mut acc = vec![Acc::default(); k];
    for (p, &c) in probs.iter().zip(classes) {
        acc[c].push(p)?;
    }
    Ok(acc
        .iter()
        .enumerate()
        .filter(|(_, a)| a.n > 0)
        .map(|(c, a)| a.row(epoch, c))
        .collect())
}

/// Count-weighted mean of several class rows (e.g. all ID classes).
pub fn pooled_row(rows: &[&EpochMetricRow], class: usize) -> Option<EpochMetricRow> {
    let n: usize = rows.iter().map(|r| r.count).sum();
    if n == 0 {
        return None;
    }
    let w = |f: fn(&EpochMetricRow) -> f64| {
        rows.iter().map(|r| f(r) * r.count as f64).sum::<f64>() / n as f64
    };
    Some(EpochMetricRow {
        epoch: rows[0].epoch,
        class,
        count: n,
        entropy: w(|r| r.entropy),
        confidence: w(|r| r.confidence),
        margin: w(|r| r.margin),
        ue: w(|r| r.ue),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(p: &[f64], n: &[f64]) -> BinaryScoreSet {
        BinaryScoreSet::new(p.to_vec(), n.to_vec()).unwrap()
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&set(&[0.8, 0.9], &[0.1, 0.2])), 1.0);
        assert_eq!(auroc(&set(&[0.1, 0.5, 0.5], &[0.1, 0.5, 0.5])), 0.5);
        assert_eq!(auroc(&set(&[0.3, 0.9], &[0.1, 0.7])), 0.75);
    }

    #[test]
    fn aupr_examples() {
        assert_eq!(aupr(&set(&[0.8, 0.9], &[0.1, 0.2])), 1.0);
        let curve = pr_curve(&set(&[5.0], &[1.0, 2.0, 3.0]));
        assert_eq!(curve[0].precision, 1.0);
        // thresholds 0.9 (P=1,R=.5), 0.7 (P=.5,R=.5), 0.3 (P=2/3,R=1), 0.1 (P=.5,R=1)
        let v = aupr(&set(&[0.3, 0.9], &[0.1, 0.7]));
        assert!((v - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn fpr_examples() {
        assert_eq!(fpr_at_95_tpr(&set(&[0.8, 0.9], &[0.1, 0.2])), 0.0);
        assert_eq!(fpr_at_95_tpr(&set(&[5.0, 6.0, 7.0, 8.0], &[1.0, 2.0, 3.0, 9.0])), 0.25);
        assert_eq!(fpr_at_95_tpr(&set(&[1.0, 1.0], &[1.0, 1.0, 1.0])), 1.0);
    }

    #[test]
    fn empty_side_is_rejected() {
        assert!(BinaryScoreSet::new(vec![], vec![1.0]).is_err());
        assert!(BinaryScoreSet::new(vec![1.0], vec![]).is_err());
        assert!(BinaryScoreSet::new(vec![f64::NAN], vec![1.0]).is_err());
    }

    #[test]
    fn one_hot_and_uniform_rows() {
        let rows = epoch_sample_metrics(0, &[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]], &[1, 0]).unwrap();
        for r in &rows {
            assert_eq!((r.entropy, r.confidence, r.margin, r.ue), (0.0, 1.0, 1.0, 0.0));
        }
        let u = vec![1.0 / 11.0; 11];
        let rows = epoch_sample_metrics(3, &[u.clone(), u], &[2, 2]).unwrap();
        assert_eq!(rows.len(), 1);
        let r = &rows[0];
        assert_eq!((r.epoch, r.class, r.count), (3, 2, 2));
        assert!((r.entropy - 11f64.ln()).abs() < 1e-12);
        assert!((r.confidence - 1.0 / 11.0).abs() < 1e-15);
        assert!(r.margin.abs() < 1e-15);
        assert!((r.ue - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_ignore_row_order() {
        let p = vec![vec![0.7, 0.2, 0.1], vec![0.4, 0.35, 0.25], vec![0.5, 0.1, 0.4]];
        let a = epoch_sample_metrics(0, &p, &[0, 0, 0]).unwrap();
        let q = vec![p[2].clone(), p[0].clone(), p[1].clone()];
        let b = epoch_sample_metrics(0, &q, &[0, 0, 0]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x.entropy - y.entropy).abs() < 1e-15);
            assert!((x.margin - y.margin).abs() < 1e-15);
        }
    }
}
