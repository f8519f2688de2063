//! Two-level evaluation of a trained classifier on ID test and OOD sets.

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::Result;
use crate::metrics::{pr_curve, roc_curve, BinaryScoreSet, CurvePoint, DetectionSummary};
use crate::models::ClassifierNet;
use crate::oodscores::{argmax, score_samples, MahalanobisModel, ScoreKind, ScoreSettings, ScoredSample, Scores};
use crate::tieloop::{verdict, Verdict};

const CHUNK: usize = 256;

/// One row of the accuracy matrix. For the ID test set `accuracy` is the
/// fraction with verdict `InDistribution(label)`; for OOD sets it is the
/// fraction rejected at either level. `argmax_accuracy` ignores the
/// threshold: ID rows count `argmax == label`, OOD rows `argmax == garbage`.
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyRow {
    pub train: String,
    pub test: String,
    pub is_ood: bool,
    pub count: usize,
    pub accuracy: f64,
    pub argmax_accuracy: f64,
    pub level1_rate: f64,
    pub level2_rate: f64,
}

/// Threshold-free metrics for one score on one OOD set, computed on OOD
/// samples that survive Level 1 (positives) against correctly classified ID
/// test samples (negatives). `summary` is `None` when either side is empty.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionRow {
    pub ood_set: String,
    pub score: ScoreKind,
    pub n_pos: usize,
    pub n_neg: usize,
    pub summary: Option<DetectionSummary>,
    pub roc: Vec<CurvePoint>,
    pub pr: Vec<CurvePoint>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExportRow {
    pub set: String,
    pub index: usize,
    pub is_ood: bool,
    pub label: usize,
    pub predicted: usize,
    pub verdict: Verdict,
    pub scores: Scores,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub tau: f64,
    pub accuracy: Vec<AccuracyRow>,
    pub detection: Vec<DetectionRow>,
    pub exports: Vec<ExportRow>,
}

impl Evaluation {
    pub fn detection_for(&self, ood_set: &str, score: ScoreKind) -> Option<&DetectionRow> {
        self.detection.iter().find(|d| d.ood_set == ood_set && d.score == score)
    }

    pub fn accuracy_for(&self, test: &str) -> Option<&AccuracyRow> {
        self.accuracy.iter().find(|a| a.test == test)
    }
}

/// Scores `set` in fixed-size chunks; row results do not depend on chunking,
/// so any thread count gives identical output.
pub fn score_dataset(
    clf: &ClassifierNet,
    maha: &MahalanobisModel,
    settings: &ScoreSettings,
    set: &Dataset,
    is_ood: bool,
) -> Result<Vec<ScoredSample>> {
    let starts: Vec<usize> = (0..set.len()).step_by(CHUNK).collect();
    let chunks: Vec<Vec<ScoredSample>> = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + CHUNK).min(set.len())).collect();
            score_samples(clf, maha, settings, &set.samples.select_rows(&idx), is_ood)
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

pub fn fit_mahalanobis(clf: &ClassifierNet, train: &Dataset, eps_cov: Option<f64>) -> Result<MahalanobisModel> {
    let out = clf.predict_chunked(&train.samples, 1024)?;
    MahalanobisModel::fit(&out.features, &train.labels, clf.n_classes(), eps_cov)
}

fn rate(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

pub fn evaluate(
    clf: &ClassifierNet,
    tau: f64,
    train: &Dataset,
    test: &Dataset,
    ood_sets: &[Dataset],
    settings: &ScoreSettings,
) -> Result<Evaluation> {
    let garbage = clf.garbage_index();
    let maha = fit_mahalanobis(clf, train, settings.eps_cov)?;
    let mut accuracy = Vec::new();
    let mut exports = Vec::new();

    let mut level_counts = |set: &Dataset, scored: &[ScoredSample], is_ood: bool| -> Result<[usize; 4]> {
        let (mut accepted_right, mut argmax_right, mut l1, mut l2) = (0, 0, 0, 0);
        for (i, s) in scored.iter().enumerate() {
            let v = verdict(&s.probs_full, tau)?;
            let pred = argmax(&s.probs_full);
            match v {
                Verdict::OodGarbage => l1 += 1,
                Verdict::OodThreshold => l2 += 1,
                Verdict::InDistribution(c) if c == set.labels[i] => accepted_right += 1,
                Verdict::InDistribution(_) => {}
            }
            if pred == set.labels[i] {
                argmax_right += 1;
            }
            exports.push(ExportRow {
                set: set.name.clone(),
                index: i,
                is_ood,
                label: set.labels[i],
                predicted: pred,
                verdict: v,
                scores: s.scores,
            });
        }
        Ok([accepted_right, argmax_right, l1, l2])
    };

    let id_scored = score_dataset(clf, &maha, settings, test, false)?;
    let [accepted_right, argmax_right, l1, l2] = level_counts(test, &id_scored, false)?;
    accuracy.push(AccuracyRow {
        train: train.name.clone(),
        test: test.name.clone(),
        is_ood: false,
        count: test.len(),
        accuracy: rate(accepted_right, test.len()),
        argmax_accuracy: rate(argmax_right, test.len()),
        level1_rate: rate(l1, test.len()),
        level2_rate: rate(l2, test.len()),
    });
    let negatives: Vec<&ScoredSample> = id_scored
        .iter()
        .zip(&test.labels)
        .filter(|(s, &y)| argmax(&s.probs_full) == y)
        .map(|(s, _)| s)
        .collect();

    let mut detection = Vec::new();
    for set in ood_sets {
        let scored = score_dataset(clf, &maha, settings, set, true)?;
        let [_, _, l1, l2] = level_counts(set, &scored, true)?;
        accuracy.push(AccuracyRow {
            train: train.name.clone(),
            test: set.name.clone(),
            is_ood: true,
            count: set.len(),
            accuracy: rate(l1 + l2, set.len()),
            argmax_accuracy: rate(l1, set.len()),
            level1_rate: rate(l1, set.len()),
            level2_rate: rate(l2, set.len()),
        });
        let survivors: Vec<&ScoredSample> = scored.iter().filter(|s| argmax(&s.probs_full) != garbage).collect();
        for kind in ScoreKind::ALL {
            let pos: Vec<f64> = survivors.iter().map(|s| s.scores.oriented(kind)).collect();
            let neg: Vec<f64> = negatives.iter().map(|s| s.scores.oriented(kind)).collect();
            let (n_pos, n_neg) = (pos.len(), neg.len());
            let (summary, roc, pr) = if n_pos == 0 || n_neg == 0 {
                (None, Vec::new(), Vec::new())
            } else {
                let b = BinaryScoreSet::new(pos, neg)?;
                (Some(DetectionSummary::of(&b)), roc_curve(&b), pr_curve(&b))
            };
            detection.push(DetectionRow {
                ood_set: set.name.clone(),
                score: kind,
                n_pos,
                n_neg,
                summary,
                roc,
                pr,
            });
        }
    }
    Ok(Evaluation {
        tau,
        accuracy,
        detection,
        exports,
    })
}
