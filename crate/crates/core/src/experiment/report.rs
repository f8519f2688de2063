//! CSV artifacts. Floats are written in Rust's shortest round-trip form so
//! identical runs produce identical bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{CurvePoint, EpochMetricRow};
use crate::oodscores::ScoreKind;
use crate::tieloop::EpochState;

use super::eval::{AccuracyRow, DetectionRow, ExportRow};

pub const NOT_AVAILABLE: &str = "N/A";

pub fn num(v: f64) -> String {
    format!("{v:?}")
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::invalid(format!("{}: {other:?}", path.display())),
    })
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const HISTORY_HEADER: [&str; 15] = [
    "epoch",
    "train_loss",
    "mu",
    "sigma",
    "tau",
    "gamma",
    "inv_kl",
    "inv_ce",
    "inv_cosine",
    "inv_total",
    "skipped_inversion_steps",
    "generated",
    "excluded",
    "garbage_size",
    "class_weights",
];

/// One row per epoch; `class_weights` is a `;`-separated list.
pub fn write_history(path: &Path, history: &[EpochState]) -> Result<()> {
    write_rows(
        path,
        &HISTORY_HEADER,
        history.iter().map(|s| {
            vec![
                s.epoch.to_string(),
                num(s.train_loss),
                num(s.mu),
                num(s.sigma),
                num(s.tau),
                num(s.gamma),
                num(s.inversion.kl),
                num(s.inversion.ce),
                num(s.inversion.cosine),
                num(s.inversion.total),
                s.skipped_inversion_steps.to_string(),
                s.generated.to_string(),
                s.excluded_count.to_string(),
                s.garbage_size.to_string(),
                s.class_weights.iter().map(|w| num(*w)).collect::<Vec<_>>().join(";"),
            ]
        }),
    )
}

pub fn write_epoch_metrics(path: &Path, rows: &[EpochMetricRow]) -> Result<()> {
    write_rows(
        path,
        &["epoch", "class", "count", "entropy", "confidence", "margin", "ue"],
        rows.iter().map(|r| {
            vec![
                r.epoch.to_string(),
                r.class.to_string(),
                r.count.to_string(),
                num(r.entropy),
                num(r.confidence),
                num(r.margin),
                num(r.ue),
            ]
        }),
    )
}

/// `role` is `id` for the ID test set (accuracy = accepted with the right
/// class) and `ood` for OOD sets (accuracy = Level-1 + Level-2 rejection
/// rate). `argmax_accuracy` is the threshold-free counterpart.
pub fn write_accuracy(path: &Path, rows: &[AccuracyRow]) -> Result<()> {
    write_rows(
        path,
        &["train", "test", "role", "count", "accuracy", "argmax_accuracy", "level1_rate", "level2_rate"],
        rows.iter().map(|r| {
            vec![
                r.train.clone(),
                r.test.clone(),
                if r.is_ood { "ood" } else { "id" }.to_string(),
                r.count.to_string(),
                num(r.accuracy),
                num(r.argmax_accuracy),
                num(r.level1_rate),
                num(r.level2_rate),
            ]
        }),
    )
}

/// Long form: one row per (OOD set, score). Empty populations give `N/A`.
pub fn write_detection(path: &Path, rows: &[DetectionRow]) -> Result<()> {
    write_rows(
        path,
        &["ood_set", "score", "n_pos", "n_neg", "auroc", "aupr", "fpr_at_95_tpr"],
        rows.iter().map(|r| {
            let cells = match r.summary {
                Some(s) => [num(s.auroc), num(s.aupr), num(s.fpr_at_95_tpr)],
                None => [NOT_AVAILABLE.into(), NOT_AVAILABLE.into(), NOT_AVAILABLE.into()],
            };
            let mut v = vec![r.ood_set.clone(), r.score.name().to_string(), r.n_pos.to_string(), r.n_neg.to_string()];
            v.extend(cells);
            v
        }),
    )
}

/// Wide grid for one metric: OOD sets as rows, scores as columns.
pub fn write_metric_grid(path: &Path, rows: &[DetectionRow], pick: fn(&crate::metrics::DetectionSummary) -> f64) -> Result<()> {
    let mut sets: Vec<&str> = Vec::new();
    for r in rows {
        if !sets.contains(&r.ood_set.as_str()) {
            sets.push(&r.ood_set);
        }
    }
    let mut header = vec!["ood_set"];
    header.extend(ScoreKind::ALL.iter().map(|k| k.name()));
    write_rows(
        path,
        &header,
        sets.iter().map(|set| {
            let mut v = vec![set.to_string()];
            for k in ScoreKind::ALL {
                let cell = rows
                    .iter()
                    .find(|r| r.ood_set == *set && r.score == k)
                    .and_then(|r| r.summary.as_ref())
                    .map_or_else(|| NOT_AVAILABLE.to_string(), |s| num(pick(s)));
                v.push(cell);
            }
            v
        }),
    )
}

pub fn write_curve(path: &Path, points: &[CurvePoint]) -> Result<()> {
    write_rows(
        path,
        &["threshold", "tpr", "fpr", "precision", "recall"],
        points
            .iter()
            .map(|p| vec![num(p.threshold), num(p.tpr), num(p.fpr), num(p.precision), num(p.recall)]),
    )
}

pub const SCORE_EXPORT_HEADER: [&str; 13] = [
    "set",
    "index",
    "ood_truth",
    "label",
    "predicted",
    "verdict",
    "ue",
    "ue_renorm",
    "msp",
    "odin",
    "energy",
    "mahalanobis",
    "rejected",
];

/// Raw scores (not oriented). `verdict` is `id`, `ood_l1` or `ood_l2`;
/// `ood_truth` marks samples from an OOD set; `rejected` is 1 when the
/// verdict is either OOD level.
pub fn write_score_export(path: &Path, rows: &[ExportRow]) -> Result<()> {
    write_rows(
        path,
        &SCORE_EXPORT_HEADER,
        rows.iter().map(|r| {
            let s = &r.scores;
            vec![
                r.set.clone(),
                r.index.to_string(),
                u8::from(r.is_ood).to_string(),
                r.label.to_string(),
                r.predicted.to_string(),
                r.verdict.level().to_string(),
                num(s.ue),
                num(s.ue_renorm),
                num(s.msp),
                num(s.odin),
                num(s.energy),
                num(s.mahalanobis),
                u8::from(r.verdict.is_ood()).to_string(),
            ]
        }),
    )
}
