//! Reproducible runs: configuration, artifact layout and the CLI operations.
//!
//! A training run directory contains
//!
//! ```text
//! config.toml              resolved config, byte-for-byte what was hashed
//! manifest.json            config hash, seeds, artifact list, final tau
//! history.csv              one EpochState row per epoch
//! epoch_metrics.csv        per-class metrics of each epoch's inversions
//! checkpoints/epoch_NNN.ckpt
//! inversions/epoch_NNN/class_KK.pgm   (image data)
//! inversions/epoch_NNN.csv            (vector data)
//! eval/accuracy.csv, eval/detection.csv, eval/{auroc,aupr,fpr95}_grid.csv,
//! eval/scores.csv, eval/curves/<set>_<score>_{roc,pr}.csv
//! ```
//!
//! Passing `manifest.json` back to [`train`] via [`load_run_config`] replays
//! the run; every CSV is reproduced byte for byte.

pub mod config;
pub mod eval;
pub mod pgm;
pub mod report;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{ArtifactConfig, DatasetConfig, ExperimentConfig, ExperimentData, IdxSet};
pub use eval::{evaluate, AccuracyRow, DetectionRow, Evaluation, ExportRow};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::inversion::generate_batch;
use crate::models::ModelCheckpoint;
use crate::oodscores::{energy_score, msp_score, ue_score, MahalanobisModel, ScoreSettings};
use crate::rng::{self, streams};
use crate::tieloop::{compute_threshold, run_tie, EpochObserver, EpochReport, RunMode, TieRun};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const HISTORY_FILE: &str = "history.csv";
pub const EPOCH_METRICS_FILE: &str = "epoch_metrics.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub model: u64,
    /// Training and test draws of synthetic data.
    pub data: Option<[u64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub crate_version: String,
    pub mode: RunMode,
    pub config_sha256: String,
    /// Exact TOML text whose hash is `config_sha256`.
    pub config: String,
    pub seeds: Seeds,
    pub epochs: usize,
    pub final_tau: f64,
    pub artifacts: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Parses the embedded config after checking it against the recorded hash.
    pub fn config(&self) -> Result<ExperimentConfig> {
        let got = sha256_hex(self.config.as_bytes());
        if got != self.config_sha256 {
            return Err(Error::Config(format!(
                "manifest config hash mismatch: recorded {}, computed {got}",
                self.config_sha256
            )));
        }
        ExperimentConfig::from_toml(&self.config)
    }
}

/// Reads either a TOML config or a run manifest (`.json`).
pub fn load_run_config(path: &Path) -> Result<ExperimentConfig> {
    if path.extension().is_some_and(|e| e == "json") {
        Manifest::load(path)?.config()
    } else {
        ExperimentConfig::load(path)
    }
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub checkpoints: Vec<PathBuf>,
    pub dumps: Vec<PathBuf>,
    pub run: TieRun,
    pub evaluation: Evaluation,
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn relative(dir: &Path, p: &Path) -> String {
    p.strip_prefix(dir).unwrap_or(p).display().to_string()
}

struct ArtifactWriter<'a> {
    dir: &'a Path,
    seed: u64,
    settings: &'a ArtifactConfig,
    geometry: Option<(usize, usize)>,
    checkpoints: Vec<PathBuf>,
    dumps: Vec<PathBuf>,
}

impl EpochObserver for ArtifactWriter<'_> {
    fn on_epoch(&mut self, r: &EpochReport<'_>) -> Result<()> {
        let epoch = r.state.epoch;
        if self.settings.checkpoints {
            let path = self.dir.join("checkpoints").join(format!("epoch_{epoch:03}.ckpt"));
            ModelCheckpoint {
                classifier: r.classifier.clone(),
                generator: r.generator.clone(),
                seed: self.seed,
                epoch,
                tau: Some(r.state.tau),
            }
            .save(&path)?;
            self.checkpoints.push(path);
        }
        if let Some(batch) = r.inverted {
            let k = r.classifier.num_outputs();
            let per_class = batch.targets.len() / k;
            let take = self.settings.dump_per_class.min(per_class);
            if take > 0 {
                let rows: Vec<Vec<usize>> = (0..k).map(|c| (c * per_class..c * per_class + take).collect()).collect();
                let base = self.dir.join("inversions");
                self.dumps
                    .extend(write_dump(&base, &format!("epoch_{epoch:03}"), &batch.samples, &rows, self.geometry)?);
            }
        }
        Ok(())
    }
}

/// One PGM grid per class, `dir/class_KK.pgm`.
fn write_grids(dir: &Path, samples: &Tensor, rows_per_class: &[Vec<usize>], h: usize, w: usize) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let mut out = Vec::new();
    for (c, rows) in rows_per_class.iter().enumerate() {
        let images: Vec<&[f64]> = rows.iter().map(|&i| samples.row(i)).collect();
        let cols = (images.len() as f64).sqrt().ceil() as usize;
        let path = dir.join(format!("class_{c:02}.pgm"));
        pgm::tile(&images, h, w, cols)?.write(&path)?;
        out.push(path);
    }
    Ok(out)
}

/// Point dump with columns `class, x0, x1, ...`.
fn write_points(path: &Path, samples: &Tensor, rows_per_class: &[Vec<usize>]) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    let mut wtr = csv::Writer::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    let mut header = vec!["class".to_string()];
    header.extend((0..samples.cols()).map(|j| format!("x{j}")));
    wtr.write_record(&header)?;
    for (c, rows) in rows_per_class.iter().enumerate() {
        for &i in rows {
            let mut rec = vec![c.to_string()];
            rec.extend(samples.row(i).iter().map(|v| report::num(*v)));
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

fn write_dump(
    base: &Path,
    stem: &str,
    samples: &Tensor,
    rows_per_class: &[Vec<usize>],
    geometry: Option<(usize, usize)>,
) -> Result<Vec<PathBuf>> {
    match geometry {
        Some((h, w)) => write_grids(&base.join(stem), samples, rows_per_class, h, w),
        None => {
            let path = base.join(format!("{stem}.csv"));
            write_points(&path, samples, rows_per_class)?;
            Ok(vec![path])
        }
    }
}

/// Writes every evaluation CSV into `dir`, returning the paths written.
pub fn write_evaluation(dir: &Path, ev: &Evaluation, curves: bool) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str| {
        let p = dir.join(name);
        written.push(p.clone());
        p
    };
    report::write_accuracy(&put("accuracy.csv"), &ev.accuracy)?;
    report::write_detection(&put("detection.csv"), &ev.detection)?;
    report::write_metric_grid(&put("auroc_grid.csv"), &ev.detection, |s| s.auroc)?;
    report::write_metric_grid(&put("aupr_grid.csv"), &ev.detection, |s| s.aupr)?;
    report::write_metric_grid(&put("fpr95_grid.csv"), &ev.detection, |s| s.fpr_at_95_tpr)?;
    report::write_score_export(&put("scores.csv"), &ev.exports)?;
    if curves {
        let cdir = dir.join("curves");
        create_dir(&cdir)?;
        for d in ev.detection.iter().filter(|d| d.summary.is_some()) {
            let stem = format!("{}_{}", d.ood_set, d.score.name());
            let roc = cdir.join(format!("{stem}_roc.csv"));
            let pr = cdir.join(format!("{stem}_pr.csv"));
            report::write_curve(&roc, &d.roc)?;
            report::write_curve(&pr, &d.pr)?;
            written.push(roc);
            written.push(pr);
        }
    }
    Ok(written)
}

/// Builds a thread pool honouring `TIE_THREADS` (unset or 0: rayon default).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let n = match std::env::var("TIE_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("TIE_THREADS must be a non-negative integer, got {v:?}")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Config(e.to_string()))
}

/// Runs training (TIE or baseline per `config.tie.mode`), then evaluates the
/// final model, writing every artifact under `out`.
pub fn train(config: &ExperimentConfig, out: &Path) -> Result<RunArtifacts> {
    config.validate()?;
    let data = config.load_data()?;
    create_dir(out)?;
    if config.artifacts.checkpoints {
        create_dir(&out.join("checkpoints"))?;
    }
    let config_text = config.to_toml()?;
    fs::write(out.join(CONFIG_FILE), &config_text).map_err(|e| Error::io(&out.join(CONFIG_FILE), e))?;

    let mut writer = ArtifactWriter {
        dir: out,
        seed: config.tie.seed,
        settings: &config.artifacts,
        geometry: data.geometry(),
        checkpoints: Vec::new(),
        dumps: Vec::new(),
    };
    let run = run_tie(&config.tie, &data.train, &mut writer)?;
    let (checkpoints, dumps) = (writer.checkpoints, writer.dumps);

    report::write_history(&out.join(HISTORY_FILE), &run.history)?;
    report::write_epoch_metrics(&out.join(EPOCH_METRICS_FILE), &run.metric_rows)?;

    let pool = thread_pool()?;
    let evaluation = pool.install(|| {
        evaluate(&run.classifier, run.final_tau(), &data.train, &data.test, &data.ood, &config.scores)
    })?;
    let eval_files = write_evaluation(&out.join("eval"), &evaluation, config.artifacts.curves)?;

    let mut artifacts = vec![CONFIG_FILE.to_string(), HISTORY_FILE.to_string(), EPOCH_METRICS_FILE.to_string()];
    artifacts.extend(checkpoints.iter().chain(&dumps).chain(&eval_files).map(|p| relative(out, p)));
    let manifest = Manifest {
        name: config.name.clone(),
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        mode: config.tie.mode,
        config_sha256: sha256_hex(config_text.as_bytes()),
        config: config_text,
        seeds: Seeds {
            model: config.tie.seed,
            data: match &config.dataset {
                DatasetConfig::Synth { seed, test_seed, .. } => Some([*seed, *test_seed]),
                DatasetConfig::Idx { .. } => None,
            },
        },
        epochs: config.tie.epochs,
        final_tau: run.final_tau(),
        artifacts,
    };
    let mpath = out.join(MANIFEST_FILE);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    Ok(RunArtifacts {
        dir: out.to_path_buf(),
        manifest,
        checkpoints,
        dumps,
        run,
        evaluation,
    })
}

/// Evaluates a saved checkpoint on the sets named by `config`. A checkpoint
/// without a stored threshold gets one recomputed from the training data.
pub fn eval_checkpoint(config: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<Evaluation> {
    let ckpt = ModelCheckpoint::load(checkpoint)?;
    let data = config.load_data()?;
    if data.ood.is_empty() {
        return Err(Error::Config("evaluation needs at least one OOD set".into()));
    }
    if ckpt.classifier.spec().input_dim != data.train.dim() || ckpt.classifier.n_classes() != data.train.n_classes {
        return Err(Error::Config(format!(
            "checkpoint expects {}-dim inputs and {} classes; data has {} and {}",
            ckpt.classifier.spec().input_dim,
            ckpt.classifier.n_classes(),
            data.train.dim(),
            data.train.n_classes
        )));
    }
    let tau = match ckpt.tau {
        Some(t) => t,
        None => compute_threshold(&ckpt.classifier, &data.train, config.tie.lambda)?.tau,
    };
    let pool = thread_pool()?;
    let ev = pool.install(|| evaluate(&ckpt.classifier, tau, &data.train, &data.test, &data.ood, &config.scores))?;
    write_evaluation(out, &ev, config.artifacts.curves)?;
    Ok(ev)
}

/// Generates `per_class` samples for every class (garbage included) from a
/// checkpoint's generator. With `geometry` each class becomes one PGM grid
/// `class_KK.pgm`; without it a single `inversions.csv` is written.
pub fn invert_dump(
    checkpoint: &Path,
    per_class: usize,
    seed: u64,
    geometry: Option<(usize, usize)>,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    if per_class == 0 {
        return Err(Error::invalid("per_class must be >= 1"));
    }
    let ckpt = ModelCheckpoint::load(checkpoint)?;
    let d = ckpt.generator.output_dim();
    if let Some((h, w)) = geometry {
        if h * w != d {
            return Err(Error::invalid(format!("grid geometry {h}x{w} does not match generator output {d}")));
        }
    }
    let mut r = rng::stream(seed, streams::GENERATION);
    let batch = generate_batch(&ckpt.generator, per_class, &mut r)?;
    let k = ckpt.generator.cond_dim();
    let rows: Vec<Vec<usize>> = (0..k).map(|c| (c * per_class..(c + 1) * per_class).collect()).collect();
    match geometry {
        Some((h, w)) => write_grids(out, &batch.samples, &rows, h, w),
        None => {
            let path = out.join("inversions.csv");
            write_points(&path, &batch.samples, &rows)?;
            Ok(vec![path])
        }
    }
}

/// Row of the `score` subcommand output.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitScores {
    pub ue: f64,
    pub ue_renorm: f64,
    pub msp: f64,
    pub energy: f64,
    pub mahalanobis: Option<f64>,
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
}

fn read_numeric_csv(path: &Path) -> Result<Table> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::invalid(format!("{}: data row {}: {e}", path.display(), i + 1)))?;
        rows.push(row);
    }
    Ok(Table { header, rows })
}

fn columns(t: &Table, prefix: &str) -> Vec<usize> {
    t.header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with(prefix))
        .map(|(i, _)| i)
        .collect()
}

fn pick(row: &[f64], cols: &[usize]) -> Vec<f64> {
    cols.iter().map(|&c| row[c]).collect()
}

/// Scores precomputed network outputs. `input` has columns `logit_0 ..
/// logit_n` (the last one is the garbage logit) and optionally `feat_*`.
/// When `fit` is given (a CSV of `label` plus `feat_*` columns from ID
/// training data) the Mahalanobis score is also computed. ODIN needs input
/// gradients and is only available from `eval`.
pub fn score_logits(input: &Path, fit: Option<&Path>, settings: &ScoreSettings) -> Result<Vec<LogitScores>> {
    let t = read_numeric_csv(input)?;
    let lc = columns(&t, "logit_");
    if lc.len() < 3 {
        return Err(Error::invalid(format!("{}: need at least 3 logit_ columns", input.display())));
    }
    let n = lc.len() - 1;
    let maha = match fit {
        Some(fp) => {
            let ft = read_numeric_csv(fp)?;
            let fc = columns(&ft, "feat_");
            let label = ft
                .header
                .iter()
                .position(|h| h == "label")
                .ok_or_else(|| Error::invalid(format!("{}: missing label column", fp.display())))?;
            let feats = Tensor::from_rows(&ft.rows.iter().map(|r| pick(r, &fc)).collect::<Vec<_>>())?;
            let labels: Vec<usize> = ft.rows.iter().map(|r| r[label] as usize).collect();
            Some((MahalanobisModel::fit(&feats, &labels, n, settings.eps_cov)?, columns(&t, "feat_")))
        }
        None => None,
    };
    t.rows
        .iter()
        .map(|row| {
            let logits = pick(row, &lc);
            let p_full = crate::diffcore::softmax(&logits);
            let p_id = crate::diffcore::softmax(&logits[..n]);
            Ok(LogitScores {
                ue: ue_score(&p_full)?,
                ue_renorm: ue_score(&p_id)?,
                msp: msp_score(&p_id),
                energy: energy_score(&logits[..n], settings.energy_temperature),
                mahalanobis: match &maha {
                    Some((m, fc)) if fc.len() == m.feature_dim => Some(m.score(&pick(row, fc))),
                    Some(_) => {
                        return Err(Error::invalid("input feat_ columns do not match the fitted feature dimension"))
                    }
                    None => None,
                },
            })
        })
        .collect()
}

pub fn write_logit_scores(path: &Path, rows: &[LogitScores]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    w.write_record(["index", "ue", "ue_renorm", "msp", "energy", "mahalanobis"])?;
    for (i, r) in rows.iter().enumerate() {
        w.write_record([
            i.to_string(),
            report::num(r.ue),
            report::num(r.ue_renorm),
            report::num(r.msp),
            report::num(r.energy),
            r.mahalanobis.map_or_else(|| report::NOT_AVAILABLE.to_string(), report::num),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
