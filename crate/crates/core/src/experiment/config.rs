//! Run configuration: a single TOML document with a strict schema.
//!
//! ```toml
//! name = "blobs"
//!
//! [dataset]
//! kind = "synth"
//! seed = 11
//! test_seed = 12
//!
//! [dataset.spec]
//! n_classes = 3
//! means = [[0.0, 2.309], [-2.0, -1.155], [2.0, -1.155]]
//! stds = [0.5, 0.5, 0.5]
//! samples_per_class = 500
//! ood = { kind = "ring", radius = 10.0, width = 1.0 }
//! ood_count = 500
//! extent = 12.0
//! ambient_dim = 64
//!
//! [tie]
//! epochs = 20
//! classifier_lr = 1e-3
//!
//! [scores]
//! odin_temperature = 1000.0
//! ```
//!
//! IDX datasets use `kind = "idx"` with `train_images`, `train_labels`,
//! `test_images`, `test_labels`, `n_classes` and an `[[dataset.ood]]` table
//! per OOD set. Relative paths are resolved against the directory of the
//! config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{synth_blobs, Dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::oodscores::ScoreSettings;
use crate::tieloop::TieConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// Used when `--out` is not given.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub tie: TieConfig,
    #[serde(default)]
    pub scores: ScoreSettings,
    #[serde(default)]
    pub artifacts: ArtifactConfig,
}

fn default_name() -> String {
    "run".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synth {
        spec: SynthSpec,
        /// Seed for the training draw.
        seed: u64,
        /// Seed for the test/OOD draw.
        test_seed: u64,
    },
    Idx {
        n_classes: usize,
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        ood: Vec<IdxSet>,
        /// First `max_train` training samples; `None` keeps all.
        #[serde(default = "default_max_train")]
        max_train: Option<usize>,
        #[serde(default)]
        max_test: Option<usize>,
        #[serde(default = "yes")]
        downsample: bool,
    },
}

fn default_max_train() -> Option<usize> {
    Some(5000)
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSet {
    pub name: String,
    pub images: PathBuf,
    pub labels: PathBuf,
    /// Label range used only for validation; defaults to 256.
    #[serde(default)]
    pub n_classes: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArtifactConfig {
    /// Inverted samples per class written to each epoch's dump.
    pub dump_per_class: usize,
    pub checkpoints: bool,
    pub curves: bool,
}

impl Default for ArtifactConfig {
    fn default() -> Self {
        ArtifactConfig {
            dump_per_class: 8,
            checkpoints: true,
            curves: true,
        }
    }
}

/// Training, test and OOD sets of one experiment.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub train: Dataset,
    pub test: Dataset,
    pub ood: Vec<Dataset>,
}

impl ExperimentData {
    pub fn geometry(&self) -> Option<(usize, usize)> {
        self.train.geometry
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses and validates a config file, resolving relative dataset paths
    /// against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.tie.validate()?;
        let s = &self.scores;
        if !(s.odin_temperature > 0.0 && s.energy_temperature > 0.0 && s.odin_epsilon >= 0.0) {
            return Err(Error::Config("score temperatures must be > 0 and odin_epsilon >= 0".into()));
        }
        if let Some(e) = s.eps_cov {
            if !(e > 0.0 && e.is_finite()) {
                return Err(Error::Config("eps_cov must be finite and > 0".into()));
            }
        }
        match &self.dataset {
            DatasetConfig::Synth { spec, .. } => spec.validate(),
            DatasetConfig::Idx { n_classes, ood, .. } => {
                if *n_classes < 2 {
                    return Err(Error::Config("idx datasets need n_classes >= 2".into()));
                }
                let mut names: Vec<&str> = ood.iter().map(|o| o.name.as_str()).collect();
                names.sort_unstable();
                if names.windows(2).any(|w| w[0] == w[1]) {
                    return Err(Error::Config("OOD set names must be unique".into()));
                }
                Ok(())
            }
        }
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            ood,
            ..
        } = &mut self.dataset
        {
            fix(train_images);
            fix(train_labels);
            fix(test_images);
            fix(test_labels);
            for o in ood {
                fix(&mut o.images);
                fix(&mut o.labels);
            }
        }
    }

    pub fn load_data(&self) -> Result<ExperimentData> {
        match &self.dataset {
            DatasetConfig::Synth { spec, seed, test_seed } => {
                let (train, _) = synth_blobs(spec, *seed)?;
                let (mut test, ood) = synth_blobs(spec, *test_seed)?;
                test.name = "blobs_test".into();
                Ok(ExperimentData {
                    train,
                    test,
                    ood: vec![ood],
                })
            }
            DatasetConfig::Idx {
                n_classes,
                train_images,
                train_labels,
                test_images,
                test_labels,
                ood,
                max_train,
                max_test,
                downsample,
            } => {
                let prep = |d: Dataset, cap: Option<usize>| -> Result<Dataset> {
                    let d = match cap {
                        Some(c) => d.truncated(c),
                        None => d,
                    };
                    if *downsample {
                        d.downsampled()
                    } else {
                        Ok(d)
                    }
                };
                let train = prep(Dataset::load_idx("train", train_images, train_labels, *n_classes)?, *max_train)?;
                let test = prep(Dataset::load_idx("test", test_images, test_labels, *n_classes)?, *max_test)?;
                let ood = ood
                    .iter()
                    .map(|o| {
                        let d = Dataset::load_idx(&o.name, &o.images, &o.labels, o.n_classes.unwrap_or(256))?;
                        prep(d, *max_test)
                    })
                    .collect::<Result<Vec<_>>>()?;
                if let Some(o) = ood.iter().find(|o| o.dim() != train.dim()) {
                    return Err(Error::Config(format!(
                        "OOD set {} has dimension {}, training data has {}",
                        o.name,
                        o.dim(),
                        train.dim()
                    )));
                }
                Ok(ExperimentData { train, test, ood })
            }
        }
    }
}
