//! Experiment configuration files and their defaults.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use dropens::data::TaskSpec;
use dropens::training::BoostSign;

use crate::error::{ExpError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentId {
    /// Exact geometric mean against weight scaling.
    Scaling,
    /// Geometric against arithmetic averaging, on the scaling models.
    Mean,
    /// Fixed-mask bootstrap ensembles against one dropout network.
    Untied,
    /// Dropout boosting against dropout and plain SGD.
    Boosting,
}

impl ExperimentId {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Scaling => "scaling",
            Self::Mean => "mean",
            Self::Untied => "untied",
            Self::Boosting => "boosting",
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentId {
    type Err = ExpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scaling" => Ok(Self::Scaling),
            "mean" => Ok(Self::Mean),
            "untied" => Ok(Self::Untied),
            "boosting" => Ok(Self::Boosting),
            other => Err(ExpError::Config(format!("unknown experiment `{other}`"))),
        }
    }
}

/// A fully resolved experiment configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    pub tasks: Vec<TaskSpec>,
    /// Hyperparameter configurations to sample.
    pub n_configs: usize,
    /// Fixed-mask ensemble members (untied experiment only).
    pub n_ensemble_members: usize,
    /// Ensemble sizes for the untied ensemble curve.
    pub ensemble_sizes: Vec<usize>,
    pub master_seed: u64,
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub workers: usize,
    pub max_epochs: usize,
    /// Test points for the exact arithmetic mean; `None` uses them all.
    pub arith_test_points: Option<usize>,
    /// Monte Carlo samples for the optional sampled geometric mean.
    pub mc_samples: Option<usize>,
    /// Upper bound on hidden widths for the wide-net experiments.
    pub max_hidden: usize,
    /// Truncate every training set to its first rows (for quick runs).
    pub max_train_examples: Option<usize>,
    pub boost_sign: BoostSign,
}

/// The on-disk form. Every field is optional and falls back to the
/// experiment's defaults; unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub experiment: Option<ExperimentId>,
    pub tasks: Option<Vec<String>>,
    pub n_configs: Option<usize>,
    pub n_ensemble_members: Option<usize>,
    pub ensemble_sizes: Option<Vec<usize>>,
    pub master_seed: Option<u64>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub workers: Option<usize>,
    pub max_epochs: Option<usize>,
    pub arith_test_points: Option<usize>,
    pub use_all_test_points: Option<bool>,
    pub mc_samples: Option<usize>,
    pub max_hidden: Option<usize>,
    pub max_train_examples: Option<usize>,
    pub boost_sign: Option<BoostSign>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExpError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| ExpError::Config(format!("{}: {e}", path.display())))
    }
}

pub const DEFAULT_MASTER_SEED: u64 = 20_131_220;

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

impl ExperimentConfig {
    /// Defaults for `experiment`, at desk scale unless `full_scale`.
    pub fn defaults(experiment: ExperimentId, full_scale: bool) -> Self {
        let tasks = match experiment {
            ExperimentId::Scaling | ExperimentId::Mean if full_scale => {
                let mut t = TaskSpec::binary_tasks();
                t.sort_by_key(|t| t.to_string());
                t
            }
            ExperimentId::Scaling | ExperimentId::Mean => vec![
                TaskSpec::SyntheticDiamond {
                    seed: dropens::data::DEFAULT_DIAMOND_SEED,
                },
                TaskSpec::MnistBinary { a: 1, b: 7 },
            ],
            ExperimentId::Untied | ExperimentId::Boosting => vec![TaskSpec::MnistFull],
        };
        let n_members = if full_scale { 360 } else { 36 };
        let ensemble_sizes = if full_scale {
            vec![1, 2, 3, 4, 5, 6, 8, 10, 12, 15, 20, 24, 30, 36, 45, 60, 72, 90, 120, 180, 360]
        } else {
            vec![1, 2, 3, 4, 6, 9, 12, 18, 36]
        };
        Self {
            experiment,
            tasks,
            n_configs: if full_scale { 50 } else { 10 },
            n_ensemble_members: n_members,
            ensemble_sizes,
            master_seed: DEFAULT_MASTER_SEED,
            data_dir: None,
            out_dir: PathBuf::from("out"),
            workers: default_workers(),
            max_epochs: if full_scale { 3000 } else { 1000 },
            arith_test_points: if full_scale { None } else { Some(500) },
            mc_samples: None,
            max_hidden: if full_scale { 1600 } else { 400 },
            max_train_examples: None,
            boost_sign: BoostSign::Derived,
        }
    }

    /// Applies the file's explicit settings on top of the defaults.
    pub fn from_file(file: &ConfigFile, experiment: ExperimentId, full_scale: bool) -> Result<Self> {
        if let Some(e) = file.experiment {
            if e != experiment {
                return Err(ExpError::Config(format!(
                    "config file is for experiment `{e}`, not `{experiment}`"
                )));
            }
        }
        let mut cfg = Self::defaults(experiment, full_scale);
        if let Some(tasks) = &file.tasks {
            cfg.tasks = tasks
                .iter()
                .map(|t| t.parse().map_err(|e| ExpError::Config(format!("{e}"))))
                .collect::<Result<_>>()?;
        }
        macro_rules! take {
            ($($field:ident),*) => { $(if let Some(v) = &file.$field { cfg.$field = v.clone(); })* };
        }
        take!(n_configs, n_ensemble_members, ensemble_sizes, master_seed, out_dir, workers, max_epochs, max_hidden, boost_sign);
        if file.data_dir.is_some() {
            cfg.data_dir = file.data_dir.clone();
        }
        if file.arith_test_points.is_some() {
            cfg.arith_test_points = file.arith_test_points;
        }
        if file.use_all_test_points == Some(true) {
            cfg.arith_test_points = None;
        }
        if file.mc_samples.is_some() {
            cfg.mc_samples = file.mc_samples;
        }
        if file.max_train_examples.is_some() {
            cfg.max_train_examples = file.max_train_examples;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ExpError::Config(msg));
        if self.n_configs == 0 {
            return fail("n_configs must be at least 1".into());
        }
        if self.tasks.is_empty() {
            return fail("no tasks configured".into());
        }
        if self.workers == 0 {
            return fail("workers must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be at least 1".into());
        }
        if self.mc_samples == Some(0) {
            return fail("mc_samples must be at least 1".into());
        }
        if self.experiment == ExperimentId::Untied {
            if self.ensemble_sizes.iter().any(|&n| n == 0) {
                return fail("ensemble sizes must be positive".into());
            }
            if let Some(&max) = self.ensemble_sizes.iter().max() {
                if max > self.n_ensemble_members {
                    return fail(format!(
                        "ensemble size {max} exceeds the {} trained members",
                        self.n_ensemble_members
                    ));
                }
            }
        }
        Ok(())
    }

    /// The resolved settings in file form, for recording next to outputs.
    /// Worker count and paths are left out because they do not affect
    /// results.
    pub fn to_file(&self) -> ConfigFile {
        ConfigFile {
            experiment: Some(self.experiment),
            tasks: Some(self.tasks.iter().map(|t| t.to_string()).collect()),
            n_configs: Some(self.n_configs),
            n_ensemble_members: Some(self.n_ensemble_members),
            ensemble_sizes: Some(self.ensemble_sizes.clone()),
            master_seed: Some(self.master_seed),
            data_dir: None,
            out_dir: None,
            workers: None,
            max_epochs: Some(self.max_epochs),
            arith_test_points: self.arith_test_points,
            use_all_test_points: Some(self.arith_test_points.is_none()),
            mc_samples: self.mc_samples,
            max_hidden: Some(self.max_hidden),
            max_train_examples: self.max_train_examples,
            boost_sign: Some(self.boost_sign),
        }
    }

    pub fn experiment_dir(&self) -> PathBuf {
        self.out_dir.join(self.experiment.as_str())
    }
}
