//! Drivers for the four experiments. Each one writes its outputs under
//! `<out_dir>/<experiment>/` and returns them for inspection.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dropens::analysis::misclassification_rate;
use dropens::data::{Dataset, Split, TaskSpec};
use dropens::ensemble::{predict_batch, InferenceRule};
use dropens::model::{Architecture, ModelParams};
use dropens::training::{train, Hyperparams, TrainCriterion, TrainOutcome, TrainRngs};

use crate::config::{ExperimentConfig, ExperimentId};
use crate::error::{ExpError, Result};
use crate::records::{CurvePoint, RunRecord, StatRecord};
use crate::seed::{derive_seed, Role};

pub mod boosting;
pub mod mean;
pub mod scaling;
pub mod untied;

/// Experiment name used for hyperparameter seeds shared by the untied and
/// boosting experiments, so both see the same configurations.
pub const WIDE_SEARCH: &str = "wide-search";

#[derive(Debug, Clone, Default)]
pub struct ExperimentOutput {
    pub records: Vec<RunRecord>,
    pub stats: Vec<StatRecord>,
    /// Ensemble-size curve (untied experiment only).
    pub curve: Vec<CurvePoint>,
    /// Hyperparameter search runs (untied experiment only).
    pub search: Vec<RunRecord>,
    /// Test error of the best dropout network (untied experiment only).
    pub reference_err: Option<f64>,
}

pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    match cfg.experiment {
        ExperimentId::Scaling => scaling::run(cfg),
        ExperimentId::Mean => mean::run(cfg),
        ExperimentId::Untied => untied::run(cfg),
        ExperimentId::Boosting => boosting::run(cfg),
    }
}

pub(crate) fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| ExpError::Pool(e.to_string()))
}

pub(crate) fn load_split(task: &TaskSpec, cfg: &ExperimentConfig) -> Result<Split> {
    let mut split = task.load(cfg.data_dir.as_deref())?;
    if let Some(n) = cfg.max_train_examples {
        split.train = split.train.head(n);
    }
    Ok(split)
}

/// Creates the experiment directory with a `history/` subdirectory and
/// records the resolved configuration.
pub(crate) fn prepare_dir(cfg: &ExperimentConfig) -> Result<std::path::PathBuf> {
    let dir = cfg.experiment_dir();
    fs::create_dir_all(dir.join("history"))?;
    let mut text = serde_json::to_string_pretty(&cfg.to_file())?;
    text.push('\n');
    fs::write(dir.join("config.json"), text)?;
    Ok(dir)
}

pub fn architecture(split: &Split, hidden: &[usize]) -> Result<Architecture> {
    let arch = if split.n_classes() == 2 {
        Architecture::binary(split.input_dim(), hidden.to_vec())?
    } else {
        Architecture::classifier(split.input_dim(), hidden.to_vec(), split.n_classes())?
    };
    Ok(arch)
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Seeds of one training run.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RunSeeds {
    pub init: u64,
    pub order: u64,
    pub mask: u64,
}

impl RunSeeds {
    pub fn derive(master: u64, experiment: &str, task: &str, id: u64) -> Self {
        Self {
            init: derive_seed(master, experiment, task, id, Role::Init),
            order: derive_seed(master, experiment, task, id, Role::DataOrder),
            mask: derive_seed(master, experiment, task, id, Role::Mask),
        }
    }
}

/// Trains a freshly initialised network. Divergence is returned as
/// `Ok(Err(reason))` so the caller can record it; other errors propagate.
pub(crate) fn train_run(
    split: &Split,
    train_set: &Dataset,
    criterion: &TrainCriterion,
    hyper: &Hyperparams,
    seeds: RunSeeds,
) -> Result<std::result::Result<TrainOutcome, String>> {
    let arch = architecture(split, &hyper.hidden_sizes)?;
    let params = ModelParams::init(&arch, hyper.init_range, &mut seeded(seeds.init))?;
    let mut rngs = TrainRngs::from_seeds(seeds.order, seeds.mask);
    match train(params, train_set, &split.valid, criterion, hyper, &mut rngs) {
        Ok(outcome) => Ok(Ok(outcome)),
        Err(e @ (dropens::Error::Diverged { .. } | dropens::Error::NonFinite(_))) => Ok(Err(e.to_string())),
        Err(e) => Err(e.into()),
    }
}

pub(crate) fn test_error(params: &ModelParams, data: &Dataset, rule: &InferenceRule) -> Result<f64> {
    let probs = predict_batch(params, data, rule, None)?;
    Ok(misclassification_rate(&probs, data.labels())?)
}

pub(crate) fn write_history(dir: &Path, run_id: &str, outcome: &TrainOutcome) -> Result<()> {
    let file = fs::File::create(dir.join("history").join(format!("{run_id}.csv")))?;
    outcome.history.write_csv(std::io::BufWriter::new(file))?;
    Ok(())
}

pub(crate) fn run_id(task: &str, id: u64) -> String {
    format!("{task}_{id:03}")
}

pub(crate) fn elapsed(start: Instant) -> f64 {
    start.elapsed().as_secs_f64()
}

/// Builds `(name, value)` metrics, all `None` when `values` is `None`.
pub(crate) fn metrics(names: &[&str], values: Option<Vec<f64>>) -> Vec<(String, Option<f64>)> {
    match values {
        Some(v) => {
            debug_assert_eq!(v.len(), names.len());
            names.iter().map(|n| n.to_string()).zip(v.into_iter().map(Some)).collect()
        }
        None => names.iter().map(|n| (n.to_string(), None)).collect(),
    }
}
