//! Exact geometric mean against weight scaling on small dropout networks.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use dropens::analysis::relative_difference;
use dropens::data::Split;
use dropens::ensemble::InferenceRule;
use dropens::masks::MaskPolicy;
use dropens::model::save_model;
use dropens::training::TrainCriterion;

use super::{
    elapsed, load_split, metrics, prepare_dir, run_id, seeded, test_error, thread_pool, train_run,
    write_history, ExperimentOutput, RunSeeds,
};
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::records::{paired_test, write_records, write_stats, write_timings, RunRecord};
use crate::search::SearchSpace;
use crate::seed::{derive_seed, Role};

pub const ALPHA: f64 = 0.01;
pub const TEST_NAME: &str = "exact-geometric-vs-weight-scaled";

const COLUMNS: [(&str, &str); 9] = [
    ("valid_err", "validation error of the returned snapshot (weight-scaled)"),
    ("epochs_trained", "epochs run before early stopping"),
    ("best_epoch", "epoch of the returned snapshot (0-based)"),
    ("err_weight_scaled", "test error with weight-scaled inference"),
    ("err_exact_geometric", "test error of the exact normalised geometric mean over all masks"),
    ("err_mc_geometric", "test error of a sampled geometric mean (empty when disabled)"),
    ("mc_samples", "masks per example for err_mc_geometric"),
    ("rel_diff_weight_scaled", "(err_weight_scaled - err_exact_geometric) / max(err_exact_geometric, 1e-12)"),
    ("rel_diff_guarded", "1 when err_exact_geometric was below 1e-12"),
];

pub fn models_dir(out_dir: &Path) -> std::path::PathBuf {
    out_dir.join("scaling").join("models")
}

pub fn model_path(out_dir: &Path, task: &str, id: u64) -> std::path::PathBuf {
    models_dir(out_dir).join(format!("{}.model", run_id(task, id)))
}

pub fn failure_marker(out_dir: &Path, task: &str, id: u64) -> std::path::PathBuf {
    models_dir(out_dir).join(format!("{}.failed", run_id(task, id)))
}

/// The hyperparameters sampled for configuration `id` of `task`.
pub fn sampled_hyper(cfg: &ExperimentConfig, task: &str, id: u64) -> dropens::training::Hyperparams {
    let seed = derive_seed(cfg.master_seed, "scaling", task, id, Role::Hyper);
    SearchSpace::small_nets(cfg.max_epochs).sample(&mut seeded(seed))
}

pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let dir = prepare_dir(cfg)?;
    fs::create_dir_all(models_dir(&cfg.out_dir))?;
    let pool = thread_pool(cfg.workers)?;
    let mut records = Vec::new();
    for task in &cfg.tasks {
        let split = load_split(task, cfg)?;
        let name = task.to_string();
        let batch: Vec<RunRecord> = pool.install(|| {
            (0..cfg.n_configs as u64)
                .into_par_iter()
                .map(|id| run_config(cfg, &dir, &name, &split, id))
                .collect::<Result<_>>()
        })?;
        records.extend(batch);
    }
    let m = cfg.tasks.len();
    let mut stats = Vec::new();
    for task in &cfg.tasks {
        let name = task.to_string();
        if let Some(s) = paired_test(TEST_NAME, &name, &records, "err_exact_geometric", "err_weight_scaled", m)? {
            stats.push(s);
        }
    }
    write_records(&dir.join("records.csv"), "scaling", cfg.master_seed, &records, &COLUMNS)?;
    write_timings(&dir.join("timings.csv"), &records)?;
    write_stats(&dir.join("stats.json"), "scaling", cfg.master_seed, ALPHA, &stats)?;
    Ok(ExperimentOutput {
        records,
        stats,
        ..Default::default()
    })
}

fn run_config(cfg: &ExperimentConfig, dir: &Path, task: &str, split: &Split, id: u64) -> Result<RunRecord> {
    let start = Instant::now();
    let hyper = sampled_hyper(cfg, task, id);
    let seeds = RunSeeds::derive(cfg.master_seed, "scaling", task, id);
    let policy = MaskPolicy::half(hyper.hidden_sizes.len());
    let criterion = TrainCriterion::Dropout(policy.clone());
    let names: Vec<&str> = COLUMNS.iter().map(|(n, _)| *n).collect();
    let mut record = RunRecord {
        experiment: "scaling".into(),
        task: task.into(),
        config_id: id,
        seed: seeds.init,
        hyper: hyper.clone(),
        failed: false,
        failure: String::new(),
        metrics: Vec::new(),
        wall_time_s: 0.0,
    };
    let outcome = match train_run(split, &split.train, &criterion, &hyper, seeds)? {
        Ok(o) => o,
        Err(reason) => {
            fs::write(failure_marker(&cfg.out_dir, task, id), format!("{reason}\n"))?;
            record.failed = true;
            record.failure = reason;
            record.metrics = metrics(&names, None);
            record.wall_time_s = elapsed(start);
            return Ok(record);
        }
    };
    let params = &outcome.params;
    save_model(params, model_path(&cfg.out_dir, task, id))?;
    write_history(dir, &run_id(task, id), &outcome)?;

    let test = &split.test;
    let err_ws = test_error(params, test, &InferenceRule::WeightScaled(policy.clone()))?;
    let err_geo = test_error(params, test, &InferenceRule::FactorizedGeometric)?;
    let (err_mc, mc_samples) = match cfg.mc_samples {
        Some(n) => {
            let rule = InferenceRule::MonteCarloGeometric {
                policy,
                n_samples: n,
                seed: derive_seed(cfg.master_seed, "scaling", task, id, Role::Inference),
            };
            (Some(test_error(params, test, &rule)?), Some(n as f64))
        }
        None => (None, None),
    };
    let rel = relative_difference(err_ws, err_geo);
    let values = [
        Some(outcome.best_valid_err),
        Some(outcome.epochs_run as f64),
        Some(outcome.best_epoch as f64),
        Some(err_ws),
        Some(err_geo),
        err_mc,
        mc_samples,
        Some(rel.value),
        Some(if rel.guarded { 1.0 } else { 0.0 }),
    ];
    record.metrics = names.iter().map(|n| n.to_string()).zip(values).collect();
    record.wall_time_s = elapsed(start);
    Ok(record)
}
