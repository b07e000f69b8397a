//! Geometric against arithmetic averaging over every dropout mask, on the
//! networks trained by the scaling experiment.

use std::time::Instant;

use rayon::prelude::*;

use dropens::analysis::relative_difference;
use dropens::data::Dataset;
use dropens::ensemble::InferenceRule;
use dropens::model::load_model;

use super::scaling::{failure_marker, model_path, sampled_hyper};
use super::{elapsed, load_split, metrics, prepare_dir, test_error, thread_pool, ExperimentOutput, RunSeeds};
use crate::config::ExperimentConfig;
use crate::error::{ExpError, Result};
use crate::records::{paired_test, write_records, write_stats, write_timings, RunRecord};

pub const ALPHA: f64 = 0.01;
pub const TEST_NAME: &str = "exact-geometric-vs-exact-arithmetic";

const COLUMNS: [(&str, &str); 6] = [
    ("n_test_points", "leading test examples used for both means"),
    ("err_exact_geometric", "test error of the exact normalised geometric mean"),
    ("err_exact_arithmetic", "test error of the exact arithmetic mean over all masks"),
    ("abs_discrepancy", "|err_exact_geometric - err_exact_arithmetic|"),
    ("rel_diff_geometric", "(err_exact_geometric - err_exact_arithmetic) / max(err_exact_arithmetic, 1e-12)"),
    ("rel_diff_guarded", "1 when err_exact_arithmetic was below 1e-12"),
];

pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let dir = prepare_dir(cfg)?;
    let pool = thread_pool(cfg.workers)?;
    let mut records = Vec::new();
    for task in &cfg.tasks {
        let split = load_split(task, cfg)?;
        let test = match cfg.arith_test_points {
            Some(n) => split.test.head(n),
            None => split.test.clone(),
        };
        let name = task.to_string();
        let batch: Vec<RunRecord> = pool.install(|| {
            (0..cfg.n_configs as u64)
                .into_par_iter()
                .map(|id| run_config(cfg, &name, &test, id))
                .collect::<Result<_>>()
        })?;
        records.extend(batch);
    }
    let m = cfg.tasks.len();
    let mut stats = Vec::new();
    for task in &cfg.tasks {
        let name = task.to_string();
        if let Some(s) = paired_test(TEST_NAME, &name, &records, "err_exact_geometric", "err_exact_arithmetic", m)? {
            stats.push(s);
        }
    }
    write_records(&dir.join("records.csv"), "mean", cfg.master_seed, &records, &COLUMNS)?;
    write_timings(&dir.join("timings.csv"), &records)?;
    write_stats(&dir.join("stats.json"), "mean", cfg.master_seed, ALPHA, &stats)?;
    Ok(ExperimentOutput {
        records,
        stats,
        ..Default::default()
    })
}

fn run_config(cfg: &ExperimentConfig, task: &str, test: &Dataset, id: u64) -> Result<RunRecord> {
    let start = Instant::now();
    let names: Vec<&str> = COLUMNS.iter().map(|(n, _)| *n).collect();
    let mut record = RunRecord {
        experiment: "mean".into(),
        task: task.into(),
        config_id: id,
        seed: RunSeeds::derive(cfg.master_seed, "scaling", task, id).init,
        hyper: sampled_hyper(cfg, task, id),
        failed: false,
        failure: String::new(),
        metrics: Vec::new(),
        wall_time_s: 0.0,
    };
    let path = model_path(&cfg.out_dir, task, id);
    if !path.exists() {
        let marker = failure_marker(&cfg.out_dir, task, id);
        if marker.exists() {
            record.failed = true;
            record.failure = std::fs::read_to_string(marker)?.trim().to_string();
            record.metrics = metrics(&names, None);
            return Ok(record);
        }
        return Err(ExpError::MissingCheckpoint(path.display().to_string()));
    }
    let params = load_model(&path)?;
    let err_geo = test_error(&params, test, &InferenceRule::FactorizedGeometric)?;
    let err_arith = test_error(&params, test, &InferenceRule::ExactArithmetic)?;
    let rel = relative_difference(err_geo, err_arith);
    record.metrics = metrics(
        &names,
        Some(vec![
            test.len() as f64,
            err_geo,
            err_arith,
            (err_geo - err_arith).abs(),
            rel.value,
            if rel.guarded { 1.0 } else { 0.0 },
        ]),
    );
    record.wall_time_s = elapsed(start);
    Ok(record)
}
