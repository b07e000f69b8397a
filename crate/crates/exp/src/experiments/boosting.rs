//! Dropout boosting against dropout and plain SGD with matched
//! hyperparameters, initialisation and example order.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use dropens::analysis::relative_difference;
use dropens::data::Split;
use dropens::ensemble::InferenceRule;
use dropens::masks::MaskPolicy;
use dropens::training::{TrainCriterion, TrainOutcome};

use super::untied::wide_hyper;
use super::{
    elapsed, load_split, metrics, prepare_dir, run_id, test_error, thread_pool, train_run, write_history,
    ExperimentOutput, RunSeeds,
};
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::records::{paired_test, write_records, write_stats, write_timings, RunRecord};

pub const ALPHA: f64 = 0.05;
pub const BOOSTING_VS_SGD: &str = "boosting-vs-sgd";
pub const DROPOUT_VS_SGD: &str = "dropout-vs-sgd";

const MEMBERS: [&str; 3] = ["dropout", "boosting", "sgd"];

const COLUMNS: [(&str, &str); 15] = [
    ("err_dropout", "test error of the dropout network (weight-scaled)"),
    ("err_boosting", "test error of the dropout-boosting network (weight-scaled)"),
    ("err_sgd", "test error of the plain SGD network"),
    ("rel_boosting_vs_sgd", "(err_boosting - err_sgd) / max(err_sgd, 1e-12)"),
    ("rel_dropout_vs_sgd", "(err_dropout - err_sgd) / max(err_sgd, 1e-12)"),
    ("rel_guarded", "1 when err_sgd was below 1e-12"),
    ("valid_err_dropout", "validation error of the dropout snapshot"),
    ("valid_err_boosting", "validation error of the boosting snapshot"),
    ("valid_err_sgd", "validation error of the SGD snapshot"),
    ("epochs_dropout", "epochs run by the dropout network"),
    ("epochs_boosting", "epochs run by the boosting network"),
    ("epochs_sgd", "epochs run by the SGD network"),
    ("best_epoch_dropout", "epoch of the dropout snapshot"),
    ("best_epoch_boosting", "epoch of the boosting snapshot"),
    ("best_epoch_sgd", "epoch of the SGD snapshot"),
];

type MemberResult = std::result::Result<(TrainOutcome, f64), String>;

pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let dir = prepare_dir(cfg)?;
    let pool = thread_pool(cfg.workers)?;
    let mut records = Vec::new();
    for task in &cfg.tasks {
        let split = load_split(task, cfg)?;
        let name = task.to_string();
        let jobs: Vec<(u64, usize)> = (0..cfg.n_configs as u64)
            .flat_map(|id| (0..MEMBERS.len()).map(move |k| (id, k)))
            .collect();
        let results: Vec<(MemberResult, f64)> = pool.install(|| {
            jobs.par_iter()
                .map(|&(id, k)| train_member(cfg, &dir, &name, &split, id, k))
                .collect::<Result<_>>()
        })?;
        for (id, triple) in results.chunks_exact(MEMBERS.len()).enumerate() {
            records.push(assemble(cfg, &name, id as u64, triple));
        }
    }
    let m = cfg.tasks.len();
    let mut stats = Vec::new();
    for task in &cfg.tasks {
        let name = task.to_string();
        for (test, a) in [(BOOSTING_VS_SGD, "err_boosting"), (DROPOUT_VS_SGD, "err_dropout")] {
            if let Some(s) = paired_test(test, &name, &records, a, "err_sgd", m)? {
                stats.push(s);
            }
        }
    }
    write_records(&dir.join("records.csv"), "boosting", cfg.master_seed, &records, &COLUMNS)?;
    write_timings(&dir.join("timings.csv"), &records)?;
    write_stats(&dir.join("stats.json"), "boosting", cfg.master_seed, ALPHA, &stats)?;
    Ok(ExperimentOutput {
        records,
        stats,
        ..Default::default()
    })
}

fn train_member(
    cfg: &ExperimentConfig,
    dir: &Path,
    task: &str,
    split: &Split,
    id: u64,
    k: usize,
) -> Result<(MemberResult, f64)> {
    let start = Instant::now();
    let hyper = wide_hyper(cfg, task, id);
    // One seed set per configuration: all three networks start from the
    // same weights and see examples in the same order.
    let seeds = RunSeeds::derive(cfg.master_seed, "boosting", task, id);
    let policy = MaskPolicy::half(hyper.hidden_sizes.len());
    let (criterion, rule) = match MEMBERS[k] {
        "dropout" => (TrainCriterion::Dropout(policy.clone()), InferenceRule::WeightScaled(policy)),
        "boosting" => (
            TrainCriterion::DropoutBoosting {
                policy: policy.clone(),
                sign: cfg.boost_sign,
            },
            InferenceRule::WeightScaled(policy),
        ),
        _ => (
            TrainCriterion::PlainSgd,
            InferenceRule::WeightScaled(MaskPolicy::uniform(1.0, hyper.hidden_sizes.len())?),
        ),
    };
    let result = match train_run(split, &split.train, &criterion, &hyper, seeds)? {
        Err(reason) => Err(format!("{}: {reason}", MEMBERS[k])),
        Ok(o) => {
            write_history(dir, &format!("{}_{}", run_id(task, id), MEMBERS[k]), &o)?;
            let err = test_error(&o.params, &split.test, &rule)?;
            Ok((o, err))
        }
    };
    Ok((result, elapsed(start)))
}

fn assemble(cfg: &ExperimentConfig, task: &str, id: u64, triple: &[(MemberResult, f64)]) -> RunRecord {
    let names: Vec<&str> = COLUMNS.iter().map(|(n, _)| *n).collect();
    let mut record = RunRecord {
        experiment: "boosting".into(),
        task: task.into(),
        config_id: id,
        seed: RunSeeds::derive(cfg.master_seed, "boosting", task, id).init,
        hyper: wide_hyper(cfg, task, id),
        failed: false,
        failure: String::new(),
        metrics: metrics(&names, None),
        wall_time_s: triple.iter().map(|(_, t)| t).sum(),
    };
    let failures: Vec<&str> = triple.iter().filter_map(|(r, _)| r.as_ref().err().map(String::as_str)).collect();
    if !failures.is_empty() {
        record.failed = true;
        record.failure = failures.join("; ");
        return record;
    }
    let ok: Vec<&(TrainOutcome, f64)> = triple.iter().map(|(r, _)| r.as_ref().unwrap()).collect();
    let (d, b, s) = (ok[0], ok[1], ok[2]);
    let rel_b = relative_difference(b.1, s.1);
    let rel_d = relative_difference(d.1, s.1);
    record.metrics = metrics(
        &names,
        Some(vec![
            d.1,
            b.1,
            s.1,
            rel_b.value,
            rel_d.value,
            if rel_b.guarded { 1.0 } else { 0.0 },
            d.0.best_valid_err,
            b.0.best_valid_err,
            s.0.best_valid_err,
            d.0.epochs_run as f64,
            b.0.epochs_run as f64,
            s.0.epochs_run as f64,
            d.0.best_epoch as f64,
            b.0.best_epoch as f64,
            s.0.best_epoch as f64,
        ]),
    );
    record
}
