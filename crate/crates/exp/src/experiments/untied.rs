//! Fixed-mask networks trained on bootstrap resamples, combined into
//! ensembles of growing size, against one dropout network.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use dropens::analysis::predicted_class;
use dropens::data::{bootstrap_resample, Split};
use dropens::ensemble::InferenceRule;
use dropens::masks::{sample_mask, MaskPolicy, MaskSpace};
use dropens::model::{output_distribution, ModelParams, OutputKind};
use dropens::training::{Hyperparams, TrainCriterion};

use super::{
    elapsed, load_split, metrics, prepare_dir, run_id, seeded, test_error, thread_pool, train_run,
    write_history, ExperimentOutput, RunSeeds, WIDE_SEARCH,
};
use crate::config::ExperimentConfig;
use crate::error::{ExpError, Result};
use crate::records::{write_curve, write_records, write_timings, CurvePoint, RunRecord};
use crate::search::SearchSpace;
use crate::seed::{derive_seed, Role};

const SEARCH_COLUMNS: [(&str, &str); 4] = [
    ("valid_err", "validation error (weight-scaled) of the returned snapshot"),
    ("epochs_trained", "epochs run before early stopping"),
    ("best_epoch", "epoch of the returned snapshot (0-based)"),
    ("err_weight_scaled", "test error with weight-scaled inference"),
];

const MEMBER_COLUMNS: [(&str, &str); 5] = [
    ("search_config_id", "search configuration whose hyperparameters every member reuses"),
    ("valid_err", "validation error under the member's fixed mask"),
    ("epochs_trained", "epochs run before early stopping"),
    ("best_epoch", "epoch of the returned snapshot (0-based)"),
    ("err_member", "test error of the member alone under its fixed mask"),
];

pub fn wide_hyper(cfg: &ExperimentConfig, task: &str, id: u64) -> Hyperparams {
    let seed = derive_seed(cfg.master_seed, WIDE_SEARCH, task, id, Role::Hyper);
    SearchSpace::wide_nets(cfg.max_hidden, cfg.max_epochs).sample(&mut seeded(seed))
}

#[derive(Debug, Serialize)]
struct Summary {
    master_seed: u64,
    task: String,
    best_config_id: u64,
    reference_dropout_test_err: f64,
    n_members_trained: usize,
    n_members_failed: usize,
    full_ensemble_n: usize,
    full_ensemble_test_err: Option<f64>,
}

pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    if cfg.tasks.len() != 1 {
        return Err(ExpError::Config("the untied experiment takes exactly one task".into()));
    }
    let task = &cfg.tasks[0];
    let name = task.to_string();
    let dir = prepare_dir(cfg)?;
    fs::create_dir_all(dir.join("masks"))?;
    let pool = thread_pool(cfg.workers)?;
    let split = load_split(task, cfg)?;

    // Reference point: the best dropout network of a random search.
    let search: Vec<(RunRecord, Option<f64>)> = pool.install(|| {
        (0..cfg.n_configs as u64)
            .into_par_iter()
            .map(|id| search_config(cfg, &dir, &name, &split, id))
            .collect::<Result<_>>()
    })?;
    let (best_id, reference_err) = search
        .iter()
        .filter(|(r, _)| !r.failed)
        .filter_map(|(r, err)| Some((r.config_id, r.metric("valid_err")?, (*err)?)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(id, _, err)| (id, err))
        .ok_or_else(|| ExpError::Config("every search configuration diverged".into()))?;
    let search: Vec<RunRecord> = search.into_iter().map(|(r, _)| r).collect();
    let hyper = wide_hyper(cfg, &name, best_id);

    let members: Vec<(RunRecord, Option<Vec<Vec<f64>>>)> = pool.install(|| {
        (0..cfg.n_ensemble_members as u64)
            .into_par_iter()
            .map(|m| train_member(cfg, &dir, &name, &split, &hyper, best_id, m))
            .collect::<Result<_>>()
    })?;
    let logits: Vec<&Vec<Vec<f64>>> = members.iter().filter_map(|(_, l)| l.as_ref()).collect();
    let n_failed = members.len() - logits.len();
    let max_size = cfg.ensemble_sizes.iter().copied().max().unwrap_or(1);
    if logits.len() < max_size {
        return Err(ExpError::Config(format!(
            "{} of {} members trained, fewer than the largest ensemble size {max_size}",
            logits.len(),
            members.len()
        )));
    }
    let kind = if split.n_classes() == 2 { OutputKind::Sigmoid } else { OutputKind::Softmax };
    let curve = ensemble_curve(&logits, split.test.labels(), kind, &cfg.ensemble_sizes)?;
    let records: Vec<RunRecord> = members.iter().map(|(r, _)| r.clone()).collect();

    write_records(&dir.join("search_records.csv"), "untied-search", cfg.master_seed, &search, &SEARCH_COLUMNS)?;
    write_records(&dir.join("records.csv"), "untied", cfg.master_seed, &records, &MEMBER_COLUMNS)?;
    write_timings(&dir.join("timings.csv"), &records)?;
    write_curve(&dir.join("ensemble_curve.csv"), cfg.master_seed, &curve)?;
    let full = curve.iter().find(|p| p.n == logits.len() && p.n_ensembles == 1);
    let summary = Summary {
        master_seed: cfg.master_seed,
        task: name,
        best_config_id: best_id,
        reference_dropout_test_err: reference_err,
        n_members_trained: logits.len(),
        n_members_failed: n_failed,
        full_ensemble_n: logits.len(),
        full_ensemble_test_err: full.map(|p| p.mean_err),
    };
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    fs::write(dir.join("summary.json"), text)?;
    Ok(ExperimentOutput {
        records,
        stats: Vec::new(),
        curve,
        search,
        reference_err: Some(reference_err),
    })
}

fn search_config(
    cfg: &ExperimentConfig,
    dir: &Path,
    task: &str,
    split: &Split,
    id: u64,
) -> Result<(RunRecord, Option<f64>)> {
    let start = Instant::now();
    let hyper = wide_hyper(cfg, task, id);
    let seeds = RunSeeds::derive(cfg.master_seed, "untied-search", task, id);
    let policy = MaskPolicy::half(hyper.hidden_sizes.len());
    let names: Vec<&str> = SEARCH_COLUMNS.iter().map(|(n, _)| *n).collect();
    let outcome = train_run(split, &split.train, &TrainCriterion::Dropout(policy.clone()), &hyper, seeds)?;
    let mut record = RunRecord {
        experiment: "untied-search".into(),
        task: task.into(),
        config_id: id,
        seed: seeds.init,
        hyper,
        failed: false,
        failure: String::new(),
        metrics: metrics(&names, None),
        wall_time_s: 0.0,
    };
    let err = match outcome {
        Err(reason) => {
            record.failed = true;
            record.failure = reason;
            None
        }
        Ok(o) => {
            write_history(dir, &format!("search_{}", run_id(task, id)), &o)?;
            let err = test_error(&o.params, &split.test, &InferenceRule::WeightScaled(policy))?;
            record.metrics = metrics(
                &names,
                Some(vec![o.best_valid_err, o.epochs_run as f64, o.best_epoch as f64, err]),
            );
            Some(err)
        }
    };
    record.wall_time_s = elapsed(start);
    Ok((record, err))
}

#[allow(clippy::type_complexity)]
fn train_member(
    cfg: &ExperimentConfig,
    dir: &Path,
    task: &str,
    split: &Split,
    hyper: &Hyperparams,
    search_id: u64,
    m: u64,
) -> Result<(RunRecord, Option<Vec<Vec<f64>>>)> {
    let start = Instant::now();
    let seeds = RunSeeds::derive(cfg.master_seed, "untied", task, m);
    let resample_seed = derive_seed(cfg.master_seed, "untied", task, m, Role::Bootstrap);
    let train_set = bootstrap_resample(&split.train, &mut seeded(resample_seed))?;
    let space = MaskSpace::new(hyper.hidden_sizes.clone());
    let mask = sample_mask(&MaskPolicy::half(hyper.hidden_sizes.len()), &space, &mut seeded(seeds.mask))?;
    fs::write(dir.join("masks").join(format!("{}.mask", run_id(task, m))), mask.to_sidecar())?;
    let names: Vec<&str> = MEMBER_COLUMNS.iter().map(|(n, _)| *n).collect();
    let mut record = RunRecord {
        experiment: "untied".into(),
        task: task.into(),
        config_id: m,
        seed: seeds.init,
        hyper: hyper.clone(),
        failed: false,
        failure: String::new(),
        metrics: metrics(&names, None),
        wall_time_s: 0.0,
    };
    let outcome = train_run(split, &train_set, &TrainCriterion::FixedMask(mask.clone()), hyper, seeds)?;
    let logits = match outcome {
        Err(reason) => {
            record.failed = true;
            record.failure = reason;
            None
        }
        Ok(o) => {
            write_history(dir, &run_id(task, m), &o)?;
            let logits = member_logits(&o.params, split, &mask)?;
            let err = logits_error(&[&logits], split.test.labels(), o.params.output_kind)?;
            record.metrics = metrics(
                &names,
                Some(vec![
                    search_id as f64,
                    o.best_valid_err,
                    o.epochs_run as f64,
                    o.best_epoch as f64,
                    err,
                ]),
            );
            Some(logits)
        }
    };
    record.wall_time_s = elapsed(start);
    Ok((record, logits))
}

fn member_logits(params: &ModelParams, split: &Split, mask: &dropens::masks::DropoutMask) -> Result<Vec<Vec<f64>>> {
    let test = &split.test;
    (0..test.len())
        .into_par_iter()
        .map(|i| Ok(params.forward(test.row(i), Some(mask))?.output_logits))
        .collect()
}

/// Error of the ensemble that averages the members' output logits.
pub fn logits_error(members: &[&Vec<Vec<f64>>], labels: &[usize], kind: OutputKind) -> Result<f64> {
    let n = members.len() as f64;
    let mut wrong = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        let mut mean = vec![0.0; members[0][i].len()];
        for member in members {
            for (acc, z) in mean.iter_mut().zip(&member[i]) {
                *acc += z;
            }
        }
        mean.iter_mut().for_each(|z| *z /= n);
        if predicted_class(&output_distribution(&mean, kind)?) != y {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / labels.len() as f64)
}

/// For each size `n`, splits the members into `floor(N / n)` disjoint
/// groups of consecutive members and reports the mean and sample standard
/// deviation of the group ensembles' errors.
pub fn ensemble_curve(
    members: &[&Vec<Vec<f64>>],
    labels: &[usize],
    kind: OutputKind,
    sizes: &[usize],
) -> Result<Vec<CurvePoint>> {
    sizes
        .iter()
        .map(|&n| {
            if n == 0 || n > members.len() {
                return Err(ExpError::Config(format!(
                    "ensemble size {n} is not between 1 and {}",
                    members.len()
                )));
            }
            let errs: Vec<f64> = members
                .chunks_exact(n)
                .map(|group| logits_error(group, labels, kind))
                .collect::<Result<_>>()?;
            let k = errs.len() as f64;
            let mean = errs.iter().sum::<f64>() / k;
            let std = if errs.len() > 1 {
                (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
            } else {
                0.0
            };
            Ok(CurvePoint {
                n,
                mean_err: mean,
                std_err: std,
                n_ensembles: errs.len(),
            })
        })
        .collect()
}
