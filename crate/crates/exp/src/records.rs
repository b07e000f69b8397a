//! Output tables: run records, statistics and ensemble curves.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use dropens::analysis::{
    bonferroni, wilcoxon_signed_rank, Pair, PairedErrors, WilcoxonMethod, WILCOXON_CONTINUITY,
    WILCOXON_EXACT_MAX_N,
};
use dropens::training::Hyperparams;

use crate::error::Result;

/// One trained configuration (or matched set of networks) of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub experiment: String,
    pub task: String,
    pub config_id: u64,
    /// Seed of the run's weight initialisation.
    pub seed: u64,
    pub hyper: Hyperparams,
    pub failed: bool,
    pub failure: String,
    /// Experiment-specific columns in a fixed order. Failed runs carry the
    /// same names with empty values.
    pub metrics: Vec<(String, Option<f64>)>,
    /// Seconds of wall time. Reported separately so that the records file
    /// stays reproducible.
    pub wall_time_s: f64,
}

impl RunRecord {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).and_then(|(_, v)| *v)
    }
}

const COMMON_COLUMNS: [&str; 17] = [
    "experiment",
    "task",
    "config_id",
    "seed",
    "lr0",
    "lr_decay",
    "momentum0",
    "momentum_final",
    "momentum_saturation_epoch",
    "batch_size",
    "max_epochs",
    "patience_epochs",
    "init_range",
    "hidden_sizes",
    "max_norms",
    "failed",
    "failure",
];

fn join<T: ToString>(xs: &[T], sep: &str) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(sep)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Writes `records` sorted by (task, config_id) with a comment header that
/// names the master seed and describes each column.
pub fn write_records(
    path: &Path,
    experiment: &str,
    master_seed: u64,
    records: &[RunRecord],
    column_docs: &[(&str, &str)],
) -> Result<()> {
    let mut sorted: Vec<&RunRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (&a.task, a.config_id).cmp(&(&b.task, b.config_id)));
    let metric_names: Vec<&str> = sorted
        .first()
        .map(|r| r.metrics.iter().map(|(n, _)| n.as_str()).collect())
        .unwrap_or_else(|| column_docs.iter().map(|(n, _)| *n).collect());

    let mut out = Vec::new();
    writeln!(out, "# dropens {experiment} records; master_seed={master_seed}")?;
    writeln!(
        out,
        "# One row per task and configuration. Hyperparameter columns are the sampled values;"
    )?;
    writeln!(
        out,
        "# hidden_sizes and max_norms are separated by `x` and `;` (empty max_norms: no caps)."
    )?;
    writeln!(
        out,
        "# failed=true rows diverged and have empty metrics; they are excluded from paired tests."
    )?;
    for (name, doc) in column_docs {
        writeln!(out, "# {name}: {doc}")?;
    }
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let header: Vec<&str> = COMMON_COLUMNS.iter().copied().chain(metric_names.iter().copied()).collect();
        w.write_record(&header)?;
        for r in sorted {
            let h = &r.hyper;
            let mut row = vec![
                r.experiment.clone(),
                r.task.clone(),
                r.config_id.to_string(),
                r.seed.to_string(),
                h.lr0.to_string(),
                h.lr_decay.to_string(),
                h.momentum0.to_string(),
                h.momentum_final.to_string(),
                h.momentum_saturation_epoch.to_string(),
                h.batch_size.to_string(),
                h.max_epochs.to_string(),
                h.patience_epochs.to_string(),
                h.init_range.to_string(),
                join(&h.hidden_sizes, "x"),
                h.max_norms.as_deref().map_or_else(String::new, |n| join(n, ";")),
                r.failed.to_string(),
                r.failure.clone(),
            ];
            row.extend(r.metrics.iter().map(|(_, v)| fmt_opt(*v)));
            w.write_record(&row)?;
        }
        w.flush()?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Wall times, kept apart from the reproducible records.
pub fn write_timings(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut sorted: Vec<&RunRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (&a.task, a.config_id).cmp(&(&b.task, b.config_id)));
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["task", "config_id", "wall_time_s"])?;
    for r in sorted {
        w.write_record([r.task.clone(), r.config_id.to_string(), format!("{:.3}", r.wall_time_s)])?;
    }
    w.flush()?;
    Ok(())
}

/// One paired significance test.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatRecord {
    pub test: String,
    pub task: String,
    pub n_pairs: usize,
    pub n_failed: usize,
    pub n_effective: usize,
    #[serde(rename = "W")]
    pub w: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    pub p: f64,
    pub p_bonferroni: f64,
    pub bonferroni_m: usize,
    pub method: WilcoxonMethod,
    pub degenerate: bool,
}

/// Pairs `metric_a` with `metric_b` over the successful records of `task`
/// and runs the signed-rank test. `err_a - err_b` is the signed difference.
pub fn paired_test(
    test: &str,
    task: &str,
    records: &[RunRecord],
    metric_a: &str,
    metric_b: &str,
    bonferroni_m: usize,
) -> Result<Option<StatRecord>> {
    let of_task: Vec<&RunRecord> = records.iter().filter(|r| r.task == task).collect();
    let n_failed = of_task.iter().filter(|r| r.failed).count();
    let pairs: Vec<Pair> = of_task
        .iter()
        .filter(|r| !r.failed)
        .filter_map(|r| {
            Some(Pair {
                config_id: r.config_id,
                err_a: r.metric(metric_a)?,
                err_b: r.metric(metric_b)?,
            })
        })
        .collect();
    if pairs.is_empty() {
        return Ok(None);
    }
    let n_pairs = pairs.len();
    let result = wilcoxon_signed_rank(&PairedErrors::new(pairs)?)?;
    Ok(Some(StatRecord {
        test: test.to_string(),
        task: task.to_string(),
        n_pairs,
        n_failed,
        n_effective: result.n_effective,
        w: result.w,
        w_plus: result.w_plus,
        w_minus: result.w_minus,
        p: result.p_two_sided,
        p_bonferroni: bonferroni(result.p_two_sided, bonferroni_m)?,
        bonferroni_m,
        method: result.method,
        degenerate: result.degenerate,
    }))
}

#[derive(Debug, Clone, Serialize)]
struct MethodNotes {
    exact_max_n: usize,
    continuity_correction: f64,
    zero_differences: &'static str,
    ties: &'static str,
    sides: &'static str,
    alpha: f64,
}

#[derive(Debug, Clone, Serialize)]
struct StatsFile<'a> {
    experiment: &'a str,
    master_seed: u64,
    method: MethodNotes,
    tests: &'a [StatRecord],
}

pub fn write_stats(path: &Path, experiment: &str, master_seed: u64, alpha: f64, tests: &[StatRecord]) -> Result<()> {
    let file = StatsFile {
        experiment,
        master_seed,
        method: MethodNotes {
            exact_max_n: WILCOXON_EXACT_MAX_N,
            continuity_correction: WILCOXON_CONTINUITY,
            zero_differences: "discarded",
            ties: "mid-ranks; tied magnitudes force the normal approximation",
            sides: "two-sided",
            alpha,
        },
        tests,
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Mean and spread of ensemble error at one ensemble size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub n: usize,
    pub mean_err: f64,
    /// Sample standard deviation across ensembles (0 for a single one).
    pub std_err: f64,
    pub n_ensembles: usize,
}

pub fn write_curve(path: &Path, master_seed: u64, curve: &[CurvePoint]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "# dropens untied ensemble curve; master_seed={master_seed}")?;
    writeln!(out, "# n: members per ensemble; ensembles are disjoint groups of consecutive members")?;
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(["n", "mean_err", "std_err", "n_ensembles"])?;
        for p in curve {
            w.write_record([
                p.n.to_string(),
                p.mean_err.to_string(),
                p.std_err.to_string(),
                p.n_ensembles.to_string(),
            ])?;
        }
        w.flush()?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a records file back, returning the header and rows. Comment lines
/// are skipped.
pub fn read_records_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let header = reader.headers()?.iter().map(str::to_string).collect();
    let rows = reader
        .records()
        .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<_, _>>()?;
    Ok((header, rows))
}
