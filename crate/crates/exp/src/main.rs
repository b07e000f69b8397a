use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dropens::data::TaskSpec;
use dropens::ensemble::{predict_batch, write_predictions_csv, InferenceRule};
use dropens::masks::{sample_mask, MaskPolicy, MaskSpace};
use dropens::model::{load_model, save_model, ModelParams};
use dropens::training::{train, BoostSign, Hyperparams, TrainCriterion, TrainRngs};
use dropens_exp::config::{ConfigFile, ExperimentConfig, ExperimentId, DEFAULT_MASTER_SEED};
use dropens_exp::experiments::{self, architecture, seeded};
use dropens_exp::records::{paired_test, read_records_table, RunRecord};
use dropens_exp::search::SearchSpace;
use dropens_exp::seed::{derive_seed, Role};

#[derive(Parser)]
#[command(name = "dropens", version, about = "Dropout networks and exact dropout ensembles")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory holding mnist/ and covtype/ data files.
    #[arg(long, global = true, env = "DROPENS_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Master seed for every derived random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Use the full-size experiment settings instead of the reduced ones.
    #[arg(long, global = true)]
    full_scale: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train one network.
    Train(TrainArgs),
    /// Evaluate a saved network under an inference rule.
    Evaluate(EvaluateArgs),
    /// List dropout masks in canonical index order.
    Enumerate(EnumerateArgs),
    /// Run one of the four experiments.
    Experiment {
        #[arg(value_enum)]
        which: Which,
    },
    /// Statistics over experiment records.
    Stats {
        #[command(subcommand)]
        command: StatsCommand,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Scaling,
    Mean,
    Untied,
    Boosting,
}

#[derive(Clone, Copy, ValueEnum)]
enum CriterionArg {
    Sgd,
    Dropout,
    FixedMask,
    Boosting,
}

#[derive(Clone, Copy, ValueEnum)]
enum SignArg {
    Derived,
    Printed,
}

#[derive(Args)]
struct TrainArgs {
    /// Task name, e.g. synthetic, mnist-1v7, covtype-1v2, mnist.
    #[arg(long)]
    task: String,
    #[arg(long, value_enum, default_value = "dropout")]
    criterion: CriterionArg,
    /// JSON file of hyperparameters; sampled from the search space when absent.
    #[arg(long)]
    hyper: Option<PathBuf>,
    /// Sample wide networks instead of the fixed [10, 10] ones.
    #[arg(long)]
    wide: bool,
    #[arg(long, default_value_t = 0)]
    config_id: u64,
    #[arg(long, default_value_t = 1000)]
    max_epochs: usize,
    #[arg(long, value_enum, default_value = "derived")]
    boost_sign: SignArg,
    /// Where to write the model; history and summary go next to it.
    #[arg(long, default_value = "model.bin")]
    model_out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    WeightScaled,
    ExactGeometric,
    FactorizedGeometric,
    ExactArithmetic,
    McGeometric,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    task: String,
    #[arg(long, value_enum, default_value = "weight-scaled")]
    rule: RuleArg,
    /// Monte Carlo samples per example.
    #[arg(long, default_value_t = 100)]
    samples: usize,
    /// Evaluate only the first rows of the test set.
    #[arg(long)]
    limit: Option<usize>,
    /// Write per-example probabilities here.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct EnumerateArgs {
    /// Hidden layer sizes, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "model")]
    hidden: Vec<usize>,
    /// Take hidden sizes from a saved model.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    start: u64,
    #[arg(long, default_value_t = 16)]
    count: u64,
}

#[derive(Subcommand)]
enum StatsCommand {
    /// Signed-rank test between two error columns of a records file.
    Wilcoxon {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        /// Restrict to one task (default: every task in the file).
        #[arg(long)]
        task: Option<String>,
        /// Bonferroni factor.
        #[arg(long, default_value_t = 1)]
        m: usize,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Train(args) => cmd_train(&cli.global, args),
        Command::Evaluate(args) => cmd_evaluate(&cli.global, args),
        Command::Enumerate(args) => cmd_enumerate(args),
        Command::Experiment { which } => cmd_experiment(&cli.global, *which),
        Command::Stats {
            command: StatsCommand::Wilcoxon { records, a, b, task, m },
        } => cmd_wilcoxon(records, a, b, task.as_deref(), *m),
    }
}

fn parse_task(name: &str) -> Result<TaskSpec> {
    name.parse().map_err(|e| anyhow!("{e}"))
}

fn with_extension(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_train(global: &Global, args: &TrainArgs) -> Result<()> {
    let task = parse_task(&args.task)?;
    let name = task.to_string();
    let master = global.seed.unwrap_or(DEFAULT_MASTER_SEED);
    let split = task.load(global.data_dir.as_deref())?;
    let hyper: Hyperparams = match &args.hyper {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?)
            .with_context(|| format!("reading {}", path.display()))?,
        None => {
            let space = if args.wide {
                SearchSpace::wide_nets(1600, args.max_epochs)
            } else {
                SearchSpace::small_nets(args.max_epochs)
            };
            space.sample(&mut seeded(derive_seed(master, "train", &name, args.config_id, Role::Hyper)))
        }
    };
    let seed = |role| derive_seed(master, "train", &name, args.config_id, role);
    let policy = MaskPolicy::half(hyper.hidden_sizes.len());
    let criterion = match args.criterion {
        CriterionArg::Sgd => TrainCriterion::PlainSgd,
        CriterionArg::Dropout => TrainCriterion::Dropout(policy),
        CriterionArg::FixedMask => {
            let space = MaskSpace::new(hyper.hidden_sizes.clone());
            let mask = sample_mask(&policy, &space, &mut seeded(seed(Role::Mask)))?;
            fs::write(with_extension(&args.model_out, ".mask"), mask.to_sidecar())?;
            TrainCriterion::FixedMask(mask)
        }
        CriterionArg::Boosting => TrainCriterion::DropoutBoosting {
            policy,
            sign: match args.boost_sign {
                SignArg::Derived => BoostSign::Derived,
                SignArg::Printed => BoostSign::Printed,
            },
        },
    };
    let arch = architecture(&split, &hyper.hidden_sizes)?;
    let params = ModelParams::init(&arch, hyper.init_range, &mut seeded(seed(Role::Init)))?;
    let mut rngs = TrainRngs::from_seeds(seed(Role::DataOrder), seed(Role::Mask));
    let outcome = train(params, &split.train, &split.valid, &criterion, &hyper, &mut rngs)?;
    save_model(&outcome.params, &args.model_out)?;
    let history = fs::File::create(with_extension(&args.model_out, ".history.csv"))?;
    outcome.history.write_csv(BufWriter::new(history))?;
    let summary = serde_json::json!({
        "task": name,
        "criterion": criterion.name(),
        "master_seed": master,
        "config_id": args.config_id,
        "hyperparams": hyper,
        "epochs_run": outcome.epochs_run,
        "best_epoch": outcome.best_epoch,
        "best_valid_err": outcome.best_valid_err,
        "final_lr": outcome.history.epochs.last().map(|r| r.lr),
        "final_momentum": outcome.history.epochs.last().map(|r| r.momentum),
    });
    let text = serde_json::to_string_pretty(&summary)?;
    fs::write(with_extension(&args.model_out, ".train.json"), format!("{text}\n"))?;
    println!("{text}");
    Ok(())
}

fn cmd_evaluate(global: &Global, args: &EvaluateArgs) -> Result<()> {
    let params = load_model(&args.model)?;
    let task = parse_task(&args.task)?;
    let split = task.load(global.data_dir.as_deref())?;
    let n_hidden = params.n_hidden_layers();
    let rule = match args.rule {
        RuleArg::WeightScaled => InferenceRule::WeightScaled(MaskPolicy::half(n_hidden)),
        RuleArg::ExactGeometric => InferenceRule::ExactGeometric,
        RuleArg::FactorizedGeometric => InferenceRule::FactorizedGeometric,
        RuleArg::ExactArithmetic => InferenceRule::ExactArithmetic,
        RuleArg::McGeometric => InferenceRule::MonteCarloGeometric {
            policy: MaskPolicy::half(n_hidden),
            n_samples: args.samples,
            seed: derive_seed(global.seed.unwrap_or(DEFAULT_MASTER_SEED), "evaluate", &task.to_string(), 0, Role::Inference),
        },
    };
    let probs = predict_batch(&params, &split.test, &rule, args.limit)?;
    let labels = &split.test.labels()[..probs.len()];
    let err = dropens::analysis::misclassification_rate(&probs, labels)?;
    if let Some(path) = &args.predictions {
        let ids: Vec<usize> = split.test.origin()[..probs.len()].to_vec();
        write_predictions_csv(BufWriter::new(fs::File::create(path)?), rule.name(), &ids, &probs)?;
    }
    println!(
        "{}",
        serde_json::json!({"task": task.to_string(), "rule": rule.name(), "n": probs.len(), "test_err": err})
    );
    Ok(())
}

fn cmd_enumerate(args: &EnumerateArgs) -> Result<()> {
    let hidden = match &args.model {
        Some(path) => load_model(path)?.arch.hidden_sizes,
        None if !args.hidden.is_empty() => args.hidden.clone(),
        None => bail!("give --hidden or --model"),
    };
    let space = MaskSpace::new(hidden);
    let total = space.total_masks()?;
    let end = args.start.saturating_add(args.count).min(total);
    let mut out = BufWriter::new(io::stdout().lock());
    writeln!(out, "index,layers")?;
    for (index, mask) in (args.start..end).zip(space.iter_range(args.start..end)?) {
        writeln!(out, "{index},{}", mask.to_hex_layers().join(" "))?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_experiment(global: &Global, which: Which) -> Result<()> {
    let id = match which {
        Which::Scaling => ExperimentId::Scaling,
        Which::Mean => ExperimentId::Mean,
        Which::Untied => ExperimentId::Untied,
        Which::Boosting => ExperimentId::Boosting,
    };
    let file = match &global.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let mut cfg = ExperimentConfig::from_file(&file, id, global.full_scale)?;
    if let Some(dir) = &global.data_dir {
        cfg.data_dir = Some(dir.clone());
    }
    if let Some(dir) = &global.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(seed) = global.seed {
        cfg.master_seed = seed;
    }
    if let Some(w) = global.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    let out = experiments::run(&cfg)?;
    let failed = out.records.iter().filter(|r| r.failed).count();
    eprintln!(
        "{id}: {} records ({failed} failed) written to {}",
        out.records.len(),
        cfg.experiment_dir().display()
    );
    for s in &out.stats {
        eprintln!(
            "  {} [{}]: n={} W={} p={:.4} p_bonferroni={:.4}",
            s.test, s.task, s.n_effective, s.w, s.p, s.p_bonferroni
        );
    }
    if let Some(err) = out.reference_err {
        eprintln!("  best dropout network test error: {err}");
        for p in &out.curve {
            eprintln!("  n={:>3}: {:.4} +/- {:.4} ({} ensembles)", p.n, p.mean_err, p.std_err, p.n_ensembles);
        }
    }
    Ok(())
}

fn cmd_wilcoxon(path: &Path, a: &str, b: &str, task: Option<&str>, m: usize) -> Result<()> {
    let (header, rows) = read_records_table(path)?;
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| anyhow!("column `{name}` not in {}", path.display()))
    };
    let (c_task, c_id, c_failed, c_a, c_b) = (col("task")?, col("config_id")?, col("failed")?, col(a)?, col(b)?);
    let parse = |s: &str| if s.is_empty() { Ok(None) } else { s.parse::<f64>().map(Some) };
    let mut records = Vec::new();
    for row in &rows {
        records.push(RunRecord {
            experiment: String::new(),
            task: row[c_task].clone(),
            config_id: row[c_id].parse()?,
            seed: 0,
            hyper: placeholder_hyper(),
            failed: row[c_failed] == "true",
            failure: String::new(),
            metrics: vec![(a.to_string(), parse(&row[c_a])?), (b.to_string(), parse(&row[c_b])?)],
            wall_time_s: 0.0,
        });
    }
    let mut tasks: Vec<String> = records.iter().map(|r| r.task.clone()).collect();
    tasks.sort();
    tasks.dedup();
    if let Some(t) = task {
        tasks.retain(|x| x == t);
        if tasks.is_empty() {
            bail!("task `{t}` not in {}", path.display());
        }
    }
    let test = format!("{a}-vs-{b}");
    let mut out = Vec::new();
    for t in &tasks {
        if let Some(s) = paired_test(&test, t, &records, a, b, m)? {
            out.push(s);
        }
    }
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn placeholder_hyper() -> Hyperparams {
    Hyperparams {
        lr0: 1.0,
        lr_decay: 1.0,
        momentum0: 0.0,
        momentum_final: 0.0,
        momentum_saturation_epoch: 0,
        batch_size: 1,
        max_epochs: 1,
        patience_epochs: 1,
        init_range: 1.0,
        hidden_sizes: Vec::new(),
        max_norms: None,
    }
}
