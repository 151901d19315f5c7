//! `odml`: dataset generation, experiment runs, evaluation and stage-boundary
//! drift computation.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use odml_core::dataset::{gen_synthetic, TaskDataset};
use odml_core::evaluation::evaluate_stages;
use odml_core::pipeline::post_stage_offline;
use odml_core::{Dataset, EmbeddingModel, Mode, Registry, SyntheticParams};
use serde::Serialize;

use config::{DatasetSource, RunConfig, SplitConfig, CONFIG_FILE};

const SUMMARY_FILE: &str = "summary.csv";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser)]
#[command(name = "odml", version, about = "Online deep metric learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic Gaussian-cluster dataset as CSV.
    GenData(GenDataArgs),
    /// Train the selected modes over a task sequence and write reports.
    Run(RunArgs),
    /// Evaluate a stored model and print its report as JSON.
    Eval(EvalArgs),
    /// Compute and store the drift state at one stage boundary.
    Drift(DriftArgs),
}

#[derive(clap::Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 40, value_parser = clap::value_parser!(u64).range(2..))]
    classes: u64,
    #[arg(long, default_value_t = 30, value_parser = clap::value_parser!(u64).range(4..))]
    per_class: u64,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(2..))]
    dim: u64,
    #[arg(long, default_value_t = 10.0)]
    separation: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(clap::Args)]
struct RunArgs {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated modes, overriding the config.
    #[arg(long, value_delimiter = ',')]
    modes: Vec<Mode>,
    /// Multi-task split with this many tasks after the first.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    stages: Option<u64>,
    /// CSV dataset, overriding the config's dataset.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory, overriding the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training seed, overriding the config.
    #[arg(long, env = "ODML_SEED")]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Run directory; supplies the dataset, the split and (without --model) the model.
    #[arg(long, required_unless_present = "data")]
    run: Option<PathBuf>,
    /// Mode whose registry holds the model; defaults to the run's first mode.
    #[arg(long)]
    mode: Option<Mode>,
    /// Stage whose model is evaluated; defaults to the last completed one.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    stage: Option<u64>,
    /// Model file to evaluate instead of a registry stage.
    #[arg(long, required_unless_present = "run")]
    model: Option<PathBuf>,
    /// CSV dataset evaluated as a single task (used with --model).
    #[arg(long, conflicts_with = "run", requires = "model")]
    data: Option<PathBuf>,
    /// `all`, or a task id to restrict the report to one task.
    #[arg(long, default_value = "all")]
    task: TaskScope,
    /// Also write the report to this file.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug)]
enum TaskScope {
    All,
    Task(usize),
}

impl std::str::FromStr for TaskScope {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "all" {
            return Ok(TaskScope::All);
        }
        match s.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(TaskScope::Task(k)),
            _ => Err(format!("expected `all` or a task id >= 1, got {s:?}")),
        }
    }
}

#[derive(clap::Args)]
struct DriftArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value = "ours")]
    mode: Mode,
    /// Boundary whose state is computed; needs models 1..=stage and the previous state.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    stage: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Run(a) => run(a),
        Command::Eval(a) => eval(a),
        Command::Drift(a) => drift(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let params = SyntheticParams {
        classes: a.classes as usize,
        per_class: a.per_class as usize,
        dim: a.dim as usize,
        separation: a.separation,
        sigma: a.sigma,
        seed: a.seed,
    };
    let data = gen_synthetic(&params)?;
    data.save_csv(&a.output)?;
    println!(
        "wrote {} samples ({} classes, dim {}) to {}",
        data.len(),
        data.n_classes(),
        data.dim(),
        a.output.display()
    );
    Ok(())
}

/// `1-20`-style label of the classes a task covers (1-based).
fn task_range(task: &TaskDataset) -> String {
    let lo = task.classes.iter().min().map_or(0, |c| c + 1);
    let hi = task.classes.iter().max().map_or(0, |c| c + 1);
    format!("{lo}-{hi}")
}

fn run(a: RunArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if !a.modes.is_empty() {
        cfg.modes = a.modes.clone();
    }
    if let Some(stages) = a.stages {
        cfg.split = SplitConfig {
            mode: odml_core::SplitMode::MultiTask,
            stages: stages as usize,
        };
    }
    if let Some(data) = a.data {
        cfg.dataset = DatasetSource::Csv(data);
    }
    if let Some(out) = a.out {
        cfg.output_dir = out;
    }
    if let Some(seed) = a.seed {
        cfg.training.seed = seed;
    }
    cfg.validate()?;

    let data = cfg.dataset.load()?;
    let tasks = cfg.tasks(&data)?;
    let run_dir = cfg.output_dir.clone();
    fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    write_json(&run_dir.join(CONFIG_FILE), &cfg)?;
    write_json(
        &run_dir.join(MANIFEST_FILE),
        &serde_json::json!({ "odml_version": env!("CARGO_PKG_VERSION") }),
    )?;
    info!(
        "{} samples, {} classes, tasks of {:?} classes",
        data.len(),
        data.n_classes(),
        tasks.iter().map(|t| t.classes.len()).collect::<Vec<_>>()
    );

    let mut columns = Vec::new();
    for &mode in &cfg.modes {
        let registry = Registry::create(run_dir.join(mode.as_str()))?;
        let out = odml_core::run_mode(&tasks, &cfg.training_for(mode), Some(&registry))
            .with_context(|| format!("mode {mode}"))?;
        write_json(&registry.root().join("final_report.json"), &out.final_report)?;
        info!("{mode}: all-task Recall@1 {:.4}", out.final_report.all);
        columns.push((mode, out.final_report));
    }

    let mut csv = String::from("tasks");
    for (mode, _) in &columns {
        csv += &format!(",{mode}");
    }
    csv.push('\n');
    for task in &tasks {
        csv += &task_range(task);
        for (_, report) in &columns {
            csv += &format!(",{}", report.per_task[&task.task_id]);
        }
        csv.push('\n');
    }
    csv += "All";
    for (_, report) in &columns {
        csv += &format!(",{}", report.all);
    }
    csv.push('\n');
    let summary = run_dir.join(SUMMARY_FILE);
    fs::write(&summary, &csv).with_context(|| format!("writing {}", summary.display()))?;
    print!("{csv}");
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    stage: Option<usize>,
    per_task: BTreeMap<usize, f64>,
    all: f64,
    config_hash: Option<String>,
}

/// Every sample of a CSV file as the test set of one task.
fn single_task(data: &Dataset) -> Result<TaskDataset> {
    let classes = (0..data.n_classes()).collect();
    Ok(TaskDataset::new(1, classes, Vec::new(), data.samples().to_vec())?)
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut stage = None;
    let mut config_hash = None;
    let (model, tasks) = match &a.run {
        Some(run_dir) => {
            let cfg = RunConfig::from_run_dir(run_dir)?;
            let tasks = cfg.tasks(&cfg.dataset.load()?)?;
            match &a.model {
                Some(path) => (EmbeddingModel::load(path)?, tasks),
                None => {
                    let mode = a.mode.or(cfg.modes.first().copied()).context("run has no modes")?;
                    let registry = Registry::open(run_dir.join(mode.as_str()))?;
                    let s = match a.stage {
                        Some(s) => s as usize,
                        None => registry.completed_stages(),
                    };
                    if s == 0 {
                        bail!("{} has no completed stages", registry.root().display());
                    }
                    let meta = registry
                        .load_meta(s)?
                        .with_context(|| format!("stage {s} of {mode} is not complete"))?;
                    let model = registry.load_model(s)?;
                    stage = Some(s);
                    config_hash = Some(meta.config_hash);
                    // A stage is evaluated on the tasks seen so far; joint sees them all at once.
                    let seen = if mode == Mode::Joint {
                        tasks.len()
                    } else {
                        s.min(tasks.len())
                    };
                    (model, tasks[..seen].to_vec())
                }
            }
        }
        None => {
            let path = a.data.as_ref().expect("clap requires --data without --run");
            let model = EmbeddingModel::load(a.model.as_ref().expect("clap requires --model"))?;
            (model, vec![single_task(&Dataset::load_csv(path)?)?])
        }
    };
    let selected = match a.task {
        TaskScope::All => tasks,
        TaskScope::Task(k) => match tasks.iter().find(|t| t.task_id == k) {
            Some(t) => vec![t.clone()],
            None => bail!("task {k} is not among the {} evaluated tasks", tasks.len()),
        },
    };
    let report = evaluate_stages(&model, &selected)?;
    let out = EvalOutput {
        stage,
        per_task: report.per_task,
        all: report.all,
        config_hash,
    };
    let text = serde_json::to_string_pretty(&out)?;
    println!("{text}");
    if let Some(path) = &a.output {
        fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn drift(a: DriftArgs) -> Result<()> {
    let cfg = RunConfig::from_run_dir(&a.run)?;
    let tasks = cfg.tasks(&cfg.dataset.load()?)?;
    let stage = a.stage as usize;
    let task = tasks
        .get(stage - 1)
        .with_context(|| format!("the run has {} tasks, no stage {stage}", tasks.len()))?;
    let registry = Registry::open(a.run.join(a.mode.as_str()))?;
    let state = post_stage_offline(&registry, stage, task)?;
    println!(
        "stage {stage} state written to {}",
        registry.state_path(stage).display()
    );
    for mem in &state.tasks {
        match &mem.drift {
            Some(table) => {
                let norms: Vec<f64> = table
                    .drifts
                    .values()
                    .map(|d| d.iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect();
                let mean = norms.iter().sum::<f64>() / norms.len() as f64;
                println!(
                    "task {}: {} prototypes, mean drift norm {mean:.6}",
                    mem.task_id,
                    norms.len()
                );
            }
            None => println!(
                "task {}: {} prototypes (current task)",
                mem.task_id,
                mem.prototypes.len()
            ),
        }
    }
    Ok(())
}
