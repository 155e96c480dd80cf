use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use lampa_core::config::{dataset_task, generate_dataset, ResolvedRun, RunConfig, DATASET_PRESETS};
use lampa_core::data::{load_pileup_csv, load_tracking_csv, save_pileup_csv, save_tracking_csv};
use lampa_core::metrics::{write_csv, write_jsonl, MetricsReport, FLOPS_FORMULA_SHEET};
use lampa_core::model::{load_checkpoint, save_checkpoint, Arch, Model, Scale, Task};
use lampa_core::train::{evaluate, sector_sweep, train, Dataset, EvalOptions, OptimizerKind, SECTOR_SWEEP};
use lampa_core::verify::{run_suites, Suite};
use lampa_core::Error;

#[derive(Parser)]
#[command(name = "lampa", version, about = "State-space models with LSH bucketing for point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic events as CSV.
    GenData(GenDataArgs),
    /// Train a model and write its checkpoint, log and final metrics.
    Train(RunArgs),
    /// Evaluate a checkpoint.
    Eval(RunArgs),
    /// FLOPs and throughput over a sector sweep.
    Bench(BenchArgs),
    /// Run the property suites and print a JSON verdict.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(DATASET_PRESETS))]
    preset: String,
    #[arg(long, default_value_t = 1)]
    events: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// CSV file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    #[value(name = "mamba_plain", alias = "mamba")]
    MambaPlain,
    #[value(name = "mamba_a")]
    MambaA,
    #[value(name = "mamba_b")]
    MambaB,
}

impl From<ArchArg> for Arch {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::MambaPlain => Arch::MambaPlain,
            ArchArg::MambaA => Arch::MambaA,
            ArchArg::MambaB => Arch::MambaB,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    #[value(name = "S", alias = "s")]
    S,
    #[value(name = "M", alias = "m")]
    M,
    #[value(name = "L", alias = "l")]
    L,
}

impl From<ScaleArg> for Scale {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::S => Scale::S,
            ScaleArg::M => Scale::M,
            ScaleArg::L => Scale::L,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Tracking,
    Pileup,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Adam,
}

/// Flags shared by `train`, `eval` and `bench`; each overrides the same key
/// of `--config`.
#[derive(Args, Default)]
struct RunArgs {
    /// TOML file of run keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long, value_enum)]
    arch: Option<ArchArg>,
    #[arg(long, value_enum)]
    scale: Option<ScaleArg>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long)]
    m1: Option<usize>,
    #[arg(long)]
    m2: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    events: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    #[arg(long)]
    lr: Option<f64>,
    /// Upper bound on parallel benchmark workers.
    #[arg(long)]
    workers: Option<usize>,
    /// Event CSV to use instead of generated events.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl RunArgs {
    fn overrides(&self) -> RunConfig {
        RunConfig {
            task: self.task.map(|t| match t {
                TaskArg::Tracking => Task::Tracking,
                TaskArg::Pileup => Task::Pileup,
            }),
            arch: self.arch.map(Arch::from),
            scale: self.scale.map(Scale::from),
            dataset: self.dataset.clone(),
            block_size: self.block_size,
            m1: self.m1,
            m2: self.m2,
            seed: self.seed,
            events: self.events,
            epochs: self.epochs,
            max_steps: self.max_steps,
            batch: self.batch,
            optimizer: self.optimizer.map(|o| match o {
                OptimizerArg::Sgd => OptimizerKind::Sgd,
                OptimizerArg::Adam => OptimizerKind::Adam,
            }),
            lr: self.lr,
            workers: self.workers,
            data: self.data.clone(),
            out: self.out.clone(),
            checkpoint: self.checkpoint.clone(),
        }
    }

    /// File keys, then `LAMPA_SEED`, then flags.
    fn merged(&self) -> lampa_core::Result<RunConfig> {
        let file = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        Ok(file.with_env()?.merge(self.overrides()))
    }
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Sector counts, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = SECTOR_SWEEP)]
    sectors: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 3)]
    reps: usize,
}

#[derive(Args)]
struct VerifyArgs {
    /// Suites to run; all of them when omitted.
    #[arg(long = "suite", value_parser = parse_suite)]
    suites: Vec<Suite>,
    /// Replaces every suite's default trial count.
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the verdict to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Nonzero-exit failure carrying its exit code.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        let code = match err.downcast_ref::<Error>() {
            Some(Error::Config(_)) => 2,
            _ => 1,
        };
        Failure { code, err }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn config_error(msg: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        err: anyhow::Error::from(Error::Config(msg.into())),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn print_json(value: &serde_json::Value) -> Result<(), Failure> {
    println!("{}", serde_json::to_string(value).map_err(anyhow::Error::from)?);
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(anyhow::Error::from)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn out_dir(run: &ResolvedRun) -> Result<PathBuf, Failure> {
    let dir = run.out.clone().ok_or_else(|| config_error("an output directory is required (--out or `out`)"))?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn gen_data(a: GenDataArgs) -> Result<u8, Failure> {
    let seed = match a.seed {
        Some(s) => s,
        None => RunConfig::default().with_env()?.seed.unwrap_or(0),
    };
    let data = generate_dataset(&a.preset, a.events, seed)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    match &data {
        Dataset::Tracking(e) => save_tracking_csv(e, &a.out)?,
        Dataset::Pileup(e) => save_pileup_csv(e, &a.out)?,
    }
    let meta = json!({
        "command": "gen-data",
        "config": {"preset": a.preset, "events": a.events, "seed": seed, "task": dataset_task(&a.preset)?.name()},
        "out": a.out,
        "rows": data.batches::<f64>()?.iter().map(|b| b.len()).sum::<usize>(),
    });
    let mut meta_path = a.out.clone().into_os_string();
    meta_path.push(".meta.json");
    write_json(Path::new(&meta_path), &meta)?;
    print_json(&meta)?;
    Ok(0)
}

fn load_dataset(run: &ResolvedRun, task: Task) -> Result<Dataset, Failure> {
    Ok(match (&run.data, task) {
        (Some(p), Task::Tracking) => Dataset::Tracking(load_tracking_csv(p)?),
        (Some(p), Task::Pileup) => Dataset::Pileup(load_pileup_csv(p)?),
        (None, _) => generate_dataset(&run.dataset, run.events, run.seed)?,
    })
}

fn eval_options(run: &ResolvedRun) -> EvalOptions {
    EvalOptions {
        contrastive: run.train.contrastive.clone(),
        focal_alpha: run.train.focal_alpha,
        focal_lambda: run.train.focal_lambda,
        seed: run.seed,
        ..EvalOptions::default()
    }
}

fn write_reports(dir: &Path, stem: &str, reports: &[MetricsReport]) -> Result<MetricsReport, Failure> {
    write_jsonl(dir.join(format!("{stem}.jsonl")), reports)?;
    let agg = MetricsReport::aggregate(reports)?;
    write_csv(dir.join(format!("{stem}_mean.csv")), std::slice::from_ref(&agg))?;
    Ok(agg)
}

fn cmd_train(a: RunArgs) -> Result<u8, Failure> {
    let run = a.merged()?.resolve()?;
    let dir = out_dir(&run)?;
    write_json(&dir.join("config.json"), &json!({"command": "train", "config": run}))?;
    let data = load_dataset(&run, run.task)?;
    let outcome = train::<f64>(&run.train, &data, Some(&dir))?;
    outcome.write_log(dir.join("train_log.jsonl"))?;
    let ckpt = run.checkpoint.clone().unwrap_or_else(|| dir.join("model.ckpt"));
    save_checkpoint(&outcome.model, &ckpt)?;
    let reports = evaluate(&outcome.model, &data, &eval_options(&run))?;
    let agg = write_reports(&dir, "metrics", &reports)?;
    print_json(&json!({
        "command": "train",
        "config": run,
        "checkpoint": ckpt,
        "steps": outcome.losses().len(),
        "final_loss": outcome.losses().last(),
        "metrics": agg,
    }))?;
    Ok(0)
}

fn cmd_eval(a: RunArgs) -> Result<u8, Failure> {
    let mut merged = a.merged()?;
    let ckpt = merged
        .checkpoint
        .clone()
        .or_else(|| merged.out.as_ref().map(|d| d.join("model.ckpt")))
        .ok_or_else(|| config_error("a checkpoint is required (--checkpoint or `checkpoint`)"))?;
    let model: Model<f64> = load_checkpoint(&ckpt)?;
    let task = model.config().task;
    if merged.task.is_none() && merged.dataset.is_none() {
        merged.task = Some(task);
    }
    let run = merged.resolve()?;
    let dir = out_dir(&run)?;
    let data = load_dataset(&run, task)?;
    let reports = evaluate(&model, &data, &eval_options(&run))?;
    let agg = write_reports(&dir, "eval_metrics", &reports)?;
    let meta = json!({"command": "eval", "config": run, "checkpoint": ckpt, "model": model.config(), "metrics": agg});
    write_json(&dir.join("eval_config.json"), &meta)?;
    print_json(&meta)?;
    Ok(0)
}

#[derive(Serialize)]
struct FlopsRow {
    n_sector: usize,
    n_hits: usize,
    flops: u64,
}

fn cmd_bench(a: BenchArgs) -> Result<u8, Failure> {
    let run = a.run.merged()?.resolve()?;
    if run.task != Task::Tracking {
        return Err(config_error("bench sweeps sectors of tracking events; use --task tracking"));
    }
    if a.sectors.is_empty() || a.sectors.contains(&0) {
        return Err(config_error("sector counts must be positive"));
    }
    let dir = out_dir(&run)?;
    let model: Model<f32> = match &run.checkpoint {
        Some(p) => load_checkpoint::<f64>(p)?.cast()?,
        None => Model::new(run.model().clone())?,
    };
    let event = match load_dataset(&run, Task::Tracking)? {
        Dataset::Tracking(mut e) if !e.is_empty() => e.swap_remove(0),
        _ => return Err(anyhow!("no tracking event to benchmark").into()),
    };
    let mut modes = vec![1];
    if run.workers > 1 {
        modes.push(run.workers);
    }
    let mut rows = Vec::new();
    for &w in &modes {
        rows.extend(sector_sweep(&model, &event, &a.sectors, a.warmup, a.reps, w)?);
    }
    let flops: Vec<FlopsRow> = rows
        .iter()
        .filter(|r| r.workers == rows[0].workers)
        .map(|r| FlopsRow {
            n_sector: r.n_sector,
            n_hits: r.n_hits,
            flops: r.flops,
        })
        .collect();
    write_csv(dir.join("flops_vs_n.csv"), &flops)?;
    write_csv(dir.join("throughput_vs_n.csv"), &rows)?;
    fs::write(dir.join("flops_formula.txt"), format!("{FLOPS_FORMULA_SHEET}\n"))?;
    let meta = json!({
        "command": "bench",
        "config": run,
        "model": model.config(),
        "sectors": a.sectors,
        "warmup": a.warmup,
        "reps": a.reps,
        "event_hits": event.len(),
        "outputs": ["flops_vs_n.csv", "throughput_vs_n.csv", "flops_formula.txt"],
    });
    write_json(&dir.join("bench_config.json"), &meta)?;
    print_json(&meta)?;
    Ok(0)
}

fn cmd_verify(a: VerifyArgs) -> Result<u8, Failure> {
    let seed = match a.seed {
        Some(s) => s,
        None => RunConfig::default().with_env()?.seed.unwrap_or(0),
    };
    let suites = if a.suites.is_empty() { Suite::ALL.to_vec() } else { a.suites };
    let verdict = run_suites(&suites, a.trials, seed)?;
    let out = json!({
        "command": "verify",
        "config": {"suites": suites, "trials": a.trials, "seed": seed},
        "verdict": verdict,
    });
    if let Some(p) = &a.out {
        write_json(p, &out)?;
    }
    println!("{}", serde_json::to_string_pretty(&out).map_err(anyhow::Error::from)?);
    Ok(if verdict.passed { 0 } else { 1 })
}
