//! `cef`: trace generation, training, evaluation, experiment runs,
//! forget-factor sweeps and result comparison.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use cef_core::experiment::{
    self, compare, comparison_svg, load_run, write_comparison, ExperimentConfig,
};
use cef_core::tasks::TaskId;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "cef",
    version,
    about = "Context-enhanced step-wise graph reasoning experiments"
)]
struct Cli {
    /// Output root used when neither --out nor the config's `output_dir` is set.
    #[arg(long, env = "CEF_OUT_DIR", default_value = "runs", global = true)]
    out_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample traces and write them as JSON files.
    Gen(GenArgs),
    /// Train one model per task and seed; writes checkpoints and logs.
    Train(ExpArgs),
    /// Evaluate checkpoints written by `train`.
    Eval(ExpArgs),
    /// Train and evaluate every task and seed; writes results.json,
    /// metrics.csv and timing.csv.
    Run(ExpArgs),
    /// Train fixed-gate models over the config's `alpha_grid`.
    SweepAlpha(ExpArgs),
    /// Compare result files against the first one.
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    task: TaskId,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 4)]
    n_min: usize,
    #[arg(long, default_value_t = 8)]
    n_max: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExpArgs {
    #[arg(long)]
    config: PathBuf,
    /// Use only this seed instead of the config's list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for independent (task, seed) cells.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct CompareArgs {
    /// results.json files or run directories; the first is the baseline.
    #[arg(required = true, num_args = 2..)]
    paths: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(args: &ExpArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)
        .with_context(|| format!("invalid config {}", args.config.display()))?;
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    Ok(cfg)
}

fn out_dir(flag: &Option<PathBuf>, cfg: &ExperimentConfig, root: &Path, suffix: &str) -> PathBuf {
    flag.clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| root.join(format!("{}{suffix}", cfg.label())))
}

fn gen(a: &GenArgs, root: &Path) -> Result<()> {
    let traces = a.task.spec().generate(a.count, a.n_min, a.n_max, a.seed)?;
    let dir = a
        .out
        .clone()
        .unwrap_or_else(|| root.join("traces").join(a.task.as_str()));
    std::fs::create_dir_all(&dir)?;
    for (i, t) in traces.iter().enumerate() {
        t.save(&dir.join(format!("{}_{i:04}.json", a.task)))?;
    }
    println!(
        "wrote {} {} traces to {}",
        traces.len(),
        a.task,
        dir.display()
    );
    Ok(())
}

fn train(a: &ExpArgs, root: &Path) -> Result<()> {
    let cfg = load_config(a)?;
    let dir = out_dir(&a.out, &cfg, root, "");
    let logs = experiment::train_cells(&cfg, &cfg.seeds, &dir, a.jobs)?;
    let cells = cfg
        .tasks
        .iter()
        .flat_map(|t| cfg.seeds.iter().map(move |s| (t, s)));
    for ((task, seed), log) in cells.zip(&logs) {
        let last = log.rows.last().map_or(f64::NAN, |r| r.loss);
        println!(
            "{task} seed {seed}: final loss {last:.5} in {:.1}s",
            log.seconds()
        );
    }
    println!("checkpoints under {}", dir.join("cells").display());
    Ok(())
}

fn eval(a: &ExpArgs, root: &Path) -> Result<()> {
    let cfg = load_config(a)?;
    let dir = out_dir(&a.out, &cfg, root, "");
    let reports = experiment::eval_cells(&cfg, &cfg.seeds, &dir)?;
    for (task, seeds) in &reports {
        for (seed, r) in seeds {
            println!("{task} seed {seed}: aggregate {:.4}", r.aggregate);
        }
    }
    let path = dir.join("eval.json");
    std::fs::write(&path, serde_json::to_string_pretty(&reports)? + "\n")?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(a: &ExpArgs, root: &Path) -> Result<()> {
    let cfg = load_config(a)?;
    let dir = out_dir(&a.out, &cfg, root, "");
    let out = experiment::run(&cfg, &dir, a.jobs)?;
    for (task, r) in &out.results.tasks {
        let m = r.summary["aggregate"];
        println!("{task}: aggregate {:.4} ± {:.4}", m.mean, m.std);
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn sweep(a: &ExpArgs, root: &Path) -> Result<()> {
    let cfg = load_config(a)?;
    let dir = out_dir(&a.out, &cfg, root, "-sweep");
    let s = experiment::sweep_alpha(&cfg, &dir, a.jobs)?;
    println!(
        "{} rows ({} x {}) written to {}",
        s.rows.len(),
        s.axes.0,
        s.axes.1,
        dir.display()
    );
    Ok(())
}

fn compare_runs(a: &CompareArgs, root: &Path) -> Result<()> {
    let runs = a
        .paths
        .iter()
        .map(|p| load_run(p).with_context(|| format!("cannot read {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let rows = compare(&runs)?;
    let dir = a.out.clone().unwrap_or_else(|| root.join("comparison"));
    std::fs::create_dir_all(&dir)?;
    write_comparison(&dir.join("comparison.csv"), &rows)?;
    std::fs::write(dir.join("comparison.svg"), comparison_svg(&rows))?;
    for r in &rows {
        let ratio = r.time_ratio.map_or("-".to_string(), |x| format!("{x:.3}"));
        println!(
            "{:<16} {:<28} {:+.4}  time x{ratio}",
            r.task, r.candidate, r.delta
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let root = &cli.out_root;
    let result = match &cli.command {
        Command::Gen(a) => gen(a, root),
        Command::Train(a) => train(a, root),
        Command::Eval(a) => eval(a, root),
        Command::Run(a) => run(a, root),
        Command::SweepAlpha(a) => sweep(a, root),
        Command::Compare(a) => compare_runs(a, root),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
