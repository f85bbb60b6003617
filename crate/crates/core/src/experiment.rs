//! Config-driven experiments: multi-seed runs, forget-factor sweeps and
//! comparisons between result files.
//!
//! A run directory holds `results.json` (deterministic per config and
//! seeds), `metrics.csv`, `timing.csv` and one `cells/<task>/seed<k>/`
//! subdirectory per trained model.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::checkpoint;
use crate::error::{Error, Result};
use crate::model::{GateActivation, Model, ModelConfig, Preprocessor, ProcessorKind};
use crate::scalar::Scalar;
use crate::tasks::TaskId;
use crate::train::{
    combine, eval_traces, evaluate, run_seed, train, EvalReport, MultiSeedReport, SeedResult,
    Timing, TrainConfig, TrainLog, DEFAULT_SEEDS,
};

pub const CONFIG_VERSION: u32 = 1;

/// Processor family named in a config; `cef` and the ablation switches pick
/// the concrete processor and preprocessor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Gnn,
    Transformer,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaGrid {
    pub alpha1: Vec<f64>,
    pub alpha2: Vec<f64>,
}

fn default_hidden() -> usize {
    64
}

fn default_steps() -> usize {
    2000
}

fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}

fn default_n() -> [usize; 2] {
    [4, 8]
}

fn default_eval_instances() -> usize {
    64
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub tasks: Vec<TaskId>,
    pub processor: Family,
    #[serde(default, skip_serializing_if = "is_false")]
    pub cef: bool,
    /// Swaps the gate activation: sigmoid for the GNN, relu∘tanh for the
    /// transformer.
    #[serde(default, skip_serializing_if = "is_false")]
    pub gate_swap: bool,
    /// Transformer only: the processor reads the context states in place of
    /// the latents and skips the cross attention.
    #[serde(default, skip_serializing_if = "is_false")]
    pub no_cross_attention: bool,
    /// GNN only: QKV attention over the latent history.
    #[serde(default, skip_serializing_if = "is_false")]
    pub attention_preprocessor: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_alpha: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_grid: Option<AlphaGrid>,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_n")]
    pub train_n: [usize; 2],
    #[serde(default = "default_n")]
    pub eval_n: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood_eval_n: Option<[usize; 2]>,
    #[serde(default = "default_eval_instances")]
    pub eval_instances: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_grad_norm: Option<f64>,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

/// 1-based line of the first occurrence of `"key"`, or 1.
fn key_line(text: &str, key: &str) -> usize {
    let quoted = format!("\"{key}\"");
    text.find(&quoted)
        .map_or(1, |at| text[..at].matches('\n').count() + 1)
}

impl ExperimentConfig {
    /// A config with every optional field at its default.
    pub fn new(tasks: Vec<TaskId>, processor: Family, cef: bool) -> Self {
        Self {
            version: CONFIG_VERSION,
            tasks,
            processor,
            cef,
            gate_swap: false,
            no_cross_attention: false,
            attention_preprocessor: false,
            fixed_alpha: None,
            alpha_grid: None,
            hidden: default_hidden(),
            steps: default_steps(),
            batch_size: None,
            learning_rate: None,
            seeds: default_seeds(),
            train_n: default_n(),
            eval_n: default_n(),
            ood_eval_n: None,
            eval_instances: default_eval_instances(),
            clip_grad_norm: None,
            precision: Precision::F32,
            output_dir: None,
        }
    }

    /// Parses and validates a JSON document. Errors carry the line of the
    /// offending key.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config {
            line: e.line().max(1),
            message: e.to_string(),
        })?;
        cfg.check(|key| key_line(text, key))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Validation without source text; errors point at line 1.
    pub fn validate(&self) -> Result<()> {
        self.check(|_| 1)
    }

    fn check(&self, line: impl Fn(&str) -> usize) -> Result<()> {
        let fail = |key: &str, message: String| {
            Err(Error::Config {
                line: line(key),
                message,
            })
        };
        if self.version != CONFIG_VERSION {
            return fail(
                "version",
                format!("unsupported config version {}", self.version),
            );
        }
        if self.tasks.is_empty() {
            return fail("tasks", "at least one task is required".into());
        }
        if (1..self.tasks.len()).any(|i| self.tasks[..i].contains(&self.tasks[i])) {
            return fail("tasks", "tasks must be distinct".into());
        }
        if self.seeds.is_empty() {
            return fail("seeds", "at least one seed is required".into());
        }
        if (1..self.seeds.len()).any(|i| self.seeds[..i].contains(&self.seeds[i])) {
            return fail("seeds", "seeds must be distinct".into());
        }
        let switches = [
            ("gate_swap", self.gate_swap),
            ("no_cross_attention", self.no_cross_attention),
            ("attention_preprocessor", self.attention_preprocessor),
            ("fixed_alpha", self.fixed_alpha.is_some()),
        ];
        for (key, on) in switches {
            if on && !self.cef {
                return fail(
                    key,
                    format!("`{key}` modifies the context preprocessor and needs `cef: true`"),
                );
            }
        }
        if self.gate_swap && self.attention_preprocessor {
            return fail(
                "attention_preprocessor",
                "`gate_swap` and `attention_preprocessor` are exclusive".into(),
            );
        }
        if self.attention_preprocessor && self.processor != Family::Gnn {
            return fail(
                "attention_preprocessor",
                "the attention preprocessor needs the gnn processor".into(),
            );
        }
        if self.no_cross_attention && self.processor != Family::Transformer {
            return fail(
                "no_cross_attention",
                "`no_cross_attention` needs the transformer processor".into(),
            );
        }
        if self.fixed_alpha.is_some() && (self.gate_swap || self.attention_preprocessor) {
            return fail(
                "fixed_alpha",
                "`fixed_alpha` replaces the learned gate; drop the gate switches".into(),
            );
        }
        if self.alpha_grid.is_some()
            && (self.gate_swap || self.attention_preprocessor || self.fixed_alpha.is_some())
        {
            return fail(
                "alpha_grid",
                "`alpha_grid` sweeps fixed gates; drop the other gate switches".into(),
            );
        }
        let out_of_range = |key: &str, vals: &[f64]| -> Result<()> {
            match vals.iter().find(|a| !(0.0..=1.0).contains(*a)) {
                Some(a) => Err(Error::Domain(format!(
                    "line {}: `{key}` value {a} outside [0, 1]",
                    line(key)
                ))),
                None => Ok(()),
            }
        };
        if let Some(a) = &self.fixed_alpha {
            out_of_range("fixed_alpha", a)?;
        }
        if let Some(g) = &self.alpha_grid {
            if g.alpha1.is_empty() || g.alpha2.is_empty() {
                return fail(
                    "alpha_grid",
                    "both grid axes need at least one value".into(),
                );
            }
            out_of_range("alpha_grid", &g.alpha1)?;
            out_of_range("alpha_grid", &g.alpha2)?;
        }
        for (key, [lo, hi]) in [("train_n", self.train_n), ("eval_n", self.eval_n)]
            .into_iter()
            .chain(self.ood_eval_n.map(|r| ("ood_eval_n", r)))
        {
            if lo == 0 || lo > hi {
                return fail(key, format!("size range [{lo}, {hi}] is empty"));
            }
        }
        if self.hidden == 0 {
            return fail("hidden", "hidden width must be positive".into());
        }
        if self.eval_instances == 0 {
            return fail("eval_instances", "eval_instances must be positive".into());
        }
        if self.batch_size == Some(0) {
            return fail("batch_size", "batch_size must be positive".into());
        }
        if let Some(lr) = self.learning_rate {
            if !(lr >= 0.0 && lr.is_finite()) {
                return fail(
                    "learning_rate",
                    "learning_rate must be finite and non-negative".into(),
                );
            }
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0 && c.is_finite()) {
                return fail("clip_grad_norm", "clip_grad_norm must be positive".into());
            }
        }
        Ok(())
    }

    /// Model for `task`, with the configured preprocessor or, when `fixed`
    /// is given, constant forget factors.
    pub fn model_config(&self, task: TaskId, fixed: Option<(f64, f64)>) -> ModelConfig {
        let fixed = fixed.or(self.fixed_alpha.map(|[a, b]| (a, b)));
        let enabled = self.cef || fixed.is_some();
        let gated = |default: GateActivation| Preprocessor::Gated {
            activation: if self.gate_swap {
                default.flipped()
            } else {
                default
            },
        };
        let preprocessor = match (enabled, fixed) {
            (false, _) => Preprocessor::None,
            (true, Some((alpha1, alpha2))) => Preprocessor::Fixed { alpha1, alpha2 },
            (true, None) if self.attention_preprocessor => Preprocessor::Attention,
            (true, None) => match self.processor {
                Family::Gnn => gated(GateActivation::TanhRelu),
                Family::Transformer => gated(GateActivation::Sigmoid),
            },
        };
        let processor = match self.processor {
            Family::Gnn => ProcessorKind::Gnn,
            Family::Transformer if enabled && !self.no_cross_attention => {
                ProcessorKind::CefTransformer
            }
            Family::Transformer => ProcessorKind::Transformer,
        };
        ModelConfig {
            task,
            processor,
            preprocessor,
            hidden: self.hidden,
        }
    }

    pub fn train_config(&self, task: TaskId, seed: u64, fixed: Option<(f64, f64)>) -> TrainConfig {
        let mut cfg = TrainConfig::new(self.model_config(task, fixed));
        cfg.steps = self.steps;
        cfg.seed = seed;
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(lr) = self.learning_rate {
            cfg.learning_rate = lr;
        }
        cfg.train_n = (self.train_n[0], self.train_n[1]);
        cfg.eval_n = (self.eval_n[0], self.eval_n[1]);
        cfg.eval_instances = self.eval_instances;
        cfg.clip_grad_norm = self.clip_grad_norm;
        cfg
    }

    /// Short name of the variant, e.g. `gnn-cef` or `transformer-cef-no-cross`.
    pub fn label(&self) -> String {
        let mut s = match self.processor {
            Family::Gnn => "gnn".to_string(),
            Family::Transformer => "transformer".to_string(),
        };
        if !self.cef {
            return s + "-base";
        }
        s.push_str("-cef");
        if self.attention_preprocessor {
            s.push_str("-attention");
        }
        if self.gate_swap {
            s.push_str("-gate-swap");
        }
        if self.no_cross_attention {
            s.push_str("-no-cross");
        }
        if let Some([a, b]) = self.fixed_alpha {
            let _ = write!(s, "-fixed-{a}-{b}");
        }
        s
    }

    /// Names of the two forget-factor axes for this processor family.
    pub fn alpha_axes(&self) -> (&'static str, &'static str) {
        match self.processor {
            Family::Gnn => ("alpha_s", "alpha_h"),
            Family::Transformer => ("alpha_node", "alpha_edge"),
        }
    }
}

// -------------------------------------------------------------------------
// cells

fn cell_dir(root: &Path, task: TaskId, seed: u64) -> PathBuf {
    root.join("cells")
        .join(task.as_str())
        .join(format!("seed{seed}"))
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Contract(format!("cannot start worker pool: {e}")))
}

fn write_model<T: Scalar>(dir: &Path, model: &Model<T>, log: &TrainLog) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    checkpoint::save(&model.params, &dir.join("model.ckpt"))?;
    std::fs::write(
        dir.join("model.json"),
        serde_json::to_string_pretty(&model.config)? + "\n",
    )?;
    log.write_csv(&dir.join("log.csv"))
}

/// Loads the model written for one cell.
pub fn load_model<T: Scalar>(dir: &Path) -> Result<Model<T>> {
    let config: ModelConfig =
        serde_json::from_str(&std::fs::read_to_string(dir.join("model.json"))?)?;
    Model::from_params(config, checkpoint::load(&dir.join("model.ckpt"))?)
}

fn run_cell<T: Scalar>(
    cfg: &TrainConfig,
    ood: Option<(usize, usize)>,
    dir: Option<&Path>,
) -> Result<(SeedResult, Timing)> {
    let run = run_seed::<T>(cfg, ood)?;
    if let Some(dir) = dir {
        write_model(dir, &run.model, &run.log)?;
    }
    Ok((run.result, run.timing))
}

fn run_cell_as(
    precision: Precision,
    cfg: &TrainConfig,
    ood: Option<(usize, usize)>,
    dir: Option<&Path>,
) -> Result<(SeedResult, Timing)> {
    match precision {
        Precision::F32 => run_cell::<f32>(cfg, ood, dir),
        Precision::F64 => run_cell::<f64>(cfg, ood, dir),
    }
}

// -------------------------------------------------------------------------
// run

/// Contents of `results.json`. Holds no wall-clock data, so it is identical
/// across reruns of the same config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResults {
    pub label: String,
    pub config: ExperimentConfig,
    /// Keyed by task name.
    pub tasks: BTreeMap<String, MultiSeedReport>,
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub task: String,
    pub seed: u64,
    /// `eval`, `eval_hint`, `ood` or `ood_hint`.
    pub split: String,
    /// Probe name or `aggregate`.
    pub metric: String,
    pub score: f64,
    pub count: usize,
}

/// One row of `timing.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub task: String,
    pub seed: u64,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub results: RunResults,
    pub timing: Vec<TimingRow>,
}

fn metric_rows(task: &str, r: &SeedResult) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    let mut push = |split: &str, report: &EvalReport| {
        let total = report.outputs.values().map(|s| s.count).sum();
        let row = |metric: &str, score, count| MetricRow {
            task: task.to_string(),
            seed: r.seed,
            split: split.to_string(),
            metric: metric.to_string(),
            score,
            count,
        };
        rows.push(row("aggregate", report.aggregate, total));
        for (k, s) in &report.outputs {
            rows.push(row(k, s.score, s.count));
        }
        for (k, s) in &report.hints {
            rows.push(MetricRow {
                split: format!("{split}_hint"),
                ..row(k, s.score, s.count)
            });
        }
    };
    push("eval", &r.eval);
    if let Some(o) = &r.ood_eval {
        push("ood", o);
    }
    rows
}

fn write_rows<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize()
        .collect::<std::result::Result<Vec<R>, _>>()?)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    read_rows(path)
}

pub fn read_timing(path: &Path) -> Result<Vec<TimingRow>> {
    read_rows(path)
}

/// Trains and evaluates every (task, seed) cell on up to `jobs` workers and
/// writes the run directory.
pub fn run(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<RunOutput> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let cells: Vec<(TaskId, u64)> = cfg
        .tasks
        .iter()
        .flat_map(|&t| cfg.seeds.iter().map(move |&s| (t, s)))
        .collect();
    let ood = cfg.ood_eval_n.map(|[a, b]| (a, b));
    let done = thread_pool(jobs)?.install(|| {
        cells
            .par_iter()
            .map(|&(task, seed)| {
                let tc = cfg.train_config(task, seed, None);
                run_cell_as(cfg.precision, &tc, ood, Some(&cell_dir(out, task, seed)))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut per_task: BTreeMap<String, Vec<SeedResult>> = BTreeMap::new();
    let mut metrics = Vec::new();
    let mut timing = Vec::new();
    for (&(task, seed), (result, t)) in cells.iter().zip(done) {
        metrics.extend(metric_rows(task.as_str(), &result));
        timing.push(TimingRow {
            task: task.to_string(),
            seed,
            train_seconds: t.train_seconds,
            eval_seconds: t.eval_seconds,
        });
        per_task.entry(task.to_string()).or_default().push(result);
    }
    let results = RunResults {
        label: cfg.label(),
        config: cfg.clone(),
        tasks: per_task.into_iter().map(|(k, v)| (k, combine(v))).collect(),
    };
    std::fs::write(
        out.join("results.json"),
        serde_json::to_string_pretty(&results)? + "\n",
    )?;
    write_rows(&out.join("metrics.csv"), &metrics)?;
    write_rows(&out.join("timing.csv"), &timing)?;
    Ok(RunOutput { results, timing })
}

/// Trains one model per (task, seed) and writes only the cell directories.
pub fn train_cells(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    out: &Path,
    jobs: usize,
) -> Result<Vec<TrainLog>> {
    cfg.validate()?;
    let cells: Vec<(TaskId, u64)> = cfg
        .tasks
        .iter()
        .flat_map(|&t| seeds.iter().map(move |&s| (t, s)))
        .collect();
    thread_pool(jobs)?.install(|| {
        cells
            .par_iter()
            .map(|&(task, seed)| {
                let tc = cfg.train_config(task, seed, None);
                let dir = cell_dir(out, task, seed);
                match cfg.precision {
                    Precision::F32 => train::<f32>(&tc)
                        .and_then(|(m, log)| write_model(&dir, &m, &log).map(|_| log)),
                    Precision::F64 => train::<f64>(&tc)
                        .and_then(|(m, log)| write_model(&dir, &m, &log).map(|_| log)),
                }
            })
            .collect()
    })
}

/// Evaluates previously trained cells on the seed's evaluation instances.
pub fn eval_cells(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    out: &Path,
) -> Result<BTreeMap<String, BTreeMap<u64, EvalReport>>> {
    cfg.validate()?;
    let mut all: BTreeMap<String, BTreeMap<u64, EvalReport>> = BTreeMap::new();
    for &task in &cfg.tasks {
        for &seed in seeds {
            let tc = cfg.train_config(task, seed, None);
            let dir = cell_dir(out, task, seed);
            let traces = eval_traces(&tc, tc.eval_n)?;
            let report = match cfg.precision {
                Precision::F32 => evaluate(&load_model::<f32>(&dir)?, &traces)?,
                Precision::F64 => evaluate(&load_model::<f64>(&dir)?, &traces)?,
            };
            all.entry(task.to_string())
                .or_default()
                .insert(seed, report);
        }
    }
    Ok(all)
}

// -------------------------------------------------------------------------
// forget-factor sweep

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub task: String,
    pub alpha1: f64,
    pub alpha2: f64,
    pub seed: u64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutput {
    pub axes: (String, String),
    pub rows: Vec<SweepRow>,
}

impl SweepOutput {
    /// Seed-averaged score of one grid cell.
    pub fn mean(&self, task: &str, alpha1: f64, alpha2: f64) -> Option<f64> {
        let xs: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.task == task && r.alpha1 == alpha1 && r.alpha2 == alpha2)
            .map(|r| r.score)
            .collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Trains one fixed-gate model per (task, α₁, α₂, seed). Writes `sweep.csv`
/// with one row each and `sweep_grid_<task>.csv` with seed means laid out
/// as α₁ rows by α₂ columns.
pub fn sweep_alpha(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<SweepOutput> {
    cfg.validate()?;
    let grid = cfg.alpha_grid.as_ref().ok_or_else(|| Error::Config {
        line: 1,
        message: "sweep needs `alpha_grid`".into(),
    })?;
    std::fs::create_dir_all(out)?;
    let mut cells = Vec::new();
    for &task in &cfg.tasks {
        for &a1 in &grid.alpha1 {
            for &a2 in &grid.alpha2 {
                for &seed in &cfg.seeds {
                    cells.push((task, a1, a2, seed));
                }
            }
        }
    }
    let scores = thread_pool(jobs)?.install(|| {
        cells
            .par_iter()
            .map(|&(task, a1, a2, seed)| {
                let tc = cfg.train_config(task, seed, Some((a1, a2)));
                run_cell_as(cfg.precision, &tc, None, None).map(|(r, _)| r.eval.aggregate)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let (l1, l2) = cfg.alpha_axes();
    let sweep = SweepOutput {
        axes: (l1.to_string(), l2.to_string()),
        rows: cells
            .iter()
            .zip(scores)
            .map(|(&(task, alpha1, alpha2, seed), score)| SweepRow {
                task: task.to_string(),
                alpha1,
                alpha2,
                seed,
                score,
            })
            .collect(),
    };
    write_sweep(&out.join("sweep.csv"), &sweep)?;
    for &task in &cfg.tasks {
        let mut w = csv::Writer::from_path(out.join(format!("sweep_grid_{task}.csv")))?;
        let mut header = vec![format!("{l1}\\{l2}")];
        header.extend(grid.alpha2.iter().map(f64::to_string));
        w.write_record(&header)?;
        for &a1 in &grid.alpha1 {
            let mut rec = vec![a1.to_string()];
            for &a2 in &grid.alpha2 {
                rec.push(
                    sweep
                        .mean(task.as_str(), a1, a2)
                        .unwrap_or(f64::NAN)
                        .to_string(),
                );
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    Ok(sweep)
}

pub fn write_sweep(path: &Path, sweep: &SweepOutput) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["task", &sweep.axes.0, &sweep.axes.1, "seed", "score"])?;
    for r in &sweep.rows {
        w.write_record([
            r.task.clone(),
            r.alpha1.to_string(),
            r.alpha2.to_string(),
            r.seed.to_string(),
            r.score.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep(path: &Path) -> Result<SweepOutput> {
    let mut r = csv::Reader::from_path(path)?;
    let h = r.headers()?.clone();
    if h.len() != 5 {
        return Err(Error::Contract(format!(
            "sweep file has {} columns, expected 5",
            h.len()
        )));
    }
    let bad = |line: u64, what: &str| Error::Config {
        line: line as usize,
        message: format!("cannot parse {what}"),
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(line, &h[i]));
        rows.push(SweepRow {
            task: rec[0].to_string(),
            alpha1: num(1)?,
            alpha2: num(2)?,
            seed: rec[3].parse().map_err(|_| bad(line, "seed"))?,
            score: num(4)?,
        });
    }
    Ok(SweepOutput {
        axes: (h[1].to_string(), h[2].to_string()),
        rows,
    })
}

// -------------------------------------------------------------------------
// comparison

/// One candidate-vs-baseline task comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub task: String,
    pub baseline: String,
    pub candidate: String,
    pub baseline_score: f64,
    pub candidate_score: f64,
    pub delta: f64,
    pub baseline_train_seconds: Option<f64>,
    pub candidate_train_seconds: Option<f64>,
    /// `candidate_train_seconds / baseline_train_seconds`.
    pub time_ratio: Option<f64>,
}

/// A run directory's results with its mean training time per task, if
/// `timing.csv` is present.
#[derive(Clone, Debug)]
pub struct LoadedRun {
    pub results: RunResults,
    pub train_seconds: BTreeMap<String, f64>,
}

/// Loads `results.json` given the file or its directory.
pub fn load_run(path: &Path) -> Result<LoadedRun> {
    let file = if path.is_dir() {
        path.join("results.json")
    } else {
        path.to_path_buf()
    };
    let results: RunResults = serde_json::from_str(&std::fs::read_to_string(&file)?)?;
    let timing = file.with_file_name("timing.csv");
    let mut train_seconds = BTreeMap::new();
    if timing.exists() {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for r in read_timing(&timing)? {
            let e = sums.entry(r.task).or_default();
            e.0 += r.train_seconds;
            e.1 += 1;
        }
        train_seconds = sums
            .into_iter()
            .map(|(k, (s, n))| (k, s / n as f64))
            .collect();
    }
    Ok(LoadedRun {
        results,
        train_seconds,
    })
}

/// Compares every run after the first against the first on their shared
/// tasks, by mean aggregate score. Rows are sorted by delta, largest first.
pub fn compare(runs: &[LoadedRun]) -> Result<Vec<ComparisonRow>> {
    let (base, rest) = runs
        .split_first()
        .filter(|(_, r)| !r.is_empty())
        .ok_or_else(|| Error::Contract("comparison needs at least two result files".into()))?;
    let score = |r: &MultiSeedReport| r.summary.get("aggregate").map_or(f64::NAN, |m| m.mean);
    let mut rows = Vec::new();
    for cand in rest {
        let shared: Vec<&String> = cand
            .results
            .tasks
            .keys()
            .filter(|k| base.results.tasks.contains_key(*k))
            .collect();
        if shared.is_empty() {
            return Err(Error::Contract(format!(
                "`{}` and `{}` share no task",
                base.results.label, cand.results.label
            )));
        }
        for task in shared {
            let (b, c) = (
                score(&base.results.tasks[task]),
                score(&cand.results.tasks[task]),
            );
            let (bt, ct) = (
                base.train_seconds.get(task).copied(),
                cand.train_seconds.get(task).copied(),
            );
            rows.push(ComparisonRow {
                task: task.clone(),
                baseline: base.results.label.clone(),
                candidate: cand.results.label.clone(),
                baseline_score: b,
                candidate_score: c,
                delta: c - b,
                baseline_train_seconds: bt,
                candidate_train_seconds: ct,
                time_ratio: bt.zip(ct).map(|(b, c)| c / b),
            });
        }
    }
    rows.sort_by(|a, b| {
        b.delta
            .total_cmp(&a.delta)
            .then_with(|| a.task.cmp(&b.task))
    });
    Ok(rows)
}

pub fn write_comparison(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    write_rows(path, rows)
}

pub fn read_comparison(path: &Path) -> Result<Vec<ComparisonRow>> {
    read_rows(path)
}

/// Horizontal bar chart of the deltas as a standalone SVG document.
pub fn comparison_svg(rows: &[ComparisonRow]) -> String {
    let (bar_h, label_w, plot_w) = (22.0, 260.0, 400.0);
    let height = 40.0 + bar_h * rows.len() as f64;
    let span = rows
        .iter()
        .map(|r| r.delta.abs())
        .fold(0.0, f64::max)
        .max(1e-6);
    let mid = label_w + plot_w / 2.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" font-family="sans-serif" font-size="12">"#,
        label_w + plot_w + 80.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{mid}" y="16" text-anchor="middle">score delta (candidate - baseline)</text>"#
    );
    for (i, r) in rows.iter().enumerate() {
        let y = 28.0 + bar_h * i as f64;
        let w = (r.delta.abs() / span) * plot_w / 2.0;
        let x = if r.delta >= 0.0 { mid } else { mid - w };
        let fill = if r.delta >= 0.0 { "#3a7d44" } else { "#b33f40" };
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{} ({})</text>"#,
            label_w - 6.0,
            y + 14.0,
            r.task,
            r.candidate
        );
        let _ = writeln!(
            s,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{}" fill="{fill}"/>"#,
            bar_h - 6.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}">{:+.4}</text>"#,
            mid + plot_w / 2.0 + 6.0,
            y + 14.0,
            r.delta
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{mid}" y1="24" x2="{mid}" y2="{}" stroke="black"/>"#,
        height - 8.0
    );
    s.push_str("</svg>\n");
    s
}
