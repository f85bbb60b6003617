//! Training loop, free-running evaluation and seed aggregation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{adam_step, grad, AdamConfig, OptimizerState};
use crate::error::{Error, Result};
use crate::graph::{Location, ProbeKind, Stage, Trace};
use crate::model::decoder::harden;
use crate::model::pipeline::batch_loss;
use crate::model::{rollout, Batch, Mode, Model, ModelConfig, ProbeData, ProcessorKind};
use crate::scalar::Scalar;

/// Seeds used when none are given.
pub const DEFAULT_SEEDS: [u64; 5] = [5, 18, 25, 30, 42];

const SAMPLE_SALT: u64 = 0x5eed_0001;
const EVAL_SALT: u64 = 0x5eed_0002;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Inclusive node-count range of training instances.
    pub train_n: (usize, usize),
    /// Inclusive node-count range of evaluation instances.
    pub eval_n: (usize, usize),
    pub eval_instances: usize,
    pub clip_grad_norm: Option<f64>,
    /// Where a batch that produced a non-finite loss is written.
    pub dump_dir: Option<PathBuf>,
}

impl TrainConfig {
    /// Defaults per processor family: batch 32 and learning rate 1e-3 for the
    /// GNN, batch 4 and 2.5e-4 for attention processors.
    pub fn new(model: ModelConfig) -> Self {
        let (batch_size, learning_rate) = match model.processor {
            ProcessorKind::Gnn => (32, 1e-3),
            ProcessorKind::Transformer | ProcessorKind::CefTransformer => (4, 2.5e-4),
        };
        Self {
            model,
            batch_size,
            steps: 2000,
            learning_rate,
            seed: DEFAULT_SEEDS[0],
            train_n: (4, 8),
            eval_n: (4, 8),
            eval_instances: 64,
            clip_grad_norm: None,
            dump_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for (what, (lo, hi)) in [("train_n", self.train_n), ("eval_n", self.eval_n)] {
            if lo == 0 || lo > hi {
                return Err(Error::Domain(format!("{what} range [{lo}, {hi}] is empty")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Domain("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Domain(
                "learning_rate must be finite and non-negative".into(),
            ));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return Err(Error::Domain("clip_grad_norm must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    /// Wall-clock seconds since training started.
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<LogRow>, _>>()?;
        Ok(Self { rows })
    }

    pub fn seconds(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.seconds)
    }
}

/// Samples `count` traces with sizes drawn from `n`.
pub fn sample_traces(
    model: &ModelConfig,
    n: (usize, usize),
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Trace>> {
    let spec = model.task.spec();
    (0..count)
        .map(|_| spec.sample_sized(n.0, n.1, rng))
        .collect()
}

/// Trains from fresh parameters on freshly sampled batches.
pub fn train<T: Scalar>(cfg: &TrainConfig) -> Result<(Model<T>, TrainLog)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SAMPLE_SALT);
    let mut model = Model::new(cfg.model, cfg.seed)?;
    let log = train_with(cfg, &mut model, |_| {
        sample_traces(&cfg.model, cfg.train_n, cfg.batch_size, &mut rng)
    })?;
    Ok((model, log))
}

/// Training loop over batches produced by `next_batch(step)`.
pub fn train_with<T: Scalar>(
    cfg: &TrainConfig,
    model: &mut Model<T>,
    mut next_batch: impl FnMut(usize) -> Result<Vec<Trace>>,
) -> Result<TrainLog> {
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let mut state = OptimizerState::new(&model.params);
    let start = Instant::now();
    let mut log = TrainLog::default();
    for step in 1..=cfg.steps {
        let traces = next_batch(step)?;
        let batch = Batch::<T>::new(&traces)?;
        let m = &*model;
        let (loss, mut grads) = grad(&m.params, |tape, bound| batch_loss(tape, bound, m, &batch))?;
        if !loss.is_finite() || !grads.is_finite() {
            let dump = dump_batch(cfg.dump_dir.as_deref(), step, &traces)?;
            return Err(Error::NonFiniteLoss { step, dump });
        }
        if let Some(c) = cfg.clip_grad_norm {
            grads.clip_norm(T::lit(c));
        }
        adam_step(&mut model.params, &grads, &mut state, &adam)?;
        log.rows.push(LogRow {
            step,
            loss: loss.as_f64(),
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(log)
}

fn dump_batch(dir: Option<&Path>, step: usize, traces: &[Trace]) -> Result<PathBuf> {
    let dir = dir.map_or_else(std::env::temp_dir, Path::to_path_buf);
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(format!("nonfinite_batch_step{step}.json"));
    let docs = traces
        .iter()
        .map(|t| {
            t.to_json()
                .and_then(|s| Ok(serde_json::from_str::<serde_json::Value>(&s)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut f = std::fs::File::create(&path)?;
    f.write_all(serde_json::to_string_pretty(&docs)?.as_bytes())?;
    Ok(path)
}

/// Per-probe running tally.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Tally {
    correct: usize,
    total: usize,
    tp: usize,
    fp: usize,
    fn_: usize,
}

impl Tally {
    fn score(&self, kind: ProbeKind) -> f64 {
        match kind {
            ProbeKind::Mask => f1(self.tp, self.fp, self.fn_),
            _ if self.total == 0 => 1.0,
            _ => self.correct as f64 / self.total as f64,
        }
    }
}

/// F1 over the positive class; 1 when there are no positives on either side.
pub fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        1.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Tolerance for scalar probes.
pub const SCALAR_TOLERANCE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeScore {
    pub score: f64,
    /// Number of scored elements.
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub instances: usize,
    /// Output probes.
    pub outputs: BTreeMap<String, ProbeScore>,
    /// Hint probes over every step of every instance.
    pub hints: BTreeMap<String, ProbeScore>,
    /// Element-weighted mean of the output probe scores.
    pub aggregate: f64,
}

fn tally_rows<T: Scalar>(
    tally: &mut Tally,
    kind: ProbeKind,
    pred: &ProbeData<T>,
    target: &ProbeData<T>,
    rows: impl Iterator<Item = usize>,
) {
    match (pred, target) {
        (ProbeData::Pointer(p), ProbeData::Pointer(y)) => {
            for r in rows {
                tally.total += 1;
                tally.correct += usize::from(p[r] == y[r]);
            }
        }
        (ProbeData::Dense(p), ProbeData::Dense(y)) => {
            for r in rows {
                let (a, b) = (p[[r, 0]].as_f64(), y[[r, 0]].as_f64());
                tally.total += 1;
                match kind {
                    ProbeKind::Mask => {
                        let (a, b) = (a > 0.5, b > 0.5);
                        tally.correct += usize::from(a == b);
                        tally.tp += usize::from(a && b);
                        tally.fp += usize::from(a && !b);
                        tally.fn_ += usize::from(!a && b);
                    }
                    _ => tally.correct += usize::from((a - b).abs() < SCALAR_TOLERANCE),
                }
            }
        }
        _ => {}
    }
}

/// Free-running evaluation on the given instances, in chunks of
/// `chunk` traces.
pub fn evaluate<T: Scalar>(model: &Model<T>, traces: &[Trace]) -> Result<EvalReport> {
    evaluate_chunked(model, traces, 32)
}

pub fn evaluate_chunked<T: Scalar>(
    model: &Model<T>,
    traces: &[Trace],
    chunk: usize,
) -> Result<EvalReport> {
    let plan = &model.decoder;
    let out_specs: Vec<_> = plan.specs(Stage::Output).cloned().collect();
    let hint_specs: Vec<_> = plan.specs(Stage::Hint).cloned().collect();
    let mut out_t: BTreeMap<String, Tally> = BTreeMap::new();
    let mut hint_t: BTreeMap<String, Tally> = BTreeMap::new();
    for part in traces.chunks(chunk.max(1)) {
        let batch = Batch::<T>::new(part)?;
        let topo = &batch.topo;
        let steps = rollout(model, &batch, Mode::FreeRunning)?;
        let rows_of = |g: usize, location: Location| -> Vec<usize> {
            match location {
                Location::Node => topo.graph_nodes(g).collect(),
                Location::Edge => topo.graph_pairs(g).filter(|&p| topo.pair_edge[p]).collect(),
            }
        };
        for (i, s) in steps.iter().enumerate() {
            let t = i + 1;
            let pred = harden(plan, topo, &s.logits);
            for spec in &hint_specs {
                let tally = hint_t.entry(spec.name.clone()).or_default();
                for g in (0..topo.n_graphs()).filter(|&g| t <= batch.steps[g]) {
                    tally_rows(
                        tally,
                        spec.kind,
                        &pred[&spec.name],
                        &batch.hints[i][&spec.name],
                        rows_of(g, spec.location).into_iter(),
                    );
                }
            }
            for spec in &out_specs {
                let Some(p) = pred.get(&spec.name) else {
                    continue;
                };
                let tally = out_t.entry(spec.name.clone()).or_default();
                for g in (0..topo.n_graphs()).filter(|&g| t == batch.steps[g]) {
                    tally_rows(
                        tally,
                        spec.kind,
                        p,
                        &batch.outputs[&spec.name],
                        rows_of(g, spec.location).into_iter(),
                    );
                }
            }
        }
    }
    let finish = |tallies: BTreeMap<String, Tally>, specs: &[crate::graph::ProbeSpec]| {
        specs
            .iter()
            .map(|s| {
                let t = tallies.get(&s.name).copied().unwrap_or_default();
                (
                    s.name.clone(),
                    ProbeScore {
                        score: t.score(s.kind),
                        count: t.total,
                    },
                )
            })
            .collect::<BTreeMap<_, _>>()
    };
    let outputs = finish(out_t, &out_specs);
    let hints = finish(hint_t, &hint_specs);
    Ok(EvalReport {
        instances: traces.len(),
        aggregate: aggregate(&outputs),
        outputs,
        hints,
    })
}

/// Element-count-weighted mean of probe scores.
pub fn aggregate(scores: &BTreeMap<String, ProbeScore>) -> f64 {
    let total: usize = scores.values().map(|s| s.count).sum();
    if total == 0 {
        return 0.0;
    }
    scores
        .values()
        .map(|s| s.score * s.count as f64)
        .sum::<f64>()
        / total as f64
}

/// Evaluation instances for a seed; identical for every model trained on
/// that seed.
pub fn eval_traces(cfg: &TrainConfig, n: (usize, usize)) -> Result<Vec<Trace>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ EVAL_SALT);
    sample_traces(&cfg.model, n, cfg.eval_instances, &mut rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation; a single value has std 0.
pub fn mean_std(xs: &[f64]) -> MeanStd {
    let n = xs.len();
    if n == 0 {
        return MeanStd {
            mean: f64::NAN,
            std: f64::NAN,
        };
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    MeanStd { mean, std }
}

/// One seed's trained-and-evaluated result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub final_loss: f64,
    pub eval: EvalReport,
    pub ood_eval: Option<EvalReport>,
}

/// Wall-clock per phase, kept apart from the deterministic results.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedReport {
    pub seeds: Vec<SeedResult>,
    /// Mean and std of every output probe score and of `aggregate`.
    pub summary: BTreeMap<String, MeanStd>,
    pub ood_summary: Option<BTreeMap<String, MeanStd>>,
}

/// Per-metric mean ± std across reports.
pub fn summarize(reports: &[&EvalReport]) -> BTreeMap<String, MeanStd> {
    let mut cols: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in reports {
        cols.entry("aggregate".into())
            .or_default()
            .push(r.aggregate);
        for (k, s) in &r.outputs {
            cols.entry(k.clone()).or_default().push(s.score);
        }
    }
    cols.into_iter().map(|(k, v)| (k, mean_std(&v))).collect()
}

/// Everything one trained-and-evaluated seed produces.
#[derive(Clone, Debug)]
pub struct SeedRun<T> {
    pub result: SeedResult,
    pub timing: Timing,
    pub log: TrainLog,
    pub model: Model<T>,
}

/// Trains and evaluates one seed.
pub fn run_seed<T: Scalar>(cfg: &TrainConfig, ood_n: Option<(usize, usize)>) -> Result<SeedRun<T>> {
    let (model, log) = train::<T>(cfg)?;
    let t0 = Instant::now();
    let eval = evaluate(&model, &eval_traces(cfg, cfg.eval_n)?)?;
    let ood_eval = ood_n
        .map(|n| evaluate(&model, &eval_traces(cfg, n)?))
        .transpose()?;
    let timing = Timing {
        train_seconds: log.seconds(),
        eval_seconds: t0.elapsed().as_secs_f64(),
    };
    let result = SeedResult {
        seed: cfg.seed,
        final_loss: log.rows.last().map_or(f64::NAN, |r| r.loss),
        eval,
        ood_eval,
    };
    Ok(SeedRun {
        result,
        timing,
        log,
        model,
    })
}

/// Aggregates already computed seed results.
pub fn combine(seeds: Vec<SeedResult>) -> MultiSeedReport {
    let summary = summarize(&seeds.iter().map(|s| &s.eval).collect::<Vec<_>>());
    let ood: Vec<&EvalReport> = seeds.iter().filter_map(|s| s.ood_eval.as_ref()).collect();
    let ood_summary = (!ood.is_empty()).then(|| summarize(&ood));
    MultiSeedReport {
        seeds,
        summary,
        ood_summary,
    }
}

/// Trains and evaluates every seed in turn.
pub fn multi_seed<T: Scalar>(cfg: &TrainConfig, seeds: &[u64]) -> Result<MultiSeedReport> {
    if seeds.is_empty() {
        return Err(Error::Domain("at least one seed is required".into()));
    }
    let mut results = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = TrainConfig {
            seed,
            ..cfg.clone()
        };
        results.push(run_seed::<T>(&cfg, None)?.result);
    }
    Ok(combine(results))
}
