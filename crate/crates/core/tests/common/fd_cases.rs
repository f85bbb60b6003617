//! Finite-difference scenarios shared by the gradient tests and the
//! acceptance runner.

use super::{fd_check, randomize, FdReport};
use cef_core::diff::{BoundParams, ParamGroup, ParamStore, Tape, Var};
use cef_core::graph::{random_graph, Trace};
use cef_core::model::pipeline::batch_loss;
use cef_core::model::preprocessor::learned_gate;
use cef_core::model::processor::RtWeights;
use cef_core::model::{
    attention_enhance, cef_rt_process, fixed_gate, gnn_gate, gnn_process, rt_process,
    transformer_gate, Batch, GateActivation, Model, ModelConfig, Preprocessor, ProcessorKind,
    Topology,
};
use cef_core::tasks::TaskId;
use cef_core::Result;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const D: usize = 6;

/// Store of free tensors named by `shapes`, randomized.
fn store(shapes: &[(&str, usize, usize)], seed: u64) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    for &(name, r, c) in shapes {
        p.push(ParamGroup::zeros(name, r, c)).unwrap();
    }
    randomize(&mut p, seed, 1.0);
    p
}

/// Contracts `out` with a fixed random matrix so every entry matters.
fn contract(t: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let (r, c) = t.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = t.constant(Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0)));
    let prod = t.mul(out, m)?;
    Ok(t.sum_all(prod))
}

fn w(p: &ParamStore<f64>, b: &BoundParams, name: &str) -> Var {
    b.weight(p.index_of(name).unwrap())
}

fn lin(p: &ParamStore<f64>, b: &BoundParams, name: &str) -> (Var, Var) {
    let i = p.index_of(name).unwrap();
    (b.weight(i), b.bias(i))
}

type Case = (String, FdReport);

fn check(
    label: &str,
    p: &ParamStore<f64>,
    f: impl Fn(&mut Tape<f64>, &BoundParams) -> Result<Var>,
) -> Case {
    (label.to_string(), fd_check(p, f).unwrap())
}

pub fn gate_cases() -> Vec<Case> {
    let mut out = Vec::new();
    let p = store(&[("l", 4, D), ("c", 4, D), ("gate", 1, D)], 1);
    out.push(check("gnn_gate", &p, |t, b| {
        let (gw, gb) = lin(&p, b, "gate");
        let g = gnn_gate(t, w(&p, b, "l"), w(&p, b, "c"), gw, gb)?;
        contract(t, g.c_next, 9)
    }));
    let p = store(
        &[
            ("l", 4, D),
            ("h", 4, D),
            ("c", 4, 2 * D),
            ("gate", 1, 2 * D),
        ],
        2,
    );
    out.push(check("transformer_gate", &p, |t, b| {
        let (gw, gb) = lin(&p, b, "gate");
        let (z, g) = transformer_gate(t, w(&p, b, "l"), w(&p, b, "h"), w(&p, b, "c"), gw, gb)?;
        let both = t.concat_cols(&[z, g.c_next, g.alpha])?;
        contract(t, both, 3)
    }));
    out.push(check("sigmoid gate on the gnn", &p, |t, b| {
        let (gw, gb) = lin(&p, b, "gate");
        let l = t.slice_cols(w(&p, b, "c"), 0, D)?;
        let c = w(&p, b, "l");
        let gw = t.slice_cols(gw, 0, D)?;
        let g = learned_gate(t, l, c, gw, gb, GateActivation::Sigmoid)?;
        contract(t, g.c_next, 4)
    }));
    let p = store(&[("x", 4, D), ("c", 4, D)], 3);
    out.push(check("fixed_gate", &p, |t, b| {
        let out = fixed_gate(t, w(&p, b, "x"), w(&p, b, "c"), 0.3)?;
        contract(t, out, 5)
    }));
    let p = store(
        &[
            ("l", 4, D),
            ("h1", 4, D),
            ("h2", 4, D),
            ("q", D, D),
            ("k", D, D),
            ("v", D, D),
        ],
        4,
    );
    out.push(check("attention_enhance", &p, |t, b| {
        let hist = [w(&p, b, "h1"), w(&p, b, "h2")];
        let a = attention_enhance(
            t,
            w(&p, b, "l"),
            &hist,
            lin(&p, b, "q"),
            lin(&p, b, "k"),
            lin(&p, b, "v"),
        )?;
        contract(t, a.s, 6)
    }));
    out
}

fn topo(seed: u64) -> Topology {
    let g1 = random_graph(4, 0.5, seed, true).unwrap();
    let g2 = random_graph(3, 0.7, seed + 1, false).unwrap();
    Topology::new([&g1, &g2])
}

fn rt_store(tp: &Topology, seed: u64) -> ParamStore<f64> {
    let (n, pairs) = (tp.n_nodes, tp.n_pairs);
    store(
        &[
            ("zv", n, 2 * D),
            ("ze", pairs, 2 * D),
            ("cv", n, 2 * D),
            ("ce", pairs, 2 * D),
            ("query", D, 4 * D),
            ("key", D, 4 * D),
            ("value", D, 4 * D),
            ("node", D, 3 * D),
            ("edge", D, 6 * D),
        ],
        seed,
    )
}

fn rt_weights(p: &ParamStore<f64>, b: &BoundParams) -> RtWeights {
    RtWeights {
        query: lin(p, b, "query"),
        key: lin(p, b, "key"),
        value: lin(p, b, "value"),
        node: lin(p, b, "node"),
        edge: lin(p, b, "edge"),
    }
}

pub fn processor_cases() -> Vec<Case> {
    let mut out = Vec::new();
    let tp = topo(11);
    let (n, pairs) = (tp.n_nodes, tp.n_pairs);
    let p = store(
        &[
            ("z", n, 2 * D),
            ("s", pairs, D),
            ("f1", D, 2 * D),
            ("f2", D, 3 * D),
            ("f3", D, 2 * D),
        ],
        5,
    );
    out.push(check("gnn_process", &p, |t, b| {
        let h = gnn_process(
            t,
            &tp,
            w(&p, b, "z"),
            w(&p, b, "s"),
            lin(&p, b, "f1"),
            lin(&p, b, "f2"),
            lin(&p, b, "f3"),
        )?;
        contract(t, h, 7)
    }));
    let tp = topo(21);
    let p = rt_store(&tp, 6);
    out.push(check("rt_process", &p, |t, b| {
        let (h, he) = rt_process(t, &tp, w(&p, b, "zv"), w(&p, b, "ze"), &rt_weights(&p, b))?;
        let a = contract(t, h, 1)?;
        let e = contract(t, he, 2)?;
        t.add(a, e)
    }));
    out.push(check("cef_rt_process", &p, |t, b| {
        let (h, he) = cef_rt_process(
            t,
            &tp,
            w(&p, b, "zv"),
            w(&p, b, "ze"),
            w(&p, b, "cv"),
            w(&p, b, "ce"),
            &rt_weights(&p, b),
        )?;
        let a = contract(t, h, 1)?;
        let e = contract(t, he, 2)?;
        t.add(a, e)
    }));
    out
}

fn traces(task: TaskId, seed: u64) -> Vec<Trace> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..2)
        .map(|_| task.spec().sample(4, &mut rng).unwrap())
        .collect()
}

/// Forward plus loss of a whole model on two `n = 4` instances.
pub fn pipeline_case(cfg: ModelConfig, seed: u64) -> Case {
    let mut model = Model::<f64>::new(cfg, seed).unwrap();
    randomize(&mut model.params, seed, 0.5);
    let batch = Batch::<f64>::new(&traces(cfg.task, seed)).unwrap();
    let m = &model;
    check(
        &format!("{:?}/{:?}/{:?}", cfg.task, cfg.processor, cfg.preprocessor),
        &model.params,
        |t, b| batch_loss(t, b, m, &batch),
    )
}

pub fn cef_pipeline_cases() -> Vec<Case> {
    vec![
        pipeline_case(ModelConfig::cef(TaskId::Bfs, ProcessorKind::Gnn, D), 1),
        pipeline_case(
            ModelConfig::cef(TaskId::BellmanFord, ProcessorKind::Gnn, D),
            2,
        ),
        pipeline_case(
            ModelConfig::cef(TaskId::Bfs, ProcessorKind::Transformer, D),
            3,
        ),
        pipeline_case(
            ModelConfig::cef(TaskId::BinarySearch, ProcessorKind::Transformer, D),
            4,
        ),
    ]
}

pub fn other_pipeline_cases() -> Vec<Case> {
    let mut attn = ModelConfig::base(TaskId::Minimum, ProcessorKind::Gnn, D);
    attn.preprocessor = Preprocessor::Attention;
    let mut fixed = ModelConfig::base(TaskId::MstPrim, ProcessorKind::Gnn, D);
    fixed.preprocessor = Preprocessor::Fixed {
        alpha1: 0.4,
        alpha2: 0.7,
    };
    let mut no_cross = ModelConfig::cef(TaskId::InsertionSort, ProcessorKind::Transformer, D);
    no_cross.processor = ProcessorKind::Transformer;
    vec![
        pipeline_case(attn, 5),
        pipeline_case(fixed, 6),
        pipeline_case(no_cross, 7),
        pipeline_case(ModelConfig::base(TaskId::Bfs, ProcessorKind::Gnn, D), 8),
        pipeline_case(
            ModelConfig::base(TaskId::BellmanFord, ProcessorKind::Transformer, D),
            9,
        ),
    ]
}
