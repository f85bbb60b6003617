//! Step orchestration: encode, enhance, concatenate, process, decode.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::diff::{BoundParams, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{Location, Stage};
use crate::model::batch::{Batch, Features, Topology};
use crate::model::decoder::{decode, harden, step_loss, Logits};
use crate::model::encoder::{encode, Latents};
use crate::model::preprocessor::{attention_enhance, fixed_gate, learned_gate};
use crate::model::processor::{cef_rt_process, gnn_process, rt_process, RtWeights};
use crate::model::{wb, Model, Preprocessor, ProcessorKind};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Step `t` reads the ground-truth hints of step `t − 1`.
    TeacherForcing,
    /// Step `t` reads its own hardened predictions from step `t − 1`.
    FreeRunning,
}

/// Context carried between steps. Which fields are live depends on the
/// preprocessor.
#[derive(Clone, Debug, Default)]
pub struct ContextState {
    /// Node context (`N × d` for the GNN, `N × 2d` for attention processors).
    pub c_v: Option<Var>,
    /// Pair context `P × 2d` (attention processors).
    pub c_e: Option<Var>,
    /// Hidden-state context `N × d` (fixed gate on the GNN).
    pub c_h: Option<Var>,
    /// Previous node latents, newest first (attention preprocessor).
    pub history: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct StepState {
    pub h_v: Var,
    /// Present only for attention processors.
    pub h_e: Option<Var>,
    pub ctx: ContextState,
}

impl StepState {
    /// Zero hidden and context states.
    pub fn initial<T: Scalar>(tape: &mut Tape<T>, model: &Model<T>, topo: &Topology) -> Self {
        let d = model.hidden();
        let (n, p) = (topo.n_nodes, topo.n_pairs);
        let attention = model.config.is_attention();
        let h_v = tape.zeros(n, d);
        let h_e = attention.then(|| tape.zeros(p, d));
        let mut ctx = ContextState::default();
        match model.config.preprocessor {
            Preprocessor::Gated { .. } | Preprocessor::Fixed { .. } if attention => {
                ctx.c_v = Some(tape.zeros(n, 2 * d));
                ctx.c_e = Some(tape.zeros(p, 2 * d));
            }
            Preprocessor::Gated { .. } => ctx.c_v = Some(tape.zeros(n, d)),
            Preprocessor::Fixed { .. } => {
                ctx.c_v = Some(tape.zeros(n, d));
                ctx.c_h = Some(tape.zeros(n, d));
            }
            Preprocessor::None | Preprocessor::Attention => {}
        }
        Self { h_v, h_e, ctx }
    }
}

/// `[s ‖ h]` row by row.
pub fn concat_state<T: Scalar>(tape: &mut Tape<T>, s: Var, h: Var) -> Result<Var> {
    let (a, b) = (tape.shape(s), tape.shape(h));
    if a != b {
        return Err(Error::shape(
            "concat_state",
            format!("{}x{}", a.0, a.1),
            format!("{}x{}", b.0, b.1),
        ));
    }
    tape.concat_cols(&[s, h])
}

fn context<T>(v: Option<T>, what: &str) -> Result<T> {
    v.ok_or_else(|| Error::Contract(format!("missing {what} context state")))
}

/// One reasoning step from latents `l` and the previous state. Decodes the
/// probes of the given stages.
pub fn run_step<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    model: &Model<T>,
    topo: &Topology,
    l: Latents,
    state: &StepState,
    stages: &[Stage],
) -> Result<(Logits, StepState)> {
    let layout = &model.layout;
    let mut ctx = state.ctx.clone();
    let (h_v, h_e, e) = match model.config.processor {
        ProcessorKind::Gnn => {
            let (s, h_prev) = match model.config.preprocessor {
                Preprocessor::None => (l.v, state.h_v),
                Preprocessor::Gated { activation } => {
                    let (w, b) = wb(bound, context(layout.gate_node, "gate")?);
                    let c = context(ctx.c_v, "node")?;
                    let gate = learned_gate(tape, l.v, c, w, b, activation)?;
                    ctx.c_v = Some(gate.c_next);
                    (gate.c_next, state.h_v)
                }
                Preprocessor::Attention => {
                    let [q, k, v] = context(layout.attn, "attention")?;
                    let att = attention_enhance(
                        tape,
                        l.v,
                        &ctx.history,
                        wb(bound, q),
                        wb(bound, k),
                        wb(bound, v),
                    )?;
                    ctx.history = att.history_next;
                    (att.s, state.h_v)
                }
                Preprocessor::Fixed { alpha1, alpha2 } => {
                    let s = fixed_gate(tape, l.v, context(ctx.c_v, "node")?, alpha1)?;
                    let h = fixed_gate(tape, state.h_v, context(ctx.c_h, "hidden")?, alpha2)?;
                    ctx.c_v = Some(s);
                    ctx.c_h = Some(h);
                    (s, h)
                }
            };
            let z = concat_state(tape, s, h_prev)?;
            let [f1, f2, f3] = context(layout.gnn, "gnn")?;
            let h = gnn_process(
                tape,
                topo,
                z,
                l.e,
                wb(bound, f1),
                wb(bound, f2),
                wb(bound, f3),
            )?;
            (h, None, l.e)
        }
        ProcessorKind::Transformer | ProcessorKind::CefTransformer => {
            let [q, k, v, n, e] = context(layout.rt, "relational")?;
            let w = RtWeights {
                query: wb(bound, q),
                key: wb(bound, k),
                value: wb(bound, v),
                node: wb(bound, n),
                edge: wb(bound, e),
            };
            let h_e_prev = context(state.h_e, "edge hidden")?;
            let z_v = concat_state(tape, l.v, state.h_v)?;
            let z_e = concat_state(tape, l.e, h_e_prev)?;
            let next = match model.config.preprocessor {
                Preprocessor::None => None,
                Preprocessor::Gated { activation } => {
                    let (wn, bn) = wb(bound, context(layout.gate_node, "gate")?);
                    let (we, be) = wb(bound, context(layout.gate_edge, "gate")?);
                    let gv =
                        learned_gate(tape, z_v, context(ctx.c_v, "node")?, wn, bn, activation)?;
                    let ge =
                        learned_gate(tape, z_e, context(ctx.c_e, "edge")?, we, be, activation)?;
                    Some((gv.c_next, ge.c_next))
                }
                Preprocessor::Fixed { alpha1, alpha2 } => {
                    let cv = fixed_gate(tape, z_v, context(ctx.c_v, "node")?, alpha1)?;
                    let ce = fixed_gate(tape, z_e, context(ctx.c_e, "edge")?, alpha2)?;
                    Some((cv, ce))
                }
                Preprocessor::Attention => {
                    return Err(Error::Contract(
                        "attention preprocessor needs the GNN".into(),
                    ));
                }
            };
            let (h, he) = match (model.config.processor, next) {
                (ProcessorKind::CefTransformer, Some((cv, ce))) => {
                    ctx.c_v = Some(cv);
                    ctx.c_e = Some(ce);
                    cef_rt_process(tape, topo, z_v, z_e, cv, ce, &w)?
                }
                (_, Some((cv, ce))) => {
                    // cross attention removed: the processor sees only the context
                    ctx.c_v = Some(cv);
                    ctx.c_e = Some(ce);
                    rt_process(tape, topo, cv, ce, &w)?
                }
                (_, None) => rt_process(tape, topo, z_v, z_e, &w)?,
            };
            (h, Some(he), he)
        }
    };
    let logits = decode(tape, bound, &model.decoder, topo, h_v, e, h_e, stages)?;
    Ok((logits, StepState { h_v, h_e, ctx }))
}

fn add_latents<T: Scalar>(tape: &mut Tape<T>, a: Latents, b: Latents) -> Result<Latents> {
    Ok(Latents {
        v: tape.add(a.v, b.v)?,
        e: tape.add(a.e, b.e)?,
    })
}

fn values<T: Scalar>(tape: &Tape<T>, logits: &Logits) -> BTreeMap<String, Array2<T>> {
    logits
        .iter()
        .map(|(k, &v)| (k.clone(), tape.value(v).clone()))
        .collect()
}

/// Runs all `max_steps` steps of a batch on `tape`. Inputs are encoded once;
/// step `t > 1` adds the encoding of the previous step's hints. Output probes
/// are decoded only on steps where some graph finishes.
pub fn unroll<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    model: &Model<T>,
    batch: &Batch<T>,
    mode: Mode,
) -> Result<Vec<Logits>> {
    let d = model.hidden();
    let topo = &batch.topo;
    let inputs = encode(tape, bound, &model.input_plan, topo, &batch.inputs, d)?;
    let mut state = StepState::initial(tape, model, topo);
    let mut prev: Option<Features<T>> = None;
    let mut out = Vec::with_capacity(batch.max_steps);
    for t in 1..=batch.max_steps {
        let l = match &prev {
            None => inputs,
            Some(h) => {
                let lh = encode(tape, bound, &model.hint_plan, topo, h, d)?;
                add_latents(tape, inputs, lh)?
            }
        };
        let stages: &[Stage] = if batch.steps.contains(&t) {
            &[Stage::Hint, Stage::Output]
        } else {
            &[Stage::Hint]
        };
        let (logits, next) = run_step(tape, bound, model, topo, l, &state, stages)?;
        state = next;
        prev = Some(match mode {
            Mode::TeacherForcing => batch.hints[t - 1].clone(),
            Mode::FreeRunning => {
                let hints: BTreeMap<_, _> = model
                    .decoder
                    .specs(Stage::Hint)
                    .filter_map(|s| {
                        logits
                            .get(&s.name)
                            .map(|&v| (s.name.clone(), tape.value(v).clone()))
                    })
                    .collect();
                harden(&model.decoder, topo, &hints)
            }
        });
        out.push(logits);
    }
    Ok(out)
}

/// Teacher-forced training loss: per step, hint probes of graphs still
/// running plus output probes of graphs finishing at that step, summed over
/// steps.
pub fn batch_loss<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    model: &Model<T>,
    batch: &Batch<T>,
) -> Result<Var> {
    let steps = unroll(tape, bound, model, batch, Mode::TeacherForcing)?;
    let mut parts = Vec::with_capacity(2 * steps.len());
    for (i, logits) in steps.iter().enumerate() {
        let t = i + 1;
        let nw = batch.row_weights(Location::Node, |s| t <= s);
        let pw = batch.row_weights(Location::Edge, |s| t <= s);
        parts.push(step_loss(
            tape,
            &model.decoder,
            &batch.topo,
            logits,
            &batch.hints[i],
            &nw,
            &pw,
        )?);
        if batch.steps.contains(&t) {
            let nw = batch.row_weights(Location::Node, |s| s == t);
            let pw = batch.row_weights(Location::Edge, |s| s == t);
            parts.push(step_loss(
                tape,
                &model.decoder,
                &batch.topo,
                logits,
                &batch.outputs,
                &nw,
                &pw,
            )?);
        }
    }
    tape.add_all(&parts)
}

/// Decoded values of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepIO<T> {
    /// 1-based step index.
    pub step: usize,
    pub teacher_forcing: bool,
    pub logits: BTreeMap<String, Array2<T>>,
}

/// Forward-only rollout returning the decoded logits of every step.
pub fn rollout<T: Scalar>(
    model: &Model<T>,
    batch: &Batch<T>,
    mode: Mode,
) -> Result<Vec<StepIO<T>>> {
    let mut tape = Tape::new();
    let bound = tape.bind(&model.params);
    let steps = unroll(&mut tape, &bound, model, batch, mode)?;
    Ok(steps
        .iter()
        .enumerate()
        .map(|(i, l)| StepIO {
            step: i + 1,
            teacher_forcing: mode == Mode::TeacherForcing,
            logits: values(&tape, l),
        })
        .collect())
}
