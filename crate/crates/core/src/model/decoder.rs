//! Per-probe decoders, loss and hardening of predictions.
//!
//! Node mask and scalar probes read `h_v` through one linear map. Edge
//! probes read the edge hidden state when the processor has one and
//! `[h_a ‖ h_b]` otherwise. Node-index probes score every candidate `u` for
//! node `v` on the pair `(v, u)`:
//! `w · max(P h_u, Q h_v + R e_(v,u) + [u = v] σ) + b`, normalised by a softmax
//! over the candidates of `v`.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};

use crate::diff::{BoundParams, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{Location, ProbeKind, ProbeSpec, Stage};
use crate::model::batch::{Features, ProbeData, Topology};
use crate::scalar::Scalar;

/// Decoder group names and shapes of one probe.
pub(crate) fn group_shapes(
    p: &ProbeSpec,
    d: usize,
    edge_hidden: bool,
) -> Vec<(String, usize, usize)> {
    let n = |suffix: &str| format!("dec.{}{suffix}", p.name);
    match (p.kind, p.location) {
        (ProbeKind::NodeIndex, _) => vec![
            (n(".src"), d, d),
            (n(".dst"), d, d),
            (n(".edge"), d, d),
            (n(".self"), d, 0),
            (n(".out"), 1, d),
        ],
        (_, Location::Node) => vec![(n(""), 1, d)],
        (_, Location::Edge) => vec![(n(""), 1, if edge_hidden { d } else { 2 * d })],
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Entry {
    pub spec: ProbeSpec,
    pub groups: Vec<usize>,
}

/// Decoder groups for every hint and output probe.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderPlan {
    pub(crate) entries: Vec<Entry>,
}

impl DecoderPlan {
    pub fn new<T: Scalar>(specs: &[ProbeSpec], params: &ParamStore<T>) -> Result<Self> {
        let mut entries = Vec::new();
        for p in specs.iter().filter(|p| p.stage != Stage::Input) {
            let groups = group_shapes(p, 0, false)
                .into_iter()
                .map(|(name, _, _)| {
                    params
                        .index_of(&name)
                        .ok_or_else(|| Error::Contract(format!("missing decoder `{name}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            entries.push(Entry {
                spec: p.clone(),
                groups,
            });
        }
        Ok(Self { entries })
    }

    pub fn specs(&self, stage: Stage) -> impl Iterator<Item = &ProbeSpec> {
        self.entries
            .iter()
            .map(|e| &e.spec)
            .filter(move |s| s.stage == stage)
    }
}

/// Decoded logits per probe name: `N × 1` for node probes and `P × 1` for
/// edge and node-index probes.
pub type Logits = BTreeMap<String, Var>;

fn pointer_logits<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    topo: &Topology,
    groups: &[usize],
    h_v: Var,
    e: Var,
    self_flag: Var,
) -> Result<Var> {
    let (src, dst, edge, selfv, out) = (groups[0], groups[1], groups[2], groups[3], groups[4]);
    let pu = tape.linear(h_v, bound.weight(src), Some(bound.bias(src)))?;
    let pu = tape.gather_rows(pu, &topo.pair_dst)?;
    let qv = tape.linear(h_v, bound.weight(dst), Some(bound.bias(dst)))?;
    let qv = tape.gather_rows(qv, &topo.pair_src)?;
    let re = tape.linear(e, bound.weight(edge), Some(bound.bias(edge)))?;
    let sigma = tape.matmul(self_flag, bound.bias(selfv))?;
    let rhs = tape.add_all(&[qv, re, sigma])?;
    let m = tape.maximum(pu, rhs)?;
    tape.linear(m, bound.weight(out), Some(bound.bias(out)))
}

/// Decodes the probes of the requested stages.
///
/// `e` is the `P × d` edge representation used by node-index decoders;
/// `h_e` is the edge hidden state when the processor keeps one.
#[allow(clippy::too_many_arguments)]
pub fn decode<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    plan: &DecoderPlan,
    topo: &Topology,
    h_v: Var,
    e: Var,
    h_e: Option<Var>,
    stages: &[Stage],
) -> Result<Logits> {
    let mut out = Logits::new();
    let mut self_flag = None;
    for entry in plan
        .entries
        .iter()
        .filter(|e| stages.contains(&e.spec.stage))
    {
        let g = &entry.groups;
        let logit = match (entry.spec.kind, entry.spec.location) {
            (ProbeKind::NodeIndex, _) => {
                let flag = *self_flag.get_or_insert_with(|| {
                    let col = topo
                        .pair_self
                        .iter()
                        .map(|&s| if s { T::one() } else { T::zero() })
                        .collect::<Array1<T>>();
                    tape.constant(col.insert_axis(ndarray::Axis(1)))
                });
                pointer_logits(tape, bound, topo, g, h_v, e, flag)?
            }
            (_, Location::Node) => tape.linear(h_v, bound.weight(g[0]), Some(bound.bias(g[0])))?,
            (_, Location::Edge) => match h_e {
                Some(h_e) => tape.linear(h_e, bound.weight(g[0]), Some(bound.bias(g[0])))?,
                None => {
                    let d = tape.shape(h_v).1;
                    let w = bound.weight(g[0]);
                    let wa = tape.slice_cols(w, 0, d)?;
                    let wb = tape.slice_cols(w, d, d)?;
                    let a = tape.linear(h_v, wa, Some(bound.bias(g[0])))?;
                    let b = tape.linear(h_v, wb, None)?;
                    let a = tape.gather_rows(a, &topo.pair_src)?;
                    let b = tape.gather_rows(b, &topo.pair_dst)?;
                    tape.add(a, b)?
                }
            },
        };
        out.insert(entry.spec.name.clone(), logit);
    }
    Ok(out)
}

/// Target row of each node's pointer within the pair layout.
fn pointer_rows(topo: &Topology, targets: &[usize]) -> Vec<usize> {
    targets
        .iter()
        .enumerate()
        .map(|(v, &u)| topo.pair(v, u))
        .collect()
}

/// Sum over probes of the per-probe mean loss. Mask probes use binary
/// cross-entropy on logits, node-index probes softmax cross-entropy over the
/// candidates of each node, scalars squared error. `node_w` weights nodes
/// (and hence pointer rows); `pair_w` weights node pairs.
pub fn step_loss<T: Scalar>(
    tape: &mut Tape<T>,
    plan: &DecoderPlan,
    topo: &Topology,
    logits: &Logits,
    targets: &Features<T>,
    node_w: &Array1<T>,
    pair_w: &Array1<T>,
) -> Result<Var> {
    let mut parts = Vec::new();
    for entry in &plan.entries {
        let name = &entry.spec.name;
        let (Some(&logit), Some(target)) = (logits.get(name), targets.get(name)) else {
            continue;
        };
        let weight = match entry.spec.location {
            Location::Node => node_w,
            Location::Edge => pair_w,
        };
        let loss = match (entry.spec.kind, target) {
            (ProbeKind::NodeIndex, ProbeData::Pointer(p)) => tape.segment_cross_entropy(
                logit,
                &topo.pair_src,
                pointer_rows(topo, p),
                node_w.to_vec(),
            )?,
            (ProbeKind::Mask, ProbeData::Dense(y)) => {
                tape.bce_logits(logit, y.clone(), weight.clone())?
            }
            (ProbeKind::Scalar, ProbeData::Dense(y)) => {
                tape.squared_error(logit, y.clone(), weight.clone())?
            }
            _ => {
                return Err(Error::Contract(format!(
                    "probe `{name}` has the wrong data kind"
                )));
            }
        };
        parts.push(loss);
    }
    if parts.is_empty() {
        return Ok(tape.zeros(1, 1));
    }
    tape.add_all(&parts)
}

/// Hard predictions: masks threshold at logit 0, node-index probes take the
/// best-scoring candidate (lowest index on ties), scalars pass through.
pub fn harden<T: Scalar>(
    plan: &DecoderPlan,
    topo: &Topology,
    logits: &BTreeMap<String, Array2<T>>,
) -> Features<T> {
    let mut out = Features::new();
    for entry in &plan.entries {
        let Some(l) = logits.get(&entry.spec.name) else {
            continue;
        };
        let data = match entry.spec.kind {
            ProbeKind::Mask => {
                ProbeData::Dense(l.mapv(|x| if x > T::zero() { T::one() } else { T::zero() }))
            }
            ProbeKind::Scalar => ProbeData::Dense(l.clone()),
            ProbeKind::NodeIndex => {
                let mut best = vec![usize::MAX; topo.n_nodes];
                for p in 0..topo.n_pairs {
                    let v = topo.pair_src[p];
                    if best[v] == usize::MAX || l[[p, 0]] > l[[best[v], 0]] {
                        best[v] = p;
                    }
                }
                ProbeData::Pointer(best.iter().map(|&p| topo.pair_dst[p]).collect())
            }
        };
        out.insert(entry.spec.name.clone(), data);
    }
    out
}

/// Logits that reproduce `targets` exactly under [`harden`], with the given
/// margin. Scalars are copied.
pub fn perfect_logits<T: Scalar>(
    plan: &DecoderPlan,
    topo: &Topology,
    targets: &Features<T>,
    margin: f64,
) -> BTreeMap<String, Array2<T>> {
    let m = T::lit(margin);
    let mut out = BTreeMap::new();
    for entry in &plan.entries {
        let Some(target) = targets.get(&entry.spec.name) else {
            continue;
        };
        let l = match (entry.spec.kind, target) {
            (ProbeKind::NodeIndex, ProbeData::Pointer(p)) => {
                let mut l = Array2::zeros((topo.n_pairs, 1));
                for row in pointer_rows(topo, p) {
                    l[[row, 0]] = m;
                }
                l
            }
            (ProbeKind::Mask, ProbeData::Dense(y)) => {
                y.mapv(|v| if v > T::lit(0.5) { m } else { -m })
            }
            (_, ProbeData::Dense(y)) => y.clone(),
            _ => continue,
        };
        out.insert(entry.spec.name.clone(), l);
    }
    out
}
