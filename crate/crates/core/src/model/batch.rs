//! Block-diagonal batching of traces.
//!
//! Nodes of all graphs are stacked; every graph contributes its dense
//! `n_g × n_g` block of node pairs, stored row-major, so pair `(a, b)` of
//! graph `g` lives at `pair_offset[g] + a * n_g + b`. Directed edges are a
//! subset of the pairs.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array1, Array2};

use crate::diff::Index;
use crate::error::{Error, Result};
use crate::graph::{FeatureBundle, Graph, Location, ProbeKind, ProbeSpec, Stage, Trace};
use crate::scalar::Scalar;

/// Index structure shared by the encoder, processors and decoder.
#[derive(Clone, Debug)]
pub struct Topology {
    pub sizes: Vec<usize>,
    pub node_offset: Vec<usize>,
    pub pair_offset: Vec<usize>,
    pub n_nodes: usize,
    pub n_pairs: usize,
    /// Graph of each node.
    pub node_graph: Vec<usize>,
    /// First endpoint `a` of each pair `(a, b)`, as a global node.
    pub pair_src: Index,
    /// Second endpoint `b` of each pair.
    pub pair_dst: Index,
    /// Pair index of `(b, a)`.
    pub pair_rev: Index,
    /// `1` on the diagonal pairs `(a, a)`.
    pub pair_self: Vec<bool>,
    /// `true` for pairs that are edges.
    pub pair_edge: Vec<bool>,
    pub edge_src: Index,
    pub edge_dst: Index,
    pub edge_pair: Index,
}

fn index(v: Vec<usize>) -> Index {
    Arc::from(v)
}

impl Topology {
    pub fn new<'a>(graphs: impl IntoIterator<Item = &'a Graph>) -> Self {
        let mut sizes = Vec::new();
        let mut node_offset = Vec::new();
        let mut pair_offset = Vec::new();
        let (mut nodes, mut pairs) = (0, 0);
        let mut node_graph = Vec::new();
        let (mut ps, mut pd, mut pr, mut pself, mut pedge) =
            (vec![], vec![], vec![], vec![], vec![]);
        let (mut es, mut ed, mut ep) = (vec![], vec![], vec![]);
        for (gi, g) in graphs.into_iter().enumerate() {
            let n = g.n();
            sizes.push(n);
            node_offset.push(nodes);
            pair_offset.push(pairs);
            node_graph.extend(std::iter::repeat(gi).take(n));
            for a in 0..n {
                for b in 0..n {
                    ps.push(nodes + a);
                    pd.push(nodes + b);
                    pr.push(pairs + b * n + a);
                    pself.push(a == b);
                    pedge.push(g.has_edge(a, b));
                }
            }
            for &(a, b) in g.edges() {
                es.push(nodes + a);
                ed.push(nodes + b);
                ep.push(pairs + a * n + b);
            }
            nodes += n;
            pairs += n * n;
        }
        Self {
            sizes,
            node_offset,
            pair_offset,
            n_nodes: nodes,
            n_pairs: pairs,
            node_graph,
            pair_src: index(ps),
            pair_dst: index(pd),
            pair_rev: index(pr),
            pair_self: pself,
            pair_edge: pedge,
            edge_src: index(es),
            edge_dst: index(ed),
            edge_pair: index(ep),
        }
    }

    pub fn n_graphs(&self) -> usize {
        self.sizes.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edge_src.len()
    }

    /// Global pair index of `(a, b)` for global nodes `a`, `b` of one graph.
    pub fn pair(&self, a: usize, b: usize) -> usize {
        let g = self.node_graph[a];
        let off = self.node_offset[g];
        self.pair_offset[g] + (a - off) * self.sizes[g] + (b - off)
    }

    /// Number of pairs belonging to graph `g`.
    pub fn graph_pairs(&self, g: usize) -> std::ops::Range<usize> {
        self.pair_offset[g]..self.pair_offset[g] + self.sizes[g] * self.sizes[g]
    }

    pub fn graph_nodes(&self, g: usize) -> std::ops::Range<usize> {
        self.node_offset[g]..self.node_offset[g] + self.sizes[g]
    }
}

/// One probe's values across the batch.
#[derive(Clone, Debug, PartialEq)]
pub enum ProbeData<T> {
    /// Column over nodes or pairs (masks and scalars).
    Dense(Array2<T>),
    /// Global target node for every node.
    Pointer(Vec<usize>),
}

impl<T: Scalar> ProbeData<T> {
    pub fn dense(&self) -> Option<&Array2<T>> {
        match self {
            ProbeData::Dense(a) => Some(a),
            ProbeData::Pointer(_) => None,
        }
    }

    pub fn pointer(&self) -> Option<&[usize]> {
        match self {
            ProbeData::Pointer(p) => Some(p),
            ProbeData::Dense(_) => None,
        }
    }
}

/// Probe values keyed by name.
pub type Features<T> = BTreeMap<String, ProbeData<T>>;

/// Stacks one stage's bundles (one per graph) into batch-wide probe data.
pub fn stack_features<T: Scalar>(
    topo: &Topology,
    specs: &[&ProbeSpec],
    bundles: &[&FeatureBundle],
) -> Result<Features<T>> {
    if bundles.len() != topo.n_graphs() {
        return Err(Error::shape(
            "stack_features",
            topo.n_graphs(),
            bundles.len(),
        ));
    }
    let mut out = Features::new();
    for spec in specs {
        let rows = match spec.location {
            Location::Node => topo.n_nodes,
            Location::Edge => topo.n_pairs,
        };
        let mut col: Vec<T> = Vec::with_capacity(rows);
        let mut ptr: Vec<usize> = Vec::new();
        for (g, bundle) in bundles.iter().enumerate() {
            let values = bundle.get(&spec.name).ok_or_else(|| {
                Error::Contract(format!("probe `{}` missing from bundle", spec.name))
            })?;
            let n = topo.sizes[g];
            if values.len() != spec.len_for(n) {
                return Err(Error::shape(
                    "stack_features",
                    spec.len_for(n),
                    values.len(),
                ));
            }
            match spec.kind {
                ProbeKind::NodeIndex => {
                    let off = topo.node_offset[g];
                    for &x in values {
                        let u = x as usize;
                        if x < 0.0 || x.fract() != 0.0 || u >= n {
                            return Err(Error::Domain(format!(
                                "probe `{}` points outside [0, {n})",
                                spec.name
                            )));
                        }
                        ptr.push(off + u);
                    }
                }
                _ => col.extend(values.iter().map(|&x| T::lit(x))),
            }
        }
        let data = match spec.kind {
            ProbeKind::NodeIndex => ProbeData::Pointer(ptr),
            _ => {
                ProbeData::Dense(Array2::from_shape_vec((rows, 1), col).expect("one value per row"))
            }
        };
        out.insert(spec.name.clone(), data);
    }
    Ok(out)
}

/// Converts batch-wide probe data back into per-graph bundles.
pub fn split_features<T: Scalar>(
    topo: &Topology,
    specs: &[&ProbeSpec],
    features: &Features<T>,
) -> Vec<FeatureBundle> {
    (0..topo.n_graphs())
        .map(|g| {
            let mut bundle = FeatureBundle::new();
            for spec in specs {
                let Some(data) = features.get(&spec.name) else {
                    continue;
                };
                let values = match data {
                    ProbeData::Pointer(p) => topo
                        .graph_nodes(g)
                        .map(|v| (p[v] - topo.node_offset[g]) as f64)
                        .collect(),
                    ProbeData::Dense(a) => {
                        let range = match spec.location {
                            Location::Node => topo.graph_nodes(g),
                            Location::Edge => topo.graph_pairs(g),
                        };
                        range.map(|r| a[[r, 0]].as_f64()).collect()
                    }
                };
                bundle.insert(&spec.name, values);
            }
            bundle
        })
        .collect()
}

/// A batch of traces of one task, ready for the tape.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub topo: Topology,
    pub steps: Vec<usize>,
    pub max_steps: usize,
    pub inputs: Features<T>,
    /// Ground-truth hints per step; graphs that finished early repeat their
    /// last hint.
    pub hints: Vec<Features<T>>,
    pub outputs: Features<T>,
    pub traces: Vec<Trace>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(traces: &[Trace]) -> Result<Self> {
        let first = traces
            .first()
            .ok_or_else(|| Error::Contract("a batch needs at least one trace".into()))?;
        if traces.iter().any(|t| t.probe_specs != first.probe_specs) {
            return Err(Error::Contract(
                "traces in a batch must share probe specs".into(),
            ));
        }
        let topo = Topology::new(traces.iter().map(|t| &t.graph));
        let steps: Vec<usize> = traces.iter().map(|t| t.steps).collect();
        let max_steps = steps.iter().copied().max().unwrap_or(0);
        if steps.iter().any(|&s| s == 0) || traces.iter().any(|t| t.hints.len() != t.steps) {
            return Err(Error::Contract(
                "every trace needs T ≥ 1 hint bundles".into(),
            ));
        }
        let specs = |stage| first.specs(stage).collect::<Vec<_>>();
        let inputs = stack_features(
            &topo,
            &specs(Stage::Input),
            &traces.iter().map(|t| &t.inputs).collect::<Vec<_>>(),
        )?;
        let hint_specs = specs(Stage::Hint);
        let hints = (0..max_steps)
            .map(|t| {
                let bundles: Vec<_> = traces
                    .iter()
                    .map(|tr| &tr.hints[t.min(tr.steps - 1)])
                    .collect();
                stack_features(&topo, &hint_specs, &bundles)
            })
            .collect::<Result<Vec<_>>>()?;
        let outputs = stack_features(
            &topo,
            &specs(Stage::Output),
            &traces.iter().map(|t| &t.outputs).collect::<Vec<_>>(),
        )?;
        Ok(Self {
            topo,
            steps,
            max_steps,
            inputs,
            hints,
            outputs,
            traces: traces.to_vec(),
        })
    }

    pub fn probe_specs(&self) -> &[ProbeSpec] {
        &self.traces[0].probe_specs
    }

    /// Per-row loss weights for a probe at step `t` (1-based): rows of
    /// graphs for which `active(T_g)` holds get 1, the rest 0. Edge probes
    /// only weight real edges.
    pub fn row_weights(&self, location: Location, active: impl Fn(usize) -> bool) -> Array1<T> {
        let topo = &self.topo;
        match location {
            Location::Node => topo
                .node_graph
                .iter()
                .map(|&g| {
                    if active(self.steps[g]) {
                        T::one()
                    } else {
                        T::zero()
                    }
                })
                .collect(),
            Location::Edge => (0..topo.n_pairs)
                .map(|p| {
                    let g = topo.node_graph[topo.pair_src[p]];
                    if topo.pair_edge[p] && active(self.steps[g]) {
                        T::one()
                    } else {
                        T::zero()
                    }
                })
                .collect(),
        }
    }
}
