//! Per-probe linear encoders.
//!
//! Mask and scalar probes own one `d × 1` encoder at their location. A
//! node-index probe `π` owns three: `fwd` reads the one-hot of `π(v)` placed
//! on pair `(v, π(v))`, `rev` reads the same one-hot transposed onto
//! `(π(v), v)`, and `self` is a node-level flag for `π(v) = v`. All columns of
//! one stage are stacked so a whole stage encodes in a single product per
//! location.

use ndarray::Array2;

use crate::diff::{BoundParams, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{Location, ProbeKind, ProbeSpec, Stage};
use crate::model::batch::{Features, ProbeData, Topology};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Source {
    Value,
    PointerFwd,
    PointerRev,
    PointerSelf,
}

/// Encoder group names of one probe with the source each reads.
pub(crate) fn group_names(p: &ProbeSpec) -> Vec<(String, Source)> {
    match p.kind {
        ProbeKind::NodeIndex => vec![
            (format!("enc.{}.fwd", p.name), Source::PointerFwd),
            (format!("enc.{}.rev", p.name), Source::PointerRev),
            (format!("enc.{}.self", p.name), Source::PointerSelf),
        ],
        _ => vec![(format!("enc.{}", p.name), Source::Value)],
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Column {
    pub probe: String,
    pub source: Source,
    pub group: usize,
}

/// Column layout of one stage's encoders.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EncoderPlan {
    pub(crate) node: Vec<Column>,
    pub(crate) edge: Vec<Column>,
}

impl EncoderPlan {
    pub fn new<T: Scalar>(
        specs: &[ProbeSpec],
        stage: Stage,
        params: &ParamStore<T>,
    ) -> Result<Self> {
        let mut plan = Self::default();
        for p in specs.iter().filter(|p| p.stage == stage) {
            for (name, source) in group_names(p) {
                let group = params
                    .index_of(&name)
                    .ok_or_else(|| Error::Contract(format!("missing encoder `{name}`")))?;
                let col = Column {
                    probe: p.name.clone(),
                    source,
                    group,
                };
                let on_node = match source {
                    Source::Value => p.location == Location::Node,
                    Source::PointerSelf => true,
                    Source::PointerFwd | Source::PointerRev => false,
                };
                if on_node {
                    plan.node.push(col);
                } else {
                    plan.edge.push(col);
                }
            }
        }
        Ok(plan)
    }

    pub fn is_empty(&self) -> bool {
        self.node.is_empty() && self.edge.is_empty()
    }

    /// Raw feature matrices (`N × F_node`, `P × F_edge`) for this plan.
    pub fn features<T: Scalar>(
        &self,
        topo: &Topology,
        x: &Features<T>,
    ) -> Result<(Array2<T>, Array2<T>)> {
        let fill = |cols: &[Column], rows: usize| -> Result<Array2<T>> {
            let mut m = Array2::zeros((rows, cols.len()));
            for (j, c) in cols.iter().enumerate() {
                let data = x.get(&c.probe).ok_or_else(|| {
                    Error::Contract(format!("unknown or missing probe `{}`", c.probe))
                })?;
                match (c.source, data) {
                    (Source::Value, ProbeData::Dense(a)) => {
                        if a.nrows() != rows {
                            return Err(Error::shape("encode", rows, a.nrows()));
                        }
                        m.column_mut(j).assign(&a.column(0));
                    }
                    (Source::PointerSelf, ProbeData::Pointer(p)) => {
                        for (v, &u) in p.iter().enumerate() {
                            if u == v {
                                m[[v, j]] = T::one();
                            }
                        }
                    }
                    (Source::PointerFwd, ProbeData::Pointer(p)) => {
                        for (v, &u) in p.iter().enumerate() {
                            m[[topo.pair(v, u), j]] = T::one();
                        }
                    }
                    (Source::PointerRev, ProbeData::Pointer(p)) => {
                        for (v, &u) in p.iter().enumerate() {
                            m[[topo.pair(u, v), j]] = T::one();
                        }
                    }
                    _ => {
                        return Err(Error::Contract(format!(
                            "probe `{}` has the wrong data kind",
                            c.probe
                        )))
                    }
                }
            }
            Ok(m)
        };
        Ok((
            fill(&self.node, topo.n_nodes)?,
            fill(&self.edge, topo.n_pairs)?,
        ))
    }
}

/// Node latents `N × d` and edge latents `P × d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Latents {
    pub v: Var,
    pub e: Var,
}

fn encode_location<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    cols: &[Column],
    x: Array2<T>,
    d: usize,
) -> Result<Var> {
    if cols.is_empty() {
        return Ok(tape.zeros(x.nrows(), d));
    }
    let ws: Vec<Var> = cols.iter().map(|c| bound.weight(c.group)).collect();
    let bs: Vec<Var> = cols.iter().map(|c| bound.bias(c.group)).collect();
    let w = tape.concat_cols(&ws)?;
    let b = tape.add_all(&bs)?;
    let x = tape.constant(x);
    tape.linear(x, w, Some(b))
}

/// Embeds one stage's probes: every probe through its own encoder, summed
/// per location.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    plan: &EncoderPlan,
    topo: &Topology,
    x: &Features<T>,
    d: usize,
) -> Result<Latents> {
    let (xv, xe) = plan.features(topo, x)?;
    Ok(Latents {
        v: encode_location(tape, bound, &plan.node, xv, d)?,
        e: encode_location(tape, bound, &plan.edge, xe, d)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{FeatureBundle, Graph};
    use crate::model::batch::stack_features;
    use crate::model::{Model, ModelConfig, ProcessorKind};
    use crate::tasks::TaskId;

    fn bfs_model() -> Model<f64> {
        Model::new(ModelConfig::base(TaskId::Bfs, ProcessorKind::Gnn, 3), 9).unwrap()
    }

    fn path3() -> Topology {
        Topology::new([&Graph::new(3, [(0, 1), (1, 0), (1, 2), (2, 1)]).unwrap()])
    }

    #[test]
    fn zero_features_and_zero_bias_give_zero_latents() {
        let m = bfs_model();
        let topo = path3();
        let specs: Vec<_> = m
            .spec
            .probe_specs
            .iter()
            .filter(|p| p.stage == Stage::Input)
            .collect();
        let b = FeatureBundle::new()
            .with("pos", vec![0.0; 3])
            .with("s", vec![0.0; 3])
            .with("adj", vec![0.0; 9]);
        let x = stack_features::<f64>(&topo, &specs, &[&b]).unwrap();
        let mut tape = Tape::new();
        let bound = tape.bind(&m.params);
        let l = encode(&mut tape, &bound, &m.input_plan, &topo, &x, 3).unwrap();
        assert!(tape.value(l.v).iter().all(|&v| v == 0.0));
        assert!(tape.value(l.e).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_mask_bit_selects_the_weight_column() {
        let mut m = bfs_model();
        let g = m.params.get_mut("enc.s").unwrap();
        g.bias.fill(0.5);
        let w = g.weights.column(0).to_owned();
        let m = Model::from_params(m.config, m.params).unwrap();
        let topo = path3();
        let specs: Vec<_> = m
            .spec
            .probe_specs
            .iter()
            .filter(|p| p.name == "s")
            .collect();
        let b = FeatureBundle::new().with("s", vec![0.0, 1.0, 0.0]);
        let x = stack_features::<f64>(&topo, &specs, &[&b]).unwrap();
        let plan = EncoderPlan {
            node: m
                .input_plan
                .node
                .iter()
                .filter(|c| c.probe == "s")
                .cloned()
                .collect(),
            edge: vec![],
        };
        let mut tape = Tape::new();
        let bound = tape.bind(&m.params);
        let l = encode(&mut tape, &bound, &plan, &topo, &x, 3).unwrap();
        let lv = tape.value(l.v);
        for k in 0..3 {
            assert_eq!(lv[[0, k]], 0.5);
            assert_eq!(lv[[1, k]], w[k] + 0.5);
            assert_eq!(lv[[2, k]], 0.5);
        }
    }

    #[test]
    fn pointer_encoding_matches_explicit_one_hot_product() {
        let m = bfs_model();
        let topo = path3();
        let specs: Vec<_> = m
            .spec
            .probe_specs
            .iter()
            .filter(|p| p.stage == Stage::Hint)
            .collect();
        let pi = [0usize, 0, 1];
        let b = FeatureBundle::new()
            .with_mask("reach_h", &[true, true, true])
            .with_indices("pi_h", &pi);
        let x = stack_features::<f64>(&topo, &specs, &[&b]).unwrap();
        let mut tape = Tape::new();
        let bound = tape.bind(&m.params);
        let l = encode(&mut tape, &bound, &m.hint_plan, &topo, &x, 3).unwrap();
        let le = tape.value(l.e);
        let fwd = &m.params.get("enc.pi_h.fwd").unwrap().weights;
        let rev = &m.params.get("enc.pi_h.rev").unwrap().weights;
        // one-hot row of pointer v, as an n × n matrix
        for a in 0..3 {
            for bnode in 0..3 {
                let f = if pi[a] == bnode { 1.0 } else { 0.0 };
                let r = if pi[bnode] == a { 1.0 } else { 0.0 };
                for k in 0..3 {
                    let want = f * fwd[[k, 0]] + r * rev[[k, 0]];
                    assert!((le[[a * 3 + bnode, k]] - want).abs() < 1e-15);
                }
            }
        }
        let lv = tape.value(l.v);
        let selfw = &m.params.get("enc.pi_h.self").unwrap().weights;
        let reach = &m.params.get("enc.reach_h").unwrap().weights;
        for k in 0..3 {
            assert!((lv[[0, k]] - (selfw[[k, 0]] + reach[[k, 0]])).abs() < 1e-15);
            assert!((lv[[1, k]] - reach[[k, 0]]).abs() < 1e-15);
        }
    }

    #[test]
    fn unknown_probe_is_a_contract_error() {
        let m = bfs_model();
        let topo = path3();
        let mut tape = Tape::new();
        let bound = tape.bind(&m.params);
        let err = encode(&mut tape, &bound, &m.input_plan, &topo, &Features::new(), 3).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
