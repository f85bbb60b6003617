//! Encode–process–decode model with optional context-enhancing
//! preprocessor.

pub mod batch;
pub mod decoder;
pub mod encoder;
pub mod pipeline;
pub mod preprocessor;
pub mod processor;

use serde::{Deserialize, Serialize};

pub use batch::{Batch, Features, ProbeData, Topology};
pub use decoder::{decode, harden, step_loss, DecoderPlan};
pub use encoder::{encode, EncoderPlan, Latents};
pub use pipeline::{
    concat_state, rollout, run_step, unroll, ContextState, Mode, StepIO, StepState,
};
pub use preprocessor::{attention_enhance, fixed_gate, gnn_gate, transformer_gate, GateActivation};
pub use processor::{cef_rt_process, gnn_process, rt_process};

use crate::diff::{BoundParams, ParamStore, Var};
use crate::error::{Error, Result};
use crate::graph::Stage;
use crate::scalar::Scalar;
use crate::tasks::{TaskId, TaskSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessorKind {
    /// Max-aggregation message passing; node hidden states only.
    Gnn,
    /// Relational attention with node and edge hidden states.
    Transformer,
    /// Relational attention whose keys, values and edge update read the
    /// context states.
    CefTransformer,
}

/// Context preprocessor placed between the encoder and the processor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "variant")]
pub enum Preprocessor {
    None,
    /// Learned scalar forget factor per node (and per edge for attention
    /// processors).
    Gated {
        activation: GateActivation,
    },
    /// QKV attention over the history of node latents (GNN only).
    Attention,
    /// Constant forget factors. For the GNN, `alpha1` blends the node
    /// latents and `alpha2` the hidden states; for attention processors
    /// they are the node and edge rates.
    Fixed {
        alpha1: f64,
        alpha2: f64,
    },
}

impl Preprocessor {
    pub fn is_enabled(&self) -> bool {
        !matches!(self, Preprocessor::None)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: TaskId,
    pub processor: ProcessorKind,
    pub preprocessor: Preprocessor,
    pub hidden: usize,
}

impl ModelConfig {
    /// Base model without context.
    pub fn base(task: TaskId, processor: ProcessorKind, hidden: usize) -> Self {
        Self {
            task,
            processor,
            preprocessor: Preprocessor::None,
            hidden,
        }
    }

    /// The standard context-enhanced variant of each processor family.
    pub fn cef(task: TaskId, processor: ProcessorKind, hidden: usize) -> Self {
        let (processor, activation) = match processor {
            ProcessorKind::Gnn => (ProcessorKind::Gnn, GateActivation::TanhRelu),
            _ => (ProcessorKind::CefTransformer, GateActivation::Sigmoid),
        };
        Self {
            task,
            processor,
            preprocessor: Preprocessor::Gated { activation },
            hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Domain("hidden width must be positive".into()));
        }
        match (self.processor, self.preprocessor) {
            (ProcessorKind::CefTransformer, Preprocessor::None | Preprocessor::Attention) => Err(
                Error::Domain("cef_transformer needs a gated or fixed preprocessor".into()),
            ),
            (ProcessorKind::Transformer, Preprocessor::Attention) => Err(Error::Domain(
                "the attention preprocessor is defined for the GNN only".into(),
            )),
            (_, Preprocessor::Fixed { alpha1, alpha2 }) => {
                for a in [alpha1, alpha2] {
                    if !(0.0..=1.0).contains(&a) {
                        return Err(Error::Domain(format!("fixed alpha {a} outside [0, 1]")));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn is_attention(&self) -> bool {
        self.processor != ProcessorKind::Gnn
    }
}

/// Parameter group indices for everything outside the encoders and decoders.
#[derive(Clone, Debug, Default)]
pub(crate) struct Layout {
    pub gate_node: Option<usize>,
    pub gate_edge: Option<usize>,
    pub attn: Option<[usize; 3]>,
    pub gnn: Option<[usize; 3]>,
    /// query, key, value, node, edge
    pub rt: Option<[usize; 5]>,
}

/// A model instance: configuration, task probes and parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub spec: TaskSpec,
    pub params: ParamStore<T>,
    pub(crate) input_plan: EncoderPlan,
    pub(crate) hint_plan: EncoderPlan,
    pub(crate) decoder: DecoderPlan,
    pub(crate) layout: Layout,
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters, seeded per group.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut add =
            |name: &str, d_out: usize, d_in: usize| params.push_init(name, d_out, d_in, seed);
        Self::declare(&config, &mut add)?;
        Self::assemble(config, params)
    }

    /// Wraps existing parameters, checking that every group is present with
    /// the expected shape.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let mut expected = Vec::new();
        let mut add = |name: &str, d_out: usize, d_in: usize| {
            expected.push((name.to_string(), d_out, d_in));
            Ok(0)
        };
        Self::declare(&config, &mut add)?;
        if expected.len() != params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter groups, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, d_out, d_in) in expected {
            let g = params
                .get(&name)
                .ok_or_else(|| Error::Contract(format!("missing parameter group `{name}`")))?;
            if (g.d_out(), g.d_in()) != (d_out, d_in) {
                return Err(Error::shape(
                    "from_params",
                    format!("{name} {d_out}x{d_in}"),
                    format!("{}x{}", g.d_out(), g.d_in()),
                ));
            }
        }
        Self::assemble(config, params)
    }

    /// Enumerates every parameter group in a fixed order.
    fn declare(
        config: &ModelConfig,
        add: &mut dyn FnMut(&str, usize, usize) -> Result<usize>,
    ) -> Result<()> {
        config.validate()?;
        let d = config.hidden;
        let spec = config.task.spec();
        for stage in [Stage::Input, Stage::Hint] {
            for p in spec.probe_specs.iter().filter(|p| p.stage == stage) {
                for (name, _) in encoder::group_names(p) {
                    add(&name, d, 1)?;
                }
            }
        }
        match config.preprocessor {
            Preprocessor::Gated { .. } => {
                let k = if config.is_attention() { 2 * d } else { d };
                add("gate.node", 1, k)?;
                if config.is_attention() {
                    add("gate.edge", 1, k)?;
                }
            }
            Preprocessor::Attention => {
                for n in ["attn.q", "attn.k", "attn.v"] {
                    add(n, d, d)?;
                }
            }
            Preprocessor::None | Preprocessor::Fixed { .. } => {}
        }
        if config.is_attention() {
            add("rt.query", d, 4 * d)?;
            add("rt.key", d, 4 * d)?;
            add("rt.value", d, 4 * d)?;
            add("rt.node", d, 3 * d)?;
            add("rt.edge", d, 6 * d)?;
        } else {
            add("gnn.f1", d, 2 * d)?;
            add("gnn.f2", d, 3 * d)?;
            add("gnn.f3", d, 2 * d)?;
        }
        for p in spec.probe_specs.iter().filter(|p| p.stage != Stage::Input) {
            for (name, d_out, d_in) in decoder::group_shapes(p, d, config.is_attention()) {
                add(&name, d_out, d_in)?;
            }
        }
        Ok(())
    }

    fn assemble(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let spec = config.task.spec();
        let idx = |name: &str| {
            params
                .index_of(name)
                .ok_or_else(|| Error::Contract(format!("missing parameter group `{name}`")))
        };
        let mut layout = Layout::default();
        if matches!(config.preprocessor, Preprocessor::Gated { .. }) {
            layout.gate_node = Some(idx("gate.node")?);
            if config.is_attention() {
                layout.gate_edge = Some(idx("gate.edge")?);
            }
        }
        if config.preprocessor == Preprocessor::Attention {
            layout.attn = Some([idx("attn.q")?, idx("attn.k")?, idx("attn.v")?]);
        }
        if config.is_attention() {
            layout.rt = Some([
                idx("rt.query")?,
                idx("rt.key")?,
                idx("rt.value")?,
                idx("rt.node")?,
                idx("rt.edge")?,
            ]);
        } else {
            layout.gnn = Some([idx("gnn.f1")?, idx("gnn.f2")?, idx("gnn.f3")?]);
        }
        let input_plan = EncoderPlan::new(&spec.probe_specs, Stage::Input, &params)?;
        let hint_plan = EncoderPlan::new(&spec.probe_specs, Stage::Hint, &params)?;
        let decoder = DecoderPlan::new(&spec.probe_specs, &params)?;
        Ok(Self {
            config,
            spec,
            params,
            input_plan,
            hint_plan,
            decoder,
            layout,
        })
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    /// Same architecture and parameters in another scalar type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config,
            spec: self.spec.clone(),
            params: self.params.cast(),
            input_plan: self.input_plan.clone(),
            hint_plan: self.hint_plan.clone(),
            decoder: self.decoder.clone(),
            layout: self.layout.clone(),
        }
    }
}

/// Weight and bias leaves of one group.
pub(crate) fn wb(bound: &BoundParams, group: usize) -> (Var, Var) {
    (bound.weight(group), bound.bias(group))
}
