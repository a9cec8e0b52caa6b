//! Compute graphs of typed operators with their trained parameters.

mod groups;
pub mod zoo;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use groups::{identify_groups, validate_groups, ChannelSource, GroupAnalysis, GroupViolation, PruningGroup, Segment};

use crate::autodiff::{BatchMoments, BatchNormMode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OpKind {
    Input {
        channels: usize,
        height: usize,
        width: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        /// Grouped/depthwise convolution; only 1 is supported.
        #[serde(default = "one")]
        groups: usize,
    },
    BatchNorm {
        channels: usize,
        eps: f32,
        momentum: f32,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Linear {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    Add,
    Concat,
    /// Trainable multiplicative channel gate for pruning group `group`
    /// (1-based).
    Bottleneck {
        group: usize,
    },
}

fn one() -> usize {
    1
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Input { .. } => "input",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::BatchNorm { .. } => "batch_norm",
            OpKind::Relu => "relu",
            OpKind::MaxPool { .. } => "max_pool",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Linear { .. } => "linear",
            OpKind::Add => "add",
            OpKind::Concat => "concat",
            OpKind::Bottleneck { .. } => "bottleneck",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Input { .. } => Some(0),
            OpKind::Add => Some(2),
            OpKind::Concat => None,
            _ => Some(1),
        }
    }

    /// Expected parameter shapes for this operator.
    fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            OpKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![("weight", vec![out_channels, in_channels, kernel, kernel])];
                if bias {
                    v.push(("bias", vec![out_channels]));
                }
                v
            }
            OpKind::BatchNorm { channels, .. } => vec![
                ("bias", vec![channels]),
                ("running_mean", vec![channels]),
                ("running_var", vec![channels]),
                ("weight", vec![channels]),
            ],
            OpKind::Linear {
                in_features,
                out_features,
                bias,
            } => {
                let mut v = vec![("weight", vec![out_features, in_features])];
                if bias {
                    v.push(("bias", vec![out_features]));
                }
                v
            }
            _ => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: OpKind,
    pub inputs: Vec<NodeId>,
    pub params: BTreeMap<String, Tensor>,
}

impl Node {
    pub fn new(name: impl Into<String>, op: OpKind, inputs: Vec<NodeId>) -> Self {
        Node {
            name: name.into(),
            op,
            inputs,
            params: BTreeMap::new(),
        }
    }

    pub fn with_param(mut self, name: &str, t: Tensor) -> Self {
        self.params.insert(name.to_string(), t);
        self
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Graph(format!("node `{}` has no parameter `{name}`", self.name)))
    }
}

/// Serializable structure of a graph (no tensors).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub arch: String,
    pub nodes: Vec<NodeSpec>,
    pub output: NodeId,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    pub op: OpKind,
    pub inputs: Vec<NodeId>,
}

/// A validated DAG in topological order: node 0 is the only input, and
/// `output` is the only node without consumers.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    pub arch: String,
    nodes: Vec<Node>,
    output: NodeId,
    /// Free-form provenance (e.g. the mask a pruned graph came from).
    pub meta: serde_json::Value,
    shapes: Vec<Vec<usize>>,
}

/// How a forward pass treats parameters and batchnorm.
#[derive(Clone, Copy, Debug)]
pub struct ForwardConfig<'a> {
    pub bn_mode: BatchNormMode,
    /// Record parameters as trainable leaves.
    pub train_params: bool,
    /// Gate vectors for bottleneck nodes, indexed by group (0-based).
    pub gates: Option<&'a [Var]>,
}

impl ForwardConfig<'_> {
    pub const INFERENCE: ForwardConfig<'static> = ForwardConfig {
        bn_mode: BatchNormMode::Inference,
        train_params: false,
        gates: None,
    };

    pub const TRAIN: ForwardConfig<'static> = ForwardConfig {
        bn_mode: BatchNormMode::Train,
        train_params: true,
        gates: None,
    };
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamRef {
    pub node: NodeId,
    pub name: String,
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Parameter leaves recorded on the tape (batchnorm running statistics
    /// are not parameters).
    pub params: Vec<(ParamRef, Var)>,
    /// Batch moments of each training-mode batchnorm node.
    pub moments: Vec<(NodeId, BatchMoments)>,
}

impl Graph {
    pub fn new(arch: impl Into<String>, nodes: Vec<Node>, output: NodeId) -> Result<Self> {
        let mut g = Graph {
            arch: arch.into(),
            nodes,
            output,
            meta: serde_json::Value::Null,
            shapes: Vec::new(),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn from_spec(spec: GraphSpec, mut params: BTreeMap<(NodeId, String), Tensor>) -> Result<Self> {
        let nodes = spec
            .nodes
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                let mut node = Node::new(s.name, s.op, s.inputs);
                let names: Vec<_> = node.op.param_shapes().into_iter().map(|(n, _)| n).collect();
                for name in names {
                    if let Some(t) = params.remove(&(i, name.to_string())) {
                        node.params.insert(name.to_string(), t);
                    }
                }
                node
            })
            .collect();
        let mut g = Graph::new(spec.arch, nodes, spec.output)?;
        g.meta = spec.meta;
        Ok(g)
    }

    pub fn spec(&self) -> GraphSpec {
        GraphSpec {
            arch: self.arch.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeSpec {
                    name: n.name.clone(),
                    op: n.op.clone(),
                    inputs: n.inputs.clone(),
                })
                .collect(),
            output: self.output,
            meta: self.meta.clone(),
        }
    }

    fn validate(&mut self) -> Result<()> {
        let n = self.nodes.len();
        if n == 0 {
            return Err(Error::Graph("empty graph".into()));
        }
        if self.output >= n {
            return Err(Error::Graph(format!("output node {} out of range", self.output)));
        }
        let inputs = self.nodes.iter().filter(|n| matches!(n.op, OpKind::Input { .. })).count();
        if inputs != 1 || !matches!(self.nodes[0].op, OpKind::Input { .. }) {
            return Err(Error::Graph("exactly one input node, at position 0, is required".into()));
        }
        let mut names = std::collections::HashSet::new();
        let mut consumed = vec![false; n];
        for (i, node) in self.nodes.iter().enumerate() {
            if !names.insert(node.name.as_str()) {
                return Err(Error::Graph(format!("duplicate node name `{}`", node.name)));
            }
            match node.op.arity() {
                Some(a) if a != node.inputs.len() => {
                    return Err(Error::Graph(format!(
                        "node `{}` ({}) takes {a} inputs, has {}",
                        node.name,
                        node.op.name(),
                        node.inputs.len()
                    )))
                }
                None if node.inputs.is_empty() => {
                    return Err(Error::Graph(format!("node `{}` has no inputs", node.name)))
                }
                _ => {}
            }
            for &p in &node.inputs {
                if p >= i {
                    return Err(Error::Graph(format!(
                        "node `{}` reads node {p}, which does not precede it",
                        node.name
                    )));
                }
                consumed[p] = true;
            }
            let expected = node.op.param_shapes();
            if expected.len() != node.params.len() {
                return Err(Error::Graph(format!(
                    "node `{}` has parameters {:?}, expected {:?}",
                    node.name,
                    node.params.keys().collect::<Vec<_>>(),
                    expected.iter().map(|e| e.0).collect::<Vec<_>>()
                )));
            }
            for (name, shape) in expected {
                let t = node.param(name)?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::Graph(format!(
                        "node `{}` parameter `{name}` has shape {:?}, expected {shape:?}",
                        node.name,
                        t.shape()
                    )));
                }
            }
        }
        let sinks: Vec<_> = (0..n).filter(|&i| !consumed[i]).collect();
        if sinks != [self.output] {
            return Err(Error::Graph(format!(
                "graph must have exactly one output; nodes without consumers: {:?}",
                sinks.iter().map(|&i| &self.nodes[i].name).collect::<Vec<_>>()
            )));
        }
        self.shapes = self.infer_shapes()?;
        if self.shapes[self.output].len() != 1 {
            return Err(Error::Graph("output node must produce [N, classes] logits".into()));
        }
        Ok(())
    }

    /// Per-sample output shape of every node (`[C, H, W]` or `[F]`).
    fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let ins: Vec<&Vec<usize>> = node.inputs.iter().map(|&i| &shapes[i]).collect();
            let bad = |detail: String| Error::Graph(format!("node `{}` ({}): {detail}", node.name, node.op.name()));
            let shape = match &node.op {
                OpKind::Input {
                    channels,
                    height,
                    width,
                } => vec![*channels, *height, *width],
                OpKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    groups,
                    ..
                } => {
                    let s = ins[0];
                    if s.len() != 3 || s[0] != *in_channels {
                        return Err(bad(format!("input {s:?} does not have {in_channels} channels")));
                    }
                    if *groups != 1 {
                        return Err(bad(format!("grouped convolution (groups = {groups}) is not supported")));
                    }
                    if *stride == 0 || s[1] + 2 * padding < *kernel || s[2] + 2 * padding < *kernel {
                        return Err(bad(format!("kernel {kernel} / stride {stride} invalid for input {s:?}")));
                    }
                    vec![
                        *out_channels,
                        (s[1] + 2 * padding - kernel) / stride + 1,
                        (s[2] + 2 * padding - kernel) / stride + 1,
                    ]
                }
                OpKind::BatchNorm { channels, .. } => {
                    if ins[0][0] != *channels {
                        return Err(bad(format!("input {:?} does not have {channels} channels", ins[0])));
                    }
                    ins[0].clone()
                }
                OpKind::Relu | OpKind::Bottleneck { .. } => ins[0].clone(),
                OpKind::MaxPool { kernel, stride } => {
                    let s = ins[0];
                    if s.len() != 3 || s[1] < *kernel || s[2] < *kernel || *stride == 0 {
                        return Err(bad(format!("kernel {kernel} / stride {stride} invalid for input {s:?}")));
                    }
                    vec![s[0], (s[1] - kernel) / stride + 1, (s[2] - kernel) / stride + 1]
                }
                OpKind::GlobalAvgPool => {
                    if ins[0].len() != 3 {
                        return Err(bad(format!("expected a [C, H, W] input, got {:?}", ins[0])));
                    }
                    vec![ins[0][0]]
                }
                OpKind::Linear {
                    in_features,
                    out_features,
                    ..
                } => {
                    if ins[0].as_slice() != [*in_features] {
                        return Err(bad(format!("input {:?} is not [{in_features}]", ins[0])));
                    }
                    vec![*out_features]
                }
                OpKind::Add => {
                    if ins[0] != ins[1] {
                        return Err(bad(format!("operands {:?} and {:?} differ", ins[0], ins[1])));
                    }
                    ins[0].clone()
                }
                OpKind::Concat => {
                    let first = ins[0];
                    if ins.iter().any(|s| s.len() != first.len() || s[1..] != first[1..]) {
                        return Err(bad(format!("inputs {ins:?} disagree outside the channel axis")));
                    }
                    let mut s = first.clone();
                    s[0] = ins.iter().map(|s| s[0]).sum();
                    s
                }
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn num_classes(&self) -> usize {
        self.shapes[self.output][0]
    }

    /// Per-sample output shape of `id`.
    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.shapes[id]
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Nodes reading `id`, in topological order.
    pub fn consumers(&self, id: NodeId) -> Vec<NodeId> {
        (id + 1..self.nodes.len())
            .filter(|&j| self.nodes[j].inputs.contains(&id))
            .collect()
    }

    pub fn is_instrumented(&self) -> bool {
        self.nodes.iter().any(|n| matches!(n.op, OpKind::Bottleneck { .. }))
    }

    pub fn param_mut(&mut self, r: &ParamRef) -> Result<&mut Tensor> {
        let node = self
            .nodes
            .get_mut(r.node)
            .ok_or_else(|| Error::Graph(format!("no node {}", r.node)))?;
        let name = node.name.clone();
        node.params
            .get_mut(&r.name)
            .ok_or_else(|| Error::Graph(format!("node `{name}` has no parameter `{}`", r.name)))
    }

    /// Learnable parameter count (batchnorm running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.nodes
            .iter()
            .flat_map(|n| n.params.iter())
            .filter(|(k, _)| !k.starts_with("running_"))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Every parameter tensor, keyed `<node name>.<param>` in node order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.nodes
            .iter()
            .flat_map(|n| n.params.iter().map(move |(k, t)| (format!("{}.{k}", n.name), t)))
            .collect()
    }

    /// Folds training-mode batch moments into the running statistics.
    pub fn update_running_stats(&mut self, moments: &[(NodeId, BatchMoments)]) -> Result<()> {
        for (id, m) in moments {
            let node = &mut self.nodes[*id];
            let OpKind::BatchNorm { momentum, .. } = node.op else {
                return Err(Error::Graph(format!("node `{}` is not a batchnorm", node.name)));
            };
            let momentum = momentum as f64;
            let unbias = if m.count > 1 {
                m.count as f64 / (m.count - 1) as f64
            } else {
                1.0
            };
            let rm = node.params.get_mut("running_mean").expect("validated");
            for (r, &b) in rm.data_mut().iter_mut().zip(&m.mean) {
                *r = ((1.0 - momentum) * *r as f64 + momentum * b) as f32;
            }
            let rv = node.params.get_mut("running_var").expect("validated");
            for (r, &b) in rv.data_mut().iter_mut().zip(&m.var) {
                *r = ((1.0 - momentum) * *r as f64 + momentum * b * unbias) as f32;
            }
        }
        Ok(())
    }

    /// Records a forward pass of a `[N, C, H, W]` batch on `tape`.
    pub fn forward(&self, tape: &mut Tape, input: Var, cfg: &ForwardConfig) -> Result<ForwardOutput> {
        let xs = tape.value(input).shape();
        if xs.len() != 4 || xs[1..] != self.shapes[0][..] {
            return Err(Error::shape(
                "forward",
                format!("batch {xs:?} does not match model input {:?}", self.shapes[0]),
            ));
        }
        let mut vals: Vec<Var> = Vec::with_capacity(self.nodes.len());
        let mut params = Vec::new();
        let mut moments = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            let mut leaf = |tape: &mut Tape, name: &str| -> Result<Var> {
                let v = tape.leaf(node.param(name)?.clone(), cfg.train_params)?;
                params.push((
                    ParamRef {
                        node: id,
                        name: name.to_string(),
                    },
                    v,
                ));
                Ok(v)
            };
            let x = node.inputs.first().map(|&i| vals[i]);
            let v = match &node.op {
                OpKind::Input { .. } => input,
                OpKind::Conv2d {
                    stride, padding, bias, ..
                } => {
                    let w = leaf(tape, "weight")?;
                    let b = if *bias { Some(leaf(tape, "bias")?) } else { None };
                    tape.conv2d(x.unwrap(), w, b, *stride, *padding)?
                }
                OpKind::BatchNorm { eps, .. } => {
                    let gamma = leaf(tape, "weight")?;
                    let beta = leaf(tape, "bias")?;
                    let running = (node.param("running_mean")?.data(), node.param("running_var")?.data());
                    let (v, m) = tape.batch_norm(x.unwrap(), gamma, beta, running, *eps, cfg.bn_mode)?;
                    if let Some(m) = m {
                        moments.push((id, m));
                    }
                    v
                }
                OpKind::Relu => tape.relu(x.unwrap())?,
                OpKind::MaxPool { kernel, stride } => tape.max_pool(x.unwrap(), *kernel, *stride)?,
                OpKind::GlobalAvgPool => tape.global_avg_pool(x.unwrap())?,
                OpKind::Linear { bias, .. } => {
                    let w = leaf(tape, "weight")?;
                    let b = if *bias { Some(leaf(tape, "bias")?) } else { None };
                    tape.linear(x.unwrap(), w, b)?
                }
                OpKind::Add => tape.add(vals[node.inputs[0]], vals[node.inputs[1]])?,
                OpKind::Concat => {
                    let ins: Vec<Var> = node.inputs.iter().map(|&i| vals[i]).collect();
                    tape.concat(&ins)?
                }
                OpKind::Bottleneck { group } => {
                    let gate = cfg
                        .gates
                        .and_then(|g| g.get(group - 1))
                        .ok_or_else(|| Error::Bottleneck(format!("no gate supplied for group {group}")))?;
                    tape.channel_mul(x.unwrap(), *gate)?
                }
            };
            vals.push(v);
        }
        Ok(ForwardOutput {
            logits: vals[self.output],
            params,
            moments,
        })
    }

    /// Inference-mode logits for a batch (uninstrumented graphs only).
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone())?;
        let out = self.forward(&mut tape, x, &ForwardConfig::INFERENCE)?;
        Ok(tape.value(out.logits).clone())
    }

    pub(crate) fn into_parts(self) -> (String, Vec<Node>, NodeId, serde_json::Value) {
        (self.arch, self.nodes, self.output, self.meta)
    }
}
