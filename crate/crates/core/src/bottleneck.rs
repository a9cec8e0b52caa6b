//! Trainable bottlenecks: per-channel gates `λ = sigmoid(ψ)` inserted at
//! each pruning group's sites.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{ForwardConfig, GroupAnalysis, Graph, Node, OpKind};
use crate::kernels;
use crate::tensor::Tensor;

pub const LAMBDA_INIT: f32 = 0.99;

/// Gate parameters, one `ψ` vector per pruning group.
#[derive(Clone, Debug, PartialEq)]
pub struct Bottlenecks {
    psi: Vec<Tensor>,
    /// Binary gates overriding `sigmoid(ψ)` while pseudo-pruned.
    forced: Option<Vec<Vec<bool>>>,
}

impl Bottlenecks {
    pub fn new(channels: &[usize], lambda_init: f32) -> Result<Self> {
        if !(lambda_init > 0.0 && lambda_init < 1.0) {
            return Err(Error::InvalidParams(format!("initial gate value {lambda_init} is not in (0, 1)")));
        }
        let l = lambda_init as f64;
        let psi0 = (l / (1.0 - l)).ln() as f32;
        Ok(Bottlenecks {
            psi: channels.iter().map(|&c| Tensor::full(&[c], psi0)).collect(),
            forced: None,
        })
    }

    pub fn from_psi(psi: Vec<Tensor>) -> Result<Self> {
        if psi.iter().any(|t| t.ndim() != 1 || !t.is_finite()) {
            return Err(Error::Bottleneck("gate parameters must be finite vectors".into()));
        }
        Ok(Bottlenecks { psi, forced: None })
    }

    pub fn len(&self) -> usize {
        self.psi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psi.is_empty()
    }

    pub fn psi(&self) -> &[Tensor] {
        &self.psi
    }

    pub fn psi_mut(&mut self) -> &mut [Tensor] {
        &mut self.psi
    }

    /// Current gate values; binary while pseudo-pruned.
    pub fn lambdas(&self) -> Vec<Vec<f32>> {
        match &self.forced {
            Some(mask) => mask
                .iter()
                .map(|m| m.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect())
                .collect(),
            None => self
                .psi
                .iter()
                .map(|p| p.data().iter().map(|&v| kernels::sigmoid(v)).collect())
                .collect(),
        }
    }

    /// Replaces every gate by its binary mask value; `ψ` is kept so the
    /// override can be undone.
    pub fn pseudo_prune(&mut self, keep: &[Vec<bool>]) -> Result<()> {
        self.check_mask(keep)?;
        self.forced = Some(keep.to_vec());
        Ok(())
    }

    pub fn clear_pseudo_prune(&mut self) {
        self.forced = None;
    }

    pub fn is_pseudo_pruned(&self) -> bool {
        self.forced.is_some()
    }

    pub fn check_mask(&self, keep: &[Vec<bool>]) -> Result<()> {
        if keep.len() != self.psi.len() || keep.iter().zip(&self.psi).any(|(k, p)| k.len() != p.numel()) {
            return Err(Error::Mask(format!(
                "mask shape {:?} does not match gates {:?}",
                keep.iter().map(Vec::len).collect::<Vec<_>>(),
                self.psi.iter().map(Tensor::numel).collect::<Vec<_>>()
            )));
        }
        Ok(())
    }

    /// Records the gates on `tape`. Returns the `ψ` leaves (empty while
    /// pseudo-pruned) and the `λ` vars to pass as forward gates.
    pub fn record(&self, tape: &mut Tape, trainable: bool) -> Result<(Vec<Var>, Vec<Var>)> {
        if self.forced.is_some() {
            let gates = self
                .lambdas()
                .into_iter()
                .map(|l| tape.constant(Tensor::from_vec(l)))
                .collect::<Result<_>>()?;
            return Ok((Vec::new(), gates));
        }
        let mut psi = Vec::with_capacity(self.psi.len());
        let mut lambda = Vec::with_capacity(self.psi.len());
        for p in &self.psi {
            let v = tape.leaf(p.clone(), trainable)?;
            psi.push(v);
            lambda.push(tape.sigmoid(v)?);
        }
        Ok((psi, lambda))
    }

    /// Inference-mode logits of an instrumented graph under these gates.
    pub fn predict(&self, g: &Graph, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (_, gates) = self.record(&mut tape, false)?;
        let x = tape.constant(batch.clone())?;
        let cfg = ForwardConfig {
            gates: Some(&gates),
            ..ForwardConfig::INFERENCE
        };
        let out = g.forward(&mut tape, x, &cfg)?;
        Ok(tape.value(out.logits).clone())
    }
}

/// Multiplies channel `c` of `x` (`[N, C, ...]`) by `lambda[c]`.
pub fn apply(lambda: &[f32], x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() < 2 || s[1] != lambda.len() {
        return Err(Error::shape(
            "bottleneck",
            format!("{} gates for input {s:?}", lambda.len()),
        ));
    }
    let plane = s[2..].iter().product();
    Tensor::new(s.to_vec(), kernels::channel_mul(x.data(), lambda, s[0], plane))
}

/// Inserts one gate node after every site of every group. Original
/// parameters are untouched; only the returned gates are meant to train.
pub fn inject(g: &Graph, analysis: &GroupAnalysis, lambda_init: f32) -> Result<(Graph, Bottlenecks)> {
    if g.is_instrumented() {
        return Err(Error::Bottleneck("graph already carries bottlenecks".into()));
    }
    let mut site_group = vec![None; g.nodes().len()];
    for grp in &analysis.groups {
        for &s in &grp.sites {
            if site_group[s].replace(grp.index).is_some() {
                return Err(Error::Bottleneck(format!("node {s} is a site of two groups")));
            }
        }
    }
    // remap[i]: what readers of old node i should read in the new graph.
    let mut remap = Vec::with_capacity(g.nodes().len());
    let mut nodes = Vec::with_capacity(g.nodes().len() + site_group.len());
    for (i, node) in g.nodes().iter().enumerate() {
        let mut n = node.clone();
        n.inputs = n.inputs.iter().map(|&p| remap[p]).collect();
        nodes.push(n);
        let own = nodes.len() - 1;
        match site_group[i] {
            Some(group) => {
                nodes.push(Node::new(
                    format!("{}.gate{group}", node.name),
                    OpKind::Bottleneck { group },
                    vec![own],
                ));
                remap.push(nodes.len() - 1);
            }
            None => remap.push(own),
        }
    }
    let (arch, _, output, meta) = g.clone().into_parts();
    let mut out = Graph::new(arch, nodes, remap[output])?;
    out.meta = meta;
    let gates = Bottlenecks::new(&analysis.channel_counts(), lambda_init)?;
    Ok((out, gates))
}

/// Drops every gate node, rewiring its readers to the gate's input.
pub fn remove(g: &Graph) -> Result<Graph> {
    if !g.is_instrumented() {
        return Err(Error::Bottleneck("graph carries no bottlenecks".into()));
    }
    let mut remap: Vec<usize> = Vec::with_capacity(g.nodes().len());
    let mut nodes: Vec<Node> = Vec::new();
    for node in g.nodes() {
        if let OpKind::Bottleneck { .. } = node.op {
            let target = remap[node.inputs[0]];
            remap.push(target);
            continue;
        }
        let mut n = node.clone();
        n.inputs = n.inputs.iter().map(|&p| remap[p]).collect();
        nodes.push(n);
        remap.push(nodes.len() - 1);
    }
    let (arch, _, output, meta) = g.clone().into_parts();
    let mut out = Graph::new(arch, nodes, remap[output])?;
    out.meta = meta;
    Ok(out)
}
