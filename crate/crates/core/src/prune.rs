//! Physical channel pruning of a graph.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bottleneck::Bottlenecks;
use crate::error::{Error, Result};
use crate::graph::{GroupAnalysis, Graph, OpKind};
use crate::tensor::Tensor;

fn check_mask(analysis: &GroupAnalysis, keep: &[Vec<bool>]) -> Result<()> {
    let counts = analysis.channel_counts();
    if keep.len() != counts.len() || keep.iter().zip(&counts).any(|(k, &c)| k.len() != c) {
        return Err(Error::Mask(format!(
            "mask shape {:?} does not match groups {counts:?}",
            keep.iter().map(Vec::len).collect::<Vec<_>>()
        )));
    }
    if let Some(i) = keep.iter().position(|k| !k.iter().any(|&b| b)) {
        return Err(Error::Mask(format!("group {} keeps no channel", i + 1)));
    }
    Ok(())
}

/// Deletes every channel dropped by `keep` from producing convolutions,
/// batchnorms on the way, and the input slices of every consumer.
/// Surviving channels keep their order.
pub fn prune(g: &Graph, analysis: &GroupAnalysis, keep: &[Vec<bool>]) -> Result<Graph> {
    if g.is_instrumented() {
        return Err(Error::Graph("remove bottlenecks before pruning".into()));
    }
    check_mask(analysis, keep)?;
    let mut nodes = g.nodes().to_vec();
    for (id, node) in nodes.iter_mut().enumerate() {
        let first = node.inputs.first().copied().unwrap_or(0);
        let kept_out = || analysis.kept_channels(id, keep);
        let kept_in = || analysis.kept_channels(first, keep);
        match &mut node.op {
            OpKind::Input { .. } => {}
            OpKind::Conv2d {
                in_channels,
                out_channels,
                ..
            } => {
                let (o, i) = (kept_out(), kept_in());
                let w = node.params["weight"].select(0, &o).select(1, &i);
                node.params.insert("weight".into(), w);
                if let Some(b) = node.params.get_mut("bias") {
                    *b = b.select(0, &o);
                }
                *out_channels = o.len();
                *in_channels = i.len();
            }
            OpKind::BatchNorm { channels, .. } => {
                let o = kept_out();
                for t in node.params.values_mut() {
                    *t = t.select(0, &o);
                }
                *channels = o.len();
            }
            OpKind::Linear { in_features, .. } => {
                let i = kept_in();
                let w = node.params["weight"].select(1, &i);
                node.params.insert("weight".into(), w);
                *in_features = i.len();
            }
            _ => {}
        }
    }
    let (arch, output, meta) = (g.arch.clone(), g.output(), g.meta.clone());
    let mut out = Graph::new(arch, nodes, output)
        .map_err(|e| Error::Graph(format!("pruned graph is inconsistent: {e}")))?;
    out.meta = meta;
    Ok(out)
}

/// Learnable parameter count implied by `keep`, derived per operator from
/// the original graph's attributes.
pub fn analytic_param_count(g: &Graph, analysis: &GroupAnalysis, keep: &[Vec<bool>]) -> Result<usize> {
    check_mask(analysis, keep)?;
    let count = |id| analysis.kept_channels(id, keep).len();
    let mut total = 0;
    for (id, node) in g.nodes().iter().enumerate() {
        total += match &node.op {
            OpKind::Conv2d { kernel, bias, .. } => {
                let o = count(id);
                o * count(node.inputs[0]) * kernel * kernel + if *bias { o } else { 0 }
            }
            OpKind::BatchNorm { .. } => 2 * count(id),
            OpKind::Linear {
                out_features, bias, ..
            } => out_features * count(node.inputs[0]) + if *bias { *out_features } else { 0 },
            _ => 0,
        };
    }
    Ok(total)
}

/// Largest relative logit difference between an instrumented graph under
/// pseudo-pruned gates and its physically pruned counterpart, over `n`
/// random inputs drawn from `seed`.
pub fn equivalence_check(instrumented: &Graph, gates: &Bottlenecks, pruned: &Graph, n: usize, seed: u64) -> Result<f64> {
    if instrumented.input_shape() != pruned.input_shape() || instrumented.num_classes() != pruned.num_classes() {
        return Err(Error::shape(
            "equivalence_check",
            format!(
                "graphs differ in input {:?} vs {:?} or classes",
                instrumented.input_shape(),
                pruned.input_shape()
            ),
        ));
    }
    let mut shape = vec![n];
    shape.extend_from_slice(instrumented.input_shape());
    let x = Tensor::uniform(&shape, -2.0, 2.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let a = gates.predict(instrumented, &x)?;
    let b = pruned.predict(&x)?;
    Ok(a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&a, &b)| ((a - b).abs() / a.abs().max(1e-6)) as f64)
        .fold(0.0, f64::max))
}
