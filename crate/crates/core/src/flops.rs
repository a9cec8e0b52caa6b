//! Weighted FLOPs of a gated model, exact FLOPs of a concrete graph, and
//! the normalized FLOPs penalty.
//!
//! One multiply-accumulate counts as one FLOP. Per operator:
//!
//! | op          | FLOPs                                         |
//! |-------------|-----------------------------------------------|
//! | conv        | `s_out * s_in * h_out * w_out * k^2` (+ `s_out * h_out * w_out` with bias) |
//! | linear      | `s_out * s_in` (+ `s_out` with bias)          |
//! | batchnorm   | `2 * s * h * w`                               |
//! | relu, add   | `s * h * w`                                   |
//! | max pool    | `s * h_out * w_out * k^2`                     |
//! | global pool | `s * h_in * w_in`                             |
//! | concat, gate| 0                                             |
//!
//! `s` is a channel count, or the sum of gate values for gated channels.

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{GroupAnalysis, Graph, NodeId, OpKind};

/// FLOPs of one operator as a function of its channel counts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum OpFormula {
    /// `s_out * s_in * area + s_out * bias_area`.
    Bilinear { area: f64, bias_area: f64 },
    /// `s_out * cost`.
    PerChannel { cost: f64 },
}

/// Sum of channel weights: a constant plus the gate sums of some groups
/// (a group may appear more than once).
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ChannelSum {
    pub fixed: f64,
    pub groups: Vec<usize>,
}

impl ChannelSum {
    fn eval(&self, sums: &[f64]) -> f64 {
        self.fixed + self.groups.iter().map(|&g| sums[g]).sum::<f64>()
    }

    fn of(analysis: &GroupAnalysis, id: NodeId) -> Self {
        ChannelSum {
            fixed: analysis.fixed_channels(id) as f64,
            groups: analysis.groups_in(id).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsTerm {
    pub name: String,
    pub op: &'static str,
    pub formula: OpFormula,
    pub s_out: ChannelSum,
    /// Only for bilinear terms.
    pub s_in: ChannelSum,
}

/// `g(Λ)`: FLOPs of a model as a function of the per-group gate sums.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsModel {
    terms: Vec<FlopsTerm>,
    channels: Vec<usize>,
    max_flops: f64,
}

pub fn weighted_op_flops(formula: &OpFormula, s_out: f64, s_in: f64) -> Result<f64> {
    if !(s_out >= 0.0 && s_in >= 0.0) {
        return Err(Error::InvalidParams(format!(
            "channel sums must be non-negative, got s_out {s_out}, s_in {s_in}"
        )));
    }
    Ok(match *formula {
        OpFormula::Bilinear { area, bias_area } => s_out * s_in * area + s_out * bias_area,
        OpFormula::PerChannel { cost } => s_out * cost,
    })
}

impl FlopsModel {
    /// Registers every operator of `g` (gates cost nothing).
    pub fn new(g: &Graph, analysis: &GroupAnalysis) -> Result<Self> {
        let mut terms = Vec::new();
        for (id, node) in g.nodes().iter().enumerate() {
            let out = g.shape(id);
            let plane = out[1..].iter().product::<usize>() as f64;
            let per_channel = |cost: f64| OpFormula::PerChannel { cost };
            let (formula, s_in) = match &node.op {
                OpKind::Input { .. } | OpKind::Concat | OpKind::Bottleneck { .. } => continue,
                OpKind::Conv2d { kernel, bias, .. } => {
                    let k2 = (kernel * kernel) as f64;
                    let formula = OpFormula::Bilinear {
                        area: plane * k2,
                        bias_area: if *bias { plane } else { 0.0 },
                    };
                    (formula, ChannelSum::of(analysis, node.inputs[0]))
                }
                OpKind::Linear { bias, .. } => {
                    let formula = OpFormula::Bilinear {
                        area: 1.0,
                        bias_area: if *bias { 1.0 } else { 0.0 },
                    };
                    (formula, ChannelSum::of(analysis, node.inputs[0]))
                }
                OpKind::BatchNorm { .. } => (per_channel(2.0 * plane), ChannelSum::default()),
                OpKind::Relu | OpKind::Add => (per_channel(plane), ChannelSum::default()),
                OpKind::MaxPool { kernel, .. } => (per_channel(plane * (kernel * kernel) as f64), ChannelSum::default()),
                OpKind::GlobalAvgPool => {
                    let ins = g.shape(node.inputs[0]);
                    (per_channel((ins[1] * ins[2]) as f64), ChannelSum::default())
                }
            };
            terms.push(FlopsTerm {
                name: node.name.clone(),
                op: node.op.name(),
                formula,
                s_out: ChannelSum::of(analysis, id),
                s_in,
            });
        }
        Self::from_terms(terms, analysis.channel_counts())
    }

    /// A model from explicit terms over groups of the given sizes.
    pub fn from_terms(terms: Vec<FlopsTerm>, channels: Vec<usize>) -> Result<Self> {
        for t in &terms {
            if let Some(&g) = t.s_out.groups.iter().chain(&t.s_in.groups).find(|&&g| g >= channels.len()) {
                return Err(Error::InvalidParams(format!("term `{}` refers to unknown group {g}", t.name)));
            }
        }
        let mut m = FlopsModel {
            terms,
            channels,
            max_flops: 0.0,
        };
        let full: Vec<f64> = m.channels.iter().map(|&c| c as f64).collect();
        m.max_flops = m.weighted(&full)?;
        Ok(m)
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    pub fn terms(&self) -> &[FlopsTerm] {
        &self.terms
    }

    /// `M_F`, the FLOPs of the unpruned model.
    pub fn max_flops(&self) -> f64 {
        self.max_flops
    }

    fn check_sums(&self, sums: &[f64]) -> Result<()> {
        if sums.len() != self.channels.len() {
            return Err(Error::InvalidParams(format!(
                "{} group sums for {} groups",
                sums.len(),
                self.channels.len()
            )));
        }
        Ok(())
    }

    /// FLOPs given each group's gate sum.
    pub fn weighted(&self, sums: &[f64]) -> Result<f64> {
        self.check_sums(sums)?;
        let mut total = 0.0;
        for t in &self.terms {
            total += weighted_op_flops(&t.formula, t.s_out.eval(sums), t.s_in.eval(sums))?;
        }
        Ok(total)
    }

    /// FLOPs and their gradient with respect to each group sum.
    pub fn weighted_with_grad(&self, sums: &[f64]) -> Result<(f64, Vec<f64>)> {
        let value = self.weighted(sums)?;
        let mut grad = vec![0.0; sums.len()];
        for t in &self.terms {
            let (so, si) = (t.s_out.eval(sums), t.s_in.eval(sums));
            let (d_out, d_in) = match t.formula {
                OpFormula::Bilinear { area, bias_area } => (si * area + bias_area, so * area),
                OpFormula::PerChannel { cost } => (cost, 0.0),
            };
            for &g in &t.s_out.groups {
                grad[g] += d_out;
            }
            for &g in &t.s_in.groups {
                grad[g] += d_in;
            }
        }
        Ok((value, grad))
    }

    /// Per-operator FLOPs given each group's gate sum.
    pub fn breakdown(&self, sums: &[f64]) -> Result<Vec<(String, &'static str, f64)>> {
        self.check_sums(sums)?;
        self.terms
            .iter()
            .map(|t| {
                weighted_op_flops(&t.formula, t.s_out.eval(sums), t.s_in.eval(sums)).map(|f| (t.name.clone(), t.op, f))
            })
            .collect()
    }

    pub fn of_lambdas(&self, lambdas: &[Vec<f32>]) -> Result<f64> {
        let sums: Vec<f64> = lambdas.iter().map(|l| l.iter().map(|&v| v as f64).sum()).collect();
        self.weighted(&sums)
    }

    pub fn of_mask(&self, keep: &[Vec<bool>]) -> Result<f64> {
        let sums: Vec<f64> = keep.iter().map(|k| k.iter().filter(|&&b| b).count() as f64).collect();
        self.weighted(&sums)
    }

    /// Records `g(Λ)` on the tape from per-group gate vectors.
    pub fn record(&self, tape: &mut Tape, lambdas: &[Var]) -> Result<Var> {
        let mut sums = Vec::with_capacity(lambdas.len());
        let mut vals = Vec::with_capacity(lambdas.len());
        for &l in lambdas {
            let s = tape.sum(l)?;
            vals.push(tape.value(s).item() as f64);
            sums.push(s);
        }
        let (value, grad) = self.weighted_with_grad(&vals)?;
        tape.scalar_fn(&sums, value, grad)
    }
}

/// Integer FLOPs of a concrete graph, computed from its shapes alone.
pub fn exact_flops(g: &Graph) -> u64 {
    let mut total: u64 = 0;
    for (id, node) in g.nodes().iter().enumerate() {
        let out = g.shape(id);
        let c = out[0] as u64;
        let plane: u64 = out[1..].iter().map(|&d| d as u64).product();
        total += match &node.op {
            OpKind::Input { .. } | OpKind::Concat | OpKind::Bottleneck { .. } => 0,
            OpKind::Conv2d {
                in_channels,
                kernel,
                bias,
                ..
            } => {
                let k = *kernel as u64;
                c * *in_channels as u64 * plane * k * k + if *bias { c * plane } else { 0 }
            }
            OpKind::Linear { in_features, bias, .. } => c * *in_features as u64 + if *bias { c } else { 0 },
            OpKind::BatchNorm { .. } => 2 * c * plane,
            OpKind::Relu | OpKind::Add => c * plane,
            OpKind::MaxPool { kernel, .. } => c * plane * (*kernel as u64).pow(2),
            OpKind::GlobalAvgPool => {
                let s = g.shape(node.inputs[0]);
                c * (s[1] * s[2]) as u64
            }
        };
    }
    total
}

/// `L_g` and its derivative with respect to `g`. The `g >= T_F` branch is
/// used at equality.
pub fn flops_loss(g: f64, target: f64, max: f64) -> Result<(f64, f64)> {
    if !(target > 0.0 && target < max) {
        return Err(Error::InvalidParams(format!(
            "target FLOPs {target} must lie strictly between 0 and {max}"
        )));
    }
    Ok(if g >= target {
        ((g - target) / (max - target), 1.0 / (max - target))
    } else {
        (1.0 - g / target, -1.0 / target)
    })
}

/// Reference FLOPs of VGG-16 on 32x32 inputs.
pub const VGG16_CIFAR_REFERENCE: f64 = 314.29e6;
