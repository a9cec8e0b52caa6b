//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node holding its output value and whatever it needs
//! for the backward pass. A node requires a gradient iff one of its inputs
//! does; leaves declare it explicitly. `backward` walks the tape once in
//! reverse and only materializes gradients along `requires_grad` paths, so
//! frozen parameters never receive (or cost) a gradient.

pub mod gradcheck;

use crate::error::{Error, Result};
use crate::kernels::{self, Conv2dGeom, PoolGeom};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the supplied running statistics.
    Inference,
}

/// Batch statistics observed by a training-mode batchnorm.
#[derive(Clone, Debug)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: Conv2dGeom,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Add(Var, Var),
    Concat(Vec<Var>),
    ChannelMul {
        input: Var,
        scale: Var,
    },
    Softmax(Var),
    Sigmoid(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    ScalarFn {
        inputs: Vec<Var>,
        partials: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` if `v` is frozen or not
    /// on the path to the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Splits a 4-D `[N, C, H, W]` or 2-D `[N, C]` activation into
/// `(batch, channels, plane)`.
fn channel_layout(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [n, c, h, w] => Ok((*n, *c, h * w)),
        [n, c] => Ok((*n, *c, 1)),
        _ => Err(Error::shape(op, format!("expected [N, C] or [N, C, H, W], got {shape:?}"))),
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, requires_grad: bool, op: Op) -> Result<Var> {
        check_finite(op_name, &value)?;
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        if stride == 0 {
            return Err(Error::Attr {
                op: OP,
                detail: "stride must be >= 1".into(),
            });
        }
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        let ([n, c, h, w], [co, ci, kh, kw]) = (xs.as_slice(), ws.as_slice()) else {
            return Err(Error::shape(OP, format!("input {xs:?} and weight {ws:?} must both be 4-D")));
        };
        if c != ci {
            return Err(Error::shape(OP, format!("input has {c} channels but weight expects {ci}")));
        }
        if kh != kw {
            return Err(Error::shape(OP, format!("non-square kernel {kh}x{kw}")));
        }
        if h + 2 * padding < *kh || w + 2 * padding < *kw {
            return Err(Error::shape(OP, format!("kernel {kh} larger than padded input {h}x{w}")));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [*co] {
                return Err(Error::shape(
                    OP,
                    format!("bias {:?} does not match {co} output channels", self.value(b).shape()),
                ));
            }
        }
        let geom = Conv2dGeom {
            batch: *n,
            in_channels: *c,
            height: *h,
            width: *w,
            out_channels: *co,
            kernel: *kh,
            stride,
            padding,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(vec![*n, *co, geom.out_height(), geom.out_width()], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        self.push(
            OP,
            value,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        )
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        const OP: &str = "linear";
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        let ([n, i], [o, wi]) = (xs.as_slice(), ws.as_slice()) else {
            return Err(Error::shape(OP, format!("input {xs:?} and weight {ws:?} must both be 2-D")));
        };
        if i != wi {
            return Err(Error::shape(OP, format!("input has {i} features but weight expects {wi}")));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [*o] {
                return Err(Error::shape(OP, format!("bias does not match {o} outputs")));
            }
        }
        let y = kernels::linear_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            *n,
            *i,
            *o,
        );
        let value = Tensor::new(vec![*n, *o], y)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        self.push(OP, value, rg, Op::Linear { input, weight, bias })
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(|v| v.max(0.0));
        let rg = self.any_grad(&[input]);
        self.push("relu", value, rg, Op::Relu(input))
    }

    pub fn max_pool(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        const OP: &str = "max_pool";
        if kernel == 0 || stride == 0 {
            return Err(Error::Attr {
                op: OP,
                detail: "kernel and stride must be >= 1".into(),
            });
        }
        let xs = self.value(input).shape().to_vec();
        let [n, c, h, w] = xs.as_slice() else {
            return Err(Error::shape(OP, format!("expected 4-D input, got {xs:?}")));
        };
        if *h < kernel || *w < kernel {
            return Err(Error::shape(OP, format!("kernel {kernel} larger than input {h}x{w}")));
        }
        let geom = PoolGeom {
            batch: *n,
            channels: *c,
            height: *h,
            width: *w,
            kernel,
            stride,
        };
        let (y, argmax) = kernels::maxpool_forward(&geom, self.value(input).data());
        let value = Tensor::new(vec![*n, *c, geom.out_height(), geom.out_width()], y)?;
        let rg = self.any_grad(&[input]);
        let argmax = if rg { argmax } else { Vec::new() };
        self.push(OP, value, rg, Op::MaxPool { input, argmax })
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        const OP: &str = "global_avg_pool";
        let xs = self.value(input).shape().to_vec();
        let [n, c, h, w] = xs.as_slice() else {
            return Err(Error::shape(OP, format!("expected 4-D input, got {xs:?}")));
        };
        let y = kernels::gap_forward(self.value(input).data(), n * c, h * w);
        let value = Tensor::new(vec![*n, *c], y)?;
        let rg = self.any_grad(&[input]);
        self.push(OP, value, rg, Op::GlobalAvgPool(input))
    }

    /// Batch normalization over the channel axis of `[N, C, H, W]` or
    /// `[N, C]`. In training mode the batch moments are returned so the
    /// caller can update running statistics.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: (&[f32], &[f32]),
        eps: f32,
        mode: BatchNormMode,
    ) -> Result<(Var, Option<BatchMoments>)> {
        const OP: &str = "batch_norm";
        let (n, c, plane) = channel_layout(OP, self.value(input).shape())?;
        for (name, len) in [
            ("gamma", self.value(gamma).numel()),
            ("beta", self.value(beta).numel()),
            ("running_mean", running.0.len()),
            ("running_var", running.1.len()),
        ] {
            if len != c {
                return Err(Error::shape(OP, format!("{name} has {len} entries for {c} channels")));
            }
        }
        let (mean, var, moments) = match mode {
            BatchNormMode::Train => {
                if n * plane < 2 {
                    return Err(Error::shape(OP, "training mode needs more than one value per channel"));
                }
                let (mean, var) = kernels::channel_moments(self.value(input).data(), n, c, plane);
                let moments = BatchMoments {
                    mean: mean.clone(),
                    var: var.clone(),
                    count: n * plane,
                };
                (mean, var, Some(moments))
            }
            BatchNormMode::Inference => (
                running.0.iter().map(|&v| v as f64).collect(),
                running.1.iter().map(|&v| v as f64).collect::<Vec<_>>(),
                None,
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps as f64).sqrt()).collect();
        let y = kernels::batchnorm_apply(
            self.value(input).data(),
            n,
            c,
            plane,
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let value = Tensor::new(self.value(input).shape().to_vec(), y)?;
        let rg = self.any_grad(&[input, gamma, beta]);
        let var = self.push(
            OP,
            value,
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats: mode == BatchNormMode::Train,
            },
        )?;
        Ok((var, moments))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        self.push("add", value, rg, Op::Add(a, b))
    }

    /// Concatenation along the channel axis (axis 1).
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        const OP: &str = "concat";
        let Some(&first) = inputs.first() else {
            return Err(Error::shape(OP, "no inputs"));
        };
        let base = self.value(first).shape().to_vec();
        let (n, _, plane) = channel_layout(OP, &base)?;
        let mut sizes = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(Error::shape(
                    OP,
                    format!("{s:?} cannot be concatenated with {base:?} on the channel axis"),
                ));
            }
            sizes.push(s[1]);
        }
        let parts: Vec<(&[f32], usize)> = inputs.iter().zip(&sizes).map(|(&v, &c)| (self.value(v).data(), c)).collect();
        let data = kernels::concat_channels(&parts, n, plane);
        let mut shape = base;
        shape[1] = sizes.iter().sum();
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(inputs);
        self.push(OP, value, rg, Op::Concat(inputs.to_vec()))
    }

    /// Per-channel scaling of `[N, C, ...]` by a length-`C` vector.
    pub fn channel_mul(&mut self, input: Var, scale: Var) -> Result<Var> {
        const OP: &str = "channel_mul";
        let (n, c, plane) = channel_layout(OP, self.value(input).shape())?;
        let s = self.value(scale);
        if s.numel() != c || s.ndim() != 1 {
            return Err(Error::shape(
                OP,
                format!("scale {:?} does not match {c} channels", s.shape()),
            ));
        }
        let data = kernels::channel_mul(self.value(input).data(), s.data(), n, plane);
        let value = Tensor::new(self.value(input).shape().to_vec(), data)?;
        let rg = self.any_grad(&[input, scale]);
        self.push(OP, value, rg, Op::ChannelMul { input, scale })
    }

    /// Softmax over the last axis of a 2-D tensor.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let [rows, cols] = xs.as_slice() else {
            return Err(Error::shape("softmax", format!("expected 2-D input, got {xs:?}")));
        };
        let y = kernels::softmax_rows(self.value(input).data(), *rows, *cols);
        let value = Tensor::new(xs.clone(), y)?;
        let rg = self.any_grad(&[input]);
        self.push("softmax", value, rg, Op::Softmax(input))
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(kernels::sigmoid);
        let rg = self.any_grad(&[input]);
        self.push("sigmoid", value, rg, Op::Sigmoid(input))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s: f64 = self.value(input).data().iter().map(|&v| v as f64).sum();
        let rg = self.any_grad(&[input]);
        self.push("sum", Tensor::scalar(s as f32), rg, Op::Sum(input))
    }

    /// Mean cross-entropy of `[N, C]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        const OP: &str = "cross_entropy";
        let xs = self.value(logits).shape().to_vec();
        let [n, c] = xs.as_slice() else {
            return Err(Error::shape(OP, format!("expected [N, C] logits, got {xs:?}")));
        };
        if *c < 2 {
            return Err(Error::shape(OP, format!("need at least 2 classes, got {c}")));
        }
        if labels.len() != *n {
            return Err(Error::shape(OP, format!("{} labels for batch of {n}", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= *c) {
            return Err(Error::LabelOutOfRange { label, classes: *c });
        }
        let data = self.value(logits).data();
        let mut total = 0.0f64;
        for (r, &label) in labels.iter().enumerate() {
            let row = &data[r * c..(r + 1) * c];
            total += kernels::log_sum_exp(row) - row[label] as f64;
        }
        let value = Tensor::scalar((total / *n as f64) as f32);
        let rg = self.any_grad(&[logits]);
        self.push(
            OP,
            value,
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        )
    }

    /// A scalar computed outside the tape from scalar inputs, recorded with
    /// its partial derivatives so gradients flow through it.
    pub fn scalar_fn(&mut self, inputs: &[Var], value: f64, partials: Vec<f64>) -> Result<Var> {
        const OP: &str = "scalar_fn";
        if inputs.len() != partials.len() {
            return Err(Error::shape(OP, "one partial derivative per input required"));
        }
        for &v in inputs {
            if self.value(v).numel() != 1 {
                return Err(Error::shape(OP, format!("input {:?} is not a scalar", self.value(v).shape())));
            }
        }
        if !value.is_finite() || partials.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite { op: OP });
        }
        let rg = self.any_grad(inputs);
        self.push(
            OP,
            Tensor::scalar(value as f32),
            rg,
            Op::ScalarFn {
                inputs: inputs.to_vec(),
                partials,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let Some(node) = self.nodes.get(loss.0) else {
            return Err(Error::Backward(format!("variable {} is not recorded on this tape", loss.0)));
        };
        if node.value.numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        self.backward_from(loss, Tensor::new(node.value.shape().to_vec(), vec![1.0])?)
    }

    /// Reverse sweep seeded with an arbitrary cotangent for `output`
    /// (a vector-Jacobian product).
    pub fn backward_from(&self, output: Var, cotangent: Tensor) -> Result<Gradients> {
        let Some(node) = self.nodes.get(output.0) else {
            return Err(Error::Backward(format!("variable {} is not recorded on this tape", output.0)));
        };
        if node.value.shape() != cotangent.shape() {
            return Err(Error::Backward(format!(
                "cotangent shape {:?} does not match output {:?}",
                cotangent.shape(),
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::Backward("output does not depend on any trainable tensor".into()));
        }
        let loss = output;
        let mut grads: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(cotangent.into_data());

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            let contributions = self.vjp(node, &dy);
            // Leaves keep their gradient.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(dy);
            }
            for (v, g) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| matches!(self.nodes[i].op, Op::Leaf))
                    .map(|g| Tensor::new(self.nodes[i].value.shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian products of one node w.r.t. the inputs that need them.
    fn vjp(&self, node: &Node, dy: &[f32]) -> Vec<(Var, Vec<f32>)> {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let g = kernels::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    dy,
                    rg(*input),
                    rg(*weight),
                    bias.is_some_and(rg),
                );
                out.extend(g.input.map(|d| (*input, d)));
                out.extend(g.weight.map(|d| (*weight, d)));
                if let (Some(b), Some(d)) = (bias, g.bias) {
                    out.push((*b, d));
                }
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let (n, i) = (x.shape()[0], x.shape()[1]);
                let o = self.value(*weight).shape()[0];
                let g = kernels::linear_backward(
                    x.data(),
                    self.value(*weight).data(),
                    dy,
                    n,
                    i,
                    o,
                    (rg(*input), rg(*weight), bias.is_some_and(rg)),
                );
                out.extend(g.input.map(|d| (*input, d)));
                out.extend(g.weight.map(|d| (*weight, d)));
                if let (Some(b), Some(d)) = (bias, g.bias) {
                    out.push((*b, d));
                }
            }
            Op::Relu(x) => {
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                out.push((*x, d));
            }
            Op::MaxPool { input, argmax } => {
                out.push((*input, kernels::maxpool_backward(self.value(*input).numel(), argmax, dy)));
            }
            Op::GlobalAvgPool(x) => {
                let s = self.value(*x).shape();
                out.push((*x, kernels::gap_backward(dy, s[2] * s[3])));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let x = self.value(*input);
                let (n, c, plane) = channel_layout("batch_norm", x.shape()).expect("validated at forward");
                let g = kernels::batchnorm_backward(
                    x.data(),
                    dy,
                    n,
                    c,
                    plane,
                    mean,
                    inv_std,
                    self.value(*gamma).data(),
                    *batch_stats,
                    (rg(*input), rg(*gamma), rg(*beta)),
                );
                out.extend(g.input.map(|d| (*input, d)));
                out.extend(g.gamma.map(|d| (*gamma, d)));
                out.extend(g.beta.map(|d| (*beta, d)));
            }
            Op::Add(a, b) => {
                out.push((*a, dy.to_vec()));
                out.push((*b, dy.to_vec()));
            }
            Op::Concat(inputs) => {
                let s = node.value.shape();
                let (n, _, plane) = channel_layout("concat", s).expect("validated at forward");
                let sizes: Vec<usize> = inputs.iter().map(|v| self.value(*v).shape()[1]).collect();
                for (v, d) in inputs.iter().zip(kernels::split_channels(dy, &sizes, n, plane)) {
                    out.push((*v, d));
                }
            }
            Op::ChannelMul { input, scale } => {
                let x = self.value(*input);
                let (n, c, plane) = channel_layout("channel_mul", x.shape()).expect("validated at forward");
                if rg(*input) {
                    out.push((*input, kernels::channel_mul(dy, self.value(*scale).data(), n, plane)));
                }
                if rg(*scale) {
                    out.push((*scale, kernels::channel_mul_scale_grad(x.data(), dy, c, n, plane)));
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let cols = node.value.shape()[1];
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(cols).zip(dy.chunks(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a as f64 * b as f64).sum();
                    d.extend(yr.iter().zip(gr).map(|(&a, &b)| (a as f64 * (b as f64 - dot)) as f32));
                }
                out.push((*x, d));
            }
            Op::Sigmoid(x) => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&s, &g)| (g as f64 * s as f64 * (1.0 - s as f64)) as f32)
                    .collect();
                out.push((*x, d));
            }
            Op::Sum(x) => {
                out.push((*x, vec![dy[0]; self.value(*x).numel()]));
            }
            Op::CrossEntropy { logits, labels } => {
                let x = self.value(*logits);
                let (n, c) = (x.shape()[0], x.shape()[1]);
                let probs = kernels::softmax_rows(x.data(), n, c);
                let scale = dy[0] as f64 / n as f64;
                let mut d = Vec::with_capacity(n * c);
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let p = probs[r * c + j] as f64 - if j == label { 1.0 } else { 0.0 };
                        d.push((p * scale) as f32);
                    }
                }
                out.push((*logits, d));
            }
            Op::ScalarFn { inputs, partials } => {
                for (v, p) in inputs.iter().zip(partials) {
                    out.push((*v, vec![(dy[0] as f64 * p) as f32]));
                }
            }
        }
        out
    }
}
