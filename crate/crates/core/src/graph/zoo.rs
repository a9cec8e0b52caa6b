//! Built-in architectures.
//!
//! | arch          | `widths`                                   |
//! |---------------|--------------------------------------------|
//! | `vgg_tiny`    | one conv-bn-relu-pool block per entry      |
//! | `res_tiny`    | stem (conv-bn-relu-pool), then one residual stage per entry; the first stage uses an identity shortcut, later ones a strided 1x1 projection |
//! | `branch_tiny` | `[stem, branch_a, branch_b_reduce, branch_b, head]` |
//! | `vgg16_cifar` | fixed 13-conv layout, `widths` ignored     |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Node, NodeId, OpKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ARCHS: &[&str] = &["vgg_tiny", "res_tiny", "branch_tiny", "vgg16_cifar"];

pub fn default_widths(arch: &str) -> Result<Vec<usize>> {
    Ok(match arch {
        "vgg_tiny" => vec![8, 16, 16],
        "res_tiny" => vec![8, 8, 16],
        "branch_tiny" => vec![8, 4, 4, 6, 16],
        "vgg16_cifar" => VGG16_CFG.iter().flatten().copied().collect(),
        other => return Err(Error::UnknownArch(other.to_string())),
    })
}

/// Channel widths of VGG-16 for 32x32 inputs; `None` is a 2x2 max pool.
const VGG16_CFG: [Option<usize>; 18] = [
    Some(64),
    Some(64),
    None,
    Some(128),
    Some(128),
    None,
    Some(256),
    Some(256),
    Some(256),
    None,
    Some(512),
    Some(512),
    Some(512),
    None,
    Some(512),
    Some(512),
    Some(512),
    None,
];

/// Builds `arch` with freshly initialized weights (He-uniform convolutions,
/// zero biases, identity batchnorm).
pub fn build(arch: &str, widths: &[usize], num_classes: usize, input: [usize; 3], seed: u64) -> Result<Graph> {
    if widths.iter().any(|&w| w < 2) || num_classes == 0 || input.contains(&0) {
        return Err(Error::InvalidParams("widths must be at least 2; classes and input dims positive".into()));
    }
    let mut b = Builder::new(input, seed);
    let x = 0;
    let out = match arch {
        "vgg_tiny" => {
            if widths.is_empty() {
                return Err(Error::InvalidParams("vgg_tiny needs at least one width".into()));
            }
            let mut h = x;
            let mut c = input[0];
            let mut side = input[1].min(input[2]);
            for (i, &w) in widths.iter().enumerate() {
                let n = i + 1;
                h = b.conv_bn_relu(&n.to_string(), h, c, w, 3, 1, 1);
                if side >= 2 {
                    h = b.push(&format!("pool{n}"), OpKind::MaxPool { kernel: 2, stride: 2 }, vec![h]);
                    side /= 2;
                }
                c = w;
            }
            let gap = b.push("gap", OpKind::GlobalAvgPool, vec![h]);
            b.linear("fc", gap, c, num_classes)
        }
        "res_tiny" => {
            if widths.len() < 2 {
                return Err(Error::InvalidParams("res_tiny needs a stem width and at least one stage".into()));
            }
            let mut h = b.conv_bn_relu("_stem", x, input[0], widths[0], 3, 1, 1);
            if input[1].min(input[2]) >= 4 {
                h = b.push("pool_stem", OpKind::MaxPool { kernel: 2, stride: 2 }, vec![h]);
            }
            let mut c = widths[0];
            for (i, &w) in widths[1..].iter().enumerate() {
                let s = format!("{}", i + 1);
                let identity = i == 0;
                if identity && w != c {
                    return Err(Error::InvalidParams(format!(
                        "res_tiny identity stage needs width {c}, got {w}"
                    )));
                }
                let stride = if identity { 1 } else { 2 };
                let a = b.conv_bn_relu(&format!("{s}a"), h, c, w, 3, stride, 1);
                let r = b.conv(&format!("conv{s}b"), a, w, w, 3, 1, 1);
                let r = b.bn(&format!("bn{s}b"), r, w);
                let short = if identity {
                    h
                } else {
                    let p = b.conv(&format!("conv{s}s"), h, c, w, 1, 2, 0);
                    b.bn(&format!("bn{s}s"), p, w)
                };
                let sum = b.push(&format!("add{s}"), OpKind::Add, vec![r, short]);
                h = b.push(&format!("relu{s}"), OpKind::Relu, vec![sum]);
                c = w;
            }
            let gap = b.push("gap", OpKind::GlobalAvgPool, vec![h]);
            b.linear("fc", gap, c, num_classes)
        }
        "branch_tiny" => {
            let &[stem, wa, wr, wb, head] = widths else {
                return Err(Error::InvalidParams("branch_tiny takes exactly five widths".into()));
            };
            let s = b.conv_bn_relu("_stem", x, input[0], stem, 3, 1, 1);
            let s = b.push("pool_stem", OpKind::MaxPool { kernel: 2, stride: 2 }, vec![s]);
            let ba = b.conv_bn_relu("_a", s, stem, wa, 1, 1, 0);
            let br = b.conv_bn_relu("_b_reduce", s, stem, wr, 1, 1, 0);
            let bb = b.conv_bn_relu("_b", br, wr, wb, 3, 1, 1);
            let cat = b.push("concat", OpKind::Concat, vec![ba, bb]);
            let h = b.conv_bn_relu("_head", cat, wa + wb, head, 3, 1, 1);
            let h = b.push("pool_head", OpKind::MaxPool { kernel: 2, stride: 2 }, vec![h]);
            let gap = b.push("gap", OpKind::GlobalAvgPool, vec![h]);
            b.linear("fc", gap, head, num_classes)
        }
        "vgg16_cifar" => {
            let mut h = x;
            let mut c = input[0];
            let (mut n, mut p) = (0, 0);
            for item in VGG16_CFG {
                match item {
                    Some(w) => {
                        n += 1;
                        h = b.conv_bn_relu(&n.to_string(), h, c, w, 3, 1, 1);
                        c = w;
                    }
                    None => {
                        p += 1;
                        h = b.push(&format!("pool{p}"), OpKind::MaxPool { kernel: 2, stride: 2 }, vec![h]);
                    }
                }
            }
            let gap = b.push("gap", OpKind::GlobalAvgPool, vec![h]);
            let f1 = b.linear("fc1", gap, c, 512);
            let f1 = b.bn("bn_fc1", f1, 512);
            let f1 = b.push("relu_fc1", OpKind::Relu, vec![f1]);
            b.linear("fc2", f1, 512, num_classes)
        }
        other => return Err(Error::UnknownArch(other.to_string())),
    };
    Graph::new(arch, b.nodes, out)
}

struct Builder {
    nodes: Vec<Node>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn new(input: [usize; 3], seed: u64) -> Self {
        Builder {
            nodes: vec![Node::new(
                "input",
                OpKind::Input {
                    channels: input[0],
                    height: input[1],
                    width: input[2],
                },
                vec![],
            )],
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn push(&mut self, name: &str, op: OpKind, inputs: Vec<NodeId>) -> NodeId {
        self.nodes.push(Node::new(name, op, inputs));
        self.nodes.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: &str, x: NodeId, cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> NodeId {
        let bound = (6.0 / (cin * k * k) as f32).sqrt();
        let w = Tensor::uniform(&[cout, cin, k, k], -bound, bound, &mut self.rng);
        let op = OpKind::Conv2d {
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            stride,
            padding,
            bias: false,
            groups: 1,
        };
        self.nodes.push(Node::new(name, op, vec![x]).with_param("weight", w));
        self.nodes.len() - 1
    }

    fn bn(&mut self, name: &str, x: NodeId, c: usize) -> NodeId {
        let op = OpKind::BatchNorm {
            channels: c,
            eps: 1e-5,
            momentum: 0.1,
        };
        let node = Node::new(name, op, vec![x])
            .with_param("weight", Tensor::ones(&[c]))
            .with_param("bias", Tensor::zeros(&[c]))
            .with_param("running_mean", Tensor::zeros(&[c]))
            .with_param("running_var", Tensor::ones(&[c]));
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_bn_relu(&mut self, tag: &str, x: NodeId, cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> NodeId {
        let h = self.conv(&format!("conv{tag}"), x, cin, cout, k, stride, padding);
        let h = self.bn(&format!("bn{tag}"), h, cout);
        self.push(&format!("relu{tag}"), OpKind::Relu, vec![h])
    }

    fn linear(&mut self, name: &str, x: NodeId, inp: usize, out: usize) -> NodeId {
        let bound = 1.0 / (inp as f32).sqrt();
        let w = Tensor::uniform(&[out, inp], -bound, bound, &mut self.rng);
        let op = OpKind::Linear {
            in_features: inp,
            out_features: out,
            bias: true,
        };
        let node = Node::new(name, op, vec![x])
            .with_param("weight", w)
            .with_param("bias", Tensor::zeros(&[out]));
        self.nodes.push(node);
        self.nodes.len() - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_arch_builds_and_predicts() {
        for arch in ["vgg_tiny", "res_tiny", "branch_tiny"] {
            let w = default_widths(arch).unwrap();
            let g = build(arch, &w, 10, [1, 12, 12], 3).unwrap();
            let y = g.predict(&Tensor::ones(&[2, 1, 12, 12])).unwrap();
            assert_eq!(y.shape(), &[2, 10]);
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build("vgg_tiny", &[4], 3, [1, 8, 8], 9).unwrap();
        let b = build("vgg_tiny", &[4], 3, [1, 8, 8], 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_arch() {
        assert!(matches!(build("lenet", &[4], 3, [1, 8, 8], 0), Err(Error::UnknownArch(_))));
    }
}
