#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use autobot_core::checkpoint::Checkpoint;
use autobot_core::data::{load_dataset, Dataset, DatasetKind, Split};
use autobot_core::graph::{zoo, Graph, Node, NodeId, OpKind};
use autobot_core::train::{pretrain, SgdConfig};
use autobot_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

pub fn mnist() -> &'static (Dataset, Dataset) {
    static DATA: OnceLock<(Dataset, Dataset)> = OnceLock::new();
    DATA.get_or_init(|| {
        let dir = mnist_dir();
        (
            load_dataset(DatasetKind::Mnist, &dir, Split::Train, 0).unwrap(),
            load_dataset(DatasetKind::Mnist, &dir, Split::Test, 0).unwrap(),
        )
    })
}

/// vgg_tiny trained for 3 epochs on MNIST, cached across test binaries.
pub fn pretrained_vgg() -> &'static Graph {
    static MODEL: OnceLock<Graph> = OnceLock::new();
    MODEL.get_or_init(|| {
        let path = Path::new(env!("CARGO_TARGET_TMPDIR")).join("vgg_tiny_mnist_3ep.abot");
        if let Ok(ck) = Checkpoint::load(&path) {
            return ck.graph;
        }
        let (train, test) = mnist();
        let mut g = zoo::build("vgg_tiny", &zoo::default_widths("vgg_tiny").unwrap(), 10, [1, 28, 28], 0).unwrap();
        let cfg = SgdConfig {
            epochs: 3,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            seed: 0,
        };
        pretrain(&mut g, train, test, &cfg).unwrap();
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        Checkpoint::new(g.clone()).save(&tmp).unwrap();
        std::fs::rename(&tmp, &path).unwrap();
        g
    })
}

pub fn random_mask(rng: &mut impl Rng, counts: &[usize], p: f64) -> Vec<Vec<bool>> {
    counts
        .iter()
        .map(|&c| {
            let mut k: Vec<bool> = (0..c).map(|_| rng.gen_bool(p)).collect();
            if !k.contains(&true) {
                k[rng.gen_range(0..c)] = true;
            }
            k
        })
        .collect()
}

/// Small graph builder tracking channels and spatial side per node.
pub struct Net {
    nodes: Vec<Node>,
    dims: Vec<(usize, usize)>,
    rng: ChaCha8Rng,
}

impl Net {
    pub fn new(channels: usize, side: usize, seed: u64) -> Self {
        let input = Node::new(
            "input",
            OpKind::Input {
                channels,
                height: side,
                width: side,
            },
            vec![],
        );
        Net {
            nodes: vec![input],
            dims: vec![(channels, side)],
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn channels(&self, x: NodeId) -> usize {
        self.dims[x].0
    }

    pub fn side(&self, x: NodeId) -> usize {
        self.dims[x].1
    }

    fn push(&mut self, node: Node, dims: (usize, usize)) -> NodeId {
        self.nodes.push(node);
        self.dims.push(dims);
        self.nodes.len() - 1
    }

    fn name(&self, tag: &str) -> String {
        format!("{tag}{}", self.nodes.len())
    }

    pub fn conv(&mut self, x: NodeId, out: usize, k: usize, stride: usize, padding: usize) -> NodeId {
        let (cin, side) = self.dims[x];
        let w = Tensor::uniform(&[out, cin, k, k], -0.5, 0.5, &mut self.rng);
        let b = Tensor::uniform(&[out], -0.1, 0.1, &mut self.rng);
        let op = OpKind::Conv2d {
            in_channels: cin,
            out_channels: out,
            kernel: k,
            stride,
            padding,
            bias: true,
            groups: 1,
        };
        let node = Node::new(self.name("conv"), op, vec![x]).with_param("weight", w).with_param("bias", b);
        self.push(node, (out, (side + 2 * padding - k) / stride + 1))
    }

    pub fn bn(&mut self, x: NodeId) -> NodeId {
        let d = self.dims[x];
        let c = d.0;
        let op = OpKind::BatchNorm {
            channels: c,
            eps: 1e-5,
            momentum: 0.1,
        };
        let node = Node::new(self.name("bn"), op, vec![x])
            .with_param("weight", Tensor::uniform(&[c], 0.5, 1.5, &mut self.rng))
            .with_param("bias", Tensor::uniform(&[c], -0.2, 0.2, &mut self.rng))
            .with_param("running_mean", Tensor::uniform(&[c], -0.3, 0.3, &mut self.rng))
            .with_param("running_var", Tensor::uniform(&[c], 0.5, 2.0, &mut self.rng));
        self.push(node, d)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let d = self.dims[x];
        self.push(Node::new(self.name("relu"), OpKind::Relu, vec![x]), d)
    }

    pub fn pool(&mut self, x: NodeId) -> NodeId {
        let (c, s) = self.dims[x];
        let op = OpKind::MaxPool { kernel: 2, stride: 2 };
        self.push(Node::new(self.name("pool"), op, vec![x]), (c, s / 2))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.dims[a];
        self.push(Node::new(self.name("add"), OpKind::Add, vec![a, b]), d)
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> NodeId {
        let c = xs.iter().map(|&x| self.dims[x].0).sum();
        let s = self.dims[xs[0]].1;
        self.push(Node::new(self.name("cat"), OpKind::Concat, xs.to_vec()), (c, s))
    }

    pub fn cbr(&mut self, x: NodeId, out: usize) -> NodeId {
        let h = self.conv(x, out, 3, 1, 1);
        let h = self.bn(h);
        self.relu(h)
    }

    /// Global pool and a linear classifier.
    pub fn finish(mut self, x: NodeId, classes: usize) -> autobot_core::Result<Graph> {
        let c = self.dims[x].0;
        let gap = self.push(Node::new("gap", OpKind::GlobalAvgPool, vec![x]), (c, 1));
        let w = Tensor::uniform(&[classes, c], -0.5, 0.5, &mut self.rng);
        let b = Tensor::uniform(&[classes], -0.1, 0.1, &mut self.rng);
        let op = OpKind::Linear {
            in_features: c,
            out_features: classes,
            bias: true,
        };
        let fc = self.push(Node::new("fc", op, vec![gap]).with_param("weight", w).with_param("bias", b), (classes, 1));
        Graph::new("custom", self.nodes, fc)
    }
}
