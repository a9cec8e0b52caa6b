//! Pruning groups: sets of output channels that must be kept or removed
//! together, and where their gates have to sit.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::Serialize;

use super::{Graph, NodeId, OpKind};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum ChannelSource {
    /// All channels of pruning group `i` (0-based), in order.
    Group(usize),
    /// Channels that are never pruned (input image, linear outputs).
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Segment {
    pub source: ChannelSource,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PruningGroup {
    /// 1-based index used in masks, checkpoints and reports.
    pub index: usize,
    pub channels: usize,
    /// Convolutions producing these channels.
    pub members: Vec<NodeId>,
    /// Convolutions and linear layers reading these channels.
    pub consumers: Vec<NodeId>,
    /// Nodes after which the group's gate is applied.
    pub sites: Vec<NodeId>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupAnalysis {
    pub groups: Vec<PruningGroup>,
    layouts: Vec<Vec<Segment>>,
}

impl GroupAnalysis {
    /// Channel layout of node `id`'s output.
    pub fn layout(&self, id: NodeId) -> &[Segment] {
        &self.layouts[id]
    }

    pub fn channel_counts(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.channels).collect()
    }

    /// Output channel indices of `id` that survive `keep`.
    pub fn kept_channels(&self, id: NodeId, keep: &[Vec<bool>]) -> Vec<usize> {
        let mut out = Vec::new();
        let mut offset = 0;
        for seg in &self.layouts[id] {
            match seg.source {
                ChannelSource::Fixed => out.extend(offset..offset + seg.len),
                ChannelSource::Group(g) => {
                    out.extend(keep[g].iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| offset + i))
                }
            }
            offset += seg.len;
        }
        out
    }

    /// Groups contributing to node `id`'s output, with multiplicity.
    pub fn groups_in(&self, id: NodeId) -> impl Iterator<Item = usize> + '_ {
        self.layouts[id].iter().filter_map(|s| match s.source {
            ChannelSource::Group(g) => Some(g),
            ChannelSource::Fixed => None,
        })
    }

    pub fn fixed_channels(&self, id: NodeId) -> usize {
        self.layouts[id]
            .iter()
            .filter(|s| s.source == ChannelSource::Fixed)
            .map(|s| s.len)
            .sum()
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn add(&mut self) -> usize {
        self.0.push(self.0.len());
        self.0.len() - 1
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (a, b) = (self.find(a), self.find(b));
        if a != b {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            self.0[hi] = lo;
        }
    }
}

fn ambiguous(g: &Graph, id: NodeId, detail: impl Into<String>) -> Error {
    Error::AmbiguousChannels {
        node: g.node(id).name.clone(),
        detail: detail.into(),
    }
}

/// Partitions prunable output channels into groups: convolutions merged by
/// an elementwise add share a group, concat keeps its inputs' groups
/// side by side, and classifier outputs are never pruned.
pub fn identify_groups(g: &Graph) -> Result<GroupAnalysis> {
    let mut uf = UnionFind(Vec::new());
    let mut raw: Vec<Vec<Segment>> = Vec::with_capacity(g.nodes().len());
    let mut producer: Vec<NodeId> = Vec::new();

    for (id, node) in g.nodes().iter().enumerate() {
        let layout = match &node.op {
            OpKind::Input { channels, .. } => vec![Segment {
                source: ChannelSource::Fixed,
                len: *channels,
            }],
            OpKind::Conv2d {
                out_channels, groups, ..
            } => {
                if *groups != 1 {
                    return Err(ambiguous(g, id, "grouped convolutions are not supported"));
                }
                producer.push(id);
                vec![Segment {
                    source: ChannelSource::Group(uf.add()),
                    len: *out_channels,
                }]
            }
            OpKind::Linear { out_features, .. } => vec![Segment {
                source: ChannelSource::Fixed,
                len: *out_features,
            }],
            OpKind::BatchNorm { .. }
            | OpKind::Relu
            | OpKind::MaxPool { .. }
            | OpKind::GlobalAvgPool
            | OpKind::Bottleneck { .. } => raw[node.inputs[0]].clone(),
            OpKind::Concat => node.inputs.iter().flat_map(|&i| raw[i].iter().copied()).collect(),
            OpKind::Add => {
                let (a, b) = (&raw[node.inputs[0]], &raw[node.inputs[1]]);
                if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.len != y.len) {
                    return Err(ambiguous(g, id, "add operands have misaligned channel groups"));
                }
                let mut out = Vec::with_capacity(a.len());
                for (x, y) in a.iter().zip(b) {
                    let source = match (x.source, y.source) {
                        (ChannelSource::Group(p), ChannelSource::Group(q)) => {
                            uf.union(p, q);
                            ChannelSource::Group(p)
                        }
                        (ChannelSource::Fixed, ChannelSource::Fixed) => ChannelSource::Fixed,
                        _ => return Err(ambiguous(g, id, "add mixes prunable and unprunable channels")),
                    };
                    out.push(Segment { source, len: x.len });
                }
                out
            }
        };
        raw.push(layout);
    }

    // Dense 0-based ids in order of each group's first producing conv.
    let mut dense: HashMap<usize, usize> = HashMap::new();
    let mut groups: Vec<PruningGroup> = Vec::new();
    for (raw_id, &conv) in producer.iter().enumerate() {
        let root = uf.find(raw_id);
        let next = dense.len();
        let gi = *dense.entry(root).or_insert(next);
        if gi == groups.len() {
            groups.push(PruningGroup {
                index: gi + 1,
                channels: raw[conv][0].len,
                members: Vec::new(),
                consumers: Vec::new(),
                sites: Vec::new(),
            });
        }
        groups[gi].members.push(conv);
    }
    let layouts: Vec<Vec<Segment>> = raw
        .into_iter()
        .map(|l| {
            l.into_iter()
                .map(|s| match s.source {
                    ChannelSource::Group(r) => Segment {
                        source: ChannelSource::Group(dense[&uf.find(r)]),
                        len: s.len,
                    },
                    ChannelSource::Fixed => s,
                })
                .collect()
        })
        .collect();

    let mut analysis = GroupAnalysis { groups, layouts };
    for (id, node) in g.nodes().iter().enumerate() {
        if matches!(node.op, OpKind::Conv2d { .. } | OpKind::Linear { .. }) {
            let set: BTreeSet<usize> = analysis.groups_in(node.inputs[0]).collect();
            for gi in set {
                analysis.groups[gi].consumers.push(id);
            }
        }
    }
    place_gates(g, &mut analysis)?;
    Ok(analysis)
}

/// Groups whose channels in node output are already multiplied by their gate.
fn gated_sets(g: &Graph, a: &GroupAnalysis, sites: &BTreeSet<(NodeId, usize)>) -> Vec<BTreeSet<usize>> {
    let mut gated: Vec<BTreeSet<usize>> = Vec::with_capacity(g.nodes().len());
    for (id, node) in g.nodes().iter().enumerate() {
        let mut set = match &node.op {
            // Zero-preserving, channel-preserving ops keep a gated zero at zero.
            OpKind::Relu | OpKind::MaxPool { .. } | OpKind::GlobalAvgPool => gated[node.inputs[0]].clone(),
            OpKind::Bottleneck { group } => {
                let mut s = gated[node.inputs[0]].clone();
                s.insert(group - 1);
                s
            }
            OpKind::Concat | OpKind::Add => a
                .groups_in(id)
                .filter(|gi| {
                    node.inputs
                        .iter()
                        .filter(|&&i| a.groups_in(i).any(|x| x == *gi))
                        .all(|&i| gated[i].contains(gi))
                })
                .collect(),
            _ => BTreeSet::new(),
        };
        set.extend(sites.range((id, 0)..(id + 1, 0)).map(|&(_, gi)| gi));
        gated.push(set);
    }
    gated
}

/// Nodes to gate so that `id`'s output reads as gated for group `gi`.
fn gate_points(g: &Graph, a: &GroupAnalysis, gated: &[BTreeSet<usize>], id: NodeId, gi: usize) -> Result<Vec<NodeId>> {
    let layout = a.layout(id);
    if layout.len() == 1 && layout[0].source == ChannelSource::Group(gi) {
        return Ok(vec![id]);
    }
    let node = g.node(id);
    match node.op {
        OpKind::Relu | OpKind::MaxPool { .. } | OpKind::GlobalAvgPool | OpKind::Bottleneck { .. } => {
            gate_points(g, a, gated, node.inputs[0], gi)
        }
        OpKind::Concat | OpKind::Add => {
            let mut out = Vec::new();
            for &i in &node.inputs {
                if a.groups_in(i).any(|x| x == gi) && !gated[i].contains(&gi) {
                    out.extend(gate_points(g, a, gated, i, gi)?);
                }
            }
            Ok(out)
        }
        _ => Err(ambiguous(
            g,
            id,
            format!("{} mixes several channel groups, so group {} cannot be gated", node.op.name(), gi + 1),
        )),
    }
}

/// Chooses gate sites so every convolution and linear layer reads gated
/// values for each prunable input channel. One site per group suffices for
/// plain chains; identity shortcuts need the same gate at more than one
/// place.
fn place_gates(g: &Graph, a: &mut GroupAnalysis) -> Result<()> {
    let mut sites: BTreeSet<(NodeId, usize)> = BTreeSet::new();
    loop {
        let gated = gated_sets(g, a, &sites);
        let violation = g.nodes().iter().find_map(|node| {
            if !matches!(node.op, OpKind::Conv2d { .. } | OpKind::Linear { .. }) {
                return None;
            }
            let u = node.inputs[0];
            a.groups_in(u).find(|gi| !gated[u].contains(gi)).map(|gi| (u, gi))
        });
        let Some((u, gi)) = violation else { break };
        let points = gate_points(g, a, &gated, u, gi)?;
        let before = sites.len();
        sites.extend(points.into_iter().map(|p| (p, gi)));
        if sites.len() == before {
            return Err(ambiguous(g, u, format!("group {} cannot be gated", gi + 1)));
        }
    }
    for (node, gi) in sites {
        a.groups[gi].sites.push(node);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupViolation {
    pub node: String,
    pub channel: usize,
    pub detail: String,
}

impl fmt::Display for GroupViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} channel {}: {}", self.node, self.channel, self.detail)
    }
}

#[derive(Clone, Default)]
struct ChannelSym {
    syms: Vec<usize>,
    fixed: bool,
}

/// Re-derives coupling channel by channel with symbolic ids and checks it
/// against `analysis`. Returns every violation found.
pub fn validate_groups(g: &Graph, analysis: &GroupAnalysis) -> Vec<GroupViolation> {
    let mut violations = Vec::new();
    let mut owner: Vec<(NodeId, usize)> = Vec::new();
    let mut vals: Vec<Vec<ChannelSym>> = Vec::with_capacity(g.nodes().len());

    for node in g.nodes() {
        let v: Vec<ChannelSym> = match &node.op {
            OpKind::Input { channels, .. } => vec![ChannelSym { syms: vec![], fixed: true }; *channels],
            OpKind::Linear { out_features, .. } => vec![ChannelSym { syms: vec![], fixed: true }; *out_features],
            OpKind::Conv2d { out_channels, .. } => (0..*out_channels)
                .map(|c| {
                    owner.push((vals.len(), c));
                    ChannelSym {
                        syms: vec![owner.len() - 1],
                        fixed: false,
                    }
                })
                .collect(),
            OpKind::Concat => node.inputs.iter().flat_map(|&i| vals[i].iter().cloned()).collect(),
            OpKind::Add => vals[node.inputs[0]]
                .iter()
                .zip(&vals[node.inputs[1]])
                .map(|(a, b)| {
                    let mut syms = a.syms.clone();
                    syms.extend(&b.syms);
                    syms.sort_unstable();
                    syms.dedup();
                    ChannelSym {
                        syms,
                        fixed: a.fixed || b.fixed,
                    }
                })
                .collect(),
            _ => vals[node.inputs[0]].clone(),
        };
        vals.push(v);
    }

    let mut uf = UnionFind((0..owner.len()).collect());
    for (id, v) in vals.iter().enumerate() {
        for (c, ch) in v.iter().enumerate() {
            if ch.fixed && !ch.syms.is_empty() {
                violations.push(GroupViolation {
                    node: g.node(id).name.clone(),
                    channel: c,
                    detail: "prunable channel summed with an unprunable one".into(),
                });
            }
            for w in ch.syms.windows(2) {
                uf.union(w[0], w[1]);
            }
        }
    }

    // Where the analysis puts each conv output channel.
    let mut assigned: HashMap<NodeId, Vec<usize>> = HashMap::new();
    for (gi, grp) in analysis.groups.iter().enumerate() {
        for &m in &grp.members {
            assigned.entry(m).or_default().push(gi);
        }
    }
    let mut place: Vec<Option<(usize, usize)>> = vec![None; owner.len()];
    for (s, &(conv, c)) in owner.iter().enumerate() {
        let name = &g.node(conv).name;
        match assigned.get(&conv).map(Vec::as_slice) {
            None | Some([]) => violations.push(GroupViolation {
                node: name.clone(),
                channel: c,
                detail: "channel belongs to no group".into(),
            }),
            Some([gi]) => {
                if analysis.groups[*gi].channels != g.shape(conv)[0] {
                    violations.push(GroupViolation {
                        node: name.clone(),
                        channel: c,
                        detail: format!("group {} has a different channel count", gi + 1),
                    });
                } else {
                    place[s] = Some((*gi, c));
                }
            }
            Some(many) => violations.push(GroupViolation {
                node: name.clone(),
                channel: c,
                detail: format!("channel belongs to {} groups", many.len()),
            }),
        }
    }

    // Coupled channels must land on one (group, position), and each
    // (group, position) must be a single coupling class.
    let mut class_place: HashMap<usize, (usize, usize)> = HashMap::new();
    let mut place_class: HashMap<(usize, usize), usize> = HashMap::new();
    for s in 0..owner.len() {
        let Some(p) = place[s] else { continue };
        let root = uf.find(s);
        let (conv, c) = owner[s];
        let mut report = |detail: &str| {
            violations.push(GroupViolation {
                node: g.node(conv).name.clone(),
                channel: c,
                detail: detail.into(),
            })
        };
        match class_place.insert(root, p) {
            Some(prev) if prev != p => report("coupled channels are split across groups"),
            _ => {}
        }
        match place_class.insert(p, root) {
            Some(prev) if prev != root => report("group merges channels that are not coupled"),
            _ => {}
        }
    }
    violations
}
