//! Computation-graph data model.
//!
//! A [`CompGraph`] is an immutable DAG of typed layer nodes connected by
//! tagged edges. Parametric nodes (convolutions, fully-connected,
//! transitions) carry weights and count toward gradient-path length;
//! routing nodes (add, concat, split, ...) are free. Normalization and
//! activation are folded into the parametric nodes and never appear as
//! separate graph nodes.

mod dot;
mod unfold;
mod validate;

pub use dot::to_dot;
pub use unfold::unfold;
pub use validate::{validate, topo_order, ValidationResult, Violation};

use sha2::{Digest, Sha256};

/// Dense node index, assigned in construction order.
pub type NodeId = usize;

/// What a node does. `Conv`, `FullyConnected` and `Transition` are
/// parametric (gradient-path cost 1); everything else is routing (cost 0).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeKind {
    /// Network input feature map.
    Input,
    /// 2-D convolution with square kernel and same-padding.
    Conv { kernel: usize, stride: usize },
    /// Global average pool followed by a linear projection to logits.
    FullyConnected,
    /// 1x1 convolution used to project / truncate gradient flow.
    Transition,
    /// Element-wise n-ary addition; all inputs must have equal width.
    Add,
    /// Addition where the identity-tagged input is gated by a per-channel
    /// binary mask. Input widths may differ; channels outside the mask (or
    /// beyond either operand's width) are treated as blocked. A `MaskedAdd`
    /// with a single identity input is a pure mask gate.
    MaskedAdd { mask: Vec<bool> },
    /// Channel-wise concatenation in inbound-edge order.
    Concat,
    /// Channel split. `ranges` must partition `[0, in_channels)`; an edge
    /// leaving a split selects one range via [`Edge::src_range`].
    Split { ranges: Vec<(usize, usize)> },
    /// Pass-through.
    Identity,
    /// Passes values forward unchanged, blocks gradient backward.
    StopGrad,
    /// Scalar loss sink; exactly one per graph.
    Loss,
}

impl NodeKind {
    pub fn is_parametric(&self) -> bool {
        matches!(
            self,
            NodeKind::Conv { .. } | NodeKind::FullyConnected | NodeKind::Transition
        )
    }

    /// Gradient-path cost of traversing this node.
    pub fn path_cost(&self) -> usize {
        usize::from(self.is_parametric())
    }

    /// Short label used in DOT exports and cost breakdowns.
    pub fn label(&self) -> String {
        match self {
            NodeKind::Input => "input".into(),
            NodeKind::Conv { kernel, stride: 1 } => format!("conv{kernel}x{kernel}"),
            NodeKind::Conv { kernel, stride } => format!("conv{kernel}x{kernel}/{stride}"),
            NodeKind::FullyConnected => "fc".into(),
            NodeKind::Transition => "transition".into(),
            NodeKind::Add => "add".into(),
            NodeKind::MaskedAdd { .. } => "masked_add".into(),
            NodeKind::Concat => "concat".into(),
            NodeKind::Split { .. } => "split".into(),
            NodeKind::Identity => "identity".into(),
            NodeKind::StopGrad => "stop_grad".into(),
            NodeKind::Loss => "loss".into(),
        }
    }
}

/// Role of an edge. Identity and cross-stage edges mark skip connectivity
/// so the unfold transform and stop-gradient insertion can target them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeTag {
    Data,
    Identity,
    CrossStage,
}

impl EdgeTag {
    /// Dashed in DOT output.
    pub fn is_skip(self) -> bool {
        matches!(self, EdgeTag::Identity | EdgeTag::CrossStage)
    }
}

/// Directed edge. `src_range` selects a channel range and is mandatory
/// exactly when `src` is a [`NodeKind::Split`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub src: NodeId,
    pub dst: NodeId,
    pub tag: EdgeTag,
    pub src_range: Option<(usize, usize)>,
}

/// One typed layer in the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub id: NodeId,
    pub kind: NodeKind,
    /// Expected input width per inbound edge, in edge order.
    pub in_channels: Vec<usize>,
    pub out_channels: usize,
    /// Cumulative power-of-two downsampling of this node's output relative
    /// to the network input.
    pub spatial_scale: usize,
    pub stage_id: usize,
}

/// Immutable computation graph. Construct through [`GraphBuilder`] or
/// [`CompGraph::from_parts`]; all analyses are pure functions over it and
/// safe to run concurrently.
#[derive(Debug, Clone)]
pub struct CompGraph {
    nodes: Vec<LayerNode>,
    edges: Vec<Edge>,
    in_edges: Vec<Vec<usize>>,
    out_edges: Vec<Vec<usize>>,
}

impl CompGraph {
    /// Assemble a graph from raw parts without validation. `in_channels`
    /// and scales are taken as given; run [`validate`] to check them.
    pub fn from_parts(nodes: Vec<LayerNode>, edges: Vec<Edge>) -> Self {
        let mut in_edges = vec![Vec::new(); nodes.len()];
        let mut out_edges = vec![Vec::new(); nodes.len()];
        for (i, e) in edges.iter().enumerate() {
            assert!(e.src < nodes.len() && e.dst < nodes.len(), "edge endpoint out of range");
            out_edges[e.src].push(i);
            in_edges[e.dst].push(i);
        }
        CompGraph { nodes, edges, in_edges, out_edges }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &LayerNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Indices into `edges()` of inbound edges, in insertion order.
    /// Concat offsets and n-ary add operands follow this order.
    pub fn in_edge_ids(&self, id: NodeId) -> &[usize] {
        &self.in_edges[id]
    }

    pub fn out_edge_ids(&self, id: NodeId) -> &[usize] {
        &self.out_edges[id]
    }

    pub fn in_edges(&self, id: NodeId) -> impl Iterator<Item = &Edge> {
        self.in_edges[id].iter().map(move |&i| &self.edges[i])
    }

    pub fn out_edges(&self, id: NodeId) -> impl Iterator<Item = &Edge> {
        self.out_edges[id].iter().map(move |&i| &self.edges[i])
    }

    pub fn input_id(&self) -> Option<NodeId> {
        self.nodes.iter().find(|n| n.kind == NodeKind::Input).map(|n| n.id)
    }

    pub fn loss_id(&self) -> Option<NodeId> {
        self.nodes.iter().find(|n| n.kind == NodeKind::Loss).map(|n| n.id)
    }

    pub fn parametric_ids(&self) -> Vec<NodeId> {
        self.nodes.iter().filter(|n| n.kind.is_parametric()).map(|n| n.id).collect()
    }

    /// Effective width carried by an edge (split range width when the
    /// source is a split, otherwise the source's full output width).
    pub fn edge_width(&self, edge: &Edge) -> usize {
        match edge.src_range {
            Some((lo, hi)) => hi.saturating_sub(lo),
            None => self.nodes[edge.src].out_channels,
        }
    }

    /// Content hash invariant under node renumbering. Nodes are relabeled
    /// by deterministic topological position and an all-ones masked add is
    /// normalized to a plain add before hashing.
    pub fn canonical_hash(&self) -> String {
        let order = topo_order(self).unwrap_or_else(|_| (0..self.nodes.len()).collect());
        let mut pos = vec![0usize; self.nodes.len()];
        for (p, &id) in order.iter().enumerate() {
            pos[id] = p;
        }
        let mut h = Sha256::new();
        for &id in &order {
            let n = &self.nodes[id];
            let kind = match &n.kind {
                NodeKind::MaskedAdd { mask } if mask.iter().all(|&b| b) => "add".to_string(),
                NodeKind::MaskedAdd { mask } => {
                    let bits: String = mask.iter().map(|&b| if b { '1' } else { '0' }).collect();
                    format!("masked_add:{bits}")
                }
                NodeKind::Split { ranges } => format!("split:{ranges:?}"),
                k => k.label(),
            };
            h.update(
                format!(
                    "n|{kind}|{:?}|{}|{}|{};",
                    n.in_channels, n.out_channels, n.spatial_scale, n.stage_id
                )
                .as_bytes(),
            );
        }
        let mut edge_keys: Vec<String> = self
            .edges
            .iter()
            .map(|e| format!("e|{}|{}|{:?}|{:?};", pos[e.src], pos[e.dst], e.tag, e.src_range))
            .collect();
        edge_keys.sort();
        for k in edge_keys {
            h.update(k.as_bytes());
        }
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Errors raised while assembling a graph with [`GraphBuilder`].
#[derive(Debug, thiserror::Error)]
pub enum BuildError {
    #[error("graph has a cycle; cannot propagate channel widths")]
    Cyclic,
    #[error("edge references unknown node {0}")]
    UnknownNode(NodeId),
    #[error("split node {node} has no range index {index}")]
    BadSplitRange { node: NodeId, index: usize },
    #[error("node {0} produces zero channels")]
    ZeroChannels(NodeId),
}

/// Incremental graph constructor. Nodes get dense ids in insertion order;
/// input widths and spatial scales are derived from the wiring at
/// [`GraphBuilder::finish`].
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<(NodeKind, usize, usize)>, // kind, out_channels, stage_id
    edges: Vec<Edge>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, kind: NodeKind, out_channels: usize, stage_id: usize) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push((kind, out_channels, stage_id));
        id
    }

    pub fn edge(&mut self, src: NodeId, dst: NodeId, tag: EdgeTag) {
        self.edges.push(Edge { src, dst, tag, src_range: None });
    }

    /// Wire one range of a split node to a consumer.
    pub fn edge_range(&mut self, split: NodeId, range_index: usize, dst: NodeId, tag: EdgeTag) {
        self.edges.push(Edge {
            src: split,
            dst,
            tag,
            // the placeholder is resolved against the split's ranges in finish()
            src_range: Some((range_index, usize::MAX)),
        });
    }

    /// Convenience: push a node already wired to `srcs` via data edges.
    pub fn chain(&mut self, kind: NodeKind, out_channels: usize, stage_id: usize, srcs: &[NodeId]) -> NodeId {
        let id = self.push(kind, out_channels, stage_id);
        for &s in srcs {
            self.edge(s, id, EdgeTag::Data);
        }
        id
    }

    pub fn out_channels(&self, id: NodeId) -> usize {
        self.nodes[id].1
    }

    pub fn finish(self) -> Result<CompGraph, BuildError> {
        let n = self.nodes.len();
        let mut edges = self.edges;
        for e in &mut edges {
            if e.src >= n {
                return Err(BuildError::UnknownNode(e.src));
            }
            if e.dst >= n {
                return Err(BuildError::UnknownNode(e.dst));
            }
            if let Some((idx, sentinel)) = e.src_range {
                if sentinel == usize::MAX {
                    match &self.nodes[e.src].0 {
                        NodeKind::Split { ranges } => {
                            let &(lo, hi) = ranges
                                .get(idx)
                                .ok_or(BuildError::BadSplitRange { node: e.src, index: idx })?;
                            e.src_range = Some((lo, hi));
                        }
                        _ => return Err(BuildError::BadSplitRange { node: e.src, index: idx }),
                    }
                }
            }
        }
        let nodes: Vec<LayerNode> = self
            .nodes
            .into_iter()
            .enumerate()
            .map(|(id, (kind, out_channels, stage_id))| LayerNode {
                id,
                kind,
                in_channels: Vec::new(),
                out_channels,
                spatial_scale: 1,
                stage_id,
            })
            .collect();
        repropagate(nodes, edges)
    }
}

/// Rederive per-edge input widths, routing output widths, and spatial
/// scales from the wiring. Parametric output widths and masks are kept as
/// given. Used by the builder and by graph transforms after surgery.
pub fn repropagate(mut nodes: Vec<LayerNode>, edges: Vec<Edge>) -> Result<CompGraph, BuildError> {
    let n = nodes.len();
    let mut in_list = vec![Vec::new(); n];
    let mut out_list = vec![Vec::new(); n];
    let mut indeg = vec![0usize; n];
    for (i, e) in edges.iter().enumerate() {
        if e.src >= n {
            return Err(BuildError::UnknownNode(e.src));
        }
        if e.dst >= n {
            return Err(BuildError::UnknownNode(e.dst));
        }
        in_list[e.dst].push(i);
        out_list[e.src].push(i);
        indeg[e.dst] += 1;
    }
    let mut ready: std::collections::BinaryHeap<std::cmp::Reverse<NodeId>> = (0..n)
        .filter(|&i| indeg[i] == 0)
        .map(std::cmp::Reverse)
        .collect();
    let mut order = Vec::with_capacity(n);
    while let Some(std::cmp::Reverse(v)) = ready.pop() {
        order.push(v);
        for &ei in &out_list[v] {
            let d = edges[ei].dst;
            indeg[d] -= 1;
            if indeg[d] == 0 {
                ready.push(std::cmp::Reverse(d));
            }
        }
    }
    if order.len() != n {
        return Err(BuildError::Cyclic);
    }

    for &id in &order {
        let ins: Vec<usize> = in_list[id].clone();
        let mut widths = Vec::with_capacity(ins.len());
        let mut scale = 1usize;
        for &ei in &ins {
            let e = edges[ei];
            let w = match e.src_range {
                Some((lo, hi)) => hi - lo,
                None => nodes[e.src].out_channels,
            };
            widths.push(w);
            scale = nodes[e.src].spatial_scale;
        }
        nodes[id].in_channels = widths;
        let derived_out = match &nodes[id].kind {
            NodeKind::Split { .. } | NodeKind::Identity | NodeKind::StopGrad => {
                nodes[id].in_channels.first().copied()
            }
            NodeKind::Concat => Some(nodes[id].in_channels.iter().sum()),
            NodeKind::Add => nodes[id].in_channels.first().copied(),
            // width follows the block side; a pure mask gate keeps the
            // width given at construction
            NodeKind::MaskedAdd { .. } => ins
                .iter()
                .find(|&&ei| edges[ei].tag != EdgeTag::Identity)
                .map(|&ei| match edges[ei].src_range {
                    Some((lo, hi)) => hi - lo,
                    None => nodes[edges[ei].src].out_channels,
                }),
            NodeKind::Loss => Some(1),
            _ => None,
        };
        if let Some(w) = derived_out {
            nodes[id].out_channels = w;
        }
        nodes[id].spatial_scale = match &nodes[id].kind {
            NodeKind::Input => 1,
            NodeKind::Conv { stride, .. } => scale * stride,
            _ => scale,
        };
        if nodes[id].kind.is_parametric() && nodes[id].out_channels == 0 {
            return Err(BuildError::ZeroChannels(id));
        }
    }

    Ok(CompGraph::from_parts(nodes, edges))
}
