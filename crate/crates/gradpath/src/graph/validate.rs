//! Structural validation and deterministic topological ordering.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::{CompGraph, EdgeTag, NodeId, NodeKind};

/// A single well-formedness violation. Violations are data, not failures:
/// [`validate`] collects all of them instead of stopping at the first.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Violation {
    #[error("cycle through node {0}")]
    Cycle(NodeId),
    #[error("expected exactly one input node, found {0}")]
    InputCount(usize),
    #[error("expected exactly one loss node, found {0}")]
    LossCount(usize),
    #[error("node {0} is not reachable from the input")]
    UnreachableFromInput(NodeId),
    #[error("loss is not reachable from node {0}")]
    LossUnreachable(NodeId),
    #[error("channel mismatch at {kind} node {node}: edge {edge_index} carries {got}, node expects {expected}")]
    ChannelMismatch { node: NodeId, kind: String, edge_index: usize, got: usize, expected: usize },
    #[error("add node {node} joins inputs of different widths {widths:?}")]
    AddWidthMismatch { node: NodeId, widths: Vec<usize> },
    #[error("masked add node {node} mask length {mask_len} != identity input width {identity_width}")]
    MaskLength { node: NodeId, mask_len: usize, identity_width: usize },
    #[error("masked add node {node} needs exactly one identity-tagged input, found {found}")]
    MaskedAddIdentityArity { node: NodeId, found: usize },
    #[error("split node {node} range {index} ({lo}..{hi}) has no consumer edge")]
    DanglingSplitRange { node: NodeId, index: usize, lo: usize, hi: usize },
    #[error("split node {node} ranges {ranges:?} do not partition 0..{width}")]
    SplitRanges { node: NodeId, ranges: Vec<(usize, usize)>, width: usize },
    #[error("edge from split node {node} selects invalid range {range:?}")]
    BadSplitEdge { node: NodeId, range: Option<(usize, usize)> },
    #[error("node {node} ({kind}) has {found} inbound edges, expected {expected}")]
    InArity { node: NodeId, kind: String, found: usize, expected: String },
    #[error("parametric node {0} has zero output channels")]
    ZeroChannels(NodeId),
    #[error("node {node} in_channels list has {found} entries for {edges} inbound edges")]
    InChannelsArity { node: NodeId, found: usize, edges: usize },
    #[error("spatial scale mismatch at node {node}: recorded {recorded}, derived {derived}")]
    ScaleMismatch { node: NodeId, recorded: usize, derived: usize },
}

/// Outcome of [`validate`].
#[derive(Debug, Clone, Default)]
pub struct ValidationResult {
    pub violations: Vec<Violation>,
}

impl ValidationResult {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Deterministic topological order: Kahn's algorithm with ties broken by
/// ascending node id. Errors on cyclic graphs, naming one node on a cycle.
pub fn topo_order(g: &CompGraph) -> Result<Vec<NodeId>, Violation> {
    let n = g.len();
    let mut indeg: Vec<usize> = (0..n).map(|i| g.in_edge_ids(i).len()).collect();
    let mut heap: BinaryHeap<Reverse<NodeId>> =
        (0..n).filter(|&i| indeg[i] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(v)) = heap.pop() {
        order.push(v);
        for e in g.out_edges(v) {
            indeg[e.dst] -= 1;
            if indeg[e.dst] == 0 {
                heap.push(Reverse(e.dst));
            }
        }
    }
    if order.len() != n {
        let stuck = (0..n).find(|&i| indeg[i] > 0).unwrap_or(0);
        return Err(Violation::Cycle(stuck));
    }
    Ok(order)
}

/// Check every structural invariant of the graph and report all
/// violations found.
pub fn validate(g: &CompGraph) -> ValidationResult {
    let mut v = Vec::new();

    let inputs = g.nodes().iter().filter(|n| n.kind == NodeKind::Input).count();
    if inputs != 1 {
        v.push(Violation::InputCount(inputs));
    }
    let losses = g.nodes().iter().filter(|n| n.kind == NodeKind::Loss).count();
    if losses != 1 {
        v.push(Violation::LossCount(losses));
    }

    let order = match topo_order(g) {
        Ok(o) => Some(o),
        Err(c) => {
            v.push(c);
            None
        }
    };

    for node in g.nodes() {
        let id = node.id;
        let ins = g.in_edge_ids(id);

        if node.in_channels.len() != ins.len() {
            v.push(Violation::InChannelsArity {
                node: id,
                found: node.in_channels.len(),
                edges: ins.len(),
            });
            continue;
        }

        // Arity per kind.
        let expected: Option<(usize, &str)> = match &node.kind {
            NodeKind::Input => Some((0, "0")),
            NodeKind::Conv { .. }
            | NodeKind::FullyConnected
            | NodeKind::Transition
            | NodeKind::Identity
            | NodeKind::StopGrad
            | NodeKind::Split { .. }
            | NodeKind::Loss => Some((1, "1")),
            NodeKind::Add | NodeKind::Concat => {
                if ins.len() < 2 {
                    v.push(Violation::InArity {
                        node: id,
                        kind: node.kind.label(),
                        found: ins.len(),
                        expected: ">= 2".into(),
                    });
                }
                None
            }
            NodeKind::MaskedAdd { .. } => {
                if ins.is_empty() {
                    v.push(Violation::InArity {
                        node: id,
                        kind: node.kind.label(),
                        found: 0,
                        expected: ">= 1".into(),
                    });
                }
                None
            }
        };
        if let Some((n_expect, text)) = expected {
            if ins.len() != n_expect {
                v.push(Violation::InArity {
                    node: id,
                    kind: node.kind.label(),
                    found: ins.len(),
                    expected: text.into(),
                });
            }
        }

        if node.kind.is_parametric() && node.out_channels == 0 {
            v.push(Violation::ZeroChannels(id));
        }

        // Edge widths must agree with the recorded per-edge input widths.
        for (slot, &ei) in ins.iter().enumerate() {
            let e = &g.edges()[ei];
            let got = g.edge_width(e);
            let expected = node.in_channels[slot];
            if got != expected {
                v.push(Violation::ChannelMismatch {
                    node: id,
                    kind: node.kind.label(),
                    edge_index: slot,
                    got,
                    expected,
                });
            }
            // src_range is only meaningful out of a split and then mandatory.
            let src_is_split = matches!(g.node(e.src).kind, NodeKind::Split { .. });
            match (src_is_split, e.src_range) {
                (true, Some(r)) => {
                    if let NodeKind::Split { ranges } = &g.node(e.src).kind {
                        if !ranges.contains(&r) {
                            v.push(Violation::BadSplitEdge { node: e.src, range: Some(r) });
                        }
                    }
                }
                (true, None) => v.push(Violation::BadSplitEdge { node: e.src, range: None }),
                (false, Some(r)) => v.push(Violation::BadSplitEdge { node: e.src, range: Some(r) }),
                (false, None) => {}
            }
        }

        match &node.kind {
            NodeKind::Add => {
                if !node.in_channels.is_empty()
                    && node.in_channels.iter().any(|&w| w != node.in_channels[0])
                {
                    v.push(Violation::AddWidthMismatch { node: id, widths: node.in_channels.clone() });
                }
            }
            NodeKind::MaskedAdd { mask } => {
                let identity_slots: Vec<usize> = ins
                    .iter()
                    .enumerate()
                    .filter(|(_, &ei)| g.edges()[ei].tag == EdgeTag::Identity)
                    .map(|(slot, _)| slot)
                    .collect();
                if identity_slots.len() != 1 {
                    v.push(Violation::MaskedAddIdentityArity { node: id, found: identity_slots.len() });
                } else {
                    let identity_width = node.in_channels[identity_slots[0]];
                    if mask.len() != identity_width {
                        v.push(Violation::MaskLength {
                            node: id,
                            mask_len: mask.len(),
                            identity_width,
                        });
                    }
                }
            }
            NodeKind::Split { ranges } => {
                let width = node.in_channels.first().copied().unwrap_or(0);
                let mut sorted = ranges.clone();
                sorted.sort();
                let contiguous = !sorted.is_empty()
                    && sorted.first().map(|r| r.0) == Some(0)
                    && sorted.last().map(|r| r.1) == Some(width)
                    && sorted.windows(2).all(|w| w[0].1 == w[1].0)
                    && sorted.iter().all(|&(lo, hi)| lo < hi);
                if !contiguous {
                    v.push(Violation::SplitRanges { node: id, ranges: ranges.clone(), width });
                }
                for (index, &(lo, hi)) in ranges.iter().enumerate() {
                    let consumed = g.out_edges(id).any(|e| e.src_range == Some((lo, hi)));
                    if !consumed {
                        v.push(Violation::DanglingSplitRange { node: id, index, lo, hi });
                    }
                }
            }
            _ => {}
        }
    }

    // Reachability and scale propagation need an acyclic graph.
    if let Some(order) = order {
        if let Some(input) = g.input_id() {
            let mut from_input = vec![false; g.len()];
            from_input[input] = true;
            for &id in &order {
                if from_input[id] {
                    for e in g.out_edges(id) {
                        from_input[e.dst] = true;
                    }
                }
            }
            for node in g.nodes() {
                if !from_input[node.id] {
                    v.push(Violation::UnreachableFromInput(node.id));
                }
            }

            // Derived spatial scale must match the recorded one.
            let mut scale = vec![0usize; g.len()];
            for &id in &order {
                let in_scale = g
                    .in_edges(id)
                    .map(|e| scale[e.src])
                    .max()
                    .unwrap_or(0);
                scale[id] = match &g.node(id).kind {
                    NodeKind::Input => 1,
                    NodeKind::Conv { stride, .. } => in_scale * stride,
                    _ => in_scale,
                };
                if from_input[id] && scale[id] != g.node(id).spatial_scale {
                    v.push(Violation::ScaleMismatch {
                        node: id,
                        recorded: g.node(id).spatial_scale,
                        derived: scale[id],
                    });
                }
            }
        }

        if let Some(loss) = g.loss_id() {
            // Forward reachability: stop-gradient nodes pass values through,
            // so they do not cut the data path to the loss.
            let mut to_loss = vec![false; g.len()];
            to_loss[loss] = true;
            for &id in order.iter().rev() {
                if !to_loss[id] {
                    to_loss[id] = g.out_edges(id).any(|e| to_loss[e.dst]);
                }
            }
            for node in g.nodes() {
                if node.kind.is_parametric() && !to_loss[node.id] {
                    v.push(Violation::LossUnreachable(node.id));
                }
            }
        }
    }

    ValidationResult { violations: v }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Edge, GraphBuilder, LayerNode};

    fn chain3() -> CompGraph {
        let mut b = GraphBuilder::new();
        let input = b.push(NodeKind::Input, 3, 0);
        let c1 = b.chain(NodeKind::Conv { kernel: 3, stride: 1 }, 8, 0, &[input]);
        let c2 = b.chain(NodeKind::Conv { kernel: 3, stride: 1 }, 8, 0, &[c1]);
        let c3 = b.chain(NodeKind::Conv { kernel: 3, stride: 1 }, 8, 0, &[c2]);
        b.chain(NodeKind::Loss, 0, 0, &[c3]);
        b.finish().unwrap()
    }

    #[test]
    fn well_formed_chain_passes() {
        assert!(validate(&chain3()).is_ok());
    }

    #[test]
    fn add_width_mismatch_reported() {
        let mut b = GraphBuilder::new();
        let input = b.push(NodeKind::Input, 3, 0);
        let a = b.chain(NodeKind::Conv { kernel: 3, stride: 1 }, 64, 0, &[input]);
        let c = b.chain(NodeKind::Conv { kernel: 3, stride: 1 }, 32, 0, &[input]);
        let add = b.push(NodeKind::Add, 0, 0);
        b.edge(a, add, EdgeTag::Identity);
        b.edge(c, add, EdgeTag::Data);
        b.chain(NodeKind::Loss, 0, 0, &[add]);
        let g = b.finish().unwrap();
        let result = validate(&g);
        assert!(result
            .violations
            .iter()
            .any(|x| matches!(x, Violation::AddWidthMismatch { node, .. } if *node == add)));
    }

    #[test]
    fn cycle_reported() {
        // hand-assembled: conv1 -> conv2 -> conv1
        let nodes = vec![
            LayerNode { id: 0, kind: NodeKind::Input, in_channels: vec![], out_channels: 3, spatial_scale: 1, stage_id: 0 },
            LayerNode { id: 1, kind: NodeKind::Conv { kernel: 3, stride: 1 }, in_channels: vec![3, 8], out_channels: 8, spatial_scale: 1, stage_id: 0 },
            LayerNode { id: 2, kind: NodeKind::Conv { kernel: 3, stride: 1 }, in_channels: vec![8], out_channels: 8, spatial_scale: 1, stage_id: 0 },
            LayerNode { id: 3, kind: NodeKind::Loss, in_channels: vec![8], out_channels: 1, spatial_scale: 1, stage_id: 0 },
        ];
        let edges = vec![
            Edge { src: 0, dst: 1, tag: EdgeTag::Data, src_range: None },
            Edge { src: 1, dst: 2, tag: EdgeTag::Data, src_range: None },
            Edge { src: 2, dst: 1, tag: EdgeTag::Data, src_range: None },
            Edge { src: 2, dst: 3, tag: EdgeTag::Data, src_range: None },
        ];
        let g = CompGraph::from_parts(nodes, edges);
        let result = validate(&g);
        assert!(result.violations.iter().any(|x| matches!(x, Violation::Cycle(_))));
        assert!(topo_order(&g).is_err());
    }

    #[test]
    fn topo_unique_chain_order() {
        let g = chain3();
        assert_eq!(topo_order(&g).unwrap(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn topo_diamond_ties_broken_by_id() {
        let mut b = GraphBuilder::new();
        let input = b.push(NodeKind::Input, 8, 0);
        let a = b.chain(NodeKind::Conv { kernel: 3, stride: 1 }, 8, 0, &[input]);
        let c = b.chain(NodeKind::Conv { kernel: 3, stride: 1 }, 8, 0, &[input]);
        let add = b.push(NodeKind::Add, 0, 0);
        b.edge(a, add, EdgeTag::Data);
        b.edge(c, add, EdgeTag::Data);
        b.chain(NodeKind::Loss, 0, 0, &[add]);
        let g = b.finish().unwrap();
        assert_eq!(topo_order(&g).unwrap(), vec![input, a, c, add, add + 1]);
    }
}
