//! Additive-chain unfolding.
//!
//! Cascaded residual aggregations hide transitive skip connectivity: in
//! `x2 = x1 + f2(x1)` with `x1 = x0 + f1(x0)`, the top add receives `x0`
//! and `f1` only through `x1`. Unfolding rewrites every add whose identity
//! input is itself an (possibly masked) add so that it receives all summed
//! values directly, which is the view the gradient-path analyses assume.
//!
//! Masked residuals flatten through mask algebra: binary masks compose by
//! intersection, and a composed mask is materialized as a single-input
//! `MaskedAdd` gate on the spliced edge. All-ones gates are dropped,
//! all-zero gates delete the edge. Parametric nodes, their wiring, and the
//! forward function are unchanged.

use super::{CompGraph, Edge, EdgeTag, LayerNode, NodeId, NodeKind};

/// Per-edge view during rewriting: where the value really comes from and
/// which channels survive, expressed over the *destination* width.
#[derive(Debug, Clone)]
struct Operand {
    src: NodeId,
    src_range: Option<(usize, usize)>,
    tag: EdgeTag,
    /// None = all channels pass.
    mask: Option<Vec<bool>>,
}

fn compose(outer: Option<&[bool]>, inner: Option<&[bool]>, width: usize) -> Option<Vec<bool>> {
    match (outer, inner) {
        (None, None) => None,
        _ => {
            let take = |m: Option<&[bool]>, c: usize| m.map_or(true, |m| c < m.len() && m[c]);
            Some((0..width).map(|c| take(outer, c) && take(inner, c)).collect())
        }
    }
}

/// Flatten chains of `Add`/`MaskedAdd` nodes connected through identity
/// edges into single n-ary aggregations. Requires a valid acyclic graph.
pub fn unfold(g: &CompGraph) -> CompGraph {
    let order = super::topo_order(g).expect("unfold requires an acyclic graph");

    // operands[v] = resolved inbound operands of aggregation node v.
    // Non-aggregation nodes keep their edges untouched.
    let mut operands: Vec<Option<Vec<Operand>>> = vec![None; g.len()];

    let is_agg = |id: NodeId| matches!(g.node(id).kind, NodeKind::Add | NodeKind::MaskedAdd { .. });
    // A mask gate in the *source* graph: single-input masked add.
    let gate_mask = |id: NodeId| -> Option<Vec<bool>> {
        match &g.node(id).kind {
            NodeKind::MaskedAdd { mask } if g.in_edge_ids(id).len() == 1 => Some(mask.clone()),
            _ => None,
        }
    };

    for &id in &order {
        if !is_agg(id) || gate_mask(id).is_some() {
            continue;
        }
        let node = g.node(id);
        let width = node.out_channels;
        let own_mask = match &node.kind {
            NodeKind::MaskedAdd { mask } => Some(mask.clone()),
            _ => None,
        };
        let mut resolved: Vec<Operand> = Vec::new();
        for &ei in g.in_edge_ids(id) {
            let e = g.edges()[ei];
            let edge_mask: Option<Vec<bool>> = if e.tag == EdgeTag::Identity {
                own_mask.clone()
            } else {
                None
            };
            // Trim a full-width mask to the operand's effective width; an
            // identity input narrower than the output is blocked above its
            // own width, which the mask representation makes explicit.
            let op_width = g.edge_width(&e);
            let edge_mask = match edge_mask {
                Some(m) => {
                    let mut m = m;
                    m.truncate(width);
                    if op_width < width {
                        // channels the operand cannot provide stay blocked
                        m.truncate(op_width);
                    }
                    Some(m)
                }
                None => None,
            };
            splice(g, &operands, e.src, e.src_range, e.tag, edge_mask, &mut resolved, &gate_mask);
        }
        operands[id] = Some(resolved);
    }

    // Rebuild: aggregation nodes become plain adds over their resolved
    // operands, with gates materialized for masked operands. Everything
    // else is copied verbatim, then orphaned routing is pruned.
    let mut nodes: Vec<LayerNode> = g.nodes().to_vec();
    let mut edges: Vec<Edge> = Vec::new();
    for node in g.nodes() {
        let id = node.id;
        match &operands[id] {
            None => {
                for &ei in g.in_edge_ids(id) {
                    edges.push(g.edges()[ei]);
                }
            }
            Some(ops) => {
                let agg_width = nodes[id].out_channels;
                let mut in_channels = Vec::new();
                for op in ops {
                    let op_width = match op.src_range {
                        Some((lo, hi)) => hi - lo,
                        None => g.node(op.src).out_channels,
                    };
                    // Masks are interpreted as "blocked beyond recorded
                    // length"; normalize to the operand's width.
                    let mask = op.mask.as_ref().map(|m| {
                        let mut m = m.clone();
                        m.resize(op_width, false);
                        m
                    });
                    match mask {
                        None => {
                            edges.push(Edge { src: op.src, dst: id, tag: op.tag, src_range: op.src_range });
                            in_channels.push(op_width);
                        }
                        Some(m) if m.iter().all(|&b| !b) => {
                            // fully blocked: the operand contributes nothing
                        }
                        Some(m) if m.iter().all(|&b| b) && op_width == agg_width => {
                            edges.push(Edge { src: op.src, dst: id, tag: op.tag, src_range: op.src_range });
                            in_channels.push(op_width);
                        }
                        Some(m) => {
                            let gate = nodes.len();
                            nodes.push(LayerNode {
                                id: gate,
                                kind: NodeKind::MaskedAdd { mask: m },
                                in_channels: vec![op_width],
                                out_channels: agg_width,
                                spatial_scale: nodes[id].spatial_scale,
                                stage_id: nodes[id].stage_id,
                            });
                            edges.push(Edge { src: op.src, dst: gate, tag: EdgeTag::Identity, src_range: op.src_range });
                            edges.push(Edge { src: gate, dst: id, tag: op.tag, src_range: None });
                            in_channels.push(agg_width);
                        }
                    }
                }
                let out = nodes[id].out_channels;
                let n = &mut nodes[id];
                n.in_channels = in_channels;
                n.kind = if n.in_channels.len() == 1 { NodeKind::Identity } else { NodeKind::Add };
                n.out_channels = out;
            }
        }
    }

    prune_orphans(nodes, edges)
}

/// Resolve one inbound operand of an aggregation, recursing through
/// identity-connected aggregations and mask gates.
#[allow(clippy::too_many_arguments)]
fn splice(
    g: &CompGraph,
    operands: &[Option<Vec<Operand>>],
    src: NodeId,
    src_range: Option<(usize, usize)>,
    tag: EdgeTag,
    mask: Option<Vec<bool>>,
    out: &mut Vec<Operand>,
    gate_mask: &dyn Fn(NodeId) -> Option<Vec<bool>>,
) {
    // Step through source-graph mask gates, composing masks.
    if let Some(gm) = gate_mask(src) {
        let inner = g.edges()[g.in_edge_ids(src)[0]];
        let width = g.node(src).out_channels;
        let composed = compose(mask.as_deref(), Some(&gm), width);
        splice(g, operands, inner.src, inner.src_range, tag, composed, out, gate_mask);
        return;
    }
    // Identity-connected aggregation that was already flattened: inline its
    // operands, masking each by this edge's mask.
    if tag == EdgeTag::Identity || mask.is_some() {
        if let Some(inner_ops) = &operands[src] {
            let width = g.node(src).out_channels;
            for op in inner_ops {
                let composed = compose(mask.as_deref(), op.mask.as_deref(), width);
                out.push(Operand { src: op.src, src_range: op.src_range, tag: op.tag, mask: composed });
            }
            return;
        }
    }
    out.push(Operand { src, src_range, tag, mask });
}

/// Drop routing nodes that no longer reach the loss (e.g. absorbed adds
/// with no remaining consumers), renumbering ids densely.
fn prune_orphans(nodes: Vec<LayerNode>, edges: Vec<Edge>) -> CompGraph {
    let n = nodes.len();
    let mut out_adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for e in &edges {
        out_adj[e.src].push(e.dst);
    }
    let loss = nodes.iter().find(|x| x.kind == NodeKind::Loss).map(|x| x.id);
    let mut keep = vec![false; n];
    if let Some(loss) = loss {
        // reverse DFS over forward edges: a node is kept if it reaches loss
        let mut in_adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for e in &edges {
            in_adj[e.dst].push(e.src);
        }
        let mut stack = vec![loss];
        while let Some(v) = stack.pop() {
            if keep[v] {
                continue;
            }
            keep[v] = true;
            for &p in &in_adj[v] {
                stack.push(p);
            }
        }
    } else {
        keep.fill(true);
    }

    let mut remap = vec![usize::MAX; n];
    let mut new_nodes = Vec::new();
    for node in nodes.into_iter().filter(|x| keep[x.id]) {
        let new_id = new_nodes.len();
        remap[node.id] = new_id;
        let mut node = node;
        node.id = new_id;
        new_nodes.push(node);
    }
    let new_edges: Vec<Edge> = edges
        .into_iter()
        .filter(|e| keep[e.src] && keep[e.dst])
        .map(|mut e| {
            e.src = remap[e.src];
            e.dst = remap[e.dst];
            e
        })
        .collect();
    CompGraph::from_parts(new_nodes, new_edges)
}
