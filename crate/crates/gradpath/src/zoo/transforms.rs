//! Graph transforms: cross-stage partial rewiring, transition re-planning,
//! stop-gradient insertion, classifier heads.

use std::collections::BTreeSet;

use crate::graph::{repropagate, CompGraph, Edge, EdgeTag, LayerNode, NodeId, NodeKind};

use super::CspFusion;

/// How a cross-stage partial stage forms its two paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CspEntry {
    /// Literal channel split of the stage input: the cross path carries
    /// the leading channels unchanged.
    Split,
    /// A 1x1 projection per path, the way deployed cross-stage networks
    /// realize the split; costs extra transitions but matches reported
    /// whole-network budgets.
    Projection,
}

#[derive(Debug, thiserror::Error)]
pub enum TransformError {
    #[error("graph has no stage {0} with computational blocks")]
    NoSuchStage(usize),
    #[error("stage {stage} has {found} entry nodes, expected exactly 1")]
    StageEntry { stage: usize, found: usize },
    #[error("stage {stage} has {found} exit nodes, expected exactly 1")]
    StageExit { stage: usize, found: usize },
    #[error("channel split of {channels} at ratio {ratio} produces a zero-channel partition")]
    ZeroPartition { channels: usize, ratio: f64 },
    #[error("stage {stage} is not made of plain residual blocks: {reason}")]
    UnsupportedStage { stage: usize, reason: String },
    #[error("graph has no residual structure to stop gradients on")]
    NoResidualStructure,
    #[error("stop-gradient mode must be on_identity or on_block")]
    InvalidStopGradMode,
    #[error("graph has no loss node")]
    NoLoss,
    #[error("{0}")]
    Graph(#[from] crate::graph::BuildError),
}

fn fresh_node(
    nodes: &mut Vec<LayerNode>,
    kind: NodeKind,
    out_channels: usize,
    stage_id: usize,
) -> NodeId {
    let id = nodes.len();
    nodes.push(LayerNode { id, kind, in_channels: Vec::new(), out_channels, spatial_scale: 1, stage_id });
    id
}

/// Split one stage into a computational-block path and a cross-stage path.
///
/// The stage's residual blocks are narrowed to the block partition (their
/// input and output widths scale, middle widths stay), the other partition
/// crosses the stage on a cross-stage edge, and the two merge at the stage
/// tail according to `fusion`:
/// `both` = transition -> concat -> transition, `first` = concat ->
/// transition, `last` = transition -> concat, `none` = concat.
pub fn apply_csp(
    g: &CompGraph,
    stage_id: usize,
    split_ratio: f64,
    fusion: CspFusion,
    entry: CspEntry,
) -> Result<CompGraph, TransformError> {
    // The stage's computational structure: its stride-1 convs and
    // aggregations. Downsampling convs stay outside the partial paths.
    let stage: BTreeSet<NodeId> = g
        .nodes()
        .iter()
        .filter(|n| {
            n.stage_id == stage_id
                && matches!(
                    n.kind,
                    NodeKind::Conv { stride: 1, .. } | NodeKind::Add | NodeKind::MaskedAdd { .. }
                )
        })
        .map(|n| n.id)
        .collect();
    if stage.is_empty() {
        return Err(TransformError::NoSuchStage(stage_id));
    }
    if stage.iter().any(|&id| matches!(g.node(id).kind, NodeKind::MaskedAdd { .. })) {
        return Err(TransformError::UnsupportedStage {
            stage: stage_id,
            reason: "masked residual blocks cannot be re-partitioned".into(),
        });
    }

    let entries: BTreeSet<NodeId> = g
        .edges()
        .iter()
        .filter(|e| stage.contains(&e.dst) && !stage.contains(&e.src))
        .map(|e| e.src)
        .collect();
    if entries.len() != 1 {
        return Err(TransformError::StageEntry { stage: stage_id, found: entries.len() });
    }
    let entry_src = *entries.iter().next().expect("checked length");

    let exits: Vec<NodeId> = stage
        .iter()
        .copied()
        .filter(|&id| g.out_edges(id).all(|e| !stage.contains(&e.dst)))
        .collect();
    if exits.len() != 1 {
        return Err(TransformError::StageExit { stage: stage_id, found: exits.len() });
    }
    let exit = exits[0];
    if !matches!(g.node(exit).kind, NodeKind::Add) {
        return Err(TransformError::UnsupportedStage {
            stage: stage_id,
            reason: "stage does not end in a residual aggregation".into(),
        });
    }

    let c_total = g.node(entry_src).out_channels;
    let c_cross = (c_total as f64 * split_ratio).floor() as usize;
    let c_block = c_total - c_cross;
    if c_cross == 0 || c_block == 0 {
        return Err(TransformError::ZeroPartition { channels: c_total, ratio: split_ratio });
    }

    let mut nodes: Vec<LayerNode> = g.nodes().to_vec();
    let mut edges: Vec<Edge> = g.edges().to_vec();

    // Narrow each block: the conv feeding an aggregation over a data edge
    // produces the block partition width; input widths follow by
    // repropagation from the rewired stage entry.
    for &id in &stage {
        if !matches!(g.node(id).kind, NodeKind::Add) {
            continue;
        }
        for e in g.in_edges(id).filter(|e| e.tag != EdgeTag::Identity) {
            if stage.contains(&e.src) && matches!(g.node(e.src).kind, NodeKind::Conv { .. }) {
                nodes[e.src].out_channels = c_block;
            } else {
                return Err(TransformError::UnsupportedStage {
                    stage: stage_id,
                    reason: format!("aggregation {id} fed by non-conv node {}", e.src),
                });
            }
        }
    }

    // Remember which edges leave the exit before new wiring is added.
    let exit_consumer_edges: Vec<usize> = edges
        .iter()
        .enumerate()
        .filter(|(_, e)| e.src == exit)
        .map(|(i, _)| i)
        .collect();

    // Entry: form the two paths.
    let (cross_src, cross_range, block_src, block_range) = match entry {
        CspEntry::Split => {
            let ranges = vec![(0, c_cross), (c_cross, c_total)];
            let split = fresh_node(&mut nodes, NodeKind::Split { ranges }, c_total, stage_id);
            edges.push(Edge { src: entry_src, dst: split, tag: EdgeTag::Data, src_range: None });
            (split, Some((0, c_cross)), split, Some((c_cross, c_total)))
        }
        CspEntry::Projection => {
            let pc = fresh_node(&mut nodes, NodeKind::Transition, c_cross, stage_id);
            let pb = fresh_node(&mut nodes, NodeKind::Transition, c_block, stage_id);
            edges.push(Edge { src: entry_src, dst: pc, tag: EdgeTag::Data, src_range: None });
            edges.push(Edge { src: entry_src, dst: pb, tag: EdgeTag::Data, src_range: None });
            (pc, None, pb, None)
        }
    };

    // Redirect stage inputs from the original entry to the block path.
    for e in edges.iter_mut() {
        if e.src == entry_src && stage.contains(&e.dst) {
            e.src = block_src;
            e.src_range = block_range;
        }
    }

    // Tail fusion.
    let concat_over = |nodes: &mut Vec<LayerNode>, edges: &mut Vec<Edge>, block_out: NodeId| {
        let cat = fresh_node(nodes, NodeKind::Concat, 0, stage_id);
        edges.push(Edge { src: cross_src, dst: cat, tag: EdgeTag::CrossStage, src_range: cross_range });
        edges.push(Edge { src: block_out, dst: cat, tag: EdgeTag::Data, src_range: None });
        cat
    };
    let tail = match fusion {
        CspFusion::Both => {
            let t1 = fresh_node(&mut nodes, NodeKind::Transition, c_block, stage_id);
            edges.push(Edge { src: exit, dst: t1, tag: EdgeTag::Data, src_range: None });
            let cat = concat_over(&mut nodes, &mut edges, t1);
            let t2 = fresh_node(&mut nodes, NodeKind::Transition, c_total, stage_id);
            edges.push(Edge { src: cat, dst: t2, tag: EdgeTag::Data, src_range: None });
            t2
        }
        CspFusion::First => {
            let cat = concat_over(&mut nodes, &mut edges, exit);
            let t = fresh_node(&mut nodes, NodeKind::Transition, c_total, stage_id);
            edges.push(Edge { src: cat, dst: t, tag: EdgeTag::Data, src_range: None });
            t
        }
        CspFusion::Last => {
            let t1 = fresh_node(&mut nodes, NodeKind::Transition, c_block, stage_id);
            edges.push(Edge { src: exit, dst: t1, tag: EdgeTag::Data, src_range: None });
            concat_over(&mut nodes, &mut edges, t1)
        }
        CspFusion::None => concat_over(&mut nodes, &mut edges, exit),
    };

    for ei in exit_consumer_edges {
        edges[ei].src = tail;
    }

    Ok(repropagate(nodes, edges)?)
}

/// Remove every per-module transition except the last one of each stage,
/// letting module aggregations feed forward directly. Graphs without
/// transitions pass through unchanged.
pub fn replan_elan(g: &CompGraph) -> Result<CompGraph, TransformError> {
    let order = crate::graph::topo_order(g).map_err(|_| crate::graph::BuildError::Cyclic)?;
    let mut per_stage: std::collections::BTreeMap<usize, Vec<NodeId>> = Default::default();
    for &id in &order {
        if g.node(id).kind == NodeKind::Transition {
            per_stage.entry(g.node(id).stage_id).or_default().push(id);
        }
    }
    let mut drop: BTreeSet<NodeId> = BTreeSet::new();
    for (_, ts) in per_stage {
        for &t in &ts[..ts.len().saturating_sub(1)] {
            drop.insert(t);
        }
    }
    if drop.is_empty() {
        return Ok(g.clone());
    }

    // Rewire consumers of each dropped transition to its single source.
    let mut edges: Vec<Edge> = Vec::new();
    for e in g.edges() {
        if drop.contains(&e.dst) {
            continue; // edge into a dropped transition disappears
        }
        let mut e = *e;
        while drop.contains(&e.src) {
            let feeder = g
                .in_edges(e.src)
                .next()
                .expect("transition has exactly one input");
            e.src_range = feeder.src_range;
            e.src = feeder.src;
        }
        edges.push(e);
    }

    // Compact ids.
    let mut remap = vec![usize::MAX; g.len()];
    let mut nodes = Vec::new();
    for node in g.nodes() {
        if drop.contains(&node.id) {
            continue;
        }
        let mut node = node.clone();
        remap[node.id] = nodes.len();
        node.id = nodes.len();
        nodes.push(node);
    }
    for e in edges.iter_mut() {
        e.src = remap[e.src];
        e.dst = remap[e.dst];
    }
    Ok(repropagate(nodes, edges)?)
}

/// Place stop-gradient nodes on residual wiring: `OnIdentity` cuts every
/// identity edge into an aggregation, `OnBlock` cuts every
/// computational-block output edge feeding one.
pub fn insert_stop_grad(
    g: &CompGraph,
    mode: super::StopGradMode,
) -> Result<CompGraph, TransformError> {
    let want_identity = match mode {
        super::StopGradMode::OnIdentity => true,
        super::StopGradMode::OnBlock => false,
        super::StopGradMode::Off => return Err(TransformError::InvalidStopGradMode),
    };
    let residual_aggs: BTreeSet<NodeId> = g
        .nodes()
        .iter()
        .filter(|n| matches!(n.kind, NodeKind::Add | NodeKind::MaskedAdd { .. }))
        .filter(|n| g.in_edges(n.id).any(|e| e.tag == EdgeTag::Identity))
        .map(|n| n.id)
        .collect();
    if residual_aggs.is_empty() {
        return Err(TransformError::NoResidualStructure);
    }

    let mut nodes: Vec<LayerNode> = g.nodes().to_vec();
    let mut edges: Vec<Edge> = g.edges().to_vec();
    for ei in 0..edges.len() {
        let e = edges[ei];
        if !residual_aggs.contains(&e.dst) {
            continue;
        }
        if (e.tag == EdgeTag::Identity) != want_identity {
            continue;
        }
        let width = g.edge_width(&e);
        let stage = nodes[e.dst].stage_id;
        let sg = fresh_node(&mut nodes, NodeKind::StopGrad, width, stage);
        edges.push(Edge { src: e.src, dst: sg, tag: e.tag, src_range: e.src_range });
        let spliced = &mut edges[ei];
        spliced.src = sg;
        spliced.src_range = None;
    }
    Ok(repropagate(nodes, edges)?)
}

/// Ensure the graph ends in a `classes`-way classifier in front of the
/// loss, inserting or resizing a fully-connected head as needed.
pub fn append_classifier(g: &CompGraph, classes: usize) -> Result<CompGraph, TransformError> {
    let loss = g.loss_id().ok_or(TransformError::NoLoss)?;
    let feed = g.in_edges(loss).next().ok_or(TransformError::NoLoss)?;
    let mut nodes: Vec<LayerNode> = g.nodes().to_vec();
    let mut edges: Vec<Edge> = g.edges().to_vec();
    if nodes[feed.src].kind == NodeKind::FullyConnected {
        nodes[feed.src].out_channels = classes;
        return Ok(repropagate(nodes, edges)?);
    }
    let stage = nodes[feed.src].stage_id + 1;
    let fc = fresh_node(&mut nodes, NodeKind::FullyConnected, classes, stage);
    edges.push(Edge { src: feed.src, dst: fc, tag: EdgeTag::Data, src_range: feed.src_range });
    for e in edges.iter_mut() {
        if e.dst == loss {
            e.src = fc;
            e.src_range = None;
        }
    }
    Ok(repropagate(nodes, edges)?)
}
