//! Static gradient-path analysis.
//!
//! All quantities are defined over the *reversed* graph: gradient starts at
//! the loss and walks edges backward. The length of a gradient path counts
//! the parametric nodes it traverses, including the destination layer
//! itself; routing nodes are free. On a DAG this is computed exactly by
//! dynamic programming over (node, length) states, which agrees with
//! brute-force enumeration of all simple paths (every directed path in a
//! DAG is simple) while staying polynomial.
//!
//! Callers are expected to pass an [unfolded](crate::graph::unfold) graph:
//! path lengths are invariant under unfolding, but gradient sources follow
//! the flattened aggregation view.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use serde_json::{json, Map, Value as Json};

use crate::graph::{CompGraph, EdgeTag, NodeId, NodeKind};

/// Channels of a consumer's gradient that flow through one of its inbound
/// edges, stored as sorted disjoint `[lo, hi)` runs.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChannelSet(Vec<(usize, usize)>);

impl ChannelSet {
    pub fn full(width: usize) -> Self {
        if width == 0 {
            ChannelSet(Vec::new())
        } else {
            ChannelSet(vec![(0, width)])
        }
    }

    pub fn range(lo: usize, hi: usize) -> Self {
        if lo >= hi {
            ChannelSet(Vec::new())
        } else {
            ChannelSet(vec![(lo, hi)])
        }
    }

    pub fn from_mask(mask: &[bool]) -> Self {
        let mut runs = Vec::new();
        let mut start = None;
        for (i, &b) in mask.iter().enumerate() {
            match (b, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    runs.push((s, i));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            runs.push((s, mask.len()));
        }
        ChannelSet(runs)
    }

    pub fn runs(&self) -> &[(usize, usize)] {
        &self.0
    }

    pub fn count(&self) -> usize {
        self.0.iter().map(|(lo, hi)| hi - lo).sum()
    }

    pub fn contains(&self, ch: usize) -> bool {
        self.0.iter().any(|&(lo, hi)| ch >= lo && ch < hi)
    }

    pub fn is_subset_of(&self, other: &ChannelSet) -> bool {
        self.0
            .iter()
            .flat_map(|&(lo, hi)| lo..hi)
            .all(|ch| other.contains(ch))
    }
}

/// Identity of a gradient source: the immediate consumer node through which
/// gradient arrives at a layer, refined by the channel group that consumer
/// hands back along the edge. An n-ary add hands every input the same full
/// gradient; a concat hands back disjoint slices; a masked add gates the
/// identity side by its mask.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SourceKey {
    pub node: NodeId,
    pub channels: ChannelSet,
}

/// Per-layer gradient-path statistics.
#[derive(Debug, Clone, Default)]
pub struct LayerPathStats {
    /// Distinct gradient-path lengths from the loss to this layer. Empty
    /// when the layer is cut off by stop-gradient.
    pub timestamps: BTreeSet<usize>,
    /// Gradient sources per timestamp.
    pub sources: BTreeMap<usize, BTreeSet<SourceKey>>,
    /// Number of distinct (timestamp, source) combinations.
    pub combinations: usize,
    pub shortest_path: Option<usize>,
    pub longest_path: Option<usize>,
    /// Distinct earlier feature maps aggregated at this layer's input.
    pub aggregated_features: usize,
}

/// Whole-graph gradient-path report, keyed by parametric node id.
#[derive(Debug, Clone, Default)]
pub struct GradPathReport {
    pub layers: BTreeMap<NodeId, LayerPathStats>,
    /// Max over layers of the per-layer shortest path (the planning
    /// quantity for network-level design).
    pub max_shortest_path: Option<usize>,
    /// Max over layers of the per-layer longest path.
    pub longest_path: Option<usize>,
    pub total_combinations: usize,
}

impl GradPathReport {
    /// Sources of every layer at one timestamp; empty map when no layer
    /// has that timestamp.
    pub fn sources_at(&self, t: usize) -> BTreeMap<NodeId, BTreeSet<SourceKey>> {
        self.layers
            .iter()
            .filter_map(|(&id, stats)| stats.sources.get(&t).map(|s| (id, s.clone())))
            .collect()
    }

    /// JSON form with stable, numerically ordered keys.
    pub fn to_json(&self) -> Json {
        let mut layers = Map::new();
        for (&id, stats) in &self.layers {
            let mut sources = Map::new();
            for (t, keys) in &stats.sources {
                let entries: Vec<Json> = keys
                    .iter()
                    .map(|k| {
                        json!({
                            "node": k.node,
                            "channels": k.channels.runs().iter().map(|&(lo, hi)| json!([lo, hi])).collect::<Vec<_>>(),
                        })
                    })
                    .collect();
                sources.insert(t.to_string(), Json::Array(entries));
            }
            layers.insert(
                id.to_string(),
                json!({
                    "timestamps": stats.timestamps.iter().copied().collect::<Vec<_>>(),
                    "sources": Json::Object(sources),
                    "combinations": stats.combinations,
                    "shortest_path": stats.shortest_path,
                    "longest_path": stats.longest_path,
                    "aggregated_features": stats.aggregated_features,
                }),
            );
        }
        json!({
            "layers": Json::Object(layers),
            "max_shortest_path": self.max_shortest_path,
            "longest_path": self.longest_path,
            "total_combinations": self.total_combinations,
        })
    }
}

/// Gradient-path lengths reaching each node's output, counted in
/// parametric nodes traversed so far (the node itself excluded).
fn output_lengths(g: &CompGraph) -> Vec<BTreeSet<usize>> {
    let order = crate::graph::topo_order(g).expect("analysis requires an acyclic graph");
    let mut lengths: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); g.len()];
    for &id in order.iter().rev() {
        if g.node(id).kind == NodeKind::Loss {
            lengths[id].insert(0);
            continue;
        }
        let mut set = BTreeSet::new();
        for e in g.out_edges(id) {
            let w = e.dst;
            // gradient never crosses a stop-gradient node backward
            if g.node(w).kind == NodeKind::StopGrad {
                continue;
            }
            let step = g.node(w).kind.path_cost();
            for &l in &lengths[w] {
                set.insert(l + step);
            }
        }
        lengths[id] = set;
    }
    lengths
}

/// Source key for gradient flowing from consumer `edge.dst` back along
/// `edge` into `edge.src`. `edge_index` is the position of the edge in the
/// consumer's inbound list.
fn source_key(g: &CompGraph, edge_id: usize) -> SourceKey {
    let e = &g.edges()[edge_id];
    let w = g.node(e.dst);
    let channels = match &w.kind {
        NodeKind::Concat => {
            let mut offset = 0;
            let mut found = ChannelSet::full(w.out_channels);
            for &ei in g.in_edge_ids(w.id) {
                let width = g.edge_width(&g.edges()[ei]);
                if ei == edge_id {
                    found = ChannelSet::range(offset, offset + width);
                    break;
                }
                offset += width;
            }
            found
        }
        NodeKind::MaskedAdd { mask } if e.tag == EdgeTag::Identity => ChannelSet::from_mask(mask),
        NodeKind::Split { .. } => ChannelSet::full(w.in_channels.first().copied().unwrap_or(0)),
        _ => ChannelSet::full(w.out_channels),
    };
    SourceKey { node: w.id, channels }
}

/// Full analysis of an unfolded, validate-ok graph.
pub fn analyze(g: &CompGraph) -> GradPathReport {
    let lengths = output_lengths(g);
    let mut report = GradPathReport::default();
    let features = aggregated_features(g);

    for node in g.nodes() {
        if !node.kind.is_parametric() {
            continue;
        }
        let id = node.id;
        let mut stats = LayerPathStats {
            aggregated_features: features.get(&id).copied().unwrap_or(0),
            ..Default::default()
        };
        // timestamps include the layer itself
        stats.timestamps = lengths[id].iter().map(|&l| l + 1).collect();
        for &t in &stats.timestamps {
            let mut keys = BTreeSet::new();
            for &ei in g.out_edge_ids(id) {
                let e = &g.edges()[ei];
                if g.node(e.dst).kind == NodeKind::StopGrad {
                    continue;
                }
                let step = g.node(e.dst).kind.path_cost();
                if t >= 1 + step && lengths[e.dst].contains(&(t - 1 - step)) {
                    keys.insert(source_key(g, ei));
                }
            }
            if !keys.is_empty() {
                stats.sources.insert(t, keys);
            }
        }
        stats.combinations = stats.sources.values().map(|s| s.len()).sum();
        stats.shortest_path = stats.timestamps.first().copied();
        stats.longest_path = stats.timestamps.last().copied();
        report.total_combinations += stats.combinations;
        report.layers.insert(id, stats);
    }

    report.max_shortest_path = report.layers.values().filter_map(|s| s.shortest_path).max();
    report.longest_path = report.layers.values().filter_map(|s| s.longest_path).max();
    report
}

/// Timestamp sets per parametric layer.
pub fn timestamps(g: &CompGraph) -> BTreeMap<NodeId, BTreeSet<usize>> {
    analyze(g).layers.into_iter().map(|(id, s)| (id, s.timestamps)).collect()
}

/// Per-layer (shortest, longest) gradient-path lengths.
pub fn shortest_longest(g: &CompGraph) -> BTreeMap<NodeId, (Option<usize>, Option<usize>)> {
    analyze(g)
        .layers
        .into_iter()
        .map(|(id, s)| (id, (s.shortest_path, s.longest_path)))
        .collect()
}

/// Count of distinct earlier feature maps (parametric outputs or the
/// network input) reaching each parametric layer's input through routing
/// nodes only.
pub fn aggregated_features(g: &CompGraph) -> BTreeMap<NodeId, usize> {
    fn collect(g: &CompGraph, id: NodeId, acc: &mut BTreeSet<NodeId>) {
        for e in g.in_edges(id) {
            let src = g.node(e.src);
            if src.kind.is_parametric() || src.kind == NodeKind::Input {
                acc.insert(src.id);
            } else {
                collect(g, src.id, acc);
            }
        }
    }
    g.nodes()
        .iter()
        .filter(|n| n.kind.is_parametric())
        .map(|n| {
            let mut acc = BTreeSet::new();
            collect(g, n.id, &mut acc);
            (n.id, acc.len())
        })
        .collect()
}

/// Pairwise duplication of gradient information.
///
/// Two layers receive duplicated gradient when the same upstream node (a
/// parametric layer, or the loss itself) hands both of them gradient
/// through routing only: nothing re-projects the signal in between, so
/// they see the exact same information at the same timestamp. Each layer
/// gets a pair-set of `(timestamp, origin)` entries; overlap is Jaccard
/// between pair-sets, and layers are adjacent when their origin sets
/// intersect (they sit at a common aggregation point).
#[derive(Debug, Clone, Default)]
pub struct OverlapReport {
    /// Jaccard overlap per adjacent parametric layer pair, `u < v`.
    pub pairs: BTreeMap<(NodeId, NodeId), f64>,
    /// Mean over adjacent pairs.
    pub mean_adjacent: f64,
}

/// Nodes that deliver gradient to `id` through routing only: its
/// parametric forward-consumers across routing closures, plus the loss.
/// Stop-gradient nodes block the closure.
fn routing_origins(g: &CompGraph, id: NodeId, acc: &mut BTreeSet<NodeId>) {
    for e in g.out_edges(id) {
        let dst = g.node(e.dst);
        match &dst.kind {
            NodeKind::StopGrad => continue,
            k if k.is_parametric() => {
                acc.insert(dst.id);
            }
            NodeKind::Loss => {
                acc.insert(dst.id);
            }
            _ => routing_origins(g, dst.id, acc),
        }
    }
}

/// `(timestamp, origin)` pair-set of one layer.
fn origin_pairs(
    g: &CompGraph,
    report: &GradPathReport,
    id: NodeId,
) -> BTreeSet<(usize, NodeId)> {
    let mut origins = BTreeSet::new();
    routing_origins(g, id, &mut origins);
    let mut pairs = BTreeSet::new();
    for o in origins {
        if g.node(o).kind == NodeKind::Loss {
            pairs.insert((1, o));
        } else if let Some(stats) = report.layers.get(&o) {
            for &t in &stats.timestamps {
                pairs.insert((t + 1, o));
            }
        }
    }
    pairs
}

/// Jaccard overlap of the (timestamp, origin) pair-sets of two layers.
/// None when both sets are empty.
pub fn overlap_between(g: &CompGraph, report: &GradPathReport, u: NodeId, v: NodeId) -> Option<f64> {
    let a = origin_pairs(g, report, u);
    let b = origin_pairs(g, report, v);
    let union = a.union(&b).count();
    if union == 0 {
        return None;
    }
    Some(a.intersection(&b).count() as f64 / union as f64)
}

/// Jaccard overlap of two layers' gradient origins at one timestamp.
pub fn overlap_at(g: &CompGraph, report: &GradPathReport, u: NodeId, v: NodeId, t: usize) -> Option<f64> {
    let at = |id: NodeId| -> BTreeSet<NodeId> {
        origin_pairs(g, report, id)
            .into_iter()
            .filter(|&(pt, _)| pt == t)
            .map(|(_, o)| o)
            .collect()
    };
    let a = at(u);
    let b = at(v);
    let union = a.union(&b).count();
    if union == 0 {
        return None;
    }
    Some(a.intersection(&b).count() as f64 / union as f64)
}

/// Duplication overlap across adjacent parametric layer pairs.
pub fn duplication_overlap(g: &CompGraph) -> OverlapReport {
    let report = analyze(g);
    let ids = g.parametric_ids();
    let pair_sets: BTreeMap<NodeId, BTreeSet<(usize, NodeId)>> = ids
        .iter()
        .map(|&id| (id, origin_pairs(g, &report, id)))
        .collect();
    let mut pairs = BTreeMap::new();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, &u) in ids.iter().enumerate() {
        for &v in &ids[i + 1..] {
            let a = &pair_sets[&u];
            let b = &pair_sets[&v];
            let shares_origin = a
                .iter()
                .any(|&(_, o)| b.iter().any(|&(_, p)| p == o));
            if !shares_origin {
                continue;
            }
            let union = a.union(b).count();
            let inter = a.intersection(b).count();
            let f = inter as f64 / union as f64;
            pairs.insert((u, v), f);
            sum += f;
            count += 1;
        }
    }
    OverlapReport {
        pairs,
        mean_adjacent: if count == 0 { 0.0 } else { sum / count as f64 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{unfold, EdgeTag, GraphBuilder};

    fn plain(depth: usize) -> CompGraph {
        let mut b = GraphBuilder::new();
        let input = b.push(NodeKind::Input, 3, 0);
        let mut x = input;
        for _ in 0..depth {
            x = b.chain(NodeKind::Conv { kernel: 3, stride: 1 }, 8, 0, &[x]);
        }
        b.chain(NodeKind::Loss, 0, 0, &[x]);
        b.finish().unwrap()
    }

    #[test]
    fn plain_chain_timestamps_are_depth_indexed() {
        let g = plain(4);
        let report = analyze(&g);
        // layer i counted from the loss side gets exactly {i}
        let ids = g.parametric_ids();
        for (id, pos) in ids.iter().zip((1..=4).rev()) {
            let stats = &report.layers[id];
            assert_eq!(stats.timestamps.iter().copied().collect::<Vec<_>>(), vec![pos]);
            assert_eq!(stats.sources[&pos].len(), 1, "chain layers have one source");
        }
        assert_eq!(report.max_shortest_path, Some(4));
        assert_eq!(report.longest_path, Some(4));
    }

    #[test]
    fn plain_chain_aggregates_one_feature_per_layer() {
        let g = plain(4);
        for (_, n) in aggregated_features(&g) {
            assert_eq!(n, 1);
        }
    }

    #[test]
    fn unfolded_residuals_reach_loss_directly() {
        // stem + 3 residual blocks of two convs
        let mut b = GraphBuilder::new();
        let input = b.push(NodeKind::Input, 3, 0);
        let stem = b.chain(NodeKind::Conv { kernel: 3, stride: 1 }, 8, 0, &[input]);
        let mut x = stem;
        let mut block_outputs = Vec::new();
        for _ in 0..3 {
            let c1 = b.chain(NodeKind::Conv { kernel: 3, stride: 1 }, 8, 0, &[x]);
            let c2 = b.chain(NodeKind::Conv { kernel: 3, stride: 1 }, 8, 0, &[c1]);
            let add = b.push(NodeKind::Add, 0, 0);
            b.edge(x, add, EdgeTag::Identity);
            b.edge(c2, add, EdgeTag::Data);
            block_outputs.push(c2);
            x = add;
        }
        b.chain(NodeKind::Loss, 0, 0, &[x]);
        let g = unfold(&b.finish().unwrap());
        let report = analyze(&g);
        // every block-output conv hits the flattened top add at t=1
        for id in block_outputs {
            assert_eq!(report.layers[&id].shortest_path, Some(1));
        }
        assert_eq!(report.max_shortest_path, Some(2));
        // identical provenance out of the shared aggregation
        let t1 = report.sources_at(1);
        let keys: BTreeSet<_> = t1.values().flatten().collect();
        assert_eq!(keys.len(), 1, "all t=1 gradient flows through the top add");
    }

    #[test]
    fn extra_skip_never_lengthens_shortest_paths() {
        let build = |skip: bool| {
            let mut b = GraphBuilder::new();
            let input = b.push(NodeKind::Input, 3, 0);
            let mut x = input;
            let mut convs = Vec::new();
            for _ in 0..5 {
                x = b.chain(NodeKind::Conv { kernel: 3, stride: 1 }, 8, 0, &[x]);
                convs.push(x);
            }
            if skip {
                let add = b.push(NodeKind::Add, 0, 0);
                b.edge(convs[4], add, EdgeTag::Data);
                b.edge(convs[1], add, EdgeTag::Identity);
                b.chain(NodeKind::Loss, 0, 0, &[add]);
            } else {
                b.chain(NodeKind::Loss, 0, 0, &[x]);
            }
            analyze(&b.finish().unwrap())
        };
        let before = build(false);
        let after = build(true);
        for (&id, stats) in &before.layers {
            let (sb, sa) = (stats.shortest_path.unwrap(), after.layers[&id].shortest_path.unwrap());
            assert!(sa <= sb, "skip edge lengthened node {id}: {sb} -> {sa}");
        }
    }

    #[test]
    fn dense_style_concat_slices_sources() {
        // x0 -> y1, y2; final concat(x0, y1, y2) -> loss
        let mut b = GraphBuilder::new();
        let input = b.push(NodeKind::Input, 3, 0);
        let x0 = b.chain(NodeKind::Conv { kernel: 3, stride: 1 }, 4, 0, &[input]);
        let y1 = b.chain(NodeKind::Conv { kernel: 3, stride: 1 }, 4, 0, &[x0]);
        let y2 = b.chain(NodeKind::Conv { kernel: 3, stride: 1 }, 4, 0, &[y1]);
        let cat = b.chain(NodeKind::Concat, 0, 0, &[x0, y1, y2]);
        b.chain(NodeKind::Loss, 0, 0, &[cat]);
        let g = b.finish().unwrap();
        let report = analyze(&g);
        let s1 = &report.layers[&y1].sources[&1];
        let s2 = &report.layers[&y2].sources[&1];
        assert_ne!(s1, s2, "concat hands each input a distinct slice");
        assert_eq!(s1.iter().next().unwrap().channels, ChannelSet::range(4, 8));
        assert_eq!(s2.iter().next().unwrap().channels, ChannelSet::range(8, 12));
    }
}
