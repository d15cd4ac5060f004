//! Test-side oracles, written independently of the library's analysis
//! code: exhaustive reversed-path enumeration, exhaustive topological-order
//! enumeration, and a seeded random graph generator.

// each test binary pulls in the subset of helpers it needs
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use gradpath::graph::{CompGraph, Edge, EdgeTag, GraphBuilder, NodeId, NodeKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Channel runs a consumer hands back along one inbound edge, mirroring
/// the report's source-key definition but computed from scratch.
pub fn oracle_source_channels(g: &CompGraph, edge_id: usize) -> Vec<(usize, usize)> {
    let e = &g.edges()[edge_id];
    let w = g.node(e.dst);
    let full = |c: usize| if c == 0 { vec![] } else { vec![(0, c)] };
    match &w.kind {
        NodeKind::Concat => {
            let mut offset = 0;
            for &ei in g.in_edge_ids(w.id) {
                let width = g.edge_width(&g.edges()[ei]);
                if ei == edge_id {
                    return vec![(offset, offset + width)];
                }
                offset += width;
            }
            full(w.out_channels)
        }
        NodeKind::MaskedAdd { mask } if e.tag == EdgeTag::Identity => {
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
            runs
        }
        NodeKind::Split { .. } => full(w.in_channels.first().copied().unwrap_or(0)),
        _ => full(w.out_channels),
    }
}

pub type OracleSource = (NodeId, Vec<(usize, usize)>);

#[derive(Debug, Default)]
pub struct OracleReport {
    pub timestamps: BTreeMap<NodeId, BTreeSet<usize>>,
    pub sources: BTreeMap<NodeId, BTreeMap<usize, BTreeSet<OracleSource>>>,
    pub prefixes_visited: usize,
}

/// Enumerate every reversed path from the loss (all are simple on a DAG)
/// and record, per parametric node, the distinct parametric-node counts at
/// which the path reaches it plus the consumer edge it arrived through.
pub fn brute_force_paths(g: &CompGraph, cap: usize) -> OracleReport {
    let mut report = OracleReport::default();
    let loss = g.loss_id().expect("graph has a loss");

    fn walk(
        g: &CompGraph,
        node: NodeId,
        cost_before: usize,
        arrived_via: Option<usize>,
        report: &mut OracleReport,
        cap: usize,
    ) {
        report.prefixes_visited += 1;
        assert!(report.prefixes_visited <= cap, "path enumeration exceeded cap {cap}");
        let kind = &g.node(node).kind;
        let cost = cost_before + usize::from(kind.is_parametric());
        if kind.is_parametric() {
            report.timestamps.entry(node).or_default().insert(cost);
            let edge_id = arrived_via.expect("parametric nodes are reached through an edge");
            report
                .sources
                .entry(node)
                .or_default()
                .entry(cost)
                .or_default()
                .insert((g.edges()[edge_id].dst, oracle_source_channels(g, edge_id)));
        }
        // gradient enters a stop-gradient node but never leaves it
        if *kind == NodeKind::StopGrad {
            return;
        }
        for &ei in g.in_edge_ids(node) {
            walk(g, g.edges()[ei].src, cost, Some(ei), report, cap);
        }
    }

    walk(g, loss, 0, None, &mut report, cap);
    report
}

/// All topological orders of a small graph, by backtracking.
pub fn all_topo_orders(g: &CompGraph) -> Vec<Vec<NodeId>> {
    fn go(
        g: &CompGraph,
        indeg: &mut Vec<usize>,
        taken: &mut Vec<bool>,
        prefix: &mut Vec<NodeId>,
        out: &mut Vec<Vec<NodeId>>,
    ) {
        if prefix.len() == g.len() {
            out.push(prefix.clone());
            return;
        }
        for id in 0..g.len() {
            if taken[id] || indeg[id] != 0 {
                continue;
            }
            taken[id] = true;
            prefix.push(id);
            for e in g.out_edges(id) {
                indeg[e.dst] -= 1;
            }
            go(g, indeg, taken, prefix, out);
            for e in g.out_edges(id) {
                indeg[e.dst] += 1;
            }
            prefix.pop();
            taken[id] = false;
        }
    }
    let mut indeg: Vec<usize> = (0..g.len()).map(|i| g.in_edge_ids(i).len()).collect();
    let mut out = Vec::new();
    go(g, &mut indeg, &mut vec![false; g.len()], &mut Vec::new(), &mut out);
    out
}

/// Count distinct simple forward paths from the input to the loss.
pub fn count_forward_paths(g: &CompGraph) -> u64 {
    let order = gradpath::graph::topo_order(g).expect("acyclic");
    let input = g.input_id().expect("graph has input");
    let mut count = vec![0u64; g.len()];
    count[input] = 1;
    for &id in &order {
        if count[id] == 0 {
            continue;
        }
        for e in g.out_edges(id) {
            count[e.dst] += count[id];
        }
    }
    count[g.loss_id().expect("graph has loss")]
}

/// Seeded random graph with at most `max_parametric` parametric nodes:
/// stride-1 convolutions mixed with residual blocks, masked residuals,
/// dense concats, split/rejoin patterns, and occasional stop-gradients.
/// The result always validates.
pub fn random_graph(seed: u64, max_parametric: usize) -> CompGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new();
    let input = b.push(NodeKind::Input, 4, 0);
    let mut current = b.chain(NodeKind::Conv { kernel: 3, stride: 1 }, 4, 1, &[input]);
    // every pattern below restores the working width
    let width = 4usize;
    let mut parametric = 1usize;
    let mut earlier: Vec<(NodeId, usize)> = Vec::new(); // same-scale feature taps

    let budget = rng.gen_range(3..=max_parametric);
    while parametric < budget {
        earlier.push((current, width));
        match rng.gen_range(0..100) {
            // plain conv
            0..=34 => {
                current = b.chain(NodeKind::Conv { kernel: 3, stride: 1 }, width, 1, &[current]);
                parametric += 1;
            }
            // residual block, optionally masked, optionally stop-gradded
            35..=59 => {
                if parametric + 2 > budget {
                    current = b.chain(NodeKind::Conv { kernel: 3, stride: 1 }, width, 1, &[current]);
                    parametric += 1;
                    continue;
                }
                let x = current;
                let c1 = b.chain(NodeKind::Conv { kernel: 3, stride: 1 }, width, 1, &[x]);
                let c2 = b.chain(NodeKind::Conv { kernel: 3, stride: 1 }, width, 1, &[c1]);
                parametric += 2;
                let masked = rng.gen_bool(0.3);
                let agg = if masked {
                    let mask: Vec<bool> = (0..width).map(|_| rng.gen_bool(0.6)).collect();
                    b.push(NodeKind::MaskedAdd { mask }, width, 1)
                } else {
                    b.push(NodeKind::Add, 0, 1)
                };
                let stop_identity = rng.gen_bool(0.15);
                if stop_identity {
                    let sg = b.chain(NodeKind::StopGrad, width, 1, &[x]);
                    b.edge(sg, agg, EdgeTag::Identity);
                } else {
                    b.edge(x, agg, EdgeTag::Identity);
                }
                if rng.gen_bool(0.15) {
                    let sg = b.chain(NodeKind::StopGrad, width, 1, &[c2]);
                    b.edge(sg, agg, EdgeTag::Data);
                } else {
                    b.edge(c2, agg, EdgeTag::Data);
                }
                current = agg;
            }
            // dense concat with an earlier tap, shrunk back by a transition
            60..=79 => {
                if earlier.len() < 2 || parametric + 1 > budget {
                    current = b.chain(NodeKind::Conv { kernel: 3, stride: 1 }, width, 1, &[current]);
                    parametric += 1;
                    continue;
                }
                let (tap, _) = earlier[rng.gen_range(0..earlier.len() - 1)];
                let cat = b.chain(NodeKind::Concat, 0, 1, &[current, tap]);
                current = b.chain(NodeKind::Transition, width, 1, &[cat]);
                parametric += 1;
            }
            // split / per-part conv / rejoin
            _ => {
                if width < 2 || parametric + 2 > budget {
                    current = b.chain(NodeKind::Conv { kernel: 3, stride: 1 }, width, 1, &[current]);
                    parametric += 1;
                    continue;
                }
                let cut = rng.gen_range(1..width);
                let split = b.chain(
                    NodeKind::Split { ranges: vec![(0, cut), (cut, width)] },
                    0,
                    1,
                    &[current],
                );
                let left = b.push(NodeKind::Conv { kernel: 3, stride: 1 }, cut, 1);
                b.edge_range(split, 0, left, EdgeTag::Data);
                let right = b.push(NodeKind::Conv { kernel: 3, stride: 1 }, width - cut, 1);
                b.edge_range(split, 1, right, EdgeTag::CrossStage);
                parametric += 2;
                current = b.chain(NodeKind::Concat, 0, 1, &[left, right]);
            }
        }
    }
    b.chain(NodeKind::Loss, 0, 1, &[current]);
    let g = b.finish().expect("generator wiring is well-formed");
    let check = gradpath::graph::validate(&g);
    assert!(check.is_ok(), "random graph invalid: {:?}", check.violations);
    g
}

/// Compare the DP analysis of a graph against the brute-force oracle.
pub fn assert_analysis_matches_oracle(g: &CompGraph, cap: usize) {
    let report = gradpath::analysis::analyze(g);
    let oracle = brute_force_paths(g, cap);
    for id in g.parametric_ids() {
        let stats = &report.layers[&id];
        assert!(
            stats.combinations >= stats.timestamps.len(),
            "node {id}: fewer combinations than timestamps"
        );
        let empty = BTreeSet::new();
        let oracle_ts = oracle.timestamps.get(&id).unwrap_or(&empty);
        assert_eq!(
            &stats.timestamps, oracle_ts,
            "timestamps diverge at node {id}"
        );
        assert_eq!(
            stats.shortest_path,
            oracle_ts.first().copied(),
            "shortest diverges at node {id}"
        );
        assert_eq!(
            stats.longest_path,
            oracle_ts.last().copied(),
            "longest diverges at node {id}"
        );
        let report_sources: BTreeMap<usize, BTreeSet<OracleSource>> = stats
            .sources
            .iter()
            .map(|(&t, keys)| {
                (
                    t,
                    keys.iter()
                        .map(|k| (k.node, k.channels.runs().to_vec()))
                        .collect(),
                )
            })
            .collect();
        let oracle_sources = oracle.sources.get(&id).cloned().unwrap_or_default();
        assert_eq!(report_sources, oracle_sources, "sources diverge at node {id}");
    }
}

/// Splice helper used by tests that need a custom edge inserted.
#[allow(dead_code)]
pub fn edge_exists(g: &CompGraph, src: NodeId, dst: NodeId) -> bool {
    g.edges().iter().any(|e: &Edge| e.src == src && e.dst == dst)
}
