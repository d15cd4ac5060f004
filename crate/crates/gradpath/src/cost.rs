//! Closed-form resource accounting.
//!
//! Conventions (documented here once, used everywhere):
//! - FLOPs count a multiply-add as 2 operations. Bias, normalization,
//!   activation and pooling are excluded, as are all routing nodes.
//! - Parameter counts are weights only (no bias/normalization terms).
//! - Memory peak is the max over parametric nodes of input plus output
//!   feature-map elements; routing nodes are treated as zero-copy views.
//! - Memory access cost per convolution is
//!   `h*w*(c_in + c_out) + k^2*c_in*c_out` at the node's input resolution.

use std::collections::BTreeMap;

use crate::graph::{CompGraph, NodeId, NodeKind};

#[derive(Debug, thiserror::Error)]
pub enum CostError {
    #[error("input shape {got}x{h}x{w} does not match graph input of {expected} channels")]
    InputChannels { expected: usize, got: usize, h: usize, w: usize },
    #[error("spatial size {h}x{w} is not divisible by stride {stride} at node {node}")]
    Stride { node: NodeId, h: usize, w: usize, stride: usize },
    #[error("graph has no input node")]
    NoInput,
    #[error("graph is cyclic")]
    Cyclic,
}

/// Resource cost of a single node.
#[derive(Debug, Clone)]
pub struct NodeCost {
    pub id: NodeId,
    pub kind: String,
    pub flops: u64,
    pub params: u64,
    pub in_elems: u64,
    pub out_elems: u64,
    pub mac: u64,
}

/// Whole-graph resource report.
#[derive(Debug, Clone)]
pub struct CostReport {
    pub flops: u64,
    pub params: u64,
    pub memory_peak: u64,
    pub mac: u64,
    pub per_node: Vec<NodeCost>,
}

impl CostReport {
    /// CSV: one row per node, totals row last.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,kind,flops,params,in_elems,out_elems\n");
        for n in &self.per_node {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                n.id, n.kind, n.flops, n.params, n.in_elems, n.out_elems
            ));
        }
        out.push_str(&format!("total,,{},{},,\n", self.flops, self.params));
        out
    }
}

/// Output shape (channels, height, width) per node for a given input.
pub fn shapes(
    g: &CompGraph,
    input_shape: (usize, usize, usize),
) -> Result<BTreeMap<NodeId, (usize, usize, usize)>, CostError> {
    let order = crate::graph::topo_order(g).map_err(|_| CostError::Cyclic)?;
    let input = g.input_id().ok_or(CostError::NoInput)?;
    let (c_in, h_in, w_in) = input_shape;
    if g.node(input).out_channels != c_in {
        return Err(CostError::InputChannels {
            expected: g.node(input).out_channels,
            got: c_in,
            h: h_in,
            w: w_in,
        });
    }
    let mut shapes = BTreeMap::new();
    for &id in &order {
        let node = g.node(id);
        let src_shape = g
            .in_edges(id)
            .next()
            .and_then(|e| shapes.get(&e.src).copied())
            .unwrap_or((0, 0, 0));
        let (_, h, w) = src_shape;
        let shape = match &node.kind {
            NodeKind::Input => (c_in, h_in, w_in),
            NodeKind::Conv { stride, .. } => {
                if *stride > 1 && (h % stride != 0 || w % stride != 0) {
                    return Err(CostError::Stride { node: id, h, w, stride: *stride });
                }
                (node.out_channels, h / stride, w / stride)
            }
            NodeKind::FullyConnected => (node.out_channels, 1, 1),
            NodeKind::Loss => (1, 1, 1),
            _ => (node.out_channels, h, w),
        };
        shapes.insert(id, shape);
    }
    Ok(shapes)
}

/// Compute the full cost report for a graph at an input shape.
pub fn cost(g: &CompGraph, input_shape: (usize, usize, usize)) -> Result<CostReport, CostError> {
    let shapes = shapes(g, input_shape)?;
    let mut per_node = Vec::new();
    let (mut flops, mut params, mut peak, mut mac) = (0u64, 0u64, 0u64, 0u64);
    for node in g.nodes() {
        let (c_out, h_out, w_out) = shapes[&node.id];
        let in_elems: u64 = g
            .in_edges(node.id)
            .map(|e| {
                let (_, h, w) = shapes[&e.src];
                (g.edge_width(e) * h * w) as u64
            })
            .sum();
        let out_elems = (c_out * h_out * w_out) as u64;
        let c_in = node.in_channels.first().copied().unwrap_or(0) as u64;
        let (n_flops, n_params, n_mac) = match &node.kind {
            NodeKind::Conv { kernel, .. } => {
                let k2 = (kernel * kernel) as u64;
                let weights = k2 * c_in * c_out as u64;
                (
                    2 * weights * (h_out * w_out) as u64,
                    weights,
                    in_elems + out_elems + weights,
                )
            }
            NodeKind::Transition => {
                let weights = c_in * c_out as u64;
                (
                    2 * weights * (h_out * w_out) as u64,
                    weights,
                    in_elems + out_elems + weights,
                )
            }
            NodeKind::FullyConnected => {
                let weights = c_in * c_out as u64;
                (2 * weights, weights, in_elems + out_elems + weights)
            }
            _ => (0, 0, 0),
        };
        flops += n_flops;
        params += n_params;
        mac += n_mac;
        if node.kind.is_parametric() {
            peak = peak.max(in_elems + out_elems);
        }
        per_node.push(NodeCost {
            id: node.id,
            kind: node.kind.label(),
            flops: n_flops,
            params: n_params,
            in_elems,
            out_elems,
            mac: n_mac,
        });
    }
    Ok(CostReport { flops, params, memory_peak: peak, mac, per_node })
}

/// Cost ratios of `b` relative to `a`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CostRatios {
    pub flops_ratio: f64,
    pub params_ratio: f64,
    pub peak_ratio: f64,
}

pub fn compare(
    a: &CompGraph,
    b: &CompGraph,
    input_shape: (usize, usize, usize),
) -> Result<CostRatios, CostError> {
    let ca = cost(a, input_shape)?;
    let cb = cost(b, input_shape)?;
    Ok(CostRatios {
        flops_ratio: cb.flops as f64 / ca.flops as f64,
        params_ratio: cb.params as f64 / ca.params as f64,
        peak_ratio: cb.memory_peak as f64 / ca.memory_peak as f64,
    })
}

/// Cost of one stage's computational blocks only: stride-1 convolutions
/// with the given stage id. Downsampling convs, transitions and routing
/// are excluded, so the numbers isolate the block work itself.
pub fn stage_block_cost(
    g: &CompGraph,
    input_shape: (usize, usize, usize),
    stage_id: usize,
) -> Result<CostReport, CostError> {
    let full = cost(g, input_shape)?;
    let block_ids: Vec<NodeId> = g
        .nodes()
        .iter()
        .filter(|n| {
            n.stage_id == stage_id && matches!(n.kind, NodeKind::Conv { stride: 1, .. })
        })
        .map(|n| n.id)
        .collect();
    let per_node: Vec<NodeCost> = full
        .per_node
        .into_iter()
        .filter(|n| block_ids.contains(&n.id))
        .collect();
    let flops = per_node.iter().map(|n| n.flops).sum();
    let params = per_node.iter().map(|n| n.params).sum();
    let mac = per_node.iter().map(|n| n.mac).sum();
    let memory_peak = per_node.iter().map(|n| n.in_elems + n.out_elems).max().unwrap_or(0);
    Ok(CostReport { flops, params, memory_peak, mac, per_node })
}

/// Memory access cost of one convolution shape.
pub fn conv_mac(c_in: usize, c_out: usize, kernel: usize, hw: usize) -> u64 {
    (hw * (c_in + c_out) + kernel * kernel * c_in * c_out) as u64
}

/// True when `(c_in, c_out)` minimizes memory access cost among all integer
/// channel factorizations with the same `k^2 * c_in * c_out` product (i.e.
/// the same FLOPs); the minimum sits at equal input and output widths.
pub fn mac_optimality_check(c_in: usize, c_out: usize, kernel: usize, hw: usize) -> bool {
    let product = c_in * c_out;
    let own = conv_mac(c_in, c_out, kernel, hw);
    let mut best = own;
    let mut i = 1;
    while i * i <= product {
        if product % i == 0 {
            best = best.min(conv_mac(i, product / i, kernel, hw));
            best = best.min(conv_mac(product / i, i, kernel, hw));
        }
        i += 1;
    }
    own == best
}
