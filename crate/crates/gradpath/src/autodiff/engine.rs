//! Graph execution: forward pass, reverse-mode backward pass over the
//! recorded values, and the hop-instrumented backward used to observe
//! gradient arrival times empirically.
//!
//! The forward pass records every node output in execution order; backward
//! walks the exact reverse of that order. Convolutions and transitions
//! apply tanh (activation is folded into the parametric node, matching the
//! graph model); the classifier projection is linear.

use std::collections::{BTreeMap, BTreeSet};

use crate::graph::{CompGraph, Edge, EdgeTag, NodeId, NodeKind};

use super::ops;
use super::params::Params;
use super::value::Value;

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error("input has {got} channels, graph expects {expected}")]
    InputChannels { expected: usize, got: usize },
    #[error("missing parameters for node {0}")]
    MissingParams(NodeId),
    #[error("cross-entropy loss needs {expected} labels, got {got}")]
    LabelCount { expected: usize, got: usize },
    #[error("graph has no loss node")]
    NoLoss,
    #[error("graph is cyclic")]
    Cyclic,
}

/// How the loss node turns the network output into a scalar.
#[derive(Debug, Clone)]
pub enum LossMode {
    /// Mean of all output elements; label-free, used for structural checks.
    MeanActivation,
    /// Softmax cross-entropy over globally pooled logits.
    CrossEntropy(Vec<usize>),
}

/// Recorded forward execution: per-node outputs in execution order plus
/// the scalar loss and its gradient seed.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    values: Vec<Option<Value>>,
    order: Vec<NodeId>,
    pub output: Value,
    pub loss: f64,
    loss_grad: Value,
}

impl ForwardPass {
    pub fn value(&self, id: NodeId) -> Option<&Value> {
        self.values.get(id).and_then(|v| v.as_ref())
    }
}

/// Gradient of the loss w.r.t. each parametric node's weights.
pub type Gradients = BTreeMap<NodeId, Vec<f64>>;

fn fetch(values: &[Option<Value>], e: &Edge) -> Value {
    let v = values[e.src].as_ref().expect("producer evaluated before consumer");
    match e.src_range {
        Some((lo, hi)) => v.slice_channels(lo, hi),
        None => v.clone(),
    }
}

/// Execute the graph on one input batch.
pub fn forward(
    g: &CompGraph,
    params: &Params,
    input: &Value,
    mode: &LossMode,
) -> Result<ForwardPass, ExecError> {
    let order = crate::graph::topo_order(g).map_err(|_| ExecError::Cyclic)?;
    let mut values: Vec<Option<Value>> = vec![None; g.len()];
    let mut output = None;
    let mut loss = 0.0;
    let mut loss_grad = None;

    for &id in &order {
        let node = g.node(id);
        let ins: Vec<Value> = g.in_edges(id).map(|e| fetch(&values, e)).collect();
        let value = match &node.kind {
            NodeKind::Input => {
                if input.shape[1] != node.out_channels {
                    return Err(ExecError::InputChannels {
                        expected: node.out_channels,
                        got: input.shape[1],
                    });
                }
                input.clone()
            }
            NodeKind::Conv { kernel, stride } => {
                let w = params.get(id).ok_or(ExecError::MissingParams(id))?;
                let mut y = ops::conv2d(&ins[0], w, node.out_channels, *kernel, *stride);
                ops::tanh_inplace(&mut y);
                y
            }
            NodeKind::Transition => {
                let w = params.get(id).ok_or(ExecError::MissingParams(id))?;
                let mut y = ops::conv2d(&ins[0], w, node.out_channels, 1, 1);
                ops::tanh_inplace(&mut y);
                y
            }
            NodeKind::FullyConnected => {
                let w = params.get(id).ok_or(ExecError::MissingParams(id))?;
                ops::fc(&ins[0], w, node.out_channels)
            }
            NodeKind::Add => {
                let mut acc = ins[0].clone();
                for v in &ins[1..] {
                    for (a, b) in acc.data.iter_mut().zip(&v.data) {
                        *a += b;
                    }
                }
                acc
            }
            NodeKind::MaskedAdd { mask } => {
                masked_add_forward(g, id, mask, &ins)
            }
            NodeKind::Concat => {
                let [n, _, h, w] = ins[0].shape;
                let total: usize = ins.iter().map(|v| v.shape[1]).sum();
                let mut acc = Value::zeros([n, total, h, w]);
                let mut offset = 0;
                for v in &ins {
                    acc.add_into_channels(offset, v);
                    offset += v.shape[1];
                }
                acc
            }
            NodeKind::Split { .. } | NodeKind::Identity | NodeKind::StopGrad => ins[0].clone(),
            NodeKind::Loss => {
                let feed = ins.into_iter().next().ok_or(ExecError::NoLoss)?;
                let (l, grad) = match mode {
                    LossMode::MeanActivation => ops::mean_activation(&feed),
                    LossMode::CrossEntropy(labels) => {
                        if labels.len() != feed.shape[0] {
                            return Err(ExecError::LabelCount {
                                expected: feed.shape[0],
                                got: labels.len(),
                            });
                        }
                        ops::cross_entropy(&feed, labels)
                    }
                };
                loss = l;
                loss_grad = Some(grad);
                output = Some(feed);
                continue;
            }
        };
        values[id] = Some(value);
    }

    let output = output.ok_or(ExecError::NoLoss)?;
    let loss_grad = loss_grad.expect("loss gradient recorded with loss");
    Ok(ForwardPass { values, order, output, loss, loss_grad })
}

fn masked_add_forward(g: &CompGraph, id: NodeId, mask: &[bool], ins: &[Value]) -> Value {
    let node = g.node(id);
    let edges: Vec<&Edge> = g.in_edges(id).collect();
    let identity_slot = edges
        .iter()
        .position(|e| e.tag == EdgeTag::Identity)
        .expect("masked add has an identity input");
    let template = &ins[if identity_slot == 0 && ins.len() > 1 { 1 } else { 0 }];
    let [n, _, h, w] = template.shape;
    let mut acc = Value::zeros([n, node.out_channels, h, w]);
    for (slot, v) in ins.iter().enumerate() {
        if slot == identity_slot {
            continue;
        }
        for (a, b) in acc.data.iter_mut().zip(&v.data) {
            *a += b;
        }
    }
    let identity = &ins[identity_slot];
    let shared = node.out_channels.min(identity.shape[1]);
    for b in 0..n {
        for c in 0..shared {
            if !mask[c] {
                continue;
            }
            for y in 0..h {
                for x in 0..w {
                    let i = acc.idx(b, c, y, x);
                    acc.data[i] += identity.get(b, c, y, x);
                }
            }
        }
    }
    acc
}

fn masked_identity_grad(g: &Value, mask: &[bool], identity_shape: [usize; 4]) -> Value {
    let mut gid = Value::zeros(identity_shape);
    let [n, _, h, w] = g.shape;
    let shared = identity_shape[1].min(g.shape[1]);
    for b in 0..n {
        for c in 0..shared {
            if !mask[c] {
                continue;
            }
            for y in 0..h {
                for x in 0..w {
                    let i = gid.idx(b, c, y, x);
                    gid.data[i] = g.get(b, c, y, x);
                }
            }
        }
    }
    gid
}

fn accumulate(slots: &mut [Option<Value>], values: &[Option<Value>], e: &Edge, delta: Value) {
    let target_shape = values[e.src].as_ref().expect("forward value present").shape;
    let slot = slots[e.src].get_or_insert_with(|| Value::zeros(target_shape));
    match e.src_range {
        Some((lo, _)) => slot.add_into_channels(lo, &delta),
        None => {
            for (a, b) in slot.data.iter_mut().zip(&delta.data) {
                *a += b;
            }
        }
    }
}

/// Per-input gradients of one node given the gradient at its output.
/// Returns `(param_grad, per-inbound-edge input grads)`.
fn node_vjp(
    g: &CompGraph,
    params: &Params,
    pass: &ForwardPass,
    id: NodeId,
    grad: &Value,
) -> (Option<Vec<f64>>, Vec<Option<Value>>) {
    let node = g.node(id);
    let edges: Vec<&Edge> = g.in_edges(id).collect();
    match &node.kind {
        NodeKind::Conv { .. } | NodeKind::Transition => {
            let (k, s) = match node.kind {
                NodeKind::Conv { kernel, stride } => (kernel, stride),
                _ => (1, 1),
            };
            let y = pass.value(id).expect("conv output recorded");
            let g_pre = ops::tanh_vjp(grad, y);
            let x = fetch(&pass.values, edges[0]);
            let w = params.get(id).expect("validated in forward");
            let gw = ops::conv2d_vjp_weights(&g_pre, &x, node.out_channels, k, s);
            let gx = ops::conv2d_vjp_input(&g_pre, w, x.shape, k, s);
            (Some(gw), vec![Some(gx)])
        }
        NodeKind::FullyConnected => {
            let x = fetch(&pass.values, edges[0]);
            let w = params.get(id).expect("validated in forward");
            let gw = ops::fc_vjp_weights(grad, &x, node.out_channels);
            let gx = ops::fc_vjp_input(grad, w, x.shape);
            (Some(gw), vec![Some(gx)])
        }
        NodeKind::Add => (None, edges.iter().map(|_| Some(grad.clone())).collect()),
        NodeKind::MaskedAdd { mask } => {
            let grads = edges
                .iter()
                .map(|e| {
                    if e.tag == EdgeTag::Identity {
                        let id_shape = fetch(&pass.values, e).shape;
                        Some(masked_identity_grad(grad, mask, id_shape))
                    } else {
                        Some(grad.clone())
                    }
                })
                .collect();
            (None, grads)
        }
        NodeKind::Concat => {
            let mut offset = 0;
            let grads = edges
                .iter()
                .map(|e| {
                    let width = g.edge_width(e);
                    let slice = grad.slice_channels(offset, offset + width);
                    offset += width;
                    Some(slice)
                })
                .collect();
            (None, grads)
        }
        NodeKind::Split { .. } | NodeKind::Identity => (None, vec![Some(grad.clone())]),
        NodeKind::StopGrad => (None, vec![None]),
        NodeKind::Input | NodeKind::Loss => (None, Vec::new()),
    }
}

/// Reverse-mode backward pass over a recorded forward execution.
pub fn backward(g: &CompGraph, params: &Params, pass: &ForwardPass) -> Gradients {
    let mut slots: Vec<Option<Value>> = vec![None; g.len()];
    let loss = g.loss_id().expect("forward succeeded");
    for e in g.in_edges(loss) {
        accumulate(&mut slots, &pass.values, e, pass.loss_grad.clone());
    }
    let mut grads: Gradients = BTreeMap::new();
    for &id in pass.order.iter().rev() {
        let Some(grad) = slots[id].take() else { continue };
        let (gw, input_grads) = node_vjp(g, params, pass, id, &grad);
        if let Some(gw) = gw {
            let entry = grads.entry(id).or_insert_with(|| vec![0.0; gw.len()]);
            for (a, b) in entry.iter_mut().zip(&gw) {
                *a += b;
            }
        }
        for (e, delta) in g.in_edges(id).zip(input_grads) {
            if let Some(delta) = delta {
                accumulate(&mut slots, &pass.values, e, delta);
            }
        }
    }
    grads
}

/// Hop-instrumented backward pass: gradients are kept stratified by the
/// number of parametric nodes they have traversed, and each parametric
/// node records the hop counts at which a nonzero weight-gradient
/// contribution arrives. Exact-zero contributions are excluded.
pub fn arrival_trace(
    g: &CompGraph,
    params: &Params,
    input: &Value,
    mode: &LossMode,
) -> Result<BTreeMap<NodeId, BTreeSet<usize>>, ExecError> {
    let pass = forward(g, params, input, mode)?;
    let mut slots: Vec<BTreeMap<usize, Value>> = vec![BTreeMap::new(); g.len()];
    let loss = g.loss_id().ok_or(ExecError::NoLoss)?;

    let add_hop = |slots: &mut Vec<BTreeMap<usize, Value>>, e: &Edge, hop: usize, delta: &Value| {
        let target_shape = pass.values[e.src].as_ref().expect("forward value present").shape;
        let slot = slots[e.src]
            .entry(hop)
            .or_insert_with(|| Value::zeros(target_shape));
        match e.src_range {
            Some((lo, _)) => slot.add_into_channels(lo, delta),
            None => {
                for (a, b) in slot.data.iter_mut().zip(&delta.data) {
                    *a += b;
                }
            }
        }
    };

    for e in g.in_edges(loss) {
        add_hop(&mut slots, e, 0, &pass.loss_grad);
    }

    let mut trace: BTreeMap<NodeId, BTreeSet<usize>> = g
        .parametric_ids()
        .into_iter()
        .map(|id| (id, BTreeSet::new()))
        .collect();

    for &id in pass.order.iter().rev() {
        let hops = std::mem::take(&mut slots[id]);
        let node = g.node(id);
        for (hop, grad) in hops {
            let (gw, input_grads) = node_vjp(g, params, &pass, id, &grad);
            if let Some(gw) = gw {
                if gw.iter().any(|&v| v != 0.0) {
                    trace.get_mut(&id).expect("parametric").insert(hop + 1);
                }
            }
            let next_hop = hop + node.kind.path_cost();
            for (e, delta) in g.in_edges(id).zip(input_grads) {
                if let Some(delta) = delta {
                    add_hop(&mut slots, e, next_hop, &delta);
                }
            }
        }
    }
    Ok(trace)
}
