//! Per-family graph construction.
//!
//! Shared conventions: stage `s` runs at width `base * 2^(s-1)`; stages
//! after the first begin with a stride-2 3x3 convolution that doubles the
//! width. The stem (where a family has one) is stage 0. Families that end
//! in a classifier place it in stage `stages + 1`.

use crate::graph::{CompGraph, EdgeTag, GraphBuilder, NodeId, NodeKind};

use super::{ArchSpec, BuildSpecError, Family};

pub fn build_family(spec: &ArchSpec) -> Result<CompGraph, BuildSpecError> {
    match spec.family {
        Family::PlainNet => plainnet(spec),
        Family::ResNet => residual(spec, false),
        Family::Prn => residual(spec, true),
        Family::DenseNet => densenet(spec),
        Family::SparseNet => sparsenet(spec),
        Family::VoVNet => vovnet(spec),
        Family::Darknet53 => darknet53(spec),
        Family::Elan => elan(spec),
    }
}

fn stage_width(spec: &ArchSpec, stage: usize) -> usize {
    spec.base_channels << (stage - 1)
}

fn conv(b: &mut GraphBuilder, src: NodeId, kernel: usize, stride: usize, out: usize, stage: usize) -> NodeId {
    b.chain(NodeKind::Conv { kernel, stride }, out, stage, &[src])
}

/// Downsample into stage `s` when it is not the first.
fn enter_stage(b: &mut GraphBuilder, x: NodeId, spec: &ArchSpec, s: usize) -> NodeId {
    if s == 1 {
        x
    } else {
        conv(b, x, 3, 2, stage_width(spec, s), s)
    }
}

fn finish(mut b: GraphBuilder, last: NodeId) -> Result<CompGraph, BuildSpecError> {
    b.chain(NodeKind::Loss, 0, 0, &[last]);
    Ok(b.finish()?)
}

/// Chain of convolutions; `depth[s]` convs per stage, no aggregation.
fn plainnet(spec: &ArchSpec) -> Result<CompGraph, BuildSpecError> {
    let mut b = GraphBuilder::new();
    let input = b.push(NodeKind::Input, spec.input_shape.0, 0);
    let mut x = input;
    for (i, &d) in spec.depth.iter().enumerate() {
        let s = i + 1;
        let w = stage_width(spec, s);
        for l in 0..d {
            let stride = if s > 1 && l == 0 { 2 } else { 1 };
            x = conv(&mut b, x, 3, stride, w, s);
        }
    }
    finish(b, x)
}

/// Residual (or masked-residual) basic blocks: two 3x3 convs plus a skip.
fn residual(spec: &ArchSpec, masked: bool) -> Result<CompGraph, BuildSpecError> {
    let mut b = GraphBuilder::new();
    let input = b.push(NodeKind::Input, spec.input_shape.0, 0);
    let mut x = conv(&mut b, input, 3, 1, spec.base_channels, 0);
    for (i, &d) in spec.depth.iter().enumerate() {
        let s = i + 1;
        x = enter_stage(&mut b, x, spec, s);
        let w = stage_width(spec, s);
        for _ in 0..d {
            let c1 = conv(&mut b, x, 3, 1, w, s);
            let c2 = conv(&mut b, c1, 3, 1, w, s);
            let agg = if masked {
                let pass = (spec.prn_mask_ratio * w as f64).floor() as usize;
                let mask = (0..w).map(|c| c < pass).collect();
                b.push(NodeKind::MaskedAdd { mask }, w, s)
            } else {
                b.push(NodeKind::Add, 0, s)
            };
            b.edge(x, agg, EdgeTag::Identity);
            b.edge(c2, agg, EdgeTag::Data);
            x = agg;
        }
    }
    finish(b, x)
}

/// Dense aggregation: layer `l` consumes every earlier output in the
/// stage; the stage output concatenates all of them.
fn densenet(spec: &ArchSpec) -> Result<CompGraph, BuildSpecError> {
    let mut b = GraphBuilder::new();
    let input = b.push(NodeKind::Input, spec.input_shape.0, 0);
    let mut x = conv(&mut b, input, 3, 1, spec.base_channels, 0);
    for (i, &d) in spec.depth.iter().enumerate() {
        let s = i + 1;
        x = enter_stage(&mut b, x, spec, s);
        let growth = stage_width(spec, s);
        let mut feats = vec![x];
        for _ in 0..d {
            let src = if feats.len() == 1 {
                feats[0]
            } else {
                b.chain(NodeKind::Concat, 0, s, &feats)
            };
            let y = conv(&mut b, src, 3, 1, growth, s);
            feats.push(y);
        }
        x = b.chain(NodeKind::Concat, 0, s, &feats);
    }
    finish(b, x)
}

/// Power-of-two sparse aggregation: layer `l` consumes layers `l - 2^k`.
fn sparsenet(spec: &ArchSpec) -> Result<CompGraph, BuildSpecError> {
    let mut b = GraphBuilder::new();
    let input = b.push(NodeKind::Input, spec.input_shape.0, 0);
    let mut x = conv(&mut b, input, 3, 1, spec.base_channels, 0);
    for (i, &d) in spec.depth.iter().enumerate() {
        let s = i + 1;
        x = enter_stage(&mut b, x, spec, s);
        let w = stage_width(spec, s);
        // outputs[0] is the stage entry
        let mut outputs = vec![x];
        for l in 1..=d {
            let mut srcs = Vec::new();
            let mut k = 1usize;
            while k <= l {
                srcs.push(outputs[l - k]);
                k <<= 1;
            }
            let src = if srcs.len() == 1 {
                srcs[0]
            } else {
                b.chain(NodeKind::Concat, 0, s, &srcs)
            };
            let y = conv(&mut b, src, 3, 1, w, s);
            outputs.push(y);
        }
        x = *outputs.last().expect("stage has layers");
    }
    finish(b, x)
}

/// One-shot aggregation modules: a chain of convs whose outputs (plus the
/// module input) are concatenated and projected by a transition.
fn vovnet(spec: &ArchSpec) -> Result<CompGraph, BuildSpecError> {
    let mut b = GraphBuilder::new();
    let input = b.push(NodeKind::Input, spec.input_shape.0, 0);
    let mut x = conv(&mut b, input, 3, 1, spec.base_channels, 0);
    for (i, &modules) in spec.depth.iter().enumerate() {
        let s = i + 1;
        x = enter_stage(&mut b, x, spec, s);
        let w = stage_width(spec, s);
        for _ in 0..modules {
            let mut feats = vec![x];
            let mut y = x;
            for _ in 0..spec.osa_convs {
                y = conv(&mut b, y, 3, 1, w, s);
                feats.push(y);
            }
            let cat = b.chain(NodeKind::Concat, 0, s, &feats);
            x = b.chain(NodeKind::Transition, w, s, &[cat]);
        }
    }
    finish(b, x)
}

/// Staged residual network with 1x1 bottlenecks: stem, five downsampling
/// stages of `depth[s]` blocks, classifier head.
fn darknet53(spec: &ArchSpec) -> Result<CompGraph, BuildSpecError> {
    let mut b = GraphBuilder::new();
    let input = b.push(NodeKind::Input, spec.input_shape.0, 0);
    let mut x = conv(&mut b, input, 3, 1, spec.base_channels, 0);
    for (i, &d) in spec.depth.iter().enumerate() {
        let s = i + 1;
        let w = spec.base_channels << s;
        x = conv(&mut b, x, 3, 2, w, s);
        for _ in 0..d {
            let c1 = conv(&mut b, x, 1, 1, w / 2, s);
            let c2 = conv(&mut b, c1, 3, 1, w, s);
            let add = b.push(NodeKind::Add, 0, s);
            b.edge(x, add, EdgeTag::Identity);
            b.edge(c2, add, EdgeTag::Data);
            x = add;
        }
    }
    // the classifier is part of the family plan; spec.classes appends
    // nothing further when unset
    if spec.classes.is_none() {
        let head = b.chain(NodeKind::FullyConnected, 1000, spec.stages() + 1, &[x]);
        return finish(b, head);
    }
    finish(b, x)
}

/// Efficient-layer-aggregation blocks: two 1x1 entries, `b` stacked groups
/// of `a` convs tapped into one concat, one transition per block.
fn elan(spec: &ArchSpec) -> Result<CompGraph, BuildSpecError> {
    let stack = spec.elan_stack.unwrap_or(super::ElanStack { a: 2, b: 2 });
    let mut b = GraphBuilder::new();
    let input = b.push(NodeKind::Input, spec.input_shape.0, 0);
    let mut x = conv(&mut b, input, 3, 1, spec.base_channels, 0);
    for (i, &blocks) in spec.depth.iter().enumerate() {
        let s = i + 1;
        x = enter_stage(&mut b, x, spec, s);
        let w = stage_width(spec, s);
        let half = w / 2;
        if half == 0 {
            return Err(BuildSpecError::ZeroPartition { channels: w, ratio: 0.5 });
        }
        for _ in 0..blocks {
            let e1 = b.chain(NodeKind::Transition, half, s, &[x]);
            let e2 = b.chain(NodeKind::Transition, half, s, &[x]);
            let mut taps = vec![e1, e2];
            let mut y = e2;
            for _ in 0..stack.b {
                for _ in 0..stack.a {
                    y = conv(&mut b, y, 3, 1, half, s);
                }
                taps.push(y);
            }
            let cat = b.push(NodeKind::Concat, 0, s);
            b.edge(e1, cat, EdgeTag::CrossStage);
            for &t in &taps[1..] {
                b.edge(t, cat, EdgeTag::Data);
            }
            x = b.chain(NodeKind::Transition, w, s, &[cat]);
        }
    }
    finish(b, x)
}
