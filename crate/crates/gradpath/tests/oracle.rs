//! Oracle-backed checks: the analysis DP against exhaustive path
//! enumeration, deterministic topological ordering against all-orders
//! enumeration, unfold against forward execution and path counting.

mod common;

use common::*;
use gradpath::analysis::{analyze, ChannelSet};
use gradpath::autodiff::{forward, init_params, LossMode, Value};
use gradpath::graph::{topo_order, unfold, validate, NodeKind};
use gradpath::zoo::{build, preset, ArchSpec, Family};
use rand::{Rng, SeedableRng};

fn toy_input(seed: u64, shape: [usize; 4]) -> Value {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let len = shape.iter().product();
    Value::from_data(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

#[test]
fn topo_order_is_lexicographically_minimal() {
    // 4-block residual graph stays under 10 routing-free choices wide
    let g = build(&ArchSpec::new(Family::ResNet, vec![2], 8)).unwrap();
    assert!(g.len() <= 10);
    let ours = topo_order(&g).unwrap();
    let all = all_topo_orders(&g);
    assert!(all.contains(&ours));
    let minimal = all.into_iter().min().unwrap();
    assert_eq!(ours, minimal, "id tie-break must give the smallest order");
}

#[test]
fn unfold_preserves_forward_path_count() {
    let g = build(&ArchSpec::new(Family::ResNet, vec![4], 8)).unwrap();
    let u = unfold(&g);
    assert!(validate(&u).is_ok());
    // top aggregation gathers the stem plus all four block outputs
    let loss = u.loss_id().unwrap();
    let top = u.in_edges(loss).next().unwrap().src;
    assert_eq!(u.in_edge_ids(top).len(), 5);
    assert_eq!(count_forward_paths(&g), 16);
    assert_eq!(count_forward_paths(&u), 16);
}

#[test]
fn unfold_preserves_forward_function() {
    for (name, spec) in [
        ("resnet", ArchSpec::new(Family::ResNet, vec![3], 8)),
        ("prn", ArchSpec::new(Family::Prn, vec![3], 8)),
        ("densenet", ArchSpec::new(Family::DenseNet, vec![3], 6)),
        ("sparsenet", ArchSpec::new(Family::SparseNet, vec![5], 6)),
    ] {
        let g = build(&spec).unwrap();
        let u = unfold(&g);
        assert!(validate(&u).is_ok(), "{name}");
        // identical ids for shared parametric nodes, so one init serves both
        let params = init_params(&g, 17);
        let x = toy_input(23, [2, 3, 8, 8]);
        let a = forward(&g, &params, &x, &LossMode::MeanActivation).unwrap();
        let b = forward(&u, &params, &x, &LossMode::MeanActivation).unwrap();
        assert_eq!(a.output.shape, b.output.shape, "{name}");
        for (va, vb) in a.output.data.iter().zip(&b.output.data) {
            let tol = 1e-12 * va.abs().max(vb.abs()).max(1.0);
            assert!((va - vb).abs() <= tol, "{name}: {va} vs {vb}");
        }
    }
}

#[test]
fn unfold_keeps_parametric_ids_stable() {
    let g = build(&ArchSpec::new(Family::Prn, vec![3], 8)).unwrap();
    let u = unfold(&g);
    assert_eq!(g.parametric_ids(), u.parametric_ids());
}

#[test]
fn three_block_resnet_timestamps_match_enumeration() {
    let g = unfold(&build(&ArchSpec::new(Family::ResNet, vec![3], 8)).unwrap());
    assert_analysis_matches_oracle(&g, 1_000_000);
    // stamped sets grow toward the input: the deepest block conv sees odd
    // path lengths up to the full chain
    let report = analyze(&g);
    let first_block_out = g.parametric_ids()[2]; // stem, c1, c2 of block 1
    let ts: Vec<usize> = report.layers[&first_block_out].timestamps.iter().copied().collect();
    assert_eq!(ts, vec![1, 3, 5]);
}

#[test]
fn family_toys_match_enumeration() {
    for name in [
        "plainnet-toy",
        "resnet-toy",
        "prn-toy",
        "densenet-toy",
        "sparsenet-toy",
        "vovnet-toy",
        "elan-toy",
        "csp-resnet-toy",
    ] {
        let g = unfold(&build(&preset(name).unwrap()).unwrap());
        assert_analysis_matches_oracle(&g, 1_000_000);
    }
}

#[test]
fn prn_sources_partition_finer_than_resnet() {
    let resnet = unfold(&build(&ArchSpec::new(Family::ResNet, vec![3], 8)).unwrap());
    let prn = unfold(&build(&ArchSpec::new(Family::Prn, vec![3], 8)).unwrap());
    let rr = analyze(&resnet);
    let rp = analyze(&prn);
    // layers carry the same ids in both builds
    let mut strictly_finer = 0usize;
    for id in resnet.parametric_ids() {
        let (Some(sr), Some(sp)) = (rr.layers[&id].sources.get(&1), rp.layers[&id].sources.get(&1))
        else {
            continue;
        };
        // every masked source covers a subset of what the plain residual
        // network hands the same layer at t=1
        let resnet_cover: Vec<&ChannelSet> = sr.iter().map(|k| &k.channels).collect();
        for key in sp {
            let covered = resnet_cover.iter().any(|big| key.channels.is_subset_of(big));
            assert!(covered, "node {id}: masked source escapes the unmasked cover");
            let equal = resnet_cover.iter().any(|big| &&key.channels == big);
            if !equal {
                strictly_finer += 1;
            }
        }
    }
    assert!(strictly_finer > 0, "mask must refine at least one source");
}

#[test]
fn densenet_t1_sources_are_disjoint_slices() {
    let g = unfold(&build(&ArchSpec::new(Family::DenseNet, vec![4], 6)).unwrap());
    assert_analysis_matches_oracle(&g, 1_000_000);
    let report = analyze(&g);
    let at1 = report.sources_at(1);
    // all four dense layers plus the stem reach the loss through the block
    // concat; each through its own channel slice
    let mut slices: Vec<ChannelSet> = Vec::new();
    for (_, keys) in &at1 {
        for k in keys {
            slices.push(k.channels.clone());
        }
    }
    for i in 0..slices.len() {
        for j in i + 1..slices.len() {
            if slices[i] == slices[j] {
                continue;
            }
            let disjoint = slices[i]
                .runs()
                .iter()
                .all(|&(lo, hi)| (lo..hi).all(|c| !slices[j].contains(c)));
            assert!(disjoint, "concat slices must not overlap");
        }
    }
}

#[test]
fn random_graphs_small_sample_match_enumeration() {
    for seed in 0..25 {
        let g = unfold(&random_graph(seed, 10));
        assert_analysis_matches_oracle(&g, 1_000_000);
    }
}

#[test]
fn shared_add_gives_full_overlap_at_shared_timestamps() {
    use gradpath::analysis::overlap_at;
    let g = unfold(&build(&ArchSpec::new(Family::ResNet, vec![2], 8)).unwrap());
    let report = analyze(&g);
    // stem and both block-output convs all feed the flattened top add and
    // receive the loss gradient untransformed at t=1
    let ids = g.parametric_ids();
    let stem = ids[0];
    let block1_out = ids[2];
    assert_eq!(overlap_at(&g, &report, stem, block1_out, 1), Some(1.0));
}

#[test]
fn csp_fusion_reduces_duplication_overlap() {
    use gradpath::analysis::duplication_overlap;
    use gradpath::zoo::{apply_csp, CspEntry, CspFusion};
    let base = build(&ArchSpec::new(Family::ResNet, vec![2, 2], 8)).unwrap();
    let with_fusion = unfold(&apply_both_stages(&base, CspFusion::Both));
    let without = unfold(&apply_both_stages(&base, CspFusion::None));
    let mean_fused = duplication_overlap(&with_fusion).mean_adjacent;
    let mean_plain = duplication_overlap(&without).mean_adjacent;
    assert!(
        mean_fused < mean_plain,
        "fusion transitions must cut duplicated gradients: {mean_fused} vs {mean_plain}"
    );
    // regression values on the 2-stage toy
    assert!((mean_fused - 0.336111).abs() < 1e-4, "got {mean_fused}");
    assert!((mean_plain - 0.441667).abs() < 1e-4, "got {mean_plain}");

    fn apply_both_stages(
        g: &gradpath::graph::CompGraph,
        fusion: CspFusion,
    ) -> gradpath::graph::CompGraph {
        let s1 = apply_csp(g, 1, 0.5, fusion, CspEntry::Split).unwrap();
        apply_csp(&s1, 2, 0.5, fusion, CspEntry::Split).unwrap()
    }
}

#[test]
fn aggregated_feature_counts_follow_family_shape() {
    use gradpath::analysis::aggregated_features;
    // dense layer l aggregates l features
    let dense = build(&ArchSpec::new(Family::DenseNet, vec![4], 6)).unwrap();
    let feats = aggregated_features(&dense);
    let ids = dense.parametric_ids();
    // ids[0] is the stem; dense layers follow in order
    for (l, id) in ids[1..].iter().enumerate() {
        assert_eq!(feats[id], l + 1, "dense layer {} aggregates {} features", l + 1, l + 1);
    }
    // sparse layer l aggregates floor(log2 l) + 1
    let sparse = build(&ArchSpec::new(Family::SparseNet, vec![6], 6)).unwrap();
    let feats = aggregated_features(&sparse);
    let ids = sparse.parametric_ids();
    for (i, id) in ids[1..].iter().enumerate() {
        let l = i + 1;
        let expected = (l as f64).log2().floor() as usize + 1;
        assert_eq!(feats[id], expected, "sparse layer {l}");
    }
}

#[test]
fn osa_stacking_shifts_every_layer_by_one() {
    let build_vovnet = |modules: usize, replan: bool| {
        let mut spec = ArchSpec::new(Family::VoVNet, vec![modules], 8);
        spec.osa_convs = 3;
        spec.elan_replan = replan;
        unfold(&build(&spec).unwrap())
    };
    let mut prev: Option<std::collections::BTreeMap<_, _>> = None;
    for m in 1..=6 {
        let g = build_vovnet(m, false);
        assert_analysis_matches_oracle(&g, 1_000_000);
        let shortest: std::collections::BTreeMap<usize, usize> = analyze(&g)
            .layers
            .into_iter()
            .map(|(id, s)| (id, s.shortest_path.unwrap()))
            .collect();
        if let Some(prev) = &prev {
            // node ids of the first m-1 modules are construction-stable
            for (id, s) in prev {
                assert_eq!(
                    shortest[id],
                    s + 1,
                    "module {m}: layer {id} must gain exactly one transition"
                );
            }
        }
        prev = Some(shortest);
    }
    // re-planned: within-stage shortest paths do not depend on module count
    let max_within: Vec<usize> = (1..=6)
        .map(|m| {
            let g = build_vovnet(m, true);
            assert_analysis_matches_oracle(&g, 1_000_000);
            analyze(&g).max_shortest_path.unwrap()
        })
        .collect();
    assert!(max_within.iter().all(|&v| v == max_within[0]), "{max_within:?}");
}

#[test]
fn masked_add_with_ones_mask_runs_like_plain_add() {
    // same wiring, one masked, one not: forward must agree bit for bit
    let resnet = build(&ArchSpec::new(Family::ResNet, vec![2], 8)).unwrap();
    let mut full_mask = ArchSpec::new(Family::Prn, vec![2], 8);
    full_mask.prn_mask_ratio = 1.0;
    let prn = build(&full_mask).unwrap();
    let params = init_params(&resnet, 5);
    let x = toy_input(31, [2, 3, 8, 8]);
    let a = forward(&resnet, &params, &x, &LossMode::MeanActivation).unwrap();
    let b = forward(&prn, &params, &x, &LossMode::MeanActivation).unwrap();
    assert_eq!(a.output.data, b.output.data);
    assert_eq!(a.loss, b.loss);
}

#[test]
fn zero_mask_runs_like_plain_chain() {
    let mut masked_out = ArchSpec::new(Family::Prn, vec![2], 8);
    masked_out.prn_mask_ratio = 0.0;
    let prn = build(&masked_out).unwrap();
    // a plain chain with the same conv sequence: stem + 2 convs per block
    let plain = build(&ArchSpec::new(Family::PlainNet, vec![5], 8)).unwrap();
    let params = init_params(&prn, 9);
    let plain_params = init_params(&plain, 9);
    let x = toy_input(37, [2, 3, 8, 8]);
    let a = forward(&prn, &params, &x, &LossMode::MeanActivation).unwrap();
    let b = forward(&plain, &plain_params, &x, &LossMode::MeanActivation).unwrap();
    assert_eq!(a.output.data, b.output.data);
}

#[test]
fn masked_out_channel_reaches_loss_only_through_the_block() {
    use gradpath::autodiff::Params;
    use gradpath::graph::{EdgeTag, GraphBuilder};
    // input(4) feeds a masked residual directly: y = f(x) + m (.) x with
    // m = [1,1,0,0]; f is a single 3x3 conv
    let build_toy = |mask: Vec<bool>| {
        let mut b = GraphBuilder::new();
        let input = b.push(NodeKind::Input, 4, 0);
        let f = b.chain(NodeKind::Conv { kernel: 3, stride: 1 }, 4, 0, &[input]);
        let agg = b.push(NodeKind::MaskedAdd { mask }, 4, 0);
        b.edge(input, agg, EdgeTag::Identity);
        b.edge(f, agg, EdgeTag::Data);
        b.chain(NodeKind::Loss, 0, 0, &[agg]);
        b.finish().unwrap()
    };
    let g = build_toy(vec![true, true, false, false]);
    let cut = build_toy(vec![false; 4]);
    let conv_id = 1;

    let loss_at = |g: &gradpath::graph::CompGraph, params: &Params, x: &Value| {
        forward(g, params, x, &LossMode::MeanActivation).unwrap().loss
    };
    let fd = |g: &gradpath::graph::CompGraph, params: &Params, x: &Value, ch: usize| {
        let step = 1e-5;
        let mut up = x.clone();
        let mut down = x.clone();
        let i = x.idx(0, ch, 2, 2);
        up.data[i] += step;
        down.data[i] -= step;
        (loss_at(g, params, &up) - loss_at(g, params, &down)) / (2.0 * step)
    };
    let x = toy_input(41, [1, 4, 6, 6]);

    // with the block zeroed, a masked-out channel cannot reach the loss
    let mut zeroed = init_params(&g, 3);
    zeroed.get_mut(conv_id).unwrap().fill(0.0);
    assert_eq!(fd(&g, &zeroed, &x, 2), 0.0, "masked-out channel leaked through");
    assert!(fd(&g, &zeroed, &x, 0).abs() > 1e-9, "masked-in channel must pass");

    // with real block weights, the masked-out channel's influence equals
    // the pure block-path influence (mask fully closed)
    let params = init_params(&g, 3);
    let through_both = fd(&g, &params, &x, 2);
    let through_block_only = fd(&cut, &params, &x, 2);
    assert!((through_both - through_block_only).abs() < 1e-9);
    assert!(through_both.abs() > 1e-9);
}

#[test]
fn split_kinds_render_in_dot_with_dashed_skips() {
    let g = build(&preset("csp-resnet-toy").unwrap()).unwrap();
    let dot = gradpath::graph::to_dot(&g);
    assert!(dot.contains("[style=dashed]"));
    assert!(dot.contains("split"));
    let split = g
        .nodes()
        .iter()
        .find(|n| matches!(n.kind, NodeKind::Split { .. }))
        .unwrap();
    assert!(dot.contains(&format!("n{} [label=\"split {}\"]", split.id, split.out_channels)));
}
