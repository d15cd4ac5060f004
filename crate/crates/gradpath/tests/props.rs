//! Property tests over randomized graphs and specs.

mod common;

use gradpath::graph::{topo_order, unfold, validate, NodeKind};
use gradpath::zoo::{ArchSpec, CspEntry, CspFusion, CspOptions, ElanStack, Family, StopGradMode};
use proptest::prelude::*;

fn arb_family() -> impl Strategy<Value = Family> {
    prop_oneof![
        Just(Family::PlainNet),
        Just(Family::ResNet),
        Just(Family::Prn),
        Just(Family::DenseNet),
        Just(Family::SparseNet),
        Just(Family::VoVNet),
        Just(Family::Darknet53),
        Just(Family::Elan),
    ]
}

fn arb_spec() -> impl Strategy<Value = ArchSpec> {
    (
        arb_family(),
        prop::collection::vec(1usize..5, 1..4),
        prop_oneof![Just(4usize), Just(8), Just(16)],
        0u8..=10,
        prop::option::of((1u8..=9, prop_oneof![
            Just(CspFusion::Both),
            Just(CspFusion::First),
            Just(CspFusion::Last),
            Just(CspFusion::None)
        ])),
        prop::option::of((1usize..4, 1usize..4)),
        prop_oneof![Just(StopGradMode::Off), Just(StopGradMode::OnIdentity), Just(StopGradMode::OnBlock)],
        prop::option::of(2usize..8),
    )
        .prop_map(
            |(family, depth, base, mask_tenths, csp, stack, stop_grad, classes)| {
                let mut spec = ArchSpec::new(family, depth, base);
                spec.prn_mask_ratio = mask_tenths as f64 / 10.0;
                spec.csp = csp.map(|(tenths, fusion)| CspOptions {
                    split_ratio: tenths as f64 / 10.0,
                    fusion,
                    entry: CspEntry::Split,
                });
                spec.elan_stack = stack.map(|(a, b)| ElanStack { a, b });
                spec.osa_convs = 3;
                spec.stop_grad = stop_grad;
                spec.classes = classes;
                spec
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn spec_text_round_trips(spec in arb_spec()) {
        let text = spec.to_text();
        let parsed = ArchSpec::parse(&text).unwrap();
        prop_assert_eq!(&parsed, &spec);
        prop_assert_eq!(parsed.to_text(), text);
    }

    /// Whatever a spec builds either fails cleanly or validates; the
    /// builders never hand back a structurally broken graph.
    #[test]
    fn built_graphs_always_validate(spec in arb_spec()) {
        if let Ok(g) = gradpath::zoo::build(&spec) {
            let result = validate(&g);
            prop_assert!(result.is_ok(), "{:?}", result.violations);
        }
    }

    #[test]
    fn topo_order_is_an_edge_respecting_permutation(seed in 0u64..500) {
        let g = common::random_graph(seed, 12);
        let order = topo_order(&g).unwrap();
        let mut sorted = order.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..g.len()).collect::<Vec<_>>());
        let mut pos = vec![0usize; g.len()];
        for (p, &id) in order.iter().enumerate() {
            pos[id] = p;
        }
        for e in g.edges() {
            prop_assert!(pos[e.src] < pos[e.dst]);
        }
    }

    #[test]
    fn unfold_preserves_validity_and_parametrics(seed in 0u64..500) {
        let g = common::random_graph(seed, 12);
        let u = unfold(&g);
        let result = validate(&u);
        prop_assert!(result.is_ok(), "{:?}", result.violations);
        let count = |g: &gradpath::graph::CompGraph, kind: fn(&NodeKind) -> bool| {
            g.nodes().iter().filter(|n| kind(&n.kind)).count()
        };
        prop_assert_eq!(
            count(&g, NodeKind::is_parametric),
            count(&u, NodeKind::is_parametric)
        );
    }

    /// Unfolding collapses zero-cost hops, so it never invents new path
    /// lengths; it only removes paths whose composed channel mask is dead
    /// (those carry exactly zero gradient). On graphs without masked
    /// residuals the timestamp sets are identical.
    #[test]
    fn unfold_never_invents_timestamps(seed in 0u64..200) {
        let g = common::random_graph(seed, 10);
        let before = gradpath::analysis::timestamps(&g);
        let after = gradpath::analysis::timestamps(&unfold(&g));
        let masked = g
            .nodes()
            .iter()
            .any(|n| matches!(n.kind, NodeKind::MaskedAdd { .. }));
        for (id, ts) in &after {
            prop_assert!(ts.is_subset(&before[id]), "node {id} gained paths");
        }
        if !masked {
            prop_assert_eq!(before, after);
        }
    }
}
