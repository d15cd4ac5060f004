//! Named architecture presets for the comparisons the CLI exposes.

use super::{ArchSpec, CspFusion, CspOptions, ElanStack, Family, StopGradMode};
use super::transforms::CspEntry;

/// All preset names, grouped roughly by what they are for.
pub fn preset_names() -> Vec<&'static str> {
    vec![
        // cost-model reference points
        "darknet53",
        "darknet53-csp",
        // scaling series
        "plainnet-8",
        "plainnet-16",
        "plainnet-32",
        "plainnet-64",
        "resnet-8",
        "resnet-16",
        "resnet-32",
        "resnet-64",
        "densenet-8",
        "densenet-16",
        "densenet-32",
        "densenet-64",
        "sparsenet-8",
        "sparsenet-16",
        "sparsenet-32",
        "sparsenet-64",
        // toy instances for the autodiff engine
        "plainnet-toy",
        "resnet-toy",
        "prn-toy",
        "densenet-toy",
        "sparsenet-toy",
        "vovnet-toy",
        "darknet53-toy",
        "elan-toy",
        "csp-resnet-toy",
        // ablation structures
        "resnet-stopgrad-identity",
        "resnet-stopgrad-block",
        "vovnet-deep",
        "vovnet-deep-elan",
    ]
}

/// Look up a preset by name.
pub fn preset(name: &str) -> Option<ArchSpec> {
    let series = |family: Family, depth: usize| ArchSpec::new(family, vec![depth], 16);
    let spec = match name {
        "darknet53" => ArchSpec::new(Family::Darknet53, vec![1, 2, 8, 8, 4], 32)
            .with_input((3, 256, 256))
            .with_classes(1000),
        "darknet53-csp" => ArchSpec::new(Family::Darknet53, vec![1, 2, 8, 8, 4], 32)
            .with_input((3, 256, 256))
            .with_classes(1000)
            .with_csp(CspOptions {
                split_ratio: 0.5,
                fusion: CspFusion::Both,
                entry: CspEntry::Projection,
            }),
        "plainnet-8" => series(Family::PlainNet, 8),
        "plainnet-16" => series(Family::PlainNet, 16),
        "plainnet-32" => series(Family::PlainNet, 32),
        "plainnet-64" => series(Family::PlainNet, 64),
        "resnet-8" => series(Family::ResNet, 8),
        "resnet-16" => series(Family::ResNet, 16),
        "resnet-32" => series(Family::ResNet, 32),
        "resnet-64" => series(Family::ResNet, 64),
        "densenet-8" => series(Family::DenseNet, 8),
        "densenet-16" => series(Family::DenseNet, 16),
        "densenet-32" => series(Family::DenseNet, 32),
        "densenet-64" => series(Family::DenseNet, 64),
        "sparsenet-8" => series(Family::SparseNet, 8),
        "sparsenet-16" => series(Family::SparseNet, 16),
        "sparsenet-32" => series(Family::SparseNet, 32),
        "sparsenet-64" => series(Family::SparseNet, 64),
        "plainnet-toy" => ArchSpec::new(Family::PlainNet, vec![4], 8),
        "resnet-toy" => ArchSpec::new(Family::ResNet, vec![3], 8),
        "prn-toy" => ArchSpec::new(Family::Prn, vec![3], 8),
        "densenet-toy" => ArchSpec::new(Family::DenseNet, vec![4], 6),
        "sparsenet-toy" => ArchSpec::new(Family::SparseNet, vec![6], 6),
        "vovnet-toy" => {
            let mut s = ArchSpec::new(Family::VoVNet, vec![2], 8);
            s.osa_convs = 3;
            s
        }
        "darknet53-toy" => ArchSpec::new(Family::Darknet53, vec![1, 1, 1], 4),
        "elan-toy" => {
            let mut s = ArchSpec::new(Family::Elan, vec![1], 8);
            s.elan_stack = Some(ElanStack { a: 2, b: 2 });
            s
        }
        "csp-resnet-toy" => ArchSpec::new(Family::ResNet, vec![2], 8).with_csp(CspOptions {
            split_ratio: 0.5,
            fusion: CspFusion::Both,
            entry: CspEntry::Split,
        }),
        "resnet-stopgrad-identity" => {
            ArchSpec::new(Family::ResNet, vec![3], 8).with_stop_grad(StopGradMode::OnIdentity)
        }
        "resnet-stopgrad-block" => {
            ArchSpec::new(Family::ResNet, vec![3], 8).with_stop_grad(StopGradMode::OnBlock)
        }
        "vovnet-deep" => {
            let mut s = ArchSpec::new(Family::VoVNet, vec![12], 4);
            s.osa_convs = 3;
            s
        }
        "vovnet-deep-elan" => {
            let mut s = ArchSpec::new(Family::VoVNet, vec![12], 4);
            s.osa_convs = 3;
            s.elan_replan = true;
            s
        }
        _ => return None,
    };
    Some(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::validate;

    #[test]
    fn every_preset_builds_and_validates() {
        for name in preset_names() {
            let spec = preset(name).expect("listed preset exists");
            let g = crate::zoo::build(&spec).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(validate(&g).is_ok(), "{name}: {:?}", validate(&g).violations);
        }
    }

    #[test]
    fn preset_specs_round_trip_through_text() {
        for name in preset_names() {
            let spec = preset(name).unwrap();
            let parsed = ArchSpec::parse(&spec.to_text()).unwrap();
            assert_eq!(parsed, spec, "{name}");
        }
    }
}
