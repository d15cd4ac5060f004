//! Declarative architecture construction.
//!
//! An [`ArchSpec`] names a family and its hyperparameters; [`build`] turns
//! it into a validated [`CompGraph`]. The text form is a line-oriented
//! `key = value` format (see [`ArchSpec::to_text`]) that round-trips
//! exactly.

mod families;
mod presets;
mod transforms;

pub use presets::{preset, preset_names};
pub use transforms::{append_classifier, apply_csp, insert_stop_grad, replan_elan, CspEntry, TransformError};

use crate::graph::CompGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    PlainNet,
    ResNet,
    Prn,
    DenseNet,
    SparseNet,
    VoVNet,
    Darknet53,
    Elan,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::PlainNet => "plainnet",
            Family::ResNet => "resnet",
            Family::Prn => "prn",
            Family::DenseNet => "densenet",
            Family::SparseNet => "sparsenet",
            Family::VoVNet => "vovnet",
            Family::Darknet53 => "darknet53",
            Family::Elan => "elan",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "plainnet" => Family::PlainNet,
            "resnet" => Family::ResNet,
            "prn" => Family::Prn,
            "densenet" => Family::DenseNet,
            "sparsenet" => Family::SparseNet,
            "vovnet" => Family::VoVNet,
            "darknet53" => Family::Darknet53,
            "elan" => Family::Elan,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CspFusion {
    Both,
    First,
    Last,
    None,
}

impl CspFusion {
    pub fn name(self) -> &'static str {
        match self {
            CspFusion::Both => "both",
            CspFusion::First => "first",
            CspFusion::Last => "last",
            CspFusion::None => "none",
        }
    }
}

/// Cross-stage partial options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CspOptions {
    /// Fraction of channels sent across the stage.
    pub split_ratio: f64,
    pub fusion: CspFusion,
    /// How the two paths are formed at the stage entry.
    pub entry: CspEntry,
}

/// Stacking counts for efficient-layer-aggregation blocks: `a` convolutions
/// per stacked group, `b` groups per block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ElanStack {
    pub a: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StopGradMode {
    #[default]
    Off,
    OnIdentity,
    OnBlock,
}

impl StopGradMode {
    pub fn name(self) -> &'static str {
        match self {
            StopGradMode::Off => "off",
            StopGradMode::OnIdentity => "on_identity",
            StopGradMode::OnBlock => "on_block",
        }
    }
}

/// Declarative architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub family: Family,
    /// Blocks (or layers, or modules, depending on family) per stage.
    pub depth: Vec<usize>,
    pub base_channels: usize,
    pub input_shape: (usize, usize, usize),
    /// Fraction of channels passed through residual identity in masked
    /// residual layers.
    pub prn_mask_ratio: f64,
    pub csp: Option<CspOptions>,
    pub elan_stack: Option<ElanStack>,
    /// Convolutions per one-shot-aggregation module.
    pub osa_convs: usize,
    /// Remove per-module transitions, keeping only each stage's last.
    pub elan_replan: bool,
    pub stop_grad: StopGradMode,
    /// Append a classifier head with this many classes.
    pub classes: Option<usize>,
}

impl ArchSpec {
    /// Minimal spec with defaults for the optional knobs.
    pub fn new(family: Family, depth: Vec<usize>, base_channels: usize) -> Self {
        ArchSpec {
            family,
            depth,
            base_channels,
            input_shape: (3, 32, 32),
            prn_mask_ratio: 0.5,
            csp: None,
            elan_stack: None,
            osa_convs: 5,
            elan_replan: false,
            stop_grad: StopGradMode::Off,
            classes: None,
        }
    }

    pub fn stages(&self) -> usize {
        self.depth.len()
    }

    pub fn with_input(mut self, shape: (usize, usize, usize)) -> Self {
        self.input_shape = shape;
        self
    }

    pub fn with_csp(mut self, csp: CspOptions) -> Self {
        self.csp = Some(csp);
        self
    }

    pub fn with_classes(mut self, k: usize) -> Self {
        self.classes = Some(k);
        self
    }

    pub fn with_stop_grad(mut self, mode: StopGradMode) -> Self {
        self.stop_grad = mode;
        self
    }

    /// Canonical text form; [`ArchSpec::parse`] of the result rebuilds the
    /// spec exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("family = {}\n", self.family.name()));
        out.push_str(&format!("stages = {}\n", self.stages()));
        let depth: Vec<String> = self.depth.iter().map(|d| d.to_string()).collect();
        out.push_str(&format!("depth = {}\n", depth.join(",")));
        out.push_str(&format!("base_channels = {}\n", self.base_channels));
        let (c, h, w) = self.input_shape;
        out.push_str(&format!("input_shape = {c}x{h}x{w}\n"));
        out.push_str(&format!("prn_mask_ratio = {}\n", self.prn_mask_ratio));
        if let Some(csp) = &self.csp {
            out.push_str(&format!("csp_split_ratio = {}\n", csp.split_ratio));
            out.push_str(&format!("csp_fusion = {}\n", csp.fusion.name()));
            let entry = match csp.entry {
                CspEntry::Split => "split",
                CspEntry::Projection => "projection",
            };
            out.push_str(&format!("csp_entry = {entry}\n"));
        }
        if let Some(stack) = &self.elan_stack {
            out.push_str(&format!("elan_stack = {},{}\n", stack.a, stack.b));
        }
        out.push_str(&format!("osa_convs = {}\n", self.osa_convs));
        if self.elan_replan {
            out.push_str("elan_replan = true\n");
        }
        out.push_str(&format!("stop_grad = {}\n", self.stop_grad.name()));
        if let Some(k) = self.classes {
            out.push_str(&format!("classes = {k}\n"));
        }
        out
    }

    /// Parse the text form. Errors carry the 1-based offending line.
    pub fn parse(text: &str) -> Result<ArchSpec, SpecParseError> {
        let mut family = None;
        let mut stages: Option<usize> = None;
        let mut depth: Option<Vec<usize>> = None;
        let mut base_channels = None;
        let mut input_shape = None;
        let mut prn_mask_ratio = 0.5f64;
        let mut csp_split_ratio: Option<f64> = None;
        let mut csp_fusion: Option<CspFusion> = None;
        let mut csp_entry = CspEntry::Split;
        let mut elan_stack = None;
        let mut osa_convs = 5usize;
        let mut elan_replan = false;
        let mut stop_grad = StopGradMode::Off;
        let mut classes = None;

        let err = |line: usize, msg: String| SpecParseError { line, msg };

        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(line_no, format!("expected 'key = value', got '{line}'")))?;
            let key = key.trim();
            let value = value.trim();
            let parse_usize = |v: &str| {
                v.parse::<usize>().map_err(|_| err(line_no, format!("invalid integer '{v}'")))
            };
            let parse_f64 = |v: &str| {
                v.parse::<f64>().map_err(|_| err(line_no, format!("invalid number '{v}'")))
            };
            match key {
                "family" => {
                    family = Some(Family::from_name(value).ok_or_else(|| {
                        err(line_no, format!("unknown family '{value}'"))
                    })?);
                }
                "stages" => stages = Some(parse_usize(value)?),
                "depth" => {
                    let parsed: Result<Vec<usize>, _> =
                        value.split(',').map(|v| parse_usize(v.trim())).collect();
                    depth = Some(parsed?);
                }
                "base_channels" => base_channels = Some(parse_usize(value)?),
                "input_shape" => {
                    let parts: Vec<&str> = value.split('x').collect();
                    if parts.len() != 3 {
                        return Err(err(line_no, format!("input_shape must be CxHxW, got '{value}'")));
                    }
                    input_shape = Some((
                        parse_usize(parts[0])?,
                        parse_usize(parts[1])?,
                        parse_usize(parts[2])?,
                    ));
                }
                "prn_mask_ratio" => prn_mask_ratio = parse_f64(value)?,
                "csp_split_ratio" => csp_split_ratio = Some(parse_f64(value)?),
                "csp_fusion" => {
                    csp_fusion = Some(match value {
                        "both" => CspFusion::Both,
                        "first" => CspFusion::First,
                        "last" => CspFusion::Last,
                        "none" => CspFusion::None,
                        _ => return Err(err(line_no, format!("unknown csp_fusion '{value}'"))),
                    });
                }
                "csp_entry" => {
                    csp_entry = match value {
                        "split" => CspEntry::Split,
                        "projection" => CspEntry::Projection,
                        _ => return Err(err(line_no, format!("unknown csp_entry '{value}'"))),
                    };
                }
                "elan_stack" => {
                    let parts: Vec<&str> = value.split(',').collect();
                    if parts.len() != 2 {
                        return Err(err(line_no, format!("elan_stack must be a,b, got '{value}'")));
                    }
                    elan_stack = Some(ElanStack {
                        a: parse_usize(parts[0].trim())?,
                        b: parse_usize(parts[1].trim())?,
                    });
                }
                "osa_convs" => osa_convs = parse_usize(value)?,
                "elan_replan" => {
                    elan_replan = match value {
                        "true" => true,
                        "false" => false,
                        _ => return Err(err(line_no, format!("elan_replan must be true/false, got '{value}'"))),
                    };
                }
                "stop_grad" => {
                    stop_grad = match value {
                        "off" => StopGradMode::Off,
                        "on_identity" => StopGradMode::OnIdentity,
                        "on_block" => StopGradMode::OnBlock,
                        _ => return Err(err(line_no, format!("unknown stop_grad '{value}'"))),
                    };
                }
                "classes" => classes = Some(parse_usize(value)?),
                _ => return Err(err(line_no, format!("unknown field '{key}'"))),
            }
        }

        let family = family.ok_or_else(|| err(0, "missing field 'family'".into()))?;
        let depth = depth.ok_or_else(|| err(0, "missing field 'depth'".into()))?;
        let base_channels =
            base_channels.ok_or_else(|| err(0, "missing field 'base_channels'".into()))?;
        let input_shape =
            input_shape.ok_or_else(|| err(0, "missing field 'input_shape'".into()))?;
        if let Some(s) = stages {
            if s != depth.len() {
                return Err(err(0, format!("stages = {s} but depth lists {} stages", depth.len())));
            }
        }
        let csp = match (csp_split_ratio, csp_fusion) {
            (None, None) => None,
            (Some(r), Some(f)) => Some(CspOptions { split_ratio: r, fusion: f, entry: csp_entry }),
            _ => return Err(err(0, "csp_split_ratio and csp_fusion must appear together".into())),
        };

        Ok(ArchSpec {
            family,
            depth,
            base_channels,
            input_shape,
            prn_mask_ratio,
            csp,
            elan_stack,
            osa_convs,
            elan_replan,
            stop_grad,
            classes,
        })
    }
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("spec parse error at line {line}: {msg}")]
pub struct SpecParseError {
    pub line: usize,
    pub msg: String,
}

#[derive(Debug, thiserror::Error)]
pub enum BuildSpecError {
    #[error("depth must be >= 1 for every stage")]
    EmptyStage,
    #[error("prn_mask_ratio {0} outside [0, 1]")]
    MaskRatio(f64),
    #[error("csp split_ratio {0} outside (0, 1)")]
    SplitRatio(f64),
    #[error("channel split of {channels} at ratio {ratio} produces a zero-channel partition")]
    ZeroPartition { channels: usize, ratio: f64 },
    #[error("{0}")]
    Graph(#[from] crate::graph::BuildError),
    #[error("{0}")]
    Transform(#[from] TransformError),
}

/// Build the architecture a spec describes. The result always passes
/// [`crate::graph::validate`].
pub fn build(spec: &ArchSpec) -> Result<CompGraph, BuildSpecError> {
    if spec.depth.is_empty() || spec.depth.iter().any(|&d| d == 0) {
        return Err(BuildSpecError::EmptyStage);
    }
    if !(0.0..=1.0).contains(&spec.prn_mask_ratio) {
        return Err(BuildSpecError::MaskRatio(spec.prn_mask_ratio));
    }
    if let Some(csp) = &spec.csp {
        if !(csp.split_ratio > 0.0 && csp.split_ratio < 1.0) {
            return Err(BuildSpecError::SplitRatio(csp.split_ratio));
        }
    }

    let mut g = families::build_family(spec)?;

    if let Some(csp) = &spec.csp {
        for stage in 1..=spec.stages() {
            g = apply_csp(&g, stage, csp.split_ratio, csp.fusion, csp.entry)?;
        }
    }
    if spec.elan_replan {
        g = replan_elan(&g)?;
    }
    match spec.stop_grad {
        StopGradMode::Off => {}
        mode => g = insert_stop_grad(&g, mode)?,
    }
    if let Some(k) = spec.classes {
        g = append_classifier(&g, k)?;
    }
    debug_assert!(
        crate::graph::validate(&g).is_ok(),
        "builder produced invalid graph: {:?}",
        crate::graph::validate(&g).violations
    );
    Ok(g)
}
